#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cvloc/geoindex/geo.hpp"
#include "cvloc/util/raster.hpp"

namespace cvloc::corpus {

struct GridConfig {
  double origin_lat = 40.7128;
  double origin_lon = -74.0060;
  std::size_t cols = 40;
  std::size_t rows = 40;
  double spacing_m = 100.0;

  geoindex::LatLon cell_center(std::size_t col, std::size_t row) const;
};

enum class Direction { front, back, left, right };
enum class ViewKind { pano, single };

std::string direction_name(Direction d);
std::string view_name(ViewKind v);
ViewKind parse_view(std::string_view name);

// Word banks and attribute lists used by the generator.
const std::vector<std::string>& name_first_words();
const std::vector<std::string>& name_second_words();
const std::vector<std::string>& categories();
const std::vector<std::string>& colors();
const std::vector<std::string>& materials();

struct Poi {
  std::size_t first_word = 0;   // index into name_first_words()
  std::size_t second_word = 0;  // index into name_second_words()
  std::size_t category = 0;
  Direction direction = Direction::front;
  std::size_t color = 0;
  std::size_t material = 0;

  std::string name() const;  // e.g. "Burger Mania"
};

struct RoadLayout {
  bool north_south = true;
  int lanes = 2;
  bool crossing = false;
};

struct Environment {
  int trees = 0;  // 0 none, 1 few, 2 many
  std::size_t building_material = 0;
  bool dense = false;
  int sky = 0;
  int vehicles = 0;
  // Tree slot positions, shared by every rendering of the scene.
  std::vector<std::size_t> tree_slots;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t col = 0;
  std::size_t row = 0;
  geoindex::LatLon location;
  RoadLayout road;
  std::vector<Poi> pois;
  ViewKind view = ViewKind::pano;
  Environment env;

  // Lowercased name words plus category words.
  std::vector<std::string> poi_tags() const;
};

SceneSpec generate_scene(std::uint64_t seed, const GridConfig& grid = {});

enum class TileKind { osm, satellite, street };

// Full-resolution rendering (default 512 x 512). `street` is a north-centred
// ground-level proxy used as an image query.
Raster render_raster(const SceneSpec& spec, TileKind kind, std::size_t size = 512);

// Renders at 512 and box-downsamples to `output_size`.
geoindex::GeoTile render_tile(const SceneSpec& spec, geoindex::Modality modality, std::size_t output_size = 64,
                              std::string id = {});

// Three stages: roads, signage, environment. `distractor_clauses` unrelated
// sentences are prepended (used to push the informative part past a short
// context window).
std::string describe_scene(const SceneSpec& spec, std::size_t distractor_clauses = 0);

struct CorpusConfig {
  GridConfig grid;
  std::size_t size = 600;
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  std::size_t distractor_clauses = 0;
};

struct SceneRecord {
  std::string id;
  SceneSpec spec;
  std::string text;
  geoindex::GeoTile osm_tile;
  geoindex::GeoTile sat_tile;
  Raster street;  // ground-level proxy at image_size
};

// Scenes occupy distinct grid cells; a pure function of the config.
std::vector<SceneRecord> generate_corpus(const CorpusConfig& config);

struct TextStatsReport {
  double mean_length = 0.0;
  double type_token_ratio = 0.0;
  double mean_pairwise_similarity = 0.0;
  // histogram[i] counts texts with token length in [10 i, 10 i + 10).
  std::vector<std::size_t> histogram;
  std::size_t texts = 0;
};

double jaccard(std::span<const std::string> a, std::span<const std::string> b);
TextStatsReport text_stats(std::span<const std::string> texts);
std::string stats_json(const TextStatsReport& report);

struct Split {
  std::vector<SceneRecord> train;
  std::vector<SceneRecord> test;
};

// Seeded shuffle, then the first train/(train+test) share goes to train.
Split split(std::span<const SceneRecord> records, std::size_t train_parts = 5, std::size_t test_parts = 1,
            std::uint64_t seed = 0);

// meta.json records the generating config (grid, size, seed, tile size).
void write_corpus_meta(const std::filesystem::path& dir, const CorpusConfig& config);
CorpusConfig read_corpus_meta(const std::filesystem::path& dir);

// corpus.jsonl plus tiles/{osm,satellite,street}/<id>.ppm under `dir`.
void write_corpus(const std::filesystem::path& dir, std::span<const SceneRecord> records);
// Tiles and text are restored; the scene spec is rebuilt from its stored seed.
std::vector<SceneRecord> read_corpus(const std::filesystem::path& dir);

}  // namespace cvloc::corpus
