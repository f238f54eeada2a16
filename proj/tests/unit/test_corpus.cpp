#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <array>
#include <filesystem>
#include <set>

#include "cvloc/corpus/scene.hpp"
#include "cvloc/encoders/tokenizer.hpp"
#include "cvloc/errors.hpp"

using namespace cvloc;
using namespace cvloc::corpus;

namespace {

// Counts direction slots that hold a rendered POI marker: the category cell
// has one of the category colours with a white centre mark.
std::size_t glyph_count(const Raster& r) {
  const double unit = static_cast<double>(r.width) / 64.0;
  const std::array<std::array<double, 2>, 4> slots = {{{8, 0}, {48, 8}, {40, 48}, {0, 40}}};
  std::size_t n = 0;
  for (const auto& s : slots) {
    const auto* mark = r.pixel(static_cast<std::size_t>((s[0] + 8) * unit), static_cast<std::size_t>((s[1] + 12) * unit));
    const auto* cell = r.pixel(static_cast<std::size_t>((s[0] + 2) * unit), static_cast<std::size_t>((s[1] + 12) * unit));
    const bool white = mark[0] == 255 && mark[1] == 255 && mark[2] == 255;
    const bool background = cell[0] == 242 && cell[1] == 239 && cell[2] == 233;
    if (white && !background) ++n;
  }
  return n;
}

std::size_t token_count(const std::string& text) {
  return encoders::split_words(text).size();
}

}  // namespace

TEST_CASE("scenes are a pure function of the seed and stay on the grid") {
  GridConfig grid;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto a = generate_scene(seed, grid), b = generate_scene(seed, grid);
    CHECK(a.location.lat == b.location.lat);
    CHECK(a.poi_tags() == b.poi_tags());
    CHECK(describe_scene(a) == describe_scene(b));
    CHECK(a.col < grid.cols);
    CHECK(a.row < grid.rows);
    const auto lo = grid.cell_center(0, 0), hi = grid.cell_center(grid.cols - 1, grid.rows - 1);
    CHECK(a.location.lat >= lo.lat);
    CHECK(a.location.lat <= hi.lat);
    CHECK(a.location.lon >= lo.lon);
    CHECK(a.location.lon <= hi.lon);
    REQUIRE(!a.pois.empty());
    CHECK(a.pois.size() <= 4);
    std::set<std::string> names;
    for (const auto& p : a.pois) names.insert(p.name());
    CHECK(names.size() == a.pois.size());
  }
}

TEST_CASE("1000 seeds give at least 95% distinct POI name sets") {
  std::set<std::set<std::string>> sets;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    std::set<std::string> names;
    for (const auto& p : generate_scene(seed).pois) names.insert(p.name());
    sets.insert(names);
  }
  CHECK(sets.size() >= 950);
}

TEST_CASE("tiles: deterministic bytes, OSM differs from satellite, glyph count follows POI count") {
  const auto spec = generate_scene(7);
  CHECK(render_raster(spec, TileKind::osm) == render_raster(spec, TileKind::osm));
  CHECK(render_raster(spec, TileKind::satellite) == render_raster(spec, TileKind::satellite));
  CHECK(!(render_raster(spec, TileKind::osm) == render_raster(spec, TileKind::satellite)));
  const auto tile = render_tile(spec, geoindex::Modality::osm, 64, "x");
  CHECK(tile.pixels.width == 64);
  CHECK(tile.id == "x");
  CHECK(tile.center.lat == spec.location.lat);

  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto s = generate_scene(seed);
    // Rebuild with four POIs at distinct directions, then peel them off.
    const std::array<Direction, 4> dirs = {Direction::front, Direction::right, Direction::back, Direction::left};
    s.pois.resize(1);
    while (s.pois.size() < 4) {
      Poi p = s.pois.front();
      p.first_word = (p.first_word + s.pois.size()) % name_first_words().size();
      s.pois.push_back(p);
    }
    for (std::size_t i = 0; i < 4; ++i) s.pois[i].direction = dirs[i];
    std::size_t prev = 0;
    for (std::size_t k = 1; k <= 4; ++k) {
      auto sub = s;
      sub.pois.resize(k);
      const auto n = glyph_count(render_raster(sub, TileKind::osm));
      CHECK(n == k);
      CHECK(n > prev);
      prev = n;
      CHECK(glyph_count(render_raster(sub, TileKind::satellite)) == 0);
    }
  }
}

TEST_CASE("descriptions: names verbatim, stage order, pano longer than single") {
  for (std::uint64_t seed = 0; seed < 150; ++seed) {
    auto s = generate_scene(seed);
    const auto text = describe_scene(s);
    for (const auto& p : s.pois) CHECK(text.find(p.name()) != std::string::npos);
    const auto road = std::min(text.find("road"), text.find("street")), sign = text.find(s.pois.front().name());
    CHECK(road != std::string::npos);
    CHECK(road < sign);

    auto pano = s, single = s;
    pano.view = ViewKind::pano;
    single.view = ViewKind::single;
    CHECK(token_count(describe_scene(pano)) > token_count(describe_scene(single)));

    const auto padded = describe_scene(s, 5);
    CHECK(token_count(padded) > token_count(text));
    CHECK(padded.find(text.substr(0, 20)) != 0);
  }
}

TEST_CASE("text statistics") {
  const std::vector<std::string> one = {"a a b"};
  const auto r = text_stats(one);
  CHECK(r.mean_length == 3.0);
  CHECK(r.type_token_ratio == doctest::Approx(2.0 / 3.0));
  CHECK(r.histogram.at(0) == 1);
  CHECK(text_stats(std::vector<std::string>{"x y", "x y"}).mean_pairwise_similarity == 1.0);
  CHECK(text_stats(std::vector<std::string>{"x y", "p q"}).mean_pairwise_similarity == 0.0);
  CHECK_THROWS_AS(text_stats(std::vector<std::string>{}), ContractError);

  std::vector<std::string> texts;
  for (std::uint64_t seed = 0; seed < 100; ++seed) texts.push_back(describe_scene(generate_scene(seed)));
  const auto s = text_stats(texts);
  CHECK(s.type_token_ratio > 0.0);
  CHECK(s.type_token_ratio <= 1.0);
  CHECK(s.mean_pairwise_similarity >= 0.0);
  CHECK(s.mean_pairwise_similarity <= 1.0);
  std::size_t total = 0;
  for (auto h : s.histogram) total += h;
  CHECK(total == 100);
}

TEST_CASE("corpus generation, split and round trip") {
  CorpusConfig cfg;
  cfg.size = 60;
  const auto a = generate_corpus(cfg), b = generate_corpus(cfg);
  REQUIRE(a.size() == 60);
  std::set<std::pair<std::size_t, std::size_t>> cells;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].text == b[i].text);
    CHECK(a[i].osm_tile.pixels == b[i].osm_tile.pixels);
    CHECK(a[i].osm_tile.center.lat == a[i].sat_tile.center.lat);
    CHECK(!a[i].text.empty());
    cells.insert({a[i].spec.col, a[i].spec.row});
  }
  CHECK(cells.size() == 60);

  CorpusConfig big;
  const auto full = generate_corpus(big);
  const auto sp = split(full, 5, 1, 3);
  CHECK(sp.train.size() == 500);
  CHECK(sp.test.size() == 100);
  std::set<std::string> tr, te;
  for (const auto& r : sp.train) tr.insert(r.id);
  for (const auto& r : sp.test) te.insert(r.id);
  for (const auto& id : te) CHECK(tr.count(id) == 0);
  CHECK(tr.size() + te.size() == 600);
  const auto again = split(full, 5, 1, 3);
  for (std::size_t i = 0; i < 100; ++i) CHECK(again.test[i].id == sp.test[i].id);
  CHECK_THROWS_AS(split(std::span(full).first(5), 5, 1, 0), ContractError);

  const auto dir = std::filesystem::temp_directory_path() / "cvloc_corpus_test";
  std::filesystem::remove_all(dir);
  write_corpus(dir, a);
  write_corpus_meta(dir, cfg);
  const auto back = read_corpus(dir);
  REQUIRE(back.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(back[i].id == a[i].id);
    CHECK(back[i].text == a[i].text);
    CHECK(back[i].osm_tile.pixels == a[i].osm_tile.pixels);
    CHECK(back[i].sat_tile.pixels == a[i].sat_tile.pixels);
    CHECK(back[i].street == a[i].street);
  }
  CHECK(read_corpus_meta(dir).size == 60);
  std::filesystem::remove_all(dir);
}
