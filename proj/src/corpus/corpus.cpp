#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

#include "cvloc/corpus/scene.hpp"
#include "cvloc/encoders/tokenizer.hpp"
#include "cvloc/errors.hpp"
#include "rng.hpp"

namespace cvloc::corpus {

using nlohmann::json;

namespace {

std::string record_id(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "s%05zu", i);
  return buf;
}

json grid_json(const CorpusConfig& c) {
  return json{{"origin_lat", c.grid.origin_lat}, {"origin_lon", c.grid.origin_lon}, {"cols", c.grid.cols},
              {"rows", c.grid.rows},             {"spacing_m", c.grid.spacing_m},   {"size", c.size},
              {"seed", c.seed},                  {"image_size", c.image_size},      {"distractor_clauses", c.distractor_clauses}};
}

CorpusConfig grid_from_json(const json& j) {
  CorpusConfig c;
  c.grid.origin_lat = j.at("origin_lat").get<double>();
  c.grid.origin_lon = j.at("origin_lon").get<double>();
  c.grid.cols = j.at("cols").get<std::size_t>();
  c.grid.rows = j.at("rows").get<std::size_t>();
  c.grid.spacing_m = j.at("spacing_m").get<double>();
  c.size = j.at("size").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.distractor_clauses = j.at("distractor_clauses").get<std::size_t>();
  return c;
}

}  // namespace

std::vector<SceneRecord> generate_corpus(const CorpusConfig& config) {
  if (config.size > config.grid.cols * config.grid.rows) {
    throw ParameterError("corpus of " + std::to_string(config.size) + " scenes does not fit a " +
                         std::to_string(config.grid.cols) + "x" + std::to_string(config.grid.rows) + " grid");
  }
  std::vector<SceneRecord> out;
  out.reserve(config.size);
  std::set<std::pair<std::size_t, std::size_t>> used;
  std::uint64_t attempt = 0;
  for (std::size_t i = 0; i < config.size; ++i) {
    SceneSpec spec;
    do {
      spec = generate_scene(mix_seed(config.seed, attempt++), config.grid);
    } while (!used.emplace(spec.col, spec.row).second);
    SceneRecord r;
    r.id = record_id(i);
    r.text = describe_scene(spec, config.distractor_clauses);
    r.osm_tile = render_tile(spec, geoindex::Modality::osm, config.image_size, r.id);
    r.sat_tile = render_tile(spec, geoindex::Modality::satellite, config.image_size, r.id);
    r.street = downsample(render_raster(spec, TileKind::street, 512), config.image_size);
    r.spec = std::move(spec);
    out.push_back(std::move(r));
  }
  return out;
}

double jaccard(std::span<const std::string> a, std::span<const std::string> b) {
  const std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (const auto& w : sa) inter += sb.count(w);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

TextStatsReport text_stats(std::span<const std::string> texts) {
  if (texts.empty()) throw ContractError("text_stats: empty corpus");
  TextStatsReport r;
  r.texts = texts.size();
  std::vector<std::vector<std::string>> tokens;
  double len = 0.0, ttr = 0.0;
  for (const auto& t : texts) {
    auto words = encoders::split_words(t);
    len += static_cast<double>(words.size());
    if (!words.empty()) {
      const std::unordered_set<std::string> distinct(words.begin(), words.end());
      ttr += static_cast<double>(distinct.size()) / static_cast<double>(words.size());
    }
    const std::size_t bin = words.size() / 10;
    if (r.histogram.size() <= bin) r.histogram.resize(bin + 1, 0);
    ++r.histogram[bin];
    tokens.push_back(std::move(words));
  }
  r.mean_length = len / static_cast<double>(texts.size());
  r.type_token_ratio = ttr / static_cast<double>(texts.size());
  if (texts.size() >= 2) {
    double sum = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      for (std::size_t j = i + 1; j < tokens.size(); ++j) {
        sum += jaccard(tokens[i], tokens[j]);
        ++pairs;
      }
    }
    r.mean_pairwise_similarity = sum / static_cast<double>(pairs);
  }
  return r;
}

std::string stats_json(const TextStatsReport& r) {
  json j{{"v", 1},
         {"texts", r.texts},
         {"len", r.mean_length},
         {"ttr", r.type_token_ratio},
         {"simi", r.mean_pairwise_similarity},
         {"histogram_bin_width", 10},
         {"histogram", r.histogram}};
  return j.dump(2);
}

Split split(std::span<const SceneRecord> records, std::size_t train_parts, std::size_t test_parts,
            std::uint64_t seed) {
  const std::size_t total = train_parts + test_parts;
  if (train_parts == 0 || test_parts == 0) throw ParameterError("split ratio parts must be positive");
  if (records.size() < total) {
    throw ContractError("split: " + std::to_string(records.size()) + " records cannot be split " +
                        std::to_string(train_parts) + ":" + std::to_string(test_parts));
  }
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed ^ 0x5b117ULL);
  rng.shuffle(order);
  const std::size_t n_train = records.size() * train_parts / total;
  Split s;
  for (std::size_t k = 0; k < order.size(); ++k) {
    (k < n_train ? s.train : s.test).push_back(records[order[k]]);
  }
  return s;
}

void write_corpus(const std::filesystem::path& dir, std::span<const SceneRecord> records) {
  namespace fs = std::filesystem;
  for (const char* sub : {"osm", "satellite", "street"}) fs::create_directories(dir / "tiles" / sub);
  std::ofstream out(dir / "corpus.jsonl", std::ios::binary);
  if (!out) throw Error("cannot write " + (dir / "corpus.jsonl").string());
  for (const auto& r : records) {
    const std::string osm = "tiles/osm/" + r.id + ".ppm";
    const std::string sat = "tiles/satellite/" + r.id + ".ppm";
    const std::string street = "tiles/street/" + r.id + ".ppm";
    write_ppm(dir / osm, r.osm_tile.pixels);
    write_ppm(dir / sat, r.sat_tile.pixels);
    write_ppm(dir / street, r.street);
    json j{{"id", r.id},           {"lat", r.spec.location.lat}, {"lon", r.spec.location.lon},
           {"view", view_name(r.spec.view)}, {"text", r.text},   {"osm_tile", osm},
           {"sat_tile", sat},      {"street_tile", street},      {"poi_tags", r.spec.poi_tags()},
           {"scene_seed", r.spec.seed}};
    out << j.dump() << '\n';
  }
}

void write_corpus_meta(const std::filesystem::path& dir, const CorpusConfig& config) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "meta.json", std::ios::binary);
  out << grid_json(config).dump(2) << '\n';
}

CorpusConfig read_corpus_meta(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.json");
  if (!in) throw Error("cannot read " + (dir / "meta.json").string());
  try {
    return grid_from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw FormatError("meta.json: " + std::string(e.what()));
  }
}

std::vector<SceneRecord> read_corpus(const std::filesystem::path& dir) {
  const CorpusConfig meta = read_corpus_meta(dir);
  std::ifstream in(dir / "corpus.jsonl");
  if (!in) throw Error("cannot read " + (dir / "corpus.jsonl").string());
  std::vector<SceneRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      SceneRecord r;
      r.id = j.at("id").get<std::string>();
      r.text = j.at("text").get<std::string>();
      r.spec = generate_scene(j.at("scene_seed").get<std::uint64_t>(), meta.grid);
      r.spec.location = {j.at("lat").get<double>(), j.at("lon").get<double>()};
      r.osm_tile.id = r.sat_tile.id = r.id;
      r.osm_tile.modality = geoindex::Modality::osm;
      r.sat_tile.modality = geoindex::Modality::satellite;
      r.osm_tile.center = r.sat_tile.center = r.spec.location;
      r.osm_tile.poi_tags = r.sat_tile.poi_tags = j.at("poi_tags").get<std::vector<std::string>>();
      r.osm_tile.pixels = read_ppm(dir / j.at("osm_tile").get<std::string>());
      r.sat_tile.pixels = read_ppm(dir / j.at("sat_tile").get<std::string>());
      if (j.contains("street_tile")) r.street = read_ppm(dir / j.at("street_tile").get<std::string>());
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw FormatError("corpus.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cvloc::corpus
