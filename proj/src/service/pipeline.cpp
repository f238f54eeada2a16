#include "cvloc/service/pipeline.hpp"

#include <fstream>
#include <sstream>

#include "cvloc/errors.hpp"
#include "json.hpp"

namespace cvloc::service {

using nlohmann::json;

std::string query_kind_name(QueryKind q) { return q == QueryKind::text ? "text" : "street"; }

QueryKind parse_query_kind(const std::string& s) {
  if (s == "text") return QueryKind::text;
  if (s == "street") return QueryKind::street;
  throw ParameterError("unknown query kind '" + s + "' (expected text or street)");
}

TrainSettings TrainSettings::toy() {
  TrainSettings s;
  s.encoder.d_model = 32;
  s.encoder.n_heads = 2;
  s.encoder.n_layers = 2;
  s.encoder.embed_dim = 32;
  s.encoder.patch_size = 8;
  s.encoder.image_size = 64;
  s.encoder.base_context = 77;
  s.encoder.expanded_context = 300;
  s.train.batch_size = 16;
  s.train.epochs = 30;
  s.train.base_lr = 5e-4;
  s.train.threads = 1;
  return s;
}

std::string TrainSettings::to_json() const {
  json j;
  j["v"] = 1;
  j["encoder"] = {{"vocab_size", encoder.vocab_size},
                  {"d_model", encoder.d_model},
                  {"n_heads", encoder.n_heads},
                  {"n_layers", encoder.n_layers},
                  {"base_context", encoder.base_context},
                  {"expanded_context", encoder.expanded_context},
                  {"image_size", encoder.image_size},
                  {"patch_size", encoder.patch_size},
                  {"embed_dim", encoder.embed_dim},
                  {"mlp_ratio", encoder.mlp_ratio}};
  j["train"] = {{"batch_size", train.batch_size},
                {"epochs", train.epochs},
                {"base_lr", train.base_lr},
                {"seed", train.seed},
                {"loss", training::loss_mode_name(train.loss_mode)},
                {"threads", train.threads}};
  j["modality"] = geoindex::modality_name(modality);
  j["query"] = query_kind_name(query);
  return j.dump(2);
}

TrainSettings TrainSettings::from_json(const std::string& text) {
  TrainSettings s = toy();
  try {
    const json j = json::parse(text);
    if (j.contains("encoder")) {
      const auto& e = j["encoder"];
      s.encoder.vocab_size = e.value("vocab_size", s.encoder.vocab_size);
      s.encoder.d_model = e.value("d_model", s.encoder.d_model);
      s.encoder.n_heads = e.value("n_heads", s.encoder.n_heads);
      s.encoder.n_layers = e.value("n_layers", s.encoder.n_layers);
      s.encoder.base_context = e.value("base_context", s.encoder.base_context);
      s.encoder.expanded_context = e.value("expanded_context", s.encoder.expanded_context);
      s.encoder.image_size = e.value("image_size", s.encoder.image_size);
      s.encoder.patch_size = e.value("patch_size", s.encoder.patch_size);
      s.encoder.embed_dim = e.value("embed_dim", s.encoder.embed_dim);
      s.encoder.mlp_ratio = e.value("mlp_ratio", s.encoder.mlp_ratio);
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      s.train.batch_size = t.value("batch_size", s.train.batch_size);
      s.train.epochs = t.value("epochs", s.train.epochs);
      s.train.base_lr = t.value("base_lr", s.train.base_lr);
      s.train.seed = t.value("seed", s.train.seed);
      s.train.threads = t.value("threads", s.train.threads);
      if (t.contains("loss")) s.train.loss_mode = training::parse_loss_mode(t["loss"].get<std::string>());
    }
    if (j.contains("modality")) s.modality = geoindex::parse_modality(j["modality"].get<std::string>());
    if (j.contains("query")) s.query = parse_query_kind(j["query"].get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad training settings: ") + e.what());
  }
  return s;
}

encoders::TokenSequence ModelBundle::tokenize(const std::string& text) const {
  return encoders::tokenize(text, vocab, context());
}

encoders::QueryInput ModelBundle::query_input(const corpus::SceneRecord& record) const {
  encoders::QueryInput in;
  if (settings.query == QueryKind::text) {
    in.text = tokenize(record.text);
  } else {
    in.image = record.street;
  }
  return in;
}

encoders::QueryInput ModelBundle::text_query(const std::string& text) const {
  if (settings.query != QueryKind::text) throw ContractError("this model takes street-level image queries, not text");
  encoders::QueryInput in;
  in.text = tokenize(text);
  return in;
}

namespace {

std::filesystem::path sidecar(const std::filesystem::path& p, const char* ext) { return p.string() + ext; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

}  // namespace

void save_bundle(const std::filesystem::path& path, const ModelBundle& bundle) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  encoders::save_checkpoint(path, bundle.model);
  bundle.vocab.save(sidecar(path, ".vocab"));
  std::ofstream out(sidecar(path, ".json"));
  out << bundle.settings.to_json() << '\n';
  if (!out) throw Error("cannot write " + sidecar(path, ".json").string());
}

ModelBundle load_bundle(const std::filesystem::path& path) {
  ModelBundle b;
  b.model = encoders::load_checkpoint(path);
  b.vocab = encoders::Vocabulary::load(sidecar(path, ".vocab"));
  b.settings = TrainSettings::from_json(slurp(sidecar(path, ".json")));
  if (b.vocab.size() != b.model.config.vocab_size) {
    throw FormatError("vocabulary has " + std::to_string(b.vocab.size()) + " entries, checkpoint expects " +
                      std::to_string(b.model.config.vocab_size));
  }
  return b;
}

corpus::Split corpus_split(std::span<const corpus::SceneRecord> records, std::uint64_t seed) {
  return corpus::split(records, 5, 1, seed);
}

ModelBundle init_bundle(std::span<const corpus::SceneRecord> train_records, TrainSettings settings) {
  std::vector<std::string> texts;
  for (const auto& r : train_records) texts.push_back(r.text);
  ModelBundle b;
  b.vocab = encoders::Vocabulary::build(texts);
  settings.encoder.vocab_size = b.vocab.size();
  b.settings = settings;
  const auto tower = settings.query == QueryKind::text ? encoders::Tower::text : encoders::Tower::image;
  b.model = encoders::DualEncoder::create(settings.encoder, settings.train.seed, tower);
  return b;
}

std::vector<training::TrainingPair> make_pairs(const ModelBundle& bundle,
                                               std::span<const corpus::SceneRecord> records) {
  std::vector<training::TrainingPair> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    training::TrainingPair p;
    p.query = bundle.query_input(r);
    p.image = bundle.settings.modality == geoindex::Modality::osm ? r.osm_tile.pixels : r.sat_tile.pixels;
    p.location = r.id;
    out.push_back(std::move(p));
  }
  return out;
}

ModelBundle train_bundle(std::span<const corpus::SceneRecord> train_records, const TrainSettings& settings,
                         std::ostream* log) {
  ModelBundle b = init_bundle(train_records, settings);
  if (settings.train.epochs == 0) return b;
  const auto pairs = make_pairs(b, train_records);
  training::Trainer trainer(b.model, settings.train, pairs.size());
  trainer.train(pairs, [&](const training::EpochMetrics& m) {
    if (log) {
      training::write_log_line(*log, m);
      log->flush();
    }
  });
  return b;
}

geoindex::ReferenceIndex build_index(const ModelBundle& bundle, std::span<const corpus::SceneRecord> records,
                                     geoindex::Modality modality) {
  geoindex::ReferenceIndex index;
  index.modality = modality;
  index.embed_dim = bundle.model.config.embed_dim;
  for (const auto& r : records) {
    const auto& tile = modality == geoindex::Modality::osm ? r.osm_tile : r.sat_tile;
    geoindex::ReferenceEntry e;
    e.id = r.id;
    e.modality = modality;
    e.location = tile.center;
    e.zoom = tile.zoom;
    e.embedding = encoders::encode_image(tile.pixels, bundle.model.reference);
    e.tags = tile.poi_tags;
    e.tile_path = "tiles/" + geoindex::modality_name(modality) + "/" + r.id + ".ppm";
    index.entries.push_back(std::move(e));
  }
  return index;
}

std::vector<geoindex::EvalQuery> encode_queries(const ModelBundle& bundle,
                                                std::span<const corpus::SceneRecord> records) {
  std::vector<geoindex::EvalQuery> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    out.push_back({encoders::encode_query(bundle.query_input(r), bundle.model.query), r.id, r.osm_tile.center});
  }
  return out;
}

std::vector<corpus::SceneRecord> select_split(std::span<const corpus::SceneRecord> records, std::uint64_t seed,
                                              const std::string& split) {
  if (split == "all") return {records.begin(), records.end()};
  auto s = corpus_split(records, seed);
  if (split == "train") return std::move(s.train);
  if (split == "test") return std::move(s.test);
  throw ParameterError("unknown split '" + split + "' (expected train, test or all)");
}

}  // namespace cvloc::service
