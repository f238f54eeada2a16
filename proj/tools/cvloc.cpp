// Command-line front end: corpus generation, training, indexing, evaluation,
// one-shot queries and the HTTP service.
#include <csignal>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cvloc/corpus/scene.hpp"
#include "cvloc/relevance/rollout.hpp"
#include "cvloc/service/engine.hpp"
#include "cvloc/service/pipeline.hpp"
#include "json.hpp"

using namespace cvloc;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw Error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  out << text;
  if (!out) throw Error("cannot write " + p.string());
}

struct CorpusData {
  corpus::CorpusConfig config;
  std::vector<corpus::SceneRecord> records;
};

CorpusData load_corpus(const fs::path& dir) { return {corpus::read_corpus_meta(dir), corpus::read_corpus(dir)}; }

std::unique_ptr<service::Engine> open_engine(const fs::path& checkpoint, const fs::path& index, const fs::path& corpus,
                                             const std::string& explainer) {
  return std::make_unique<service::Engine>(service::load_bundle(checkpoint), geoindex::load_index(index), corpus,
                                           explain::make_explainer(explainer));
}

service::HttpServer* g_server = nullptr;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-query cross-view geo-localization toolkit"};
  app.require_subcommand(1);

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic scene corpus");
  corpus::CorpusConfig gen_cfg;
  fs::path gen_out;
  gen->add_option("--seed", gen_cfg.seed, "Corpus seed")->capture_default_str();
  gen->add_option("--size", gen_cfg.size, "Number of scenes")->capture_default_str();
  gen->add_option("--distractors", gen_cfg.distractor_clauses, "Filler sentences prepended to each text")
      ->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a dual encoder on a corpus's training split");
  fs::path train_corpus, train_config, train_out, train_log;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::size_t> train_epochs;
  std::optional<std::string> train_modality, train_query;
  train->add_option("--corpus", train_corpus, "Corpus directory")->required();
  train->add_option("--config", train_config, "Training settings JSON (defaults to the toy configuration)");
  train->add_option("--out", train_out, "Output checkpoint path")->required();
  train->add_option("--seed", train_seed, "Override the model seed");
  train->add_option("--epochs", train_epochs, "Override the epoch count");
  train->add_option("--modality", train_modality, "Reference modality: osm or satellite");
  train->add_option("--query", train_query, "Query input: text or street");
  train->add_option("--log", train_log, "Per-epoch TSV log (default <out>.log)");

  // build-index
  auto* build = app.add_subcommand("build-index", "Embed every tile of a corpus into a reference index");
  fs::path build_ckpt, build_corpus, build_out;
  std::string build_modality = "osm";
  build->add_option("--checkpoint", build_ckpt)->required();
  build->add_option("--corpus", build_corpus)->required();
  build->add_option("--modality", build_modality)->capture_default_str();
  build->add_option("--out", build_out)->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Recall and localization metrics over a corpus split");
  fs::path eval_index, eval_ckpt, eval_corpus, eval_json, eval_text_ckpt, eval_text_index;
  std::string eval_split = "test";
  geoindex::EvalOptions eval_opts;
  std::string eval_w = "auto";
  eval->add_option("--index", eval_index)->required();
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--corpus", eval_corpus)->required();
  eval->add_option("--split", eval_split, "train, test or all")->capture_default_str();
  eval->add_option("--M", eval_opts.M, "Retrieval range")->capture_default_str();
  eval->add_option("--ks", eval_opts.ks, "Recall cut-offs")->delimiter(',')->capture_default_str();
  eval->add_option("--thresholds", eval_opts.thresholds, "Localization thresholds in meters")
      ->delimiter(',')
      ->capture_default_str();
  eval->add_option("--window-noise", eval_opts.window_noise_m, "Std-dev in meters of the window centre shift");
  eval->add_option("--json", eval_json, "Write the metrics JSON here");
  eval->add_option("--text-checkpoint", eval_text_ckpt, "Text branch checkpoint for score fusion");
  eval->add_option("--text-index", eval_text_index, "Text branch index for score fusion");
  eval->add_option("--w", eval_w, "Fusion weight on the text branch, or auto to pick it on the train split")
      ->capture_default_str();

  // localize
  auto* loc = app.add_subcommand("localize", "One-shot text query");
  fs::path loc_ckpt, loc_index, loc_corpus;
  service::LocalizeRequest loc_req;
  std::string loc_explainer = "mock";
  loc->add_option("--checkpoint", loc_ckpt)->required();
  loc->add_option("--index", loc_index)->required();
  loc->add_option("--corpus", loc_corpus)->required();
  loc->add_option("--text", loc_req.text)->required();
  loc->add_option("--lat", loc_req.prior.lat)->required();
  loc->add_option("--lon", loc_req.prior.lon)->required();
  loc->add_option("--M", loc_req.M)->capture_default_str();
  loc->add_option("--K", loc_req.K)->capture_default_str();
  loc->add_flag("--explain", loc_req.explain);
  loc->add_option("--explainer", loc_explainer, "mock or http")->capture_default_str();

  // explain
  auto* expl = app.add_subcommand("explain", "Relevance heatmaps and rationale for one query and candidate");
  fs::path expl_ckpt, expl_index, expl_corpus, expl_out, expl_lexicon;
  std::string expl_text, expl_candidate, expl_explainer = "mock";
  std::size_t expl_start_layer = 1;
  expl->add_option("--checkpoint", expl_ckpt)->required();
  expl->add_option("--index", expl_index)->required();
  expl->add_option("--corpus", expl_corpus)->required();
  expl->add_option("--text", expl_text)->required();
  expl->add_option("--candidate", expl_candidate, "Tile id")->required();
  expl->add_option("--out", expl_out, "Output directory")->required();
  expl->add_option("--start-layer", expl_start_layer)->capture_default_str();
  expl->add_option("--lexicon", expl_lexicon, "Category lexicon JSON");
  expl->add_option("--explainer", expl_explainer, "mock or http")->capture_default_str();

  // stats
  auto* stats = app.add_subcommand("stats", "Text statistics of a corpus");
  fs::path stats_corpus;
  stats->add_option("--corpus", stats_corpus)->required();

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP JSON service");
  fs::path serve_ckpt, serve_index, serve_corpus;
  std::string serve_host = "127.0.0.1", serve_explainer = "mock";
  int serve_port = 8080;
  serve->add_option("--host", serve_host)->capture_default_str();
  serve->add_option("--port", serve_port)->capture_default_str();
  serve->add_option("--checkpoint", serve_ckpt)->required();
  serve->add_option("--index", serve_index)->required();
  serve->add_option("--corpus", serve_corpus)->required();
  serve->add_option("--explainer", serve_explainer, "mock or http")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto records = corpus::generate_corpus(gen_cfg);
      corpus::write_corpus(gen_out, records);
      corpus::write_corpus_meta(gen_out, gen_cfg);
      std::cout << "wrote " << records.size() << " scenes to " << gen_out.string() << '\n';
    } else if (*train) {
      auto settings = train_config.empty() ? service::TrainSettings::toy()
                                           : service::TrainSettings::from_json(slurp(train_config));
      if (train_seed) settings.train.seed = *train_seed;
      if (train_epochs) settings.train.epochs = *train_epochs;
      if (train_modality) settings.modality = geoindex::parse_modality(*train_modality);
      if (train_query) settings.query = service::parse_query_kind(*train_query);
      const auto data = load_corpus(train_corpus);
      const auto split = service::corpus_split(data.records, data.config.seed);
      if (train_log.empty()) train_log = train_out.string() + ".log";
      if (train_log.has_parent_path()) fs::create_directories(train_log.parent_path());
      std::ofstream log(train_log);
      log << "epoch\tmean_loss\tlr\twallclock_s\n";
      const auto bundle = service::train_bundle(split.train, settings, &log);
      service::save_bundle(train_out, bundle);
      std::cout << "trained on " << split.train.size() << " pairs, checkpoint " << train_out.string() << '\n';
    } else if (*build) {
      const auto bundle = service::load_bundle(build_ckpt);
      const auto modality = geoindex::parse_modality(build_modality);
      if (modality != bundle.settings.modality) {
        std::cerr << "warning: checkpoint was trained against " << geoindex::modality_name(bundle.settings.modality)
                  << " tiles\n";
      }
      const auto data = load_corpus(build_corpus);
      geoindex::save_index(build_out, service::build_index(bundle, data.records, modality));
      std::cout << "indexed " << data.records.size() << " tiles into " << build_out.string() << '\n';
    } else if (*eval) {
      const auto data = load_corpus(eval_corpus);
      const auto queries = service::select_split(data.records, data.config.seed, eval_split);
      const auto index = geoindex::load_index(eval_index);
      const auto bundle = service::load_bundle(eval_ckpt);
      geoindex::MetricsReport report;
      if (eval_text_ckpt.empty() != eval_text_index.empty()) {
        throw ParameterError("--text-checkpoint and --text-index go together");
      }
      if (eval_text_ckpt.empty()) {
        report = geoindex::evaluate(service::encode_queries(bundle, queries), index, eval_opts);
      } else {
        const auto text_bundle = service::load_bundle(eval_text_ckpt);
        const auto text_index = geoindex::load_index(eval_text_index);
        double w = 0.0;
        if (eval_w == "auto") {
          const auto train = service::select_split(data.records, data.config.seed, "train");
          w = geoindex::select_fusion_weight(service::encode_queries(bundle, train), index,
                                             service::encode_queries(text_bundle, train), text_index, eval_opts);
          std::cerr << "fusion weight " << w << " (selected on the train split)\n";
        } else {
          w = std::stod(eval_w);
        }
        report = geoindex::evaluate_fused(service::encode_queries(bundle, queries), index,
                                          service::encode_queries(text_bundle, queries), text_index, w, eval_opts);
      }
      if (!eval_json.empty()) write_text(eval_json, report.to_json() + "\n");
      std::cout << geoindex::MetricsReport::to_table(std::span(&report, 1));
    } else if (*loc) {
      auto engine = open_engine(loc_ckpt, loc_index, loc_corpus, loc_explainer);
      loc_req.modality = engine->index().snapshot()->modality;
      std::cout << nlohmann::json::parse(engine->localize(loc_req).to_json()).dump(2) << '\n';
    } else if (*expl) {
      const auto bundle = service::load_bundle(expl_ckpt);
      const auto index = geoindex::load_index(expl_index);
      const auto* entry = index.find(expl_candidate);
      if (!entry) throw ParameterError("no tile '" + expl_candidate + "' in the index");
      const Raster tile = read_ppm(expl_corpus / entry->tile_path);
      const auto input = bundle.text_query(expl_text);
      const auto rel = relevance::explain_pair(bundle.model, input, tile, expl_start_layer);
      auto words = encoders::split_words(expl_text);
      if (words.size() > bundle.context() - 2) words.resize(bundle.context() - 2);
      const auto lexicon =
          expl_lexicon.empty() ? relevance::CategoryLexicon::defaults() : relevance::CategoryLexicon::load(expl_lexicon);

      fs::create_directories(expl_out);
      const Raster overlay = overlay_heatmap(tile, rel.image.heatmap);
      write_text(expl_out / "tile.png", encode_png(tile));
      write_text(expl_out / "overlay.png", encode_png(overlay));
      write_pgm(expl_out / "heatmap.pgm", rel.image.heatmap);

      explain::ExplainRequest req;
      req.query = expl_text;
      req.top_tokens = explain::top_tokens(words, rel.query.token_scores, 5);
      req.tile = tile;
      req.overlay = overlay;
      req.tile_id = entry->id;
      req.location = entry->location;
      req.poi_tags = entry->tags;
      const auto reply = explain::make_explainer(expl_explainer)->explain(req);

      nlohmann::ordered_json j;
      j["v"] = 1;
      j["candidate"] = entry->id;
      j["similarity"] = rel.similarity;
      j["tokens"] = nlohmann::json::array();
      for (std::size_t i = 0; i < words.size(); ++i) {
        j["tokens"].push_back({{"token", words[i]}, {"score", rel.query.token_scores[i]}});
      }
      j["categories"] = nlohmann::json::parse(
          relevance::categorize_attention(rel.query.token_scores, words, lexicon).to_json());
      j["confidence"] = reply.confidence;
      j["rationale"] = reply.rationale;
      j["heatmap"] = "overlay.png";
      write_text(expl_out / "explanation.json", j.dump(2) + "\n");
      std::cout << j.dump(2) << '\n';
    } else if (*stats) {
      const auto records = corpus::read_corpus(stats_corpus);
      std::vector<std::string> texts;
      for (const auto& r : records) texts.push_back(r.text);
      std::cout << corpus::stats_json(corpus::text_stats(texts)) << '\n';
    } else if (*serve) {
      auto engine = open_engine(serve_ckpt, serve_index, serve_corpus, serve_explainer);
      service::HttpServer server(*engine);
      g_server = &server;
      std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
      });
      std::signal(SIGTERM, [](int) {
        if (g_server) g_server->stop();
      });
      std::cout << "serving on http://" << serve_host << ":" << serve_port << std::endl;
      server.listen(serve_host, serve_port);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
