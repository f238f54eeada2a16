#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <random>

#include "cvloc/corpus/scene.hpp"
#include "cvloc/service/engine.hpp"
#include "httplib.h"
#include "json.hpp"

using namespace cvloc;
using namespace cvloc::service;
using nlohmann::json;

namespace {

struct Fixture {
  std::filesystem::path dir;
  std::vector<corpus::SceneRecord> records;
  ModelBundle bundle;
  geoindex::ReferenceIndex index;

  static Fixture& get() {
    static Fixture f = make();
    return f;
  }

  static Fixture make() {
    Fixture f{std::filesystem::temp_directory_path() / "cvloc_service_test", {}, {}, {}};
    std::filesystem::remove_all(f.dir);
    corpus::CorpusConfig cfg;
    cfg.size = 30;
    f.records = corpus::generate_corpus(cfg);
    corpus::write_corpus(f.dir, f.records);
    auto s = TrainSettings::toy();
    s.encoder.d_model = 16;
    s.encoder.embed_dim = 16;
    s.encoder.n_layers = 1;
    f.bundle = init_bundle(f.records, s);
    f.index = build_index(f.bundle, f.records, geoindex::Modality::osm);
    return f;
  }

  std::unique_ptr<Engine> engine(EngineOptions opts = {}) const {
    return std::make_unique<Engine>(bundle, index, dir, explain::make_explainer("mock"), opts);
  }

  LocalizeRequest request(std::size_t i, std::size_t M = 20, std::size_t K = 5, bool explain = false) const {
    LocalizeRequest r;
    r.text = records[i].text;
    r.prior = records[i].osm_tile.center;
    r.M = M;
    r.K = K;
    r.explain = explain;
    return r;
  }
};

json without_session(std::string body) {
  auto j = json::parse(body);
  j.erase("session_id");
  return j;
}

}  // namespace

TEST_CASE("request parsing") {
  const auto r = LocalizeRequest::from_json(R"({"v":1,"text":"a red sign","prior":{"lat":40.7,"lon":-74.0},"K":3})");
  CHECK(r.text == "a red sign");
  CHECK(r.K == 3);
  CHECK(r.M == 100);
  CHECK(!r.explain);
  CHECK(r.modality == geoindex::Modality::osm);
  const std::vector<std::string> bad = {
      "", "[]", "{", R"({"text":"x"})", R"({"text":1,"prior":{"lat":0,"lon":0}})",
      R"({"text":"x","prior":{"lat":0}})", R"({"text":"x","prior":{"lat":0,"lon":0},"K":0})",
      R"({"text":"x","prior":{"lat":0,"lon":0},"M":-1})", R"({"v":2,"text":"x","prior":{"lat":0,"lon":0}})",
      R"({"text":"x","prior":{"lat":0,"lon":0},"modality":"radar"})", R"({"text":"x","prior":[0,0]})"};
  for (const auto& b : bad) {
    try {
      LocalizeRequest::from_json(b);
      FAIL("accepted: " << b);
    } catch (const ServiceError& e) {
      CHECK(e.status() == 400);
    }
  }
  const auto err = json::parse(error_json(404, "nope", "missing"));
  CHECK(err["v"] == 1);
  CHECK(err["error"]["status"] == 404);
  CHECK(err["error"]["code"] == "nope");
}

TEST_CASE("localize: flags, K, determinism and errors") {
  auto& f = Fixture::get();
  auto e = f.engine();
  const auto plain = e->localize(f.request(3));
  CHECK(plain.candidates.size() == 5);
  CHECK(!plain.reranked);
  for (std::size_t i = 0; i < plain.candidates.size(); ++i) {
    CHECK(!plain.candidates[i].confidence);
    CHECK(!plain.candidates[i].heatmap);
    CHECK(plain.candidates[i].similarity_rank == i);
    if (i) CHECK(plain.candidates[i].similarity <= plain.candidates[i - 1].similarity);
  }
  CHECK(e->localize(f.request(3, 20, 1)).candidates.size() == 1);

  const auto a = e->localize(f.request(5, 20, 5, true)), b = e->localize(f.request(5, 20, 5, true));
  CHECK(a.session_id != b.session_id);
  CHECK(without_session(a.to_json()) == without_session(b.to_json()));
  // A fresh engine from the same bundle and index answers identically.
  CHECK(without_session(f.engine()->localize(f.request(5, 20, 5, true)).to_json()) == without_session(a.to_json()));
  for (const auto& c : a.candidates) {
    REQUIRE(c.confidence);
    REQUIRE(c.heatmap);
    CHECK(!c.token_scores.empty());
    const auto id = c.heatmap->substr(c.heatmap->rfind('/') + 1);
    const auto png = e->heatmap_png(id);
    REQUIRE(png);
    CHECK(png->substr(1, 3) == "PNG");
  }

  auto bad = f.request(1);
  bad.prior.lat = 95.0;
  CHECK_THROWS_AS(e->localize(bad), ServiceError);
  bad = f.request(1, 31);
  CHECK_THROWS_AS(e->localize(bad), ServiceError);
  bad = f.request(1, 4, 5);
  CHECK_THROWS_AS(e->localize(bad), ServiceError);
  bad = f.request(1);
  bad.text = "";
  CHECK_THROWS_AS(e->localize(bad), ServiceError);

  e->index().swap({});
  try {
    e->localize(f.request(1));
    FAIL("expected 503");
  } catch (const ServiceError& err) {
    CHECK(err.status() == 503);
  }
}

TEST_CASE("refine and rerank") {
  auto& f = Fixture::get();
  auto e = f.engine();
  const auto first = e->localize(f.request(7));
  const auto same = e->refine(first.session_id, "");
  CHECK(without_session(same.to_json()) == without_session(first.to_json()));
  e->refine(first.session_id, "A bakery is on the left.");
  e->refine(first.session_id, "The road has a crossing.");
  const auto d = e->description(first.session_id);
  CHECK(d.find(f.records[7].text) == 0);
  const auto p1 = d.find("bakery"), p2 = d.rfind("crossing.");
  CHECK(p1 != std::string::npos);
  CHECK(p1 < p2);

  try {
    e->refine("sess-missing", "x");
    FAIL("expected 404");
  } catch (const ServiceError& err) {
    CHECK(err.status() == 404);
  }

  const auto r = e->rerank(first.session_id);
  CHECK(r.reranked);
  CHECK(r.candidates.size() == 5);
  for (const auto& c : r.candidates) CHECK(c.combined);
  const auto small = e->localize(f.request(7, 20, 3));
  try {
    e->rerank(small.session_id);
    FAIL("expected 409");
  } catch (const ServiceError& err) {
    CHECK(err.status() == 409);
  }
}

TEST_CASE("sessions are evicted least recently used first") {
  auto& f = Fixture::get();
  EngineOptions opts;
  opts.max_sessions = 3;
  auto e = f.engine(opts);
  const auto s1 = e->localize(f.request(0)).session_id;
  const auto s2 = e->localize(f.request(1)).session_id;
  e->localize(f.request(2));
  e->refine(s1, "");
  e->localize(f.request(3));
  CHECK(e->session_count() == 3);
  CHECK_NOTHROW(e->description(s1));
  CHECK_THROWS_AS(e->description(s2), ServiceError);
}

TEST_CASE("http endpoints, malformed input and the console round trip") {
  auto& f = Fixture::get();
  auto e = f.engine();
  HttpServer server(*e);
  const int port = server.start("127.0.0.1", 0);
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(60, 0);

  auto health = cli.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["references"] == 30);

  json req = {{"v", 1}, {"text", f.records[4].text}, {"modality", "osm"},
              {"prior", {{"lat", f.records[4].osm_tile.center.lat}, {"lon", f.records[4].osm_tile.center.lon}}},
              {"M", 20}, {"K", 5}, {"explain", true}};
  auto res = cli.Post("/localize", req.dump(), "application/json");
  REQUIRE(res);
  REQUIRE(res->status == 200);
  const auto body = json::parse(res->body);
  CHECK(body["v"] == 1);
  const auto cards = body["candidates"];
  REQUIRE(cards.size() == 5);
  // What a console would render: one card per candidate in server order,
  // each with its tile and heatmap fetched by reference.
  for (std::size_t i = 0; i < cards.size(); ++i) {
    const auto tile = cli.Get("/tiles/" + cards[i]["id"].get<std::string>());
    REQUIRE(tile);
    CHECK(tile->status == 200);
    CHECK(tile->get_header_value("Content-Type") == "image/png");
    const auto heat = cli.Get(cards[i]["heatmap"].get<std::string>());
    REQUIRE(heat);
    CHECK(heat->status == 200);
    CHECK(cards[i].contains("confidence"));
    CHECK(cards[i].contains("token_scores"));
  }
  if (!body["reranked"].get<bool>())
    for (std::size_t i = 1; i < cards.size(); ++i) CHECK(cards[i]["similarity"] <= cards[i - 1]["similarity"]);
  const auto ppm = cli.Get("/tiles/" + cards[0]["id"].get<std::string>() + "?format=ppm");
  REQUIRE(ppm);
  CHECK(ppm->body.rfind("P6", 0) == 0);

  const std::string sid = body["session_id"];
  auto refined = cli.Post("/refine", json{{"session_id", sid}, {"text", "A cafe is on the right."}}.dump(), "application/json");
  REQUIRE(refined);
  CHECK(refined->status == 200);
  CHECK(json::parse(refined->body)["session_id"] == sid);
  auto reranked = cli.Post("/rerank", json{{"session_id", sid}}.dump(), "application/json");
  REQUIRE(reranked);
  CHECK(reranked->status == 200);
  CHECK(json::parse(reranked->body)["reranked"] == true);

  const auto status_of = [&](const httplib::Result& r) { return r ? r->status : -1; };
  CHECK(status_of(cli.Get("/tiles/nope")) == 404);
  CHECK(status_of(cli.Get("/heatmaps/nope")) == 404);
  CHECK(status_of(cli.Get("/nowhere")) == 404);
  CHECK(status_of(cli.Post("/refine", R"({"session_id":"sess-x"})", "application/json")) == 404);
  CHECK(status_of(cli.Post("/rerank", R"({})", "application/json")) == 400);
  const auto err = cli.Get("/tiles/nope");
  CHECK(json::parse(err->body)["error"]["code"] == "unknown_tile");

  // Fuzz: truncated, mutated and random bodies never crash and always get a 4xx.
  std::mt19937_64 rng(1);
  const std::string valid = req.dump();
  const std::vector<std::string> routes = {"/localize", "/refine", "/rerank"};
  for (int trial = 0; trial < 150; ++trial) {
    std::string b;
    switch (trial % 3) {
      case 0: b = valid.substr(0, rng() % valid.size()); break;
      case 1:
        b = valid;
        for (int k = 0; k < 3; ++k) b[rng() % b.size()] = static_cast<char>(32 + rng() % 95);
        break;
      default:
        b.resize(rng() % 40);
        for (auto& c : b) c = static_cast<char>(rng() % 256);
    }
    const auto r = cli.Post(routes[trial % routes.size()], b, "application/json");
    REQUIRE(r);
    if (r->status == 200) continue;  // a mutation can still be a valid request
    CHECK(r->status >= 400);
    CHECK_MESSAGE(r->status < 500, r->body);
    CHECK(json::parse(r->body).contains("error"));
  }
  auto alive = cli.Get("/healthz");
  REQUIRE(alive);
  CHECK(alive->status == 200);
  server.stop();
}
