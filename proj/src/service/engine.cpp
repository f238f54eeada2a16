#include "cvloc/service/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

#include "cvloc/relevance/rollout.hpp"
#include "json.hpp"

namespace cvloc::service {

using nlohmann::json;

namespace {

ServiceError bad_request(const std::string& message) { return ServiceError(400, "bad_request", message); }

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

template <typename T>
T field(const json& j, const char* name) {
  if (!j.contains(name)) throw bad_request(std::string("missing field '") + name + "'");
  try {
    return j.at(name).get<T>();
  } catch (const json::exception&) {
    throw bad_request(std::string("field '") + name + "' has the wrong type");
  }
}

std::size_t count_field(const json& j, const char* name, std::size_t fallback) {
  if (!j.contains(name)) return fallback;
  const auto& v = j.at(name);
  if (!v.is_number_integer() || v.get<long long>() < 1) {
    throw bad_request(std::string("field '") + name + "' must be a positive integer");
  }
  return static_cast<std::size_t>(v.get<long long>());
}

json parse_body(const std::string& body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw bad_request(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw bad_request("request body must be a JSON object");
  if (j.contains("v") && j["v"] != 1) throw bad_request("unsupported schema version");
  return j;
}

}  // namespace

LocalizeRequest LocalizeRequest::from_json(const std::string& body) {
  const json j = parse_body(body);
  LocalizeRequest r;
  r.text = field<std::string>(j, "text");
  if (j.contains("modality")) {
    try {
      r.modality = geoindex::parse_modality(field<std::string>(j, "modality"));
    } catch (const ParameterError& e) {
      throw bad_request(e.what());
    }
  }
  if (!j.contains("prior") || !j["prior"].is_object()) throw bad_request("missing object 'prior' with lat and lon");
  r.prior.lat = field<double>(j["prior"], "lat");
  r.prior.lon = field<double>(j["prior"], "lon");
  r.M = count_field(j, "M", r.M);
  r.K = count_field(j, "K", r.K);
  if (j.contains("explain")) r.explain = field<bool>(j, "explain");
  return r;
}

std::string LocalizeResponse::to_json() const {
  json j;
  j["v"] = 1;
  j["session_id"] = session_id;
  j["reranked"] = reranked;
  j["candidates"] = json::array();
  for (const auto& c : candidates) {
    json o;
    o["id"] = c.id;
    o["lat"] = c.location.lat;
    o["lon"] = c.location.lon;
    o["similarity"] = c.similarity;
    o["similarity_rank"] = c.similarity_rank;
    if (c.confidence) o["confidence"] = *c.confidence;
    if (c.rationale) o["rationale"] = *c.rationale;
    if (c.combined) o["combined"] = *c.combined;
    if (c.heatmap) o["heatmap"] = *c.heatmap;
    if (!c.token_scores.empty()) {
      o["token_scores"] = json::array();
      for (const auto& t : c.token_scores) o["token_scores"].push_back({{"token", t.token}, {"score", t.score}});
    }
    j["candidates"].push_back(std::move(o));
  }
  return j.dump();
}

std::string error_json(int status, const std::string& code, const std::string& message) {
  // Parser messages echo the offending bytes, which need not be valid UTF-8.
  return json{{"v", 1}, {"error", {{"status", status}, {"code", code}, {"message", message}}}}.dump(
      -1, ' ', false, json::error_handler_t::replace);
}

Engine::Engine(ModelBundle bundle, geoindex::ReferenceIndex index, std::filesystem::path corpus_dir,
               std::unique_ptr<explain::Explainer> explainer, EngineOptions options)
    : bundle_(std::move(bundle)),
      index_(std::move(index)),
      corpus_dir_(std::move(corpus_dir)),
      explainer_(std::move(explainer)),
      options_(options) {
  if (bundle_.settings.query != QueryKind::text) throw ContractError("the service needs a text-query model");
  if (!explainer_) throw ContractError("the service needs an explainer");
  if (index_.snapshot()->embed_dim != bundle_.model.config.embed_dim) {
    throw ContractError("index embedding size does not match the model");
  }
  std::random_device rd;
  session_salt_ = (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

std::string Engine::new_session_id() {
  std::lock_guard lock(sessions_mutex_);
  return "sess-" + hex(fnv1a(std::to_string(++session_counter_), session_salt_));
}

void Engine::store_session(Session session) {
  std::lock_guard lock(sessions_mutex_);
  if (auto it = session_index_.find(session.id); it != session_index_.end()) sessions_.erase(it->second);
  sessions_.push_front(std::move(session));
  session_index_[sessions_.front().id] = sessions_.begin();
  while (sessions_.size() > options_.max_sessions) {
    session_index_.erase(sessions_.back().id);
    sessions_.pop_back();
  }
}

Engine::Session Engine::get_session(const std::string& id) const {
  std::lock_guard lock(sessions_mutex_);
  const auto it = session_index_.find(id);
  if (it == session_index_.end()) throw ServiceError(404, "unknown_session", "no session '" + id + "'");
  return *it->second;
}

std::string Engine::description(const std::string& session_id) const { return get_session(session_id).description; }

std::size_t Engine::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

Raster Engine::tile(const std::string& id) const {
  const auto snap = index_.snapshot();
  const auto* e = snap->find(id);
  if (!e) throw ServiceError(404, "unknown_tile", "no tile '" + id + "'");
  try {
    return read_ppm(corpus_dir_ / e->tile_path);
  } catch (const Error& err) {
    throw ServiceError(503, "tile_unavailable", err.what());
  }
}

std::optional<std::string> Engine::heatmap_png(const std::string& id) const {
  std::lock_guard lock(heatmap_mutex_);
  const auto it = heatmaps_.find(id);
  if (it == heatmaps_.end()) return std::nullopt;
  return it->second;
}

void Engine::explain_candidates(const LocalizeRequest& request, std::vector<CandidateOut>& candidates,
                                std::size_t count) {
  const auto input = bundle_.text_query(request.text);
  auto words = encoders::split_words(request.text);
  if (words.size() > bundle_.context() - 2) words.resize(bundle_.context() - 2);
  const auto snap = index_.snapshot();

  std::vector<explain::ExplainRequest> requests;
  for (std::size_t i = 0; i < count; ++i) {
    auto& c = candidates[i];
    const Raster pixels = tile(c.id);
    const auto rel = relevance::explain_pair(bundle_.model, input, pixels);
    c.token_scores.clear();
    for (std::size_t w = 0; w < words.size(); ++w) c.token_scores.push_back({words[w], rel.query.token_scores[w]});

    // The id depends only on the request content, so repeated requests agree.
    const std::string hid = c.id + "-" + hex(fnv1a(request.text + '\x1f' + c.id));
    const Raster overlay = overlay_heatmap(pixels, rel.image.heatmap);
    {
      std::lock_guard lock(heatmap_mutex_);
      if (heatmaps_.emplace(hid, encode_png(overlay)).second) {
        heatmap_order_.push_back(hid);
        while (heatmap_order_.size() > options_.max_heatmaps) {
          heatmaps_.erase(heatmap_order_.front());
          heatmap_order_.pop_front();
        }
      }
    }
    c.heatmap = "/heatmaps/" + hid;

    explain::ExplainRequest er;
    er.query = request.text;
    er.top_tokens = explain::top_tokens(words, rel.query.token_scores, options_.top_tokens);
    er.tile = pixels;
    er.overlay = overlay;
    er.tile_id = c.id;
    er.location = c.location;
    if (const auto* e = snap->find(c.id)) er.poi_tags = e->tags;
    requests.push_back(std::move(er));
  }
  const auto replies = explain::explain_all(*explainer_, requests, options_.explain_parallelism);
  for (std::size_t i = 0; i < count; ++i) {
    if (replies[i]) {
      candidates[i].confidence = replies[i]->confidence;
      candidates[i].rationale = replies[i]->rationale;
    } else {
      candidates[i].confidence.reset();
      candidates[i].rationale = "explainer unavailable";
    }
  }
}

namespace {

// Applies the re-ranking rule to the first five candidates when all of them
// carry a confidence; the tail keeps its similarity order.
bool rerank_head(std::vector<CandidateOut>& candidates, bool force) {
  if (candidates.size() < explain::kRerankSize) return false;
  explain::RankedCandidates head;
  for (std::size_t i = 0; i < explain::kRerankSize; ++i) {
    const auto& c = candidates[i];
    if (!c.confidence) return false;
    head.items.push_back({c.id, c.similarity, c.confidence, c.rationale, std::nullopt, c.similarity_rank});
  }
  const auto ranked = explain::confidence_rerank(head, force);
  if (!ranked.reranked) return false;
  std::vector<CandidateOut> out;
  for (const auto& item : ranked.items) {
    CandidateOut c = candidates[item.similarity_rank];
    c.combined = item.combined;
    out.push_back(std::move(c));
  }
  for (std::size_t i = explain::kRerankSize; i < candidates.size(); ++i) out.push_back(candidates[i]);
  candidates = std::move(out);
  return true;
}

}  // namespace

LocalizeResponse Engine::run(const LocalizeRequest& request, const std::string& session_id) {
  const auto& p = request.prior;
  if (!std::isfinite(p.lat) || !std::isfinite(p.lon) || std::abs(p.lat) > 90.0 || std::abs(p.lon) > 180.0) {
    throw bad_request("prior coordinates out of range");
  }
  const auto snap = index_.snapshot();
  if (!snap || snap->entries.empty()) throw ServiceError(503, "no_index", "no reference index loaded");
  if (request.modality != snap->modality) {
    throw bad_request("index holds " + geoindex::modality_name(snap->modality) + " tiles, not " +
                      geoindex::modality_name(request.modality));
  }
  if (request.M > snap->entries.size()) {
    throw bad_request("M = " + std::to_string(request.M) + " exceeds the " + std::to_string(snap->entries.size()) +
                      " indexed tiles");
  }
  if (request.K > request.M) throw bad_request("K must not exceed M");

  const auto embedding = encoders::encode_query(bundle_.text_query(request.text), bundle_.model.query);
  const auto window = geoindex::neighborhood(snap->entries, request.prior, request.M);
  const auto result = geoindex::retrieve(embedding, window, request.K);

  LocalizeResponse response;
  response.session_id = session_id;
  for (std::size_t i = 0; i < result.candidates.size(); ++i) {
    const auto& h = result.candidates[i];
    CandidateOut c;
    c.id = h.id;
    c.location = h.location;
    c.similarity = h.similarity;
    c.similarity_rank = i;
    response.candidates.push_back(std::move(c));
  }
  if (request.explain) {
    explain_candidates(request, response.candidates, response.candidates.size());
    response.reranked = rerank_head(response.candidates, false);
  }
  return response;
}

LocalizeResponse Engine::localize(const LocalizeRequest& request) {
  if (request.text.empty()) throw bad_request("text must not be empty");
  Session s;
  s.id = new_session_id();
  s.description = request.text;
  s.request = request;
  s.last = run(request, s.id);
  LocalizeResponse out = s.last;
  store_session(std::move(s));
  return out;
}

LocalizeResponse Engine::refine(const std::string& session_id, const std::string& extra_text) {
  Session s = get_session(session_id);
  if (extra_text.find_first_not_of(" \t\r\n") != std::string::npos) {
    s.description += " " + extra_text;
  }
  s.request.text = s.description;
  s.last = run(s.request, s.id);
  LocalizeResponse out = s.last;
  store_session(std::move(s));
  return out;
}

LocalizeResponse Engine::rerank(const std::string& session_id) {
  Session s = get_session(session_id);
  auto& cands = s.last.candidates;
  if (cands.size() < explain::kRerankSize) {
    throw ServiceError(409, "too_few_candidates", "re-ranking needs at least 5 candidates in the session");
  }
  // Undo any earlier re-rank so the rule always starts from similarity order.
  std::stable_sort(cands.begin(), cands.end(),
                   [](const CandidateOut& a, const CandidateOut& b) { return a.similarity_rank < b.similarity_rank; });
  for (auto& c : cands) c.combined.reset();
  const bool explained = std::all_of(cands.begin(), cands.begin() + explain::kRerankSize,
                                     [](const CandidateOut& c) { return c.confidence.has_value(); });
  if (!explained) explain_candidates(s.request, cands, explain::kRerankSize);
  s.last.reranked = rerank_head(cands, true);
  LocalizeResponse out = s.last;
  store_session(std::move(s));
  return out;
}

std::string Engine::health_json() const {
  const auto snap = index_.snapshot();
  return json{{"v", 1},
              {"status", "ok"},
              {"modality", geoindex::modality_name(snap->modality)},
              {"references", snap->entries.size()},
              {"sessions", session_count()},
              {"explainer", explainer_->name()}}
      .dump();
}

}  // namespace cvloc::service
