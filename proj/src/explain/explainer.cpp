#include "cvloc/explain/explainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"

namespace cvloc::explain {

using nlohmann::json;

std::vector<ScoredToken> top_tokens(std::span<const std::string> tokens, std::span<const double> scores,
                                    std::size_t k) {
  if (tokens.size() != scores.size()) {
    throw DimensionError("top_tokens: " + std::to_string(scores.size()) + " scores for " +
                         std::to_string(tokens.size()) + " tokens");
  }
  std::vector<std::size_t> order(tokens.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<ScoredToken> out;
  for (std::size_t i = 0; i < order.size() && out.size() < k; ++i) out.push_back({tokens[order[i]], scores[order[i]]});
  return out;
}

std::string build_explainer_prompt(const ExplainRequest& req) {
  std::ostringstream p;
  p.setf(std::ios::fixed);
  p.precision(4);
  p << "You are checking whether a map tile matches a street-level scene description.\n\n"
    << "Query description:\n" << req.query << "\n\n"
    << "Candidate tile " << req.tile_id << " at lat " << req.location.lat << ", lon " << req.location.lon << ".\n"
    << "Two images follow: the candidate tile and the same tile with the model's relevance heatmap overlaid "
       "(red marks regions the retrieval model relied on).\n\n"
    << "Query words the model relied on most, with relevance scores:\n";
  for (const auto& t : req.top_tokens) p << "- " << t.token << " (" << t.score << ")\n";
  p << "\nStep 1. Identify the key clues: which highlighted words and highlighted tile regions carry "
       "location evidence (names, road layout, buildings, vegetation).\n"
    << "Step 2. Reason about correspondence: explain whether those clues agree between the description and "
       "the tile, and why the model may have retrieved this tile.\n"
    << "Step 3. Rate how convincing the match is. End your answer with a final line of the exact form\n"
    << "Confidence: <number between 0 and 1>\n";
  return p.str();
}

double parse_confidence(const std::string& reply) {
  std::istringstream in(reply);
  std::string line;
  std::optional<double> value;
  while (std::getline(in, line)) {
    const auto pos = line.find("onfidence:");
    if (pos == std::string::npos || pos == 0 || (line[pos - 1] != 'C' && line[pos - 1] != 'c')) continue;
    const std::string rest = line.substr(pos + 10);
    char* end = nullptr;
    const double v = std::strtod(rest.c_str(), &end);
    if (end != rest.c_str() && std::isfinite(v)) value = v;
  }
  if (!value) throw ExplainerError("explainer reply has no parseable confidence line", reply);
  return std::clamp(*value, 0.0, 1.0);
}

ExplainResponse MockExplainer::explain(const ExplainRequest& req) {
  std::set<std::string> tokens, tags(req.poi_tags.begin(), req.poi_tags.end());
  for (const auto& t : req.top_tokens) tokens.insert(t.token);
  std::vector<std::string> shared;
  std::set_intersection(tokens.begin(), tokens.end(), tags.begin(), tags.end(), std::back_inserter(shared));
  const std::size_t uni = tokens.size() + tags.size() - shared.size();
  ExplainResponse r;
  r.confidence = uni == 0 ? 0.0 : static_cast<double>(shared.size()) / static_cast<double>(uni);
  if (shared.empty()) {
    r.rationale = "None of the highlighted query words match the tags of tile " + req.tile_id + ".";
  } else {
    r.rationale = "Highlighted query words";
    for (std::size_t i = 0; i < shared.size(); ++i) r.rationale += (i ? ", " : " ") + shared[i];
    r.rationale += " match tags of tile " + req.tile_id + ".";
  }
  return r;
}

HttpExplainerConfig HttpExplainerConfig::from_env() {
  HttpExplainerConfig c;
  if (const char* v = std::getenv("CVLOC_EXPLAINER_URL")) c.endpoint = v;
  if (const char* v = std::getenv("CVLOC_EXPLAINER_KEY")) c.api_key = v;
  if (const char* v = std::getenv("CVLOC_EXPLAINER_MODEL")) c.model = v;
  return c;
}

HttpExplainer::HttpExplainer(HttpExplainerConfig config) : config_(std::move(config)) {
  if (config_.endpoint.empty()) throw ParameterError("http explainer needs an endpoint (CVLOC_EXPLAINER_URL)");
  if (!(config_.timeout_s > 0.0)) throw ParameterError("explainer timeout must be positive");
}

std::string HttpExplainer::request_body(const ExplainRequest& req) const {
  const auto image = [](const Raster& r) {
    return json{{"type", "image_url"},
                {"image_url", {{"url", "data:image/png;base64," + base64_encode(encode_png(r))}}}};
  };
  json content = json::array({json{{"type", "text"}, {"text", build_explainer_prompt(req)}}});
  if (req.tile.width > 0) content.push_back(image(req.tile));
  if (req.overlay.width > 0) content.push_back(image(req.overlay));
  json body{{"model", config_.model},
            {"temperature", 0},
            {"messages", json::array({json{{"role", "user"}, {"content", content}}})}};
  return body.dump();
}

ExplainResponse HttpExplainer::parse_reply(const std::string& body) {
  std::string text;
  try {
    const json j = json::parse(body);
    text = j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw ExplainerError(std::string("malformed explainer response: ") + e.what(), body);
  }
  ExplainResponse r;
  r.confidence = parse_confidence(text);
  // Rationale is everything before the confidence line.
  const auto pos = text.rfind("onfidence:");
  const auto line_start = text.rfind('\n', pos);
  r.rationale = line_start == std::string::npos ? text : text.substr(0, line_start);
  while (!r.rationale.empty() && std::isspace(static_cast<unsigned char>(r.rationale.back()))) r.rationale.pop_back();
  if (r.rationale.empty()) r.rationale = "(no rationale given)";
  return r;
}

ExplainResponse HttpExplainer::explain(const ExplainRequest& req) {
  // Split "scheme://host[:port]/path".
  const auto scheme_end = config_.endpoint.find("://");
  const auto path_start = config_.endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  const std::string base = config_.endpoint.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : config_.endpoint.substr(path_start);

  httplib::Client client(base);
  const auto secs = static_cast<time_t>(config_.timeout_s);
  const auto usecs = static_cast<time_t>((config_.timeout_s - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers headers;
  if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
  auto res = client.Post(path, headers, request_body(req), "application/json");
  if (!res) throw ExplainerError("explainer request failed: " + httplib::to_string(res.error()), "");
  if (res->status != 200) {
    throw ExplainerError("explainer returned HTTP " + std::to_string(res->status), res->body);
  }
  return parse_reply(res->body);
}

std::unique_ptr<Explainer> make_explainer(const std::string& mode) {
  if (mode == "mock") return std::make_unique<MockExplainer>();
  if (mode == "http") return std::make_unique<HttpExplainer>(HttpExplainerConfig::from_env());
  throw ParameterError("unknown explainer mode '" + mode + "' (expected mock or http)");
}

std::vector<std::optional<ExplainResponse>> explain_all(Explainer& explainer, std::span<const ExplainRequest> requests,
                                                        std::size_t parallelism) {
  std::vector<std::optional<ExplainResponse>> out(requests.size());
  std::atomic<std::size_t> next{0};
  const auto work = [&] {
    for (std::size_t i = next++; i < requests.size(); i = next++) {
      try {
        out[i] = explainer.explain(requests[i]);
      } catch (const Error&) {
        out[i] = std::nullopt;
      }
    }
  };
  const std::size_t workers = std::min(std::max<std::size_t>(parallelism, 1), requests.size());
  if (workers <= 1) {
    work();
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  return out;
}

namespace {

std::vector<double> minmax(std::vector<double> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double min = *lo, range = *hi - *lo;
  for (auto& x : v) x = range > 0.0 ? (x - min) / range : 0.0;
  return v;
}

}  // namespace

RankedCandidates confidence_rerank(const RankedCandidates& top5, bool force) {
  if (top5.items.size() != kRerankSize) {
    throw ContractError("confidence_rerank needs exactly 5 candidates, got " + std::to_string(top5.items.size()));
  }
  for (const auto& c : top5.items) {
    if (!c.confidence) throw ContractError("candidate " + c.id + " has no confidence");
  }
  RankedCandidates out = top5;
  for (std::size_t i = 0; i < out.items.size(); ++i) out.items[i].similarity_rank = i;
  if (!force && *out.items.front().confidence >= kRerankThreshold) {
    out.reranked = false;
    return out;
  }
  std::vector<double> sims, confs;
  for (const auto& c : out.items) {
    sims.push_back(c.similarity);
    confs.push_back(*c.confidence);
  }
  sims = minmax(std::move(sims));
  confs = minmax(std::move(confs));
  for (std::size_t i = 0; i < out.items.size(); ++i) out.items[i].combined = sims[i] + confs[i];
  std::stable_sort(out.items.begin(), out.items.end(),
                   [](const Candidate& a, const Candidate& b) { return *a.combined > *b.combined; });
  out.reranked = true;
  return out;
}

}  // namespace cvloc::explain
