#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cvloc/errors.hpp"
#include "cvloc/geoindex/geo.hpp"
#include "cvloc/util/raster.hpp"

namespace cvloc::explain {

struct ScoredToken {
  std::string token;
  double score = 0.0;
};

struct ExplainRequest {
  std::string query;
  std::vector<ScoredToken> top_tokens;  // descending by score
  Raster tile;
  Raster overlay;  // tile with the relevance heatmap blended in
  std::string tile_id;
  geoindex::LatLon location;
  std::vector<std::string> poi_tags;
};

// Keeps the k highest-scoring tokens, descending; ties keep text order.
std::vector<ScoredToken> top_tokens(std::span<const std::string> tokens, std::span<const double> scores,
                                    std::size_t k);

struct ExplainResponse {
  std::string rationale;
  double confidence = 0.0;
};

// Clue identification, then correspondence reasoning, then a final
// "Confidence: <x>" line.
std::string build_explainer_prompt(const ExplainRequest& req);

// Reads the last "Confidence:" line of a reply and clamps it to [0, 1].
// Throws ExplainerError (carrying the reply) if none parses.
double parse_confidence(const std::string& reply);

class ExplainerError : public Error {
 public:
  ExplainerError(const std::string& what, std::string raw) : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const { return raw_; }

 private:
  std::string raw_;
};

class Explainer {
 public:
  virtual ~Explainer() = default;
  virtual ExplainResponse explain(const ExplainRequest& req) = 0;
  virtual std::string name() const = 0;
};

// Offline scorer: confidence is the Jaccard overlap of the top-token set and
// the candidate's POI tag set.
class MockExplainer : public Explainer {
 public:
  ExplainResponse explain(const ExplainRequest& req) override;
  std::string name() const override { return "mock"; }
};

struct HttpExplainerConfig {
  std::string endpoint;  // e.g. https://host/v1/chat/completions
  std::string api_key;
  std::string model = "gpt-4o";
  double timeout_s = 30.0;

  // CVLOC_EXPLAINER_URL, CVLOC_EXPLAINER_KEY, CVLOC_EXPLAINER_MODEL.
  static HttpExplainerConfig from_env();
};

// Chat-completions style JSON over HTTP with the tile and overlay as inline PNG data URLs.
class HttpExplainer : public Explainer {
 public:
  explicit HttpExplainer(HttpExplainerConfig config);
  ExplainResponse explain(const ExplainRequest& req) override;
  std::string name() const override { return "http"; }

  // Request body sent for `req` (exposed for inspection and testing).
  std::string request_body(const ExplainRequest& req) const;
  // Extracts the reply text from a response body and parses it.
  static ExplainResponse parse_reply(const std::string& body);

 private:
  HttpExplainerConfig config_;
};

std::unique_ptr<Explainer> make_explainer(const std::string& mode);

// Runs the explainer over every request with at most `parallelism` calls in
// flight. A failed call yields nullopt in its slot.
std::vector<std::optional<ExplainResponse>> explain_all(Explainer& explainer, std::span<const ExplainRequest> requests,
                                                        std::size_t parallelism = 4);

struct Candidate {
  std::string id;
  double similarity = 0.0;
  std::optional<double> confidence;
  std::optional<std::string> rationale;
  std::optional<double> combined;
  std::size_t similarity_rank = 0;  // 0-based position before re-ranking
};

struct RankedCandidates {
  std::vector<Candidate> items;
  bool reranked = false;
};

inline constexpr double kRerankThreshold = 0.5;
inline constexpr std::size_t kRerankSize = 5;

// Re-ranks exactly five similarity-ordered candidates when the top-1
// confidence is below 0.5: combined = minmax(sim) + minmax(conf), sorted
// descending with ties kept in similarity order. `force` applies the
// combined order regardless of the top-1 confidence.
RankedCandidates confidence_rerank(const RankedCandidates& top5, bool force = false);

}  // namespace cvloc::explain
