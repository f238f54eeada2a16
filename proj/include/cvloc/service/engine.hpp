#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "cvloc/errors.hpp"
#include "cvloc/explain/explainer.hpp"
#include "cvloc/geoindex/index.hpp"
#include "cvloc/service/pipeline.hpp"

namespace cvloc::service {

// An error with the HTTP status it maps to and a short machine-readable code.
class ServiceError : public Error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : Error(message), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

struct LocalizeRequest {
  std::string text;
  geoindex::Modality modality = geoindex::Modality::osm;
  geoindex::LatLon prior;
  std::size_t M = 100;
  std::size_t K = 5;
  bool explain = false;

  // Throws ServiceError(400) on a missing field or out-of-range value.
  static LocalizeRequest from_json(const std::string& body);
};

struct TokenScore {
  std::string token;
  double score = 0.0;
};

struct CandidateOut {
  std::string id;
  geoindex::LatLon location;
  double similarity = 0.0;
  std::optional<double> confidence;
  std::optional<std::string> rationale;
  std::optional<double> combined;
  std::size_t similarity_rank = 0;
  std::optional<std::string> heatmap;  // URL path of the overlay image
  std::vector<TokenScore> token_scores;
};

struct LocalizeResponse {
  std::string session_id;
  std::vector<CandidateOut> candidates;
  bool reranked = false;

  std::string to_json() const;
};

struct EngineOptions {
  std::size_t max_sessions = 1000;
  std::size_t max_heatmaps = 4096;
  std::size_t explain_parallelism = 4;
  std::size_t top_tokens = 5;
};

class Engine {
 public:
  // `corpus_dir` is where entries' tile paths resolve. Throws ContractError
  // for a model whose query tower does not read text.
  Engine(ModelBundle bundle, geoindex::ReferenceIndex index, std::filesystem::path corpus_dir,
         std::unique_ptr<explain::Explainer> explainer, EngineOptions options = {});

  LocalizeResponse localize(const LocalizeRequest& request);
  // Appends `extra_text` to the session's description and reruns it.
  LocalizeResponse refine(const std::string& session_id, const std::string& extra_text);
  // Explains the session's top five if needed and applies the combined order.
  LocalizeResponse rerank(const std::string& session_id);

  // Session description as accumulated so far.
  std::string description(const std::string& session_id) const;
  std::size_t session_count() const;

  Raster tile(const std::string& id) const;
  std::optional<std::string> heatmap_png(const std::string& id) const;

  geoindex::IndexHandle& index() { return index_; }
  const ModelBundle& bundle() const { return bundle_; }
  std::string health_json() const;

 private:
  struct Session {
    std::string id;
    std::string description;
    LocalizeRequest request;
    LocalizeResponse last;
  };

  LocalizeResponse run(const LocalizeRequest& request, const std::string& session_id);
  void explain_candidates(const LocalizeRequest& request, std::vector<CandidateOut>& candidates, std::size_t count);
  void store_session(Session session);
  Session get_session(const std::string& id) const;
  std::string new_session_id();

  ModelBundle bundle_;
  geoindex::IndexHandle index_;
  std::filesystem::path corpus_dir_;
  std::unique_ptr<explain::Explainer> explainer_;
  EngineOptions options_;

  mutable std::mutex sessions_mutex_;
  std::list<Session> sessions_;  // most recently used first
  std::unordered_map<std::string, std::list<Session>::iterator> session_index_;
  std::uint64_t session_counter_ = 0;
  std::uint64_t session_salt_ = 0;

  mutable std::mutex heatmap_mutex_;
  std::map<std::string, std::string> heatmaps_;
  std::list<std::string> heatmap_order_;
};

// JSON body {"v": 1, "error": {"status", "code", "message"}}.
std::string error_json(int status, const std::string& code, const std::string& message);

// Minimal HTTP front end over an Engine.
class HttpServer {
 public:
  explicit HttpServer(Engine& engine);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host, int port);
  // Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace cvloc::service
