#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvloc/geoindex/geo.hpp"
#include "cvloc/numerics/tensor.hpp"

namespace cvloc::geoindex {

// Tile metadata plus its unit-norm embedding. Pixels are not kept in the
// index; `tile_path` points at the raster relative to the corpus directory.
struct ReferenceEntry {
  std::string id;
  Modality modality = Modality::osm;
  LatLon location;
  int zoom = 20;
  std::vector<double> embedding;
  std::vector<std::string> tags;
  std::string tile_path;
};

struct ReferenceIndex {
  Modality modality = Modality::osm;
  std::size_t embed_dim = 0;
  std::vector<ReferenceEntry> entries;

  // Throws ContractError for non-unit embeddings or mismatched dimensions.
  void validate() const;
  const ReferenceEntry* find(const std::string& id) const;
};

// Binary layout: "CVLOCIDX", u32 version, u32 modality, u64 embed_dim,
// u64 count, then per entry: id, lat, lon, zoom, float32 embedding, tags, tile path.
void save_index(const std::filesystem::path& path, const ReferenceIndex& index);
ReferenceIndex load_index(const std::filesystem::path& path);

// Holds the live index; readers take a snapshot, writers swap a whole new one in.
class IndexHandle {
 public:
  IndexHandle() = default;
  explicit IndexHandle(ReferenceIndex index);
  std::shared_ptr<const ReferenceIndex> snapshot() const;
  void swap(ReferenceIndex index);
  // Loads a new file and swaps it in only after a complete, valid read.
  void reload(const std::filesystem::path& path);

 private:
  mutable std::mutex mutex_;
  std::shared_ptr<const ReferenceIndex> current_;
};

// The M entries closest to `center` (haversine), ties broken by id.
std::vector<const ReferenceEntry*> neighborhood(std::span<const ReferenceEntry> refs, LatLon center, std::size_t M);

struct Hit {
  std::string id;
  double similarity = 0.0;
  LatLon location;
  double error_m = 0.0;  // distance to the true location, if known
};

struct QueryResult {
  std::vector<Hit> candidates;  // similarity non-increasing
  std::optional<std::string> truth_id;
  std::optional<LatLon> truth_location;
};

// Exact top-K by dot product, descending, ties broken by id.
QueryResult retrieve(std::span<const double> query, std::span<const ReferenceEntry* const> window, std::size_t K);

// Same ranking from precomputed scores aligned with `window`.
QueryResult rank_scores(std::span<const double> scores, std::span<const ReferenceEntry* const> window, std::size_t K);

// Fills truth fields and per-candidate localization errors.
void attach_truth(QueryResult& result, const std::string& truth_id, LatLon truth);

double recall_at_k(std::span<const QueryResult> results, std::size_t K);
double localization_recall(std::span<const QueryResult> results, double threshold_m);

// Row-wise min-max normalization of both matrices (constant rows become 0),
// then (1 - w) * image + w * text.
numerics::Tensor fuse_scores(const numerics::Tensor& s_image, const numerics::Tensor& s_text, double w);

struct EvalQuery {
  std::vector<double> embedding;
  std::string truth_id;
  LatLon location;
};

struct EvalOptions {
  std::size_t M = 100;
  std::vector<std::size_t> ks = {1, 5, 10};
  std::vector<double> thresholds = {50.0};
  // Standard deviation in meters of a random shift applied to each window
  // centre; 0 centres windows on the true location.
  double window_noise_m = 0.0;
  std::uint64_t noise_seed = 0;
};

struct MetricsReport {
  std::string modality;
  std::size_t queries = 0;
  std::size_t M = 0;
  std::map<std::size_t, double> recall;    // K -> R@K
  std::map<double, double> localization;   // threshold -> L@threshold

  std::string to_json() const;
  // Aligned columns, one row per report.
  static std::string to_table(std::span<const MetricsReport> reports);
};

std::vector<QueryResult> run_queries(std::span<const EvalQuery> queries, const ReferenceIndex& refs,
                                     const EvalOptions& options);
MetricsReport summarize(std::span<const QueryResult> results, const std::string& modality, const EvalOptions& options);
MetricsReport evaluate(std::span<const EvalQuery> queries, const ReferenceIndex& refs, const EvalOptions& options);

// Two query branches scored against their own reference embeddings of the
// same tiles (matched by id), fused per query window with weight w on text.
MetricsReport evaluate_fused(std::span<const EvalQuery> image_queries, const ReferenceIndex& image_refs,
                             std::span<const EvalQuery> text_queries, const ReferenceIndex& text_refs, double w,
                             const EvalOptions& options);

// w in {0, 0.1, ..., 1} with the best fused R@1 on the given queries; ties go
// to the smaller w. Meant for training-split queries, never the test split.
double select_fusion_weight(std::span<const EvalQuery> image_queries, const ReferenceIndex& image_refs,
                            std::span<const EvalQuery> text_queries, const ReferenceIndex& text_refs,
                            const EvalOptions& options);

}  // namespace cvloc::geoindex
