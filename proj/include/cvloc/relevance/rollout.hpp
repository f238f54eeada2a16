#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvloc/encoders/model.hpp"
#include "cvloc/util/raster.hpp"

namespace cvloc::relevance {

using numerics::Tensor;
using numerics::Var;

enum class TraceModality { text, image };

// Attention probabilities and their gradients for layers first_layer ..
// first_layer + attention.size() - 1 (1-based). Self-contained copies.
struct AttentionTrace {
  TraceModality modality = TraceModality::text;
  std::size_t tokens = 0;
  std::size_t first_layer = 1;
  std::vector<std::vector<Tensor>> attention;  // [layer][head], tokens x tokens
  std::vector<std::vector<Tensor>> gradients;  // same shapes

  std::size_t last_layer() const { return first_layer + attention.size() - 1; }
  // Shape agreement and unit row sums (within 1e-6); throws DimensionError/ContractError.
  void validate() const;
};

// Runs one backward pass from `target` over the tape that recorded `out`
// and copies every layer >= start_layer. The forward pass must have used
// ForwardOptions{.retain_attention = true}.
AttentionTrace capture_trace(const encoders::TowerOutput& out, Var target, TraceModality modality,
                             std::size_t start_layer = 1);

// R <- R + mean_h max(0, dA * A) R from R = I, layers start_layer .. last in order.
// start_layer == last_layer() + 1 yields I.
Tensor relevance_rollout(const AttentionTrace& trace, std::size_t start_layer = 1);

struct RelevanceResult {
  Tensor R;
  // Text: one score per real word (begin/end/padding removed).
  // Image: one score per patch, row-major over the patch grid.
  std::vector<double> token_scores;
  // Image only: min-max normalized patch grid and its bilinear upsampling.
  GrayMap patch_heatmap;
  GrayMap heatmap;
};

// Text: `length` is the count of non-padding tokens (begin and end included).
RelevanceResult extract_text_scores(const Tensor& R, std::size_t pooling_index, std::size_t length);
// Image: slot 0 is the class token; patches follow row-major on a
// patch_grid x patch_grid grid, upsampled to tile_size x tile_size.
RelevanceResult extract_image_scores(const Tensor& R, std::size_t pooling_index, std::size_t patch_grid,
                                     std::size_t tile_size);

// Min-max to [0, 1]; a constant map becomes all zeros.
void minmax_normalize(std::vector<double>& values);

// Align-corners bilinear resampling: output pixel p samples source
// coordinate p * (n - 1) / (size - 1).
GrayMap upsample_bilinear(const GrayMap& src, std::size_t size);

// Category -> word list. Categories are kept in insertion order.
class CategoryLexicon {
 public:
  CategoryLexicon() = default;
  void add(const std::string& category, std::vector<std::string> words);

  const std::vector<std::string>& categories() const { return order_; }
  const std::vector<std::string>& words(const std::string& category) const;
  std::optional<std::string> category_of(const std::string& word) const;

  // Eight built-in categories sized for the synthetic corpus vocabulary.
  static CategoryLexicon defaults();
  // {"Category": ["word", ...], ...}; throws FormatError on overlap or bad shape.
  static CategoryLexicon load(const std::filesystem::path& path);
  std::string to_json() const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, std::vector<std::string>> words_;
  std::map<std::string, std::string> index_;
};

struct CategoryScores {
  // Mean score per category; categories without hits are absent.
  std::map<std::string, double> means;
  std::optional<double> uncategorized;

  std::string to_json() const;
};

CategoryScores categorize_attention(std::span<const double> token_scores, std::span<const std::string> tokens,
                                    const CategoryLexicon& lexicon);

// Relevance for one (query, candidate tile) pair, attributed to the pair's
// own similarity score. Both towers share one tape, one backward pass.
struct PairRelevance {
  double similarity = 0.0;
  AttentionTrace query_trace;
  AttentionTrace image_trace;
  RelevanceResult query;
  RelevanceResult image;
};

PairRelevance explain_pair(const encoders::DualEncoder& model, const encoders::QueryInput& query, const Raster& tile,
                           std::size_t start_layer = 1);

}  // namespace cvloc::relevance
