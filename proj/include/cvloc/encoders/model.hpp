#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "cvloc/encoders/config.hpp"
#include "cvloc/encoders/tokenizer.hpp"
#include "cvloc/numerics/ops.hpp"
#include "cvloc/util/raster.hpp"

namespace cvloc::encoders {

using numerics::Tape;
using numerics::Tensor;
using numerics::Var;

enum class Tower { text, image };

struct NamedTensor {
  std::string name;
  Tensor value;
};

// Parameters of one transformer tower. Parameter order is fixed at
// construction and is the order used by checkpoints and optimizers.
class EncoderModel {
 public:
  EncoderModel() = default;
  EncoderModel(Tower tower, const EncoderConfig& config, std::uint64_t seed);

  Tower tower() const { return tower_; }
  const EncoderConfig& config() const { return config_; }

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  Tensor& parameter(std::string_view name);
  const Tensor& parameter(std::string_view name) const;

  // Rows of the positional table (text: max sequence length, image: token count).
  std::size_t context_length() const;

  // Replaces the text positional table with its linear stretch to `target_rows`.
  void expand_context(std::size_t target_rows);

 private:
  void add(std::string name, Tensor value);

  Tower tower_ = Tower::text;
  EncoderConfig config_;
  std::vector<NamedTensor> params_;
};

// Query tower (text, or image for image-query retrieval), reference image
// tower and the shared temperature, tau = 1 / exp(logit_scale).
struct DualEncoder {
  static constexpr double kMaxLogitScale = 4.605170185988092;  // ln(100)
  static constexpr double kInitLogitScale = 2.659260036932778;  // ln(1 / 0.07)

  EncoderConfig config;
  EncoderModel query;
  EncoderModel reference;
  Tensor logit_scale = Tensor::scalar(kInitLogitScale);

  // Builds both towers; a text query tower is created with base_context
  // positions and then stretched to expanded_context.
  static DualEncoder create(const EncoderConfig& config, std::uint64_t seed, Tower query_tower = Tower::text);

  double temperature() const;
  void clamp_logit_scale();

  // Flat (name, tensor) view over every trainable tensor, prefixed by tower.
  std::vector<std::pair<std::string, Tensor*>> trainable();
  std::vector<std::pair<std::string, const Tensor*>> trainable() const;
};

// Forward pass artefacts of a single input through one tower.
struct TowerOutput {
  Var embedding;                           // [1 x embed_dim], unit norm
  std::vector<std::vector<Var>> attention;  // [layer][head], tokens x tokens
  std::vector<Var> params;                  // same order as EncoderModel::parameters()
  std::size_t pooled_index = 0;
  std::size_t tokens = 0;
};

struct ForwardOptions {
  // Flags every attention-probability node for gradient retention.
  bool retain_attention = false;
};

TowerOutput forward_text(Tape& tape, const EncoderModel& model, const TokenSequence& seq,
                         ForwardOptions options = {});
TowerOutput forward_image(Tape& tape, const EncoderModel& model, const Raster& tile,
                          ForwardOptions options = {});

// Patch matrix [num_patches x patch*patch*3] with channels scaled to [0, 1].
Tensor patchify(const Raster& tile, std::size_t patch_size);

// Gradient-free convenience encoders returning unit vectors.
std::vector<double> encode_text(const TokenSequence& seq, const EncoderModel& model);
std::vector<double> encode_image(const Raster& tile, const EncoderModel& model);

// Input to a query tower: `text` for a text tower, `image` for an image tower.
struct QueryInput {
  TokenSequence text;
  Raster image;
};

TowerOutput forward_query(Tape& tape, const EncoderModel& model, const QueryInput& input,
                          ForwardOptions options = {});
std::vector<double> encode_query(const QueryInput& input, const EncoderModel& model);

// Checkpoint: magic, version, config, then named tensors as 32-bit floats.
void save_checkpoint(const std::filesystem::path& path, const DualEncoder& model);
DualEncoder load_checkpoint(const std::filesystem::path& path);

}  // namespace cvloc::encoders
