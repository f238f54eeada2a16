#pragma once

#include <cstddef>

namespace cvloc::encoders {

struct EncoderConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  // Positional table length the text tower is created with.
  std::size_t base_context = 77;
  // Length the table is stretched to before training.
  std::size_t expanded_context = 300;
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t embed_dim = 128;
  std::size_t mlp_ratio = 4;

  // Throws ParameterError when an invariant does not hold.
  void validate() const;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t patch_grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return patch_grid() * patch_grid(); }
  // Patch tokens plus the class slot.
  std::size_t image_tokens() const { return num_patches() + 1; }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

}  // namespace cvloc::encoders
