#pragma once

#include <string>
#include <vector>

#include "cvloc/numerics/ops.hpp"

namespace cvloc::training {

using numerics::Tensor;
using numerics::Var;

enum class LossMode {
  // Mean of the image->text and text->image matched-pair cross entropies.
  symmetric_infonce,
  // Double sum of -log softmax over every (i, j) cell, row-normalized over texts.
  double_sum,
};

LossMode parse_loss_mode(const std::string& name);
const char* loss_mode_name(LossMode mode);

// S[i][j] = <v_i, t_j>. Rows of both inputs must be unit vectors.
Tensor similarity_matrix(const Tensor& images, const Tensor& texts);

// Differentiable loss over a square similarity matrix scaled by exp(logit_scale).
Var contrastive_loss(Var similarity, Var logit_scale, LossMode mode = LossMode::symmetric_infonce);

// Value-level evaluation at a fixed temperature tau > 0.
double contrastive_loss(const Tensor& similarity, double tau, LossMode mode = LossMode::symmetric_infonce);

}  // namespace cvloc::training
