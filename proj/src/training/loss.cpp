#include "cvloc/training/loss.hpp"

#include <cmath>
#include <string>

#include "cvloc/errors.hpp"

namespace cvloc::training {

LossMode parse_loss_mode(const std::string& name) {
  if (name == "symmetric_infonce") return LossMode::symmetric_infonce;
  if (name == "double_sum") return LossMode::double_sum;
  throw ParameterError("unknown loss mode '" + name + "'");
}

const char* loss_mode_name(LossMode mode) {
  return mode == LossMode::symmetric_infonce ? "symmetric_infonce" : "double_sum";
}

Tensor similarity_matrix(const Tensor& images, const Tensor& texts) {
  if (images.rank() != 2 || texts.rank() != 2 || images.rows() != texts.rows() || images.cols() != texts.cols()) {
    throw DimensionError("similarity_matrix: " + numerics::shape_string(images.shape()) + " images vs " +
                         numerics::shape_string(texts.shape()) + " texts");
  }
  for (const Tensor* m : {&images, &texts}) {
    for (std::size_t r = 0; r < m->rows(); ++r) {
      double ss = 0.0;
      for (std::size_t c = 0; c < m->cols(); ++c) ss += m->at(r, c) * m->at(r, c);
      if (std::abs(std::sqrt(ss) - 1.0) > 1e-6) {
        throw ContractError("similarity_matrix: row " + std::to_string(r) + " is not unit length");
      }
    }
  }
  return numerics::matmul_nt(images, texts);
}

Var contrastive_loss(Var similarity, Var logit_scale, LossMode mode) {
  using namespace numerics;
  const Tensor& s = similarity.value();
  if (s.rank() != 2 || s.rows() != s.cols()) {
    throw DimensionError("contrastive_loss: similarity must be square, got " + shape_string(s.shape()));
  }
  Var logits = scale_by(similarity, numerics::exp(logit_scale));
  if (mode == LossMode::double_sum) {
    return scale(sum(log_softmax_rows(logits)), -1.0);
  }
  Var image_to_text = mean(diagonal(log_softmax_rows(logits)));
  Var text_to_image = mean(diagonal(log_softmax_rows(transpose(logits))));
  return scale(add(image_to_text, text_to_image), -0.5);
}

double contrastive_loss(const Tensor& similarity, double tau, LossMode mode) {
  if (!(tau > 0.0)) throw ParameterError("contrastive_loss: temperature must be positive, got " + std::to_string(tau));
  numerics::Tape tape(false);
  Var s = tape.constant(similarity);
  Var scale = tape.constant(Tensor::scalar(-std::log(tau)));
  return contrastive_loss(s, scale, mode).value().item();
}

}  // namespace cvloc::training
