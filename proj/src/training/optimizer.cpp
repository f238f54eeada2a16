#include "cvloc/training/optimizer.hpp"

#include <cmath>

#include "cvloc/errors.hpp"

namespace cvloc::training {

Adam::Adam(std::vector<Tensor*> params, Hyper hyper) : params_(std::move(params)), hyper_(hyper) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor* p : params_) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void Adam::step(const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params_.size()) {
    throw DimensionError("Adam::step: " + std::to_string(grads.size()) + " gradients for " +
                         std::to_string(params_.size()) + " parameters");
  }
  ++step_;
  const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& p = *params_[k];
    const Tensor& g = grads[k];
    if (g.shape() != p.shape()) {
      throw DimensionError("Adam::step: gradient " + numerics::shape_string(g.shape()) + " for parameter " +
                           numerics::shape_string(p.shape()));
    }
    double* m = m_[k].data().data();
    double* v = v_[k].data().data();
    double* w = p.data().data();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g[i];
      v[i] = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + hyper_.eps);
    }
  }
}

}  // namespace cvloc::training
