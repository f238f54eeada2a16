#pragma once

#include <cstddef>
#include <vector>

#include "cvloc/numerics/tensor.hpp"

namespace cvloc::training {

using numerics::Tensor;

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment optimizer state for a fixed list of parameter tensors.
class Adam {
 public:
  using Hyper = AdamHyper;

  explicit Adam(std::vector<Tensor*> params, Hyper hyper = {});

  // One bias-corrected update; grads align with the constructor's params.
  void step(const std::vector<Tensor>& grads, double lr);

  std::size_t steps() const { return step_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  const Hyper& hyper() const { return hyper_; }

 private:
  std::vector<Tensor*> params_;
  Hyper hyper_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t step_ = 0;
};

}  // namespace cvloc::training
