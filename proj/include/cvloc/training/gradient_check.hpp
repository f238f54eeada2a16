#pragma once

#include <span>
#include <string>
#include <vector>

#include "cvloc/training/trainer.hpp"

namespace cvloc::training {

struct GroupReport {
  std::string name;
  std::size_t entries = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
  bool pass = true;
};

struct GradientReport {
  double step = 0.0;
  double rtol = 0.0;
  std::vector<GroupReport> groups;

  bool pass() const;
  double worst_rel_error() const;
};

// Relative error of one entry: |tape - fd| / max(|tape|, |fd|, floor). The
// floor keeps entries whose true gradient is ~0 from dividing by noise.
inline constexpr double kRelativeErrorFloor = 1e-6;

// Central finite differences of batch_loss against batch_gradients for every
// trainable tensor (both towers, positional tables, logit scale).
GradientReport gradient_check(DualEncoder& model, std::span<const TrainingPair> batch, double h = 1e-5,
                              double rtol = 1e-4, LossMode mode = LossMode::symmetric_infonce);

}  // namespace cvloc::training
