#include "cvloc/training/gradient_check.hpp"

#include <algorithm>
#include <cmath>

namespace cvloc::training {

bool GradientReport::pass() const {
  return std::all_of(groups.begin(), groups.end(), [](const GroupReport& g) { return g.pass; });
}

double GradientReport::worst_rel_error() const {
  double worst = 0.0;
  for (const auto& g : groups) worst = std::max(worst, g.max_rel_error);
  return worst;
}

GradientReport gradient_check(DualEncoder& model, std::span<const TrainingPair> batch, double h, double rtol,
                              LossMode mode) {
  GradientReport report;
  report.step = h;
  report.rtol = rtol;
  const BatchGradients analytic = batch_gradients(model, batch, mode);
  auto params = model.trainable();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& [name, tensor] = params[k];
    GroupReport group;
    group.name = name;
    group.entries = tensor->numel();
    for (std::size_t i = 0; i < tensor->numel(); ++i) {
      const double saved = (*tensor)[i];
      (*tensor)[i] = saved + h;
      const double up = batch_loss(model, batch, mode);
      (*tensor)[i] = saved - h;
      const double down = batch_loss(model, batch, mode);
      (*tensor)[i] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double g = analytic.grads[k][i];
      const double abs_err = std::abs(g - fd);
      const double rel_err = abs_err / std::max({std::abs(g), std::abs(fd), kRelativeErrorFloor});
      group.max_abs_error = std::max(group.max_abs_error, abs_err);
      group.max_rel_error = std::max(group.max_rel_error, rel_err);
    }
    group.pass = group.max_rel_error < rtol;
    report.groups.push_back(std::move(group));
  }
  return report;
}

}  // namespace cvloc::training
