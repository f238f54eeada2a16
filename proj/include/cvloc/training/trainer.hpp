#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cvloc/encoders/model.hpp"
#include "cvloc/training/loss.hpp"
#include "cvloc/training/optimizer.hpp"

namespace cvloc::training {

using encoders::DualEncoder;

// One matched (query, reference tile) example. `location` identifies the
// place; two pairs with the same location never share a batch.
struct TrainingPair {
  encoders::QueryInput query;
  Raster image;
  std::string location;
};

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  double base_lr = 3e-4;
  std::uint64_t seed = 0;
  LossMode loss_mode = LossMode::symmetric_infonce;
  // Worker threads for per-example passes; 0 picks hardware concurrency.
  std::size_t threads = 0;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
  double wallclock_s = 0.0;
};

struct BatchGradients {
  double loss = 0.0;
  // Aligned with DualEncoder::trainable().
  std::vector<Tensor> grads;
};

// Cosine decay: base_lr * (1 + cos(pi * step / total_steps)) / 2.
double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps);

// Loss only (no tape recording).
double batch_loss(const DualEncoder& model, std::span<const TrainingPair> batch, LossMode mode,
                  std::size_t threads = 1);

// Loss and gradients for every trainable tensor. Each example runs on its own
// tape; the similarity/loss tape is seeded first and its embedding gradients
// are pushed back through the per-example tapes. The reduction order is fixed,
// so the result does not depend on `threads`.
BatchGradients batch_gradients(const DualEncoder& model, std::span<const TrainingPair> batch, LossMode mode,
                               std::size_t threads = 1);

// Shuffled batches of indices in which no batch repeats a location.
std::vector<std::vector<std::size_t>> make_batches(std::span<const TrainingPair> data, std::size_t batch_size,
                                                   std::uint64_t seed);

class Trainer {
 public:
  Trainer(DualEncoder& model, TrainConfig config, std::size_t dataset_size);

  EpochMetrics train_epoch(std::span<const TrainingPair> data);
  void train(std::span<const TrainingPair> data, const std::function<void(const EpochMetrics&)>& on_epoch = {});

  std::size_t step() const { return step_; }
  std::size_t total_steps() const { return total_steps_; }
  std::size_t epoch() const { return epoch_; }
  const Adam& optimizer() const { return optimizer_; }
  const TrainConfig& config() const { return config_; }

 private:
  DualEncoder& model_;
  TrainConfig config_;
  Adam optimizer_;
  std::size_t total_steps_ = 0;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
};

// Tab-separated: epoch, mean_loss, lr, wallclock_s.
void write_log_line(std::ostream& out, const EpochMetrics& m);

}  // namespace cvloc::training
