#include "cvloc/training/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <random>
#include <thread>
#include <unordered_set>

#include "cvloc/errors.hpp"

namespace cvloc::training {

namespace {

using numerics::Tape;

// Gradients are summed per shard (contiguous example ranges) and shards are
// merged in order, so results are identical for any thread count.
constexpr std::size_t kShards = 8;

std::size_t resolve_threads(std::size_t threads) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  return threads;
}

void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(resolve_threads(threads), count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < threads; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

struct Embedded {
  Tensor images;  // [n x e]
  Tensor texts;   // [n x e]
};

Embedded embed_batch(const DualEncoder& model, std::span<const TrainingPair> batch, std::size_t threads) {
  const std::size_t n = batch.size();
  const std::size_t e = model.config.embed_dim;
  Embedded out{Tensor({n, e}), Tensor({n, e})};
  parallel_for(n, threads, [&](std::size_t i) {
    const auto t = encoders::encode_query(batch[i].query, model.query);
    const auto v = encoders::encode_image(batch[i].image, model.reference);
    std::copy(t.begin(), t.end(), out.texts.data().begin() + static_cast<std::ptrdiff_t>(i * e));
    std::copy(v.begin(), v.end(), out.images.data().begin() + static_cast<std::ptrdiff_t>(i * e));
  });
  return out;
}

void add_into(Tensor& dst, const Tensor& src) {
  for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

Tensor row_of(const Tensor& m, std::size_t r) {
  const std::size_t c = m.cols();
  return Tensor({1, c}, std::vector<double>(m.data().begin() + static_cast<std::ptrdiff_t>(r * c),
                                            m.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * c)));
}

}  // namespace

double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return base_lr;
  const double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double batch_loss(const DualEncoder& model, std::span<const TrainingPair> batch, LossMode mode, std::size_t threads) {
  if (batch.empty()) throw ContractError("batch_loss: empty batch");
  const Embedded emb = embed_batch(model, batch, threads);
  Tape tape(false);
  Var s = tape.constant(numerics::matmul_nt(emb.images, emb.texts));
  Var scale = tape.constant(model.logit_scale);
  return contrastive_loss(s, scale, mode).value().item();
}

BatchGradients batch_gradients(const DualEncoder& model, std::span<const TrainingPair> batch, LossMode mode,
                               std::size_t threads) {
  if (batch.empty()) throw ContractError("batch_gradients: empty batch");
  const std::size_t n = batch.size();
  const std::size_t e = model.config.embed_dim;
  const std::size_t n_text = model.query.parameters().size();
  const std::size_t n_image = model.reference.parameters().size();

  // Pass 1: forward every example on its own tape.
  std::vector<std::unique_ptr<Tape>> text_tapes(n), image_tapes(n);
  std::vector<encoders::TowerOutput> text_out(n), image_out(n);
  Tensor texts({n, e}), images({n, e});
  parallel_for(n, threads, [&](std::size_t i) {
    text_tapes[i] = std::make_unique<Tape>();
    image_tapes[i] = std::make_unique<Tape>();
    text_out[i] = encoders::forward_query(*text_tapes[i], model.query, batch[i].query);
    image_out[i] = encoders::forward_image(*image_tapes[i], model.reference, batch[i].image);
    const auto t = text_out[i].embedding.value().data();
    const auto v = image_out[i].embedding.value().data();
    std::copy(t.begin(), t.end(), texts.data().begin() + static_cast<std::ptrdiff_t>(i * e));
    std::copy(v.begin(), v.end(), images.data().begin() + static_cast<std::ptrdiff_t>(i * e));
  });

  // Pass 2: loss over the embedding matrices.
  Tape loss_tape;
  Var v_leaf = loss_tape.leaf(images);
  Var t_leaf = loss_tape.leaf(texts);
  Var s_leaf = loss_tape.leaf(model.logit_scale);
  Var loss = contrastive_loss(numerics::matmul_nt(v_leaf, t_leaf), s_leaf, mode);
  loss_tape.backward(loss);

  BatchGradients out;
  out.loss = loss.value().item();
  const Tensor d_images = *v_leaf.grad();
  const Tensor d_texts = *t_leaf.grad();

  // Pass 3: push embedding gradients through each example's towers.
  const std::size_t shards = std::min(kShards, n);
  std::vector<std::vector<Tensor>> shard_grads(shards);
  parallel_for(shards, threads, [&](std::size_t s) {
    auto& acc = shard_grads[s];
    for (const auto& p : model.query.parameters()) acc.emplace_back(p.value.shape());
    for (const auto& p : model.reference.parameters()) acc.emplace_back(p.value.shape());
    const std::size_t begin = s * n / shards;
    const std::size_t end = (s + 1) * n / shards;
    for (std::size_t i = begin; i < end; ++i) {
      Tape& tt = *text_tapes[i];
      tt.backward(numerics::dot(text_out[i].embedding, tt.constant(row_of(d_texts, i))));
      for (std::size_t k = 0; k < n_text; ++k) {
        if (const Tensor* g = text_out[i].params[k].grad()) add_into(acc[k], *g);
      }
      text_tapes[i].reset();
      Tape& it = *image_tapes[i];
      it.backward(numerics::dot(image_out[i].embedding, it.constant(row_of(d_images, i))));
      for (std::size_t k = 0; k < n_image; ++k) {
        if (const Tensor* g = image_out[i].params[k].grad()) add_into(acc[n_text + k], *g);
      }
      image_tapes[i].reset();
    }
  });

  out.grads = std::move(shard_grads[0]);
  for (std::size_t s = 1; s < shards; ++s) {
    for (std::size_t k = 0; k < out.grads.size(); ++k) add_into(out.grads[k], shard_grads[s][k]);
  }
  out.grads.push_back(*s_leaf.grad());
  return out;
}

std::vector<std::vector<std::size_t>> make_batches(std::span<const TrainingPair> data, std::size_t batch_size,
                                                   std::uint64_t seed) {
  if (batch_size == 0) throw ParameterError("batch_size must be positive");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> pending = std::move(order);
  while (!pending.empty()) {
    std::vector<std::size_t> batch, deferred;
    std::unordered_set<std::string> seen;
    for (std::size_t idx : pending) {
      if (batch.size() < batch_size && seen.insert(data[idx].location).second) {
        batch.push_back(idx);
      } else {
        deferred.push_back(idx);
      }
    }
    batches.push_back(std::move(batch));
    pending = std::move(deferred);
  }
  return batches;
}

Trainer::Trainer(DualEncoder& model, TrainConfig config, std::size_t dataset_size)
    : model_(model), config_(config), optimizer_([&] {
        std::vector<Tensor*> params;
        for (auto& [name, t] : model.trainable()) params.push_back(t);
        return params;
      }()) {
  if (config_.batch_size == 0) throw ParameterError("batch_size must be positive");
  if (!(config_.base_lr >= 0.0)) throw ParameterError("base_lr must be non-negative");
  const std::size_t per_epoch = (dataset_size + config_.batch_size - 1) / config_.batch_size;
  total_steps_ = per_epoch * config_.epochs;
}

EpochMetrics Trainer::train_epoch(std::span<const TrainingPair> data) {
  if (data.empty()) throw ContractError("train_epoch: empty corpus");
  const auto start = std::chrono::steady_clock::now();
  const auto batches = make_batches(data, config_.batch_size, config_.seed * 1000003ULL + epoch_);
  double loss_sum = 0.0;
  double lr = 0.0;
  std::vector<TrainingPair> scratch;
  for (const auto& idx : batches) {
    scratch.clear();
    for (std::size_t i : idx) scratch.push_back(data[i]);
    BatchGradients g = batch_gradients(model_, scratch, config_.loss_mode, config_.threads);
    lr = cosine_lr(config_.base_lr, step_, total_steps_);
    optimizer_.step(g.grads, lr);
    model_.clamp_logit_scale();
    loss_sum += g.loss;
    ++step_;
  }
  ++epoch_;
  EpochMetrics m;
  m.epoch = epoch_;
  m.mean_loss = loss_sum / static_cast<double>(batches.size());
  m.lr = lr;
  m.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

void Trainer::train(std::span<const TrainingPair> data, const std::function<void(const EpochMetrics&)>& on_epoch) {
  while (epoch_ < config_.epochs) {
    const EpochMetrics m = train_epoch(data);
    if (on_epoch) on_epoch(m);
  }
}

void write_log_line(std::ostream& out, const EpochMetrics& m) {
  out << m.epoch << '\t' << m.mean_loss << '\t' << m.lr << '\t' << m.wallclock_s << '\n';
}

}  // namespace cvloc::training
