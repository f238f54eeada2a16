#include "cvloc/encoders/model.hpp"

#include <cmath>
#include <random>

#include "cvloc/encoders/positional.hpp"
#include "cvloc/errors.hpp"

namespace cvloc::encoders {

void EncoderConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ParameterError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                         std::to_string(n_heads) + ")");
  }
  if (n_layers == 0) throw ParameterError("n_layers must be positive");
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw ParameterError("image_size (" + std::to_string(image_size) + ") must be divisible by patch_size (" +
                         std::to_string(patch_size) + ")");
  }
  if (base_context < 2 || expanded_context < base_context) {
    throw ParameterError("contexts must satisfy expanded >= base >= 2, got base " +
                         std::to_string(base_context) + ", expanded " + std::to_string(expanded_context));
  }
  if (embed_dim == 0 || mlp_ratio == 0) throw ParameterError("embed_dim and mlp_ratio must be positive");
  if (vocab_size < 4) throw ParameterError("vocab_size must cover the four reserved markers");
}

namespace {

Tensor random_tensor(numerics::Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = dist(rng);
  return t;
}

std::string layer_name(std::size_t l, const char* leaf) { return "layers." + std::to_string(l) + "." + leaf; }

}  // namespace

EncoderModel::EncoderModel(Tower tower, const EncoderConfig& config, std::uint64_t seed)
    : tower_(tower), config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed ^ (tower == Tower::text ? 0x7e47ULL : 0x1a6eULL));
  const std::size_t d = config_.d_model;
  const std::size_t hidden = d * config_.mlp_ratio;
  const double lin = 1.0 / std::sqrt(static_cast<double>(d));

  if (tower_ == Tower::text) {
    add("token_embedding", random_tensor({config_.vocab_size, d}, 0.02, rng));
    add("positional", random_tensor({config_.base_context, d}, 0.01, rng));
  } else {
    const std::size_t patch_dim = config_.patch_size * config_.patch_size * 3;
    add("patch_embedding", random_tensor({patch_dim, d}, 1.0 / std::sqrt(static_cast<double>(patch_dim)), rng));
    add("patch_bias", Tensor({d}));
    add("class_token", random_tensor({1, d}, 0.02, rng));
    add("positional", random_tensor({config_.image_tokens(), d}, 0.01, rng));
  }
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    add(layer_name(l, "ln1.gain"), Tensor({d}, 1.0));
    add(layer_name(l, "ln1.bias"), Tensor({d}));
    add(layer_name(l, "attn.wq"), random_tensor({d, d}, lin, rng));
    add(layer_name(l, "attn.bq"), Tensor({d}));
    add(layer_name(l, "attn.wk"), random_tensor({d, d}, lin, rng));
    add(layer_name(l, "attn.bk"), Tensor({d}));
    add(layer_name(l, "attn.wv"), random_tensor({d, d}, lin, rng));
    add(layer_name(l, "attn.bv"), Tensor({d}));
    add(layer_name(l, "attn.wo"), random_tensor({d, d}, lin, rng));
    add(layer_name(l, "attn.bo"), Tensor({d}));
    add(layer_name(l, "ln2.gain"), Tensor({d}, 1.0));
    add(layer_name(l, "ln2.bias"), Tensor({d}));
    add(layer_name(l, "mlp.w1"), random_tensor({d, hidden}, lin, rng));
    add(layer_name(l, "mlp.b1"), Tensor({hidden}));
    add(layer_name(l, "mlp.w2"), random_tensor({hidden, d}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng));
    add(layer_name(l, "mlp.b2"), Tensor({d}));
  }
  add("final_ln.gain", Tensor({d}, 1.0));
  add("final_ln.bias", Tensor({d}));
  add("projection", random_tensor({d, config_.embed_dim}, lin, rng));
}

void EncoderModel::add(std::string name, Tensor value) { params_.push_back({std::move(name), std::move(value)}); }

Tensor& EncoderModel::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw ContractError("no parameter named " + std::string(name));
}

const Tensor& EncoderModel::parameter(std::string_view name) const {
  return const_cast<EncoderModel*>(this)->parameter(name);
}

std::size_t EncoderModel::context_length() const { return parameter("positional").rows(); }

void EncoderModel::expand_context(std::size_t target_rows) {
  if (tower_ != Tower::text) throw ContractError("expand_context applies to the text tower only");
  Tensor& table = parameter("positional");
  table = expand_positional_embedding(table, target_rows);
}

DualEncoder DualEncoder::create(const EncoderConfig& config, std::uint64_t seed, Tower query_tower) {
  DualEncoder model;
  model.config = config;
  model.query = EncoderModel(query_tower, config, seed);
  // Distinct stream so an image query tower does not mirror the reference tower.
  model.reference = EncoderModel(Tower::image, config, seed + 0x9e3779b97f4a7c15ULL);
  if (query_tower == Tower::text && config.expanded_context > config.base_context) {
    model.query.expand_context(config.expanded_context);
  }
  return model;
}

double DualEncoder::temperature() const { return 1.0 / std::exp(logit_scale.item()); }

void DualEncoder::clamp_logit_scale() {
  if (logit_scale[0] > kMaxLogitScale) logit_scale[0] = kMaxLogitScale;
}

std::vector<std::pair<std::string, Tensor*>> DualEncoder::trainable() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& p : query.parameters()) out.emplace_back("query." + p.name, &p.value);
  for (auto& p : reference.parameters()) out.emplace_back("reference." + p.name, &p.value);
  out.emplace_back("logit_scale", &logit_scale);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> DualEncoder::trainable() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<DualEncoder*>(this)->trainable()) out.emplace_back(name, t);
  return out;
}

namespace {

struct Bound {
  const EncoderModel& model;
  std::vector<Var> vars;

  Var operator()(std::string_view name) const {
    const auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name == name) return vars[i];
    }
    throw ContractError("no parameter named " + std::string(name));
  }
};

Bound bind(Tape& tape, const EncoderModel& model) {
  Bound b{model, {}};
  b.vars.reserve(model.parameters().size());
  for (const auto& p : model.parameters()) b.vars.push_back(tape.parameter(p.value, tape.grad_enabled()));
  return b;
}

Var linear(Var x, Var w, Var b) { return numerics::add_row(numerics::matmul(x, w), b); }

// Pre-norm blocks over x [T x d]; masked columns are excluded as attention keys.
Var run_blocks(Var x, const Bound& p, const EncoderConfig& cfg, const std::vector<bool>* key_mask,
               ForwardOptions options, std::vector<std::vector<Var>>& attention) {
  using namespace numerics;
  Tape& tape = *x.tape();
  const std::size_t dh = cfg.head_dim();
  const double temperature = std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Var h = layer_norm(x, p(layer_name(l, "ln1.gain")), p(layer_name(l, "ln1.bias")));
    Var q = linear(h, p(layer_name(l, "attn.wq")), p(layer_name(l, "attn.bq")));
    Var k = linear(h, p(layer_name(l, "attn.wk")), p(layer_name(l, "attn.bk")));
    Var v = linear(h, p(layer_name(l, "attn.wv")), p(layer_name(l, "attn.bv")));
    std::vector<Var> heads;
    std::vector<Var> probs;
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      Var qh = slice_cols(q, hd * dh, dh);
      Var kh = slice_cols(k, hd * dh, dh);
      Var vh = slice_cols(v, hd * dh, dh);
      Var a = softmax_rows(matmul_nt(qh, kh), temperature, key_mask);
      if (options.retain_attention) tape.retain_grad(a);
      probs.push_back(a);
      heads.push_back(matmul(a, vh));
    }
    attention.push_back(std::move(probs));
    Var attn = heads.size() == 1 ? heads.front() : concat_cols(heads);
    x = add(x, linear(attn, p(layer_name(l, "attn.wo")), p(layer_name(l, "attn.bo"))));
    Var h2 = layer_norm(x, p(layer_name(l, "ln2.gain")), p(layer_name(l, "ln2.bias")));
    Var m = gelu(linear(h2, p(layer_name(l, "mlp.w1")), p(layer_name(l, "mlp.b1"))));
    x = add(x, linear(m, p(layer_name(l, "mlp.w2")), p(layer_name(l, "mlp.b2"))));
  }
  return x;
}

Var pool_and_project(Var x, std::size_t index, const Bound& p) {
  using namespace numerics;
  Var pooled = slice_rows(x, index, 1);
  pooled = layer_norm(pooled, p("final_ln.gain"), p("final_ln.bias"));
  return l2_normalize_rows(matmul(pooled, p("projection")));
}

std::vector<double> to_vector(Var v) {
  const auto d = v.value().data();
  return {d.begin(), d.end()};
}

}  // namespace

TowerOutput forward_text(Tape& tape, const EncoderModel& model, const TokenSequence& seq, ForwardOptions options) {
  if (model.tower() != Tower::text) throw ContractError("forward_text needs a text tower");
  const auto& cfg = model.config();
  const std::size_t t = seq.ids.size();
  if (t > model.context_length()) {
    throw ContractError("sequence of " + std::to_string(t) + " tokens exceeds context " +
                        std::to_string(model.context_length()));
  }
  if (seq.length < 2 || seq.length > t) throw ContractError("token sequence length is inconsistent with its ids");
  for (auto id : seq.ids) {
    if (id >= cfg.vocab_size) throw ContractError("token id " + std::to_string(id) + " outside vocabulary");
  }

  Bound p = bind(tape, model);
  TowerOutput out;
  out.tokens = t;
  out.pooled_index = seq.end_position();

  Var x = numerics::add(numerics::gather_rows(p("token_embedding"), seq.ids),
                        numerics::slice_rows(p("positional"), 0, t));
  std::vector<bool> mask;
  const bool padded = seq.length < t;
  if (padded) {
    mask.assign(t, false);
    for (std::size_t i = seq.length; i < t; ++i) mask[i] = true;
  }
  x = run_blocks(x, p, cfg, padded ? &mask : nullptr, options, out.attention);
  out.embedding = pool_and_project(x, out.pooled_index, p);
  out.params = std::move(p.vars);
  return out;
}

Tensor patchify(const Raster& tile, std::size_t patch_size) {
  if (tile.width != tile.height || patch_size == 0 || tile.width % patch_size != 0) {
    throw DimensionError("patchify: raster " + std::to_string(tile.width) + "x" + std::to_string(tile.height) +
                         " does not split into " + std::to_string(patch_size) + "-pixel patches");
  }
  const std::size_t grid = tile.width / patch_size;
  const std::size_t dim = patch_size * patch_size * 3;
  Tensor out({grid * grid, dim});
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      double* row = out.data().data() + (gy * grid + gx) * dim;
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch_size; ++y) {
        for (std::size_t x = 0; x < patch_size; ++x) {
          const auto* px = tile.pixel(gx * patch_size + x, gy * patch_size + y);
          for (int c = 0; c < 3; ++c) row[k++] = px[c] / 255.0;
        }
      }
    }
  }
  return out;
}

TowerOutput forward_image(Tape& tape, const EncoderModel& model, const Raster& tile, ForwardOptions options) {
  if (model.tower() != Tower::image) throw ContractError("forward_image needs an image tower");
  const auto& cfg = model.config();
  if (tile.width != cfg.image_size || tile.height != cfg.image_size || tile.rgb.size() != tile.width * tile.height * 3) {
    throw DimensionError("tile is " + std::to_string(tile.width) + "x" + std::to_string(tile.height) +
                         ", encoder expects " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  Bound p = bind(tape, model);
  TowerOutput out;
  out.tokens = cfg.image_tokens();
  out.pooled_index = 0;

  Var patches = tape.constant(patchify(tile, cfg.patch_size));
  Var embedded = linear(patches, p("patch_embedding"), p("patch_bias"));
  Var x = numerics::add(numerics::concat_rows({p("class_token"), embedded}), p("positional"));
  x = run_blocks(x, p, cfg, nullptr, options, out.attention);
  out.embedding = pool_and_project(x, 0, p);
  out.params = std::move(p.vars);
  return out;
}

std::vector<double> encode_text(const TokenSequence& seq, const EncoderModel& model) {
  Tape tape(false);
  return to_vector(forward_text(tape, model, seq).embedding);
}

std::vector<double> encode_image(const Raster& tile, const EncoderModel& model) {
  Tape tape(false);
  return to_vector(forward_image(tape, model, tile).embedding);
}

TowerOutput forward_query(Tape& tape, const EncoderModel& model, const QueryInput& input, ForwardOptions options) {
  return model.tower() == Tower::text ? forward_text(tape, model, input.text, options)
                                      : forward_image(tape, model, input.image, options);
}

std::vector<double> encode_query(const QueryInput& input, const EncoderModel& model) {
  Tape tape(false);
  return to_vector(forward_query(tape, model, input).embedding);
}

}  // namespace cvloc::encoders
