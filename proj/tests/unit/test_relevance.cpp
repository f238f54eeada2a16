#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cvloc/errors.hpp"
#include "cvloc/relevance/rollout.hpp"

using namespace cvloc;
using namespace cvloc::relevance;
using numerics::Tensor;

namespace {

Tensor random_stochastic(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  Tensor a({n, n});
  for (std::size_t r = 0; r < n; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += (a.at(r, c) = u(rng));
    for (std::size_t c = 0; c < n; ++c) a.at(r, c) /= s;
  }
  return a;
}

AttentionTrace random_trace(std::size_t tokens, std::size_t layers, std::size_t heads, std::mt19937_64& rng,
                            double grad_mean = 0.0) {
  std::normal_distribution<double> g(grad_mean, 1.0);
  AttentionTrace t;
  t.tokens = tokens;
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<Tensor> a, d;
    for (std::size_t h = 0; h < heads; ++h) {
      a.push_back(random_stochastic(tokens, rng));
      Tensor grad({tokens, tokens});
      for (auto& v : grad.storage()) v = g(rng);
      d.push_back(std::move(grad));
    }
    t.attention.push_back(std::move(a));
    t.gradients.push_back(std::move(d));
  }
  return t;
}

// Straight transcription of the update for an independent oracle.
Tensor rollout_oracle(const AttentionTrace& t, std::size_t start) {
  const std::size_t n = t.tokens;
  std::vector<double> r(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) r[i * n + i] = 1.0;
  for (std::size_t l = start - t.first_layer; l < t.attention.size(); ++l) {
    std::vector<double> abar(n * n, 0.0);
    const double heads = static_cast<double>(t.attention[l].size());
    for (std::size_t h = 0; h < t.attention[l].size(); ++h) {
      for (std::size_t k = 0; k < n * n; ++k) {
        abar[k] += std::max(0.0, t.gradients[l][h][k] * t.attention[l][h][k]) / heads;
      }
    }
    std::vector<double> next = r;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) next[i * n + j] += abar[i * n + k] * r[k * n + j];
    r = next;
  }
  return Tensor({n, n}, r);
}

encoders::DualEncoder tiny_model(std::size_t vocab, std::size_t layers, std::uint64_t seed) {
  encoders::EncoderConfig c;
  c.vocab_size = vocab;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = layers;
  c.embed_dim = 6;
  c.base_context = 8;
  c.expanded_context = 8;
  c.image_size = 8;
  c.patch_size = 4;
  c.mlp_ratio = 2;
  return encoders::DualEncoder::create(c, seed);
}

}  // namespace

TEST_CASE("rollout hand case") {
  AttentionTrace t;
  t.tokens = 2;
  t.attention = {{Tensor::matrix({{.5, .5}, {.5, .5}})}};
  t.gradients = {{Tensor({2, 2}, 1.0)}};
  const auto r = relevance_rollout(t);
  CHECK(r == Tensor::matrix({{1.5, .5}, {.5, 1.5}}));
}

TEST_CASE("rollout is the identity under zero or negative gradients and for an empty range") {
  std::mt19937_64 rng(1);
  auto t = random_trace(5, 3, 2, rng);
  for (auto& layer : t.gradients)
    for (auto& g : layer) g.fill(0.0);
  CHECK(relevance_rollout(t) == Tensor::identity(5));
  for (auto& layer : t.gradients)
    for (auto& g : layer)
      for (auto& v : g.storage()) v = -std::abs(v) - 0.1;
  CHECK(relevance_rollout(t) == Tensor::identity(5));

  auto live = random_trace(5, 3, 2, rng, 1.0);
  CHECK(relevance_rollout(live, 4) == Tensor::identity(5));
  CHECK_THROWS_AS(relevance_rollout(live, 5), ContractError);
}

TEST_CASE("rollout properties over random traces") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t n = 2 + trial % 7, layers = 1 + trial % 4, heads = 1 + trial % 3;
    const auto t = random_trace(n, layers, heads, rng, trial % 2 ? 0.5 : -0.2);
    const auto r = relevance_rollout(t);
    CHECK(numerics::max_abs_diff(r, rollout_oracle(t, 1)) < 1e-12);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(r.at(i, i) >= 1.0);
      for (std::size_t j = 0; j < n; ++j) CHECK(r.at(i, j) >= 0.0);
    }
    // Dropping the last layer can only shrink entries.
    if (layers > 1) {
      auto shorter = t;
      shorter.attention.pop_back();
      shorter.gradients.pop_back();
      const auto rs = relevance_rollout(shorter);
      for (std::size_t k = 0; k < r.numel(); ++k) CHECK(rs[k] <= r[k] + 1e-15);
    }
  }
}

TEST_CASE("score extraction") {
  const auto text = extract_text_scores(Tensor::identity(6), 5, 6);
  CHECK(text.token_scores.size() == 4);
  for (double v : text.token_scores) CHECK(v == 0.0);

  const auto flat = extract_image_scores(Tensor({5, 5}, 0.3), 0, 2, 8);
  for (double v : flat.patch_heatmap.values) CHECK(v == 0.0);
  for (double v : flat.heatmap.values) CHECK(v == 0.0);
}

TEST_CASE("upsampling an 8x8 patch grid to 64x64 keeps the argmax cell") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t g = 8;
    Tensor r({g * g + 1, g * g + 1});
    for (std::size_t c = 1; c <= g * g; ++c) r.at(0, c) = u(rng);
    const auto res = extract_image_scores(r, 0, g, 64);
    std::size_t best = 0;
    for (std::size_t k = 1; k < g * g; ++k)
      if (res.token_scores[k] > res.token_scores[best]) best = k;
    std::size_t px = 0;
    for (std::size_t k = 1; k < res.heatmap.values.size(); ++k)
      if (res.heatmap.values[k] > res.heatmap.values[px]) px = k;
    const std::size_t x = px % 64, y = px / 64;
    // Align-corners sampling: patch centre (c) lands on pixel c * 63 / 7 = 9c.
    CHECK(x / 9 == best % g);
    CHECK(y / 9 == best / g);
    CHECK(res.heatmap.values[px] == doctest::Approx(1.0));
  }
}

TEST_CASE("min-max normalization") {
  std::vector<double> v = {2, 4, 6};
  minmax_normalize(v);
  CHECK(v == std::vector<double>{0, 0.5, 1});
  std::vector<double> c = {3, 3};
  minmax_normalize(c);
  CHECK(c == std::vector<double>{0, 0});
}

TEST_CASE("category scoring") {
  CategoryLexicon lex;
  lex.add("SignName", {"burger", "mania"});
  lex.add("Road", {"road"});
  const std::vector<std::string> tokens = {"burger", "mania", "road"};
  const std::vector<double> scores = {2, 4, 6};
  const auto s = categorize_attention(scores, tokens, lex);
  CHECK(s.means.at("SignName") == 3.0);
  CHECK(s.means.at("Road") == 6.0);
  CHECK(!s.uncategorized);

  const std::vector<double> scaled = {5, 10, 15};
  const auto s2 = categorize_attention(scaled, tokens, lex);
  CHECK(s2.means.at("SignName") == doctest::Approx(2.5 * 3.0));

  const std::vector<std::string> other = {"the", "a", "of"};
  const auto none = categorize_attention(scores, other, lex);
  CHECK(none.means.empty());
  CHECK(*none.uncategorized == 4.0);
}

TEST_CASE("lexicon file round trip and overlap check") {
  const auto dir = std::filesystem::temp_directory_path() / "cvloc_lexicon_test";
  std::filesystem::create_directories(dir);
  const auto defaults = CategoryLexicon::defaults();
  CHECK(defaults.categories().size() == 8);
  {
    std::ofstream out(dir / "lex.json");
    out << defaults.to_json();
  }
  const auto back = CategoryLexicon::load(dir / "lex.json");
  CHECK(back.categories() == defaults.categories());
  {
    std::ofstream out(dir / "bad.json");
    out << R"({"A": ["x"], "B": ["x"]})";
  }
  CHECK_THROWS_AS(CategoryLexicon::load(dir / "bad.json"), FormatError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("capture trace requires retained attention") {
  const auto vocab_size = 10;
  const auto model = tiny_model(vocab_size, 1, 1);
  numerics::Tape tape;
  encoders::TokenSequence seq{{2, 5, 6, 3}, 4};
  const auto out = encoders::forward_text(tape, model.query, seq);
  CHECK_THROWS_AS(capture_trace(out, numerics::sum(out.embedding), TraceModality::text), ContractError);
}

TEST_CASE("constant targets give zero attention gradients and identity relevance") {
  const auto model = tiny_model(10, 2, 2);
  numerics::Tape tape;
  encoders::TokenSequence seq{{2, 5, 6, 7, 3}, 5};
  const auto out = encoders::forward_text(tape, model.query, seq, {.retain_attention = true});
  Var target = numerics::sum(numerics::scale(out.embedding, 0.0));
  const auto trace = capture_trace(out, target, TraceModality::text);
  for (const auto& layer : trace.gradients)
    for (const auto& g : layer)
      for (double v : g.data()) CHECK(v == 0.0);
  CHECK(relevance_rollout(trace) == Tensor::identity(5));
}

TEST_CASE("captured attention gradients match finite differences of the attention entries") {
  // One attention layer built by hand so A can be perturbed directly:
  // target(A) = <w, A (X Wv)>.
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  const auto rand = [&](std::size_t r, std::size_t c) {
    Tensor t({r, c});
    for (auto& v : t.storage()) v = n(rng);
    return t;
  };
  const Tensor x = rand(4, 3), wq = rand(3, 3), wk = rand(3, 3), wv = rand(3, 3), w = rand(4, 3);

  numerics::Tape tape;
  Var xv = tape.leaf(x, true);
  Var a = numerics::softmax_rows(numerics::matmul_nt(numerics::matmul(xv, tape.constant(wq)),
                                                     numerics::matmul(xv, tape.constant(wk))),
                                 std::sqrt(3.0));
  tape.retain_grad(a);
  Var values = numerics::matmul(xv, tape.constant(wv));
  Var target = numerics::dot(numerics::matmul(a, values), tape.constant(w));
  encoders::TowerOutput out;
  out.attention = {{a}};
  out.tokens = 4;
  const auto trace = capture_trace(out, target, TraceModality::text);

  const Tensor v = numerics::matmul(x, wv);
  const auto f = [&](const Tensor& att) {
    const Tensor o = numerics::matmul(att, v);
    double s = 0.0;
    for (std::size_t k = 0; k < o.numel(); ++k) s += o[k] * w[k];
    return s;
  };
  Tensor att = a.value();
  const double h = 1e-6;
  for (std::size_t k = 0; k < att.numel(); ++k) {
    const double keep = att[k];
    att[k] = keep + h;
    const double up = f(att);
    att[k] = keep - h;
    const double down = f(att);
    att[k] = keep;
    const double fd = (up - down) / (2.0 * h);
    const double g = trace.gradients[0][0][k];
    CHECK(std::abs(g - fd) <= 1e-3 * std::max({std::abs(g), std::abs(fd), 1e-6}));
  }

  // Determinism: the same pass again yields the same trace.
  numerics::Tape tape2;
  Var xv2 = tape2.leaf(x, true);
  Var a2 = numerics::softmax_rows(numerics::matmul_nt(numerics::matmul(xv2, tape2.constant(wq)),
                                                      numerics::matmul(xv2, tape2.constant(wk))),
                                  std::sqrt(3.0));
  tape2.retain_grad(a2);
  Var t2 = numerics::dot(numerics::matmul(a2, numerics::matmul(xv2, tape2.constant(wv))), tape2.constant(w));
  encoders::TowerOutput out2;
  out2.attention = {{a2}};
  out2.tokens = 4;
  const auto trace2 = capture_trace(out2, t2, TraceModality::text);
  CHECK(trace2.gradients[0][0] == trace.gradients[0][0]);
  CHECK(trace2.attention[0][0] == trace.attention[0][0]);
}

TEST_CASE("pair relevance is deterministic and sized to the inputs") {
  const auto model = tiny_model(10, 2, 4);
  encoders::QueryInput q;
  q.text = encoders::TokenSequence{{2, 4, 8, 5, 3}, 5};
  Raster tile(8, 8);
  for (std::size_t i = 0; i < tile.rgb.size(); ++i) tile.rgb[i] = static_cast<std::uint8_t>(i * 37);
  const auto a = explain_pair(model, q, tile);
  const auto b = explain_pair(model, q, tile);
  CHECK(a.similarity == b.similarity);
  CHECK(a.query.token_scores == b.query.token_scores);
  CHECK(a.image.heatmap.values == b.image.heatmap.values);
  CHECK(a.query.token_scores.size() == 3);
  CHECK(a.image.token_scores.size() == 4);
  CHECK(a.image.heatmap.width == 8);
  const double direct = [&] {
    const auto t = encoders::encode_text(q.text, model.query);
    const auto v = encoders::encode_image(tile, model.reference);
    double s = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * v[i];
    return s;
  }();
  CHECK(a.similarity == doctest::Approx(direct).epsilon(1e-12));
}
