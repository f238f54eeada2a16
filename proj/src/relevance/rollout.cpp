#include "cvloc/relevance/rollout.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cvloc/errors.hpp"
#include "json.hpp"

namespace cvloc::relevance {

using nlohmann::json;

void AttentionTrace::validate() const {
  if (attention.size() != gradients.size()) throw DimensionError("trace has unequal attention/gradient layer counts");
  for (std::size_t l = 0; l < attention.size(); ++l) {
    if (attention[l].size() != gradients[l].size() || attention[l].empty()) {
      throw DimensionError("trace layer " + std::to_string(first_layer + l) + " has mismatched head counts");
    }
    for (std::size_t h = 0; h < attention[l].size(); ++h) {
      const Tensor& a = attention[l][h];
      if (a.shape() != numerics::Shape{tokens, tokens} || gradients[l][h].shape() != a.shape()) {
        throw DimensionError("trace layer " + std::to_string(first_layer + l) + " head " + std::to_string(h) +
                             " is " + numerics::shape_string(a.shape()) + ", expected " + std::to_string(tokens) +
                             "x" + std::to_string(tokens));
      }
      for (std::size_t r = 0; r < tokens; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < tokens; ++c) s += a.at(r, c);
        if (std::abs(s - 1.0) > 1e-6) {
          throw ContractError("attention row " + std::to_string(r) + " of layer " +
                              std::to_string(first_layer + l) + " sums to " + std::to_string(s));
        }
      }
    }
  }
}

AttentionTrace capture_trace(const encoders::TowerOutput& out, Var target, TraceModality modality,
                             std::size_t start_layer) {
  if (start_layer == 0) throw ParameterError("start layer is 1-based");
  if (out.attention.empty()) throw ContractError("capture_trace: forward pass recorded no attention");
  numerics::Tape& tape = *target.tape();
  for (const auto& layer : out.attention) {
    for (const Var& a : layer) {
      if (a.tape() != &tape) throw ContractError("capture_trace: attention and target live on different tapes");
      if (!tape.retains_grad(a)) {
        throw ContractError("capture_trace: attention gradients are not retained; run the forward pass with "
                            "retain_attention");
      }
    }
  }
  tape.backward(target);

  AttentionTrace trace;
  trace.modality = modality;
  trace.tokens = out.tokens;
  trace.first_layer = start_layer;
  for (std::size_t l = start_layer - 1; l < out.attention.size(); ++l) {
    std::vector<Tensor> probs, grads;
    for (const Var& a : out.attention[l]) {
      probs.push_back(a.value());
      const Tensor* g = a.grad();
      grads.push_back(g ? *g : Tensor(a.value().shape()));
    }
    trace.attention.push_back(std::move(probs));
    trace.gradients.push_back(std::move(grads));
  }
  return trace;
}

Tensor relevance_rollout(const AttentionTrace& trace, std::size_t start_layer) {
  if (start_layer < trace.first_layer) {
    throw ContractError("rollout from layer " + std::to_string(start_layer) + " but the trace starts at layer " +
                        std::to_string(trace.first_layer));
  }
  if (start_layer > trace.last_layer() + 1) {
    throw ContractError("rollout start layer " + std::to_string(start_layer) + " leaves a gap after layer " +
                        std::to_string(trace.last_layer()));
  }
  if (trace.attention.size() != trace.gradients.size()) {
    throw DimensionError("trace has unequal attention/gradient layer counts");
  }
  const std::size_t n = trace.tokens;
  Tensor R = Tensor::identity(n);
  for (std::size_t l = start_layer - trace.first_layer; l < trace.attention.size(); ++l) {
    const auto& heads = trace.attention[l];
    if (heads.empty() || trace.gradients[l].size() != heads.size()) {
      throw DimensionError("trace layer " + std::to_string(trace.first_layer + l) + " has mismatched heads");
    }
    Tensor abar({n, n});
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const Tensor& a = heads[h];
      const Tensor& g = trace.gradients[l][h];
      if (a.shape() != abar.shape() || g.shape() != abar.shape()) {
        throw DimensionError("trace layer " + std::to_string(trace.first_layer + l) + " head shape " +
                             numerics::shape_string(a.shape()) + " does not match " + std::to_string(n) + " tokens");
      }
      for (std::size_t i = 0; i < abar.numel(); ++i) abar[i] += std::max(0.0, g[i] * a[i]);
    }
    const double inv_h = 1.0 / static_cast<double>(heads.size());
    for (auto& v : abar.storage()) v *= inv_h;
    const Tensor update = numerics::matmul(abar, R);
    for (std::size_t i = 0; i < R.numel(); ++i) R[i] += update[i];
  }
  return R;
}

void minmax_normalize(std::vector<double>& values) {
  if (values.empty()) return;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double min = *lo, range = *hi - *lo;
  for (auto& v : values) v = range > 0.0 ? (v - min) / range : 0.0;
}

GrayMap upsample_bilinear(const GrayMap& src, std::size_t size) {
  if (src.width == 0 || src.height == 0 || size == 0) throw DimensionError("upsample_bilinear: empty map");
  GrayMap out{size, size, std::vector<double>(size * size, 0.0)};
  const auto coord = [&](std::size_t p, std::size_t n) {
    return size == 1 ? 0.0 : static_cast<double>(p) * static_cast<double>(n - 1) / static_cast<double>(size - 1);
  };
  for (std::size_t y = 0; y < size; ++y) {
    const double sy = coord(y, src.height);
    const std::size_t y0 = static_cast<std::size_t>(std::floor(sy));
    const std::size_t y1 = std::min(y0 + 1, src.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double sx = coord(x, src.width);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(sx));
      const std::size_t x1 = std::min(x0 + 1, src.width - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = src.at(x0, y0) * (1 - fx) + src.at(x1, y0) * fx;
      const double bottom = src.at(x0, y1) * (1 - fx) + src.at(x1, y1) * fx;
      out.at(x, y) = top * (1 - fy) + bottom * fy;
    }
  }
  return out;
}

namespace {

std::vector<double> pooled_row(const Tensor& R, std::size_t pooling_index) {
  if (R.rank() != 2 || R.rows() != R.cols()) throw DimensionError("relevance matrix must be square");
  if (pooling_index >= R.rows()) {
    throw ContractError("pooling index " + std::to_string(pooling_index) + " outside " + std::to_string(R.rows()) +
                        " tokens");
  }
  const auto d = R.data();
  return {d.begin() + static_cast<std::ptrdiff_t>(pooling_index * R.cols()),
          d.begin() + static_cast<std::ptrdiff_t>((pooling_index + 1) * R.cols())};
}

}  // namespace

RelevanceResult extract_text_scores(const Tensor& R, std::size_t pooling_index, std::size_t length) {
  const auto row = pooled_row(R, pooling_index);
  if (length < 2 || length > row.size()) throw ContractError("text length inconsistent with relevance matrix");
  RelevanceResult out;
  out.R = R;
  // Position 0 is the begin marker, length - 1 the end marker, beyond that padding.
  out.token_scores.assign(row.begin() + 1, row.begin() + static_cast<std::ptrdiff_t>(length - 1));
  return out;
}

RelevanceResult extract_image_scores(const Tensor& R, std::size_t pooling_index, std::size_t patch_grid,
                                     std::size_t tile_size) {
  const auto row = pooled_row(R, pooling_index);
  if (patch_grid == 0 || row.size() != patch_grid * patch_grid + 1) {
    throw DimensionError("relevance matrix of " + std::to_string(row.size()) + " tokens does not match a " +
                         std::to_string(patch_grid) + "x" + std::to_string(patch_grid) + " patch grid plus class slot");
  }
  RelevanceResult out;
  out.R = R;
  out.token_scores.assign(row.begin() + 1, row.end());
  std::vector<double> normalized = out.token_scores;
  minmax_normalize(normalized);
  out.patch_heatmap = GrayMap{patch_grid, patch_grid, std::move(normalized)};
  out.heatmap = upsample_bilinear(out.patch_heatmap, tile_size);
  // Bilinear values stay inside the source range, but renormalize so the map spans [0, 1] exactly.
  minmax_normalize(out.heatmap.values);
  return out;
}

void CategoryLexicon::add(const std::string& category, std::vector<std::string> words) {
  if (words_.count(category)) throw FormatError("category " + category + " defined twice");
  for (auto& w : words) {
    for (char c : w) {
      if (c >= 'A' && c <= 'Z') throw FormatError("lexicon word '" + w + "' is not lowercase");
    }
    if (auto it = index_.find(w); it != index_.end()) {
      throw FormatError("word '" + w + "' appears in both " + it->second + " and " + category);
    }
    index_[w] = category;
  }
  order_.push_back(category);
  words_[category] = std::move(words);
}

const std::vector<std::string>& CategoryLexicon::words(const std::string& category) const {
  auto it = words_.find(category);
  if (it == words_.end()) throw ContractError("unknown category " + category);
  return it->second;
}

std::optional<std::string> CategoryLexicon::category_of(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

CategoryLexicon CategoryLexicon::defaults() {
  CategoryLexicon lex;
  lex.add("LandMarker", {"restaurant", "cafe", "bank", "pharmacy", "hotel", "bookstore", "bakery", "supermarket",
                         "landmark", "monument", "statue", "tower", "church", "stop"});
  lex.add("SignName", {"burger", "royal",   "lucky",   "happy",  "urban",  "grand",   "little",  "metro",
                       "star",   "ocean",   "maple",   "liberty", "harbor", "summit", "pioneer", "crystal",
                       "empire", "sunrise", "velvet",  "atlas",  "mania",  "palace",  "house",   "express",
                       "garden", "plaza",   "kitchen", "market", "studio", "lounge",  "depot",   "works",
                       "hub",    "point",   "bistro",  "station", "square", "den",    "emporium", "haven",
                       "sign",   "named",   "called"});
  lex.add("Road", {"road", "street", "lane", "lanes", "crossing", "zebra", "pedestrian", "sidewalks", "sidewalk",
                   "curb", "gutter"});
  lex.add("Building", {"building", "buildings", "facade", "brick", "glass", "concrete", "wood", "stone", "metal",
                       "densely", "loosely", "packed", "balcony", "window", "rooftops"});
  lex.add("Vegetation", {"trees", "tree", "shade", "grass", "park", "leaves"});
  lex.add("Vehicle", {"cars", "car", "vehicles", "traffic", "van", "bus", "cyclist"});
  lex.add("Sky", {"sky", "clear", "cloudy", "overcast", "hazy"});
  lex.add("Weather", {"rain", "sunny", "breeze", "puddle", "raincoat", "wind", "snow"});
  return lex;
}

CategoryLexicon CategoryLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read lexicon " + path.string());
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in, nullptr, true, false);
  } catch (const nlohmann::ordered_json::exception& e) {
    throw FormatError("lexicon " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw FormatError("lexicon must be a JSON object of word lists");
  CategoryLexicon lex;
  // File order is category order.
  for (auto& [name, list] : j.items()) {
    if (!list.is_array()) throw FormatError("lexicon category " + name + " is not a list");
    std::vector<std::string> words;
    for (const auto& w : list) {
      if (!w.is_string()) throw FormatError("lexicon category " + name + " holds a non-string entry");
      words.push_back(w.get<std::string>());
    }
    lex.add(name, std::move(words));
  }
  return lex;
}

std::string CategoryLexicon::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& c : order_) j[c] = words_.at(c);
  return j.dump(2);
}

std::string CategoryScores::to_json() const {
  json j = json::object();
  for (const auto& [k, v] : means) j[k] = v;
  if (uncategorized) j["uncategorized"] = *uncategorized;
  return j.dump();
}

CategoryScores categorize_attention(std::span<const double> token_scores, std::span<const std::string> tokens,
                                    const CategoryLexicon& lexicon) {
  if (token_scores.size() != tokens.size()) {
    throw DimensionError("categorize_attention: " + std::to_string(token_scores.size()) + " scores for " +
                         std::to_string(tokens.size()) + " tokens");
  }
  std::map<std::string, std::pair<double, std::size_t>> acc;
  double other = 0.0;
  std::size_t other_n = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (auto c = lexicon.category_of(tokens[i])) {
      auto& [sum, n] = acc[*c];
      sum += token_scores[i];
      ++n;
    } else {
      other += token_scores[i];
      ++other_n;
    }
  }
  CategoryScores out;
  for (const auto& [c, sn] : acc) out.means[c] = sn.first / static_cast<double>(sn.second);
  if (other_n > 0) out.uncategorized = other / static_cast<double>(other_n);
  return out;
}

PairRelevance explain_pair(const encoders::DualEncoder& model, const encoders::QueryInput& query, const Raster& tile,
                           std::size_t start_layer) {
  numerics::Tape tape;
  const encoders::ForwardOptions opts{.retain_attention = true};
  const auto q = encoders::forward_query(tape, model.query, query, opts);
  const auto v = encoders::forward_image(tape, model.reference, tile, opts);
  Var sim = numerics::dot(q.embedding, v.embedding);

  PairRelevance out;
  out.similarity = sim.value().item();
  const bool text = model.query.tower() == encoders::Tower::text;
  // One backward fills the gradients for both towers; the second capture only copies.
  out.query_trace = capture_trace(q, sim, text ? TraceModality::text : TraceModality::image, start_layer);
  out.image_trace.modality = TraceModality::image;
  out.image_trace.tokens = v.tokens;
  out.image_trace.first_layer = start_layer;
  for (std::size_t l = start_layer - 1; l < v.attention.size(); ++l) {
    std::vector<Tensor> probs, grads;
    for (const Var& a : v.attention[l]) {
      probs.push_back(a.value());
      grads.push_back(a.grad() ? *a.grad() : Tensor(a.value().shape()));
    }
    out.image_trace.attention.push_back(std::move(probs));
    out.image_trace.gradients.push_back(std::move(grads));
  }

  const auto& cfg = model.config;
  const Tensor rq = relevance_rollout(out.query_trace, start_layer);
  out.query = text ? extract_text_scores(rq, q.pooled_index, query.text.length)
                   : extract_image_scores(rq, q.pooled_index, cfg.patch_grid(), cfg.image_size);
  out.image = extract_image_scores(relevance_rollout(out.image_trace, start_layer), v.pooled_index, cfg.patch_grid(),
                                   cfg.image_size);
  return out;
}

}  // namespace cvloc::relevance
