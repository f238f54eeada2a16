#include "cvloc/geoindex/index.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <unordered_map>

#include "cvloc/errors.hpp"
#include "json.hpp"

namespace cvloc::geoindex {

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'V', 'L', 'O', 'C', 'I', 'D', 'X'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError("index file truncated");
  return v;
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint32_t>(in);
  if (n > (1u << 20)) throw FormatError("index string length " + std::to_string(n) + " is implausible");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw FormatError("index file truncated");
  return s;
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

void ReferenceIndex::validate() const {
  for (const auto& e : entries) {
    if (e.embedding.size() != embed_dim) {
      throw ContractError("entry " + e.id + " has " + std::to_string(e.embedding.size()) + " dims, index expects " +
                          std::to_string(embed_dim));
    }
    // Embeddings round-trip through float32, so allow that much slack.
    if (std::abs(norm(e.embedding) - 1.0) > 1e-5) throw ContractError("entry " + e.id + " embedding is not unit norm");
    if (e.modality != modality) throw ContractError("entry " + e.id + " has the wrong modality");
  }
}

const ReferenceEntry* ReferenceIndex::find(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.id == id) return &e;
  }
  return nullptr;
}

void save_index(const std::filesystem::path& path, const ReferenceIndex& index) {
  index.validate();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write beside the target, then rename over it so readers never see a partial file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write index " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(out, kVersion);
    put<std::uint32_t>(out, index.modality == Modality::osm ? 0 : 1);
    put<std::uint64_t>(out, index.embed_dim);
    put<std::uint64_t>(out, index.entries.size());
    for (const auto& e : index.entries) {
      put_string(out, e.id);
      put<double>(out, e.location.lat);
      put<double>(out, e.location.lon);
      put<std::int32_t>(out, e.zoom);
      for (double v : e.embedding) put<float>(out, static_cast<float>(v));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(e.tags.size()));
      for (const auto& t : e.tags) put_string(out, t);
      put_string(out, e.tile_path);
    }
    if (!out) throw Error("failed writing index " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ReferenceIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read index " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw FormatError(path.string() + " is not an index file");
  if (const auto v = get<std::uint32_t>(in); v != kVersion) {
    throw FormatError("unsupported index version " + std::to_string(v));
  }
  ReferenceIndex index;
  const auto mod = get<std::uint32_t>(in);
  if (mod > 1) throw FormatError("unknown modality code " + std::to_string(mod));
  index.modality = mod == 0 ? Modality::osm : Modality::satellite;
  index.embed_dim = get<std::uint64_t>(in);
  const auto count = get<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    ReferenceEntry e;
    e.modality = index.modality;
    e.id = get_string(in);
    e.location.lat = get<double>(in);
    e.location.lon = get<double>(in);
    e.zoom = get<std::int32_t>(in);
    e.embedding.resize(index.embed_dim);
    for (auto& v : e.embedding) v = get<float>(in);
    // Renormalize after the float32 round trip.
    const double n = norm(e.embedding);
    if (n > 0.0) {
      for (auto& v : e.embedding) v /= n;
    }
    const auto tags = get<std::uint32_t>(in);
    for (std::uint32_t t = 0; t < tags; ++t) e.tags.push_back(get_string(in));
    e.tile_path = get_string(in);
    index.entries.push_back(std::move(e));
  }
  index.validate();
  return index;
}

IndexHandle::IndexHandle(ReferenceIndex index) : current_(std::make_shared<const ReferenceIndex>(std::move(index))) {}

std::shared_ptr<const ReferenceIndex> IndexHandle::snapshot() const {
  std::lock_guard lock(mutex_);
  return current_;
}

void IndexHandle::swap(ReferenceIndex index) {
  auto next = std::make_shared<const ReferenceIndex>(std::move(index));
  std::lock_guard lock(mutex_);
  current_ = std::move(next);
}

void IndexHandle::reload(const std::filesystem::path& path) { swap(load_index(path)); }

std::vector<const ReferenceEntry*> neighborhood(std::span<const ReferenceEntry> refs, LatLon center, std::size_t M) {
  if (M > refs.size()) {
    throw ContractError("window of " + std::to_string(M) + " exceeds the " + std::to_string(refs.size()) +
                        " available references");
  }
  std::vector<std::pair<double, const ReferenceEntry*>> d;
  d.reserve(refs.size());
  for (const auto& r : refs) d.emplace_back(haversine(center, r.location), &r);
  const auto less = [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second->id < b.second->id;
  };
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(M), d.end(), less);
  std::vector<const ReferenceEntry*> out;
  out.reserve(M);
  for (std::size_t i = 0; i < M; ++i) out.push_back(d[i].second);
  return out;
}

QueryResult rank_scores(std::span<const double> scores, std::span<const ReferenceEntry* const> window, std::size_t K) {
  if (window.empty()) throw ContractError("retrieve: empty window");
  if (scores.size() != window.size()) throw DimensionError("retrieve: scores and window differ in length");
  if (K > window.size()) {
    throw ContractError("K = " + std::to_string(K) + " exceeds window of " + std::to_string(window.size()));
  }
  std::vector<std::size_t> order(window.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(K), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : window[a]->id < window[b]->id;
                    });
  QueryResult r;
  for (std::size_t i = 0; i < K; ++i) {
    const auto* e = window[order[i]];
    r.candidates.push_back({e->id, scores[order[i]], e->location, 0.0});
  }
  return r;
}

QueryResult retrieve(std::span<const double> query, std::span<const ReferenceEntry* const> window, std::size_t K) {
  if (window.empty()) throw ContractError("retrieve: empty window");
  std::vector<double> scores(window.size());
  for (std::size_t i = 0; i < window.size(); ++i) {
    const auto& e = window[i]->embedding;
    if (e.size() != query.size()) {
      throw DimensionError("query has " + std::to_string(query.size()) + " dims, reference " + window[i]->id +
                           " has " + std::to_string(e.size()));
    }
    double s = 0.0;
    for (std::size_t k = 0; k < e.size(); ++k) s += query[k] * e[k];
    scores[i] = s;
  }
  return rank_scores(scores, window, K);
}

void attach_truth(QueryResult& result, const std::string& truth_id, LatLon truth) {
  result.truth_id = truth_id;
  result.truth_location = truth;
  for (auto& c : result.candidates) c.error_m = haversine(c.location, truth);
}

double recall_at_k(std::span<const QueryResult> results, std::size_t K) {
  if (results.empty()) throw ContractError("recall_at_k: no results");
  std::size_t hits = 0;
  for (const auto& r : results) {
    if (!r.truth_id) throw ContractError("recall_at_k: result without ground truth");
    if (K > r.candidates.size()) {
      throw ContractError("K = " + std::to_string(K) + " exceeds a result list of " +
                          std::to_string(r.candidates.size()));
    }
    for (std::size_t i = 0; i < K; ++i) {
      if (r.candidates[i].id == *r.truth_id) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double localization_recall(std::span<const QueryResult> results, double threshold_m) {
  if (results.empty()) throw ContractError("localization_recall: no results");
  std::size_t hits = 0;
  for (const auto& r : results) {
    if (!r.truth_location) throw ContractError("localization_recall: result without true coordinates");
    if (r.candidates.empty()) throw ContractError("localization_recall: empty result");
    const double err = haversine(r.candidates.front().location, *r.truth_location);
    // Exact matches always count, so L@0 reports exact-coordinate hits.
    if (err < threshold_m || (threshold_m <= 0.0 && err == 0.0)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

numerics::Tensor fuse_scores(const numerics::Tensor& s_image, const numerics::Tensor& s_text, double w) {
  if (s_image.shape() != s_text.shape() || s_image.rank() != 2) {
    throw DimensionError("fuse_scores: shapes " + numerics::shape_string(s_image.shape()) + " and " +
                         numerics::shape_string(s_text.shape()) + " differ");
  }
  if (!(w >= 0.0 && w <= 1.0)) throw ParameterError("fusion weight must lie in [0, 1]");
  const auto normalized = [](const numerics::Tensor& s) {
    numerics::Tensor out = s;
    for (std::size_t r = 0; r < s.rows(); ++r) {
      double lo = s.at(r, 0), hi = s.at(r, 0);
      for (std::size_t c = 0; c < s.cols(); ++c) {
        lo = std::min(lo, s.at(r, c));
        hi = std::max(hi, s.at(r, c));
      }
      for (std::size_t c = 0; c < s.cols(); ++c) out.at(r, c) = hi > lo ? (s.at(r, c) - lo) / (hi - lo) : 0.0;
    }
    return out;
  };
  const auto a = normalized(s_image), b = normalized(s_text);
  numerics::Tensor out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (1.0 - w) * a[i] + w * b[i];
  return out;
}

namespace {

std::size_t max_k(const EvalOptions& o) {
  std::size_t k = 1;
  for (auto x : o.ks) k = std::max(k, x);
  return k;
}

LatLon window_center(LatLon truth, const EvalOptions& o, std::mt19937_64& rng) {
  if (o.window_noise_m <= 0.0) return truth;
  std::normal_distribution<double> n(0.0, o.window_noise_m);
  const double m_per_deg = 2.0 * std::numbers::pi * kEarthRadiusM / 360.0;
  const double dn = n(rng), de = n(rng);
  return {truth.lat + dn / m_per_deg, truth.lon + de / (m_per_deg * std::cos(truth.lat * std::numbers::pi / 180.0))};
}

}  // namespace

std::vector<QueryResult> run_queries(std::span<const EvalQuery> queries, const ReferenceIndex& refs,
                                     const EvalOptions& options) {
  std::mt19937_64 rng(options.noise_seed);
  const std::size_t K = std::min(max_k(options), options.M);
  std::vector<QueryResult> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    const auto window = neighborhood(refs.entries, window_center(q.location, options, rng), options.M);
    QueryResult r = retrieve(q.embedding, window, K);
    attach_truth(r, q.truth_id, q.location);
    out.push_back(std::move(r));
  }
  return out;
}

MetricsReport summarize(std::span<const QueryResult> results, const std::string& modality, const EvalOptions& options) {
  MetricsReport m;
  m.modality = modality;
  m.queries = results.size();
  m.M = options.M;
  for (auto k : options.ks) m.recall[k] = recall_at_k(results, k);
  for (auto t : options.thresholds) m.localization[t] = localization_recall(results, t);
  return m;
}

MetricsReport evaluate(std::span<const EvalQuery> queries, const ReferenceIndex& refs, const EvalOptions& options) {
  const auto results = run_queries(queries, refs, options);
  return summarize(results, modality_name(refs.modality), options);
}

MetricsReport evaluate_fused(std::span<const EvalQuery> image_queries, const ReferenceIndex& image_refs,
                             std::span<const EvalQuery> text_queries, const ReferenceIndex& text_refs, double w,
                             const EvalOptions& options) {
  if (image_queries.size() != text_queries.size()) throw DimensionError("fused evaluation needs paired queries");
  std::unordered_map<std::string, const ReferenceEntry*> text_by_id;
  for (const auto& e : text_refs.entries) text_by_id[e.id] = &e;
  std::mt19937_64 rng(options.noise_seed);
  const std::size_t K = std::min(max_k(options), options.M);
  std::vector<QueryResult> results;
  for (std::size_t qi = 0; qi < image_queries.size(); ++qi) {
    const auto& qa = image_queries[qi];
    const auto& qb = text_queries[qi];
    if (qa.truth_id != qb.truth_id) throw ContractError("fused queries " + qa.truth_id + " and " + qb.truth_id + " differ");
    const auto window = neighborhood(image_refs.entries, window_center(qa.location, options, rng), options.M);
    numerics::Tensor sa({1, window.size()}), sb({1, window.size()});
    for (std::size_t j = 0; j < window.size(); ++j) {
      const auto it = text_by_id.find(window[j]->id);
      if (it == text_by_id.end()) throw ContractError("reference " + window[j]->id + " missing from the text index");
      for (std::size_t k = 0; k < qa.embedding.size(); ++k) sa.at(0, j) += qa.embedding[k] * window[j]->embedding[k];
      for (std::size_t k = 0; k < qb.embedding.size(); ++k) sb.at(0, j) += qb.embedding[k] * it->second->embedding[k];
    }
    const auto fused = fuse_scores(sa, sb, w);
    QueryResult r = rank_scores(fused.data(), window, K);
    attach_truth(r, qa.truth_id, qa.location);
    results.push_back(std::move(r));
  }
  return summarize(results, "fused", options);
}

double select_fusion_weight(std::span<const EvalQuery> image_queries, const ReferenceIndex& image_refs,
                            std::span<const EvalQuery> text_queries, const ReferenceIndex& text_refs,
                            const EvalOptions& options) {
  EvalOptions o = options;
  o.ks = {1};
  o.thresholds.clear();
  double best_w = 0.0, best = -1.0;
  for (int step = 0; step <= 10; ++step) {
    const double w = step / 10.0;
    const double r1 = evaluate_fused(image_queries, image_refs, text_queries, text_refs, w, o).recall.at(1);
    if (r1 > best) {
      best = r1;
      best_w = w;
    }
  }
  return best_w;
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["v"] = 1;
  j["modality"] = modality;
  j["queries"] = queries;
  j["M"] = M;
  for (const auto& [k, v] : recall) j["recall"]["R@" + std::to_string(k)] = v;
  for (const auto& [t, v] : localization) {
    std::ostringstream key;
    key << "L@" << t;
    j["localization"][key.str()] = v;
  }
  return j.dump(2);
}

std::string MetricsReport::to_table(std::span<const MetricsReport> reports) {
  std::vector<std::string> header = {"modality", "queries", "M"};
  if (!reports.empty()) {
    for (const auto& [k, v] : reports.front().recall) header.push_back("R@" + std::to_string(k));
    for (const auto& [t, v] : reports.front().localization) {
      std::ostringstream key;
      key << "L@" << t;
      header.push_back(key.str());
    }
  }
  std::vector<std::vector<std::string>> rows = {header};
  for (const auto& r : reports) {
    std::vector<std::string> row = {r.modality, std::to_string(r.queries), std::to_string(r.M)};
    const auto pct = [](double v) {
      std::ostringstream s;
      s << std::fixed << std::setprecision(2) << 100.0 * v;
      return s.str();
    };
    for (const auto& [k, v] : r.recall) row.push_back(pct(v));
    for (const auto& [t, v] : r.localization) row.push_back(pct(v));
    rows.push_back(std::move(row));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) {
      if (c) out << "  ";
      out << (c == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[c])) << row[c];
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace cvloc::geoindex
