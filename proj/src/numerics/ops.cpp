#include "cvloc/numerics/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <string>

#include "cvloc/errors.hpp"

namespace cvloc::numerics {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

ConstMap mat(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap mat(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw ContractError(std::string(op) + ": inputs must live on the same tape");
  }
}

void same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

void add_into(Tensor* dst, const Tensor& src, double factor = 1.0) {
  if (!dst) return;
  double* d = dst->data().data();
  const double* s = src.data().data();
  const std::size_t n = src.numel();
  for (std::size_t i = 0; i < n; ++i) d[i] += factor * s[i];
}

}  // namespace

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  Tape& tape = *a.tape();
  return tape.record(matmul(a.value(), b.value()), {a, b},
                     [a, b](const Tensor& g, const Tensor&, Tape& t) {
                       if (Tensor* ga = t.accumulator(a)) mat(*ga).noalias() += mat(g) * mat(b.value()).transpose();
                       if (Tensor* gb = t.accumulator(b)) mat(*gb).noalias() += mat(a.value()).transpose() * mat(g);
                     });
}

Var matmul_nt(Var a, Var b) {
  same_tape(a, b, "matmul_nt");
  Tape& tape = *a.tape();
  return tape.record(matmul_nt(a.value(), b.value()), {a, b},
                     [a, b](const Tensor& g, const Tensor&, Tape& t) {
                       if (Tensor* ga = t.accumulator(a)) mat(*ga).noalias() += mat(g) * mat(b.value());
                       if (Tensor* gb = t.accumulator(b)) mat(*gb).noalias() += mat(g).transpose() * mat(a.value());
                     });
}

Var transpose(Var a) {
  Tape& tape = *a.tape();
  return tape.record(transpose(a.value()), {a}, [a](const Tensor& g, const Tensor&, Tape& t) {
    if (Tensor* ga = t.accumulator(a)) mat(*ga) += mat(g).transpose();
  });
}

Var add(Var a, Var b) {
  same_tape(a, b, "add");
  same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  add_into(&out, b.value());
  return a.tape()->record(std::move(out), {a, b}, [a, b](const Tensor& g, const Tensor&, Tape& t) {
    add_into(t.accumulator(a), g);
    add_into(t.accumulator(b), g);
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b, "sub");
  same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  add_into(&out, b.value(), -1.0);
  return a.tape()->record(std::move(out), {a, b}, [a, b](const Tensor& g, const Tensor&, Tape& t) {
    add_into(t.accumulator(a), g);
    add_into(t.accumulator(b), g, -1.0);
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b, "mul");
  same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](const Tensor& g, const Tensor&, Tape& t) {
    if (Tensor* ga = t.accumulator(a)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * b.value()[i];
    }
    if (Tensor* gb = t.accumulator(b)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*gb)[i] += g[i] * a.value()[i];
    }
  });
}

Var add_row(Var x, Var bias) {
  same_tape(x, bias, "add_row");
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (bias.value().numel() != n) {
    throw DimensionError("add_row: bias " + shape_string(bias.value().shape()) +
                         " does not match row width of " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  const double* b = bias.value().data().data();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    double* o = out.data().data() + r * n;
    for (std::size_t c = 0; c < n; ++c) o[c] += b[c];
  }
  return x.tape()->record(std::move(out), {x, bias},
                          [x, bias, n](const Tensor& g, const Tensor&, Tape& t) {
                            add_into(t.accumulator(x), g);
                            if (Tensor* gb = t.accumulator(bias)) {
                              for (std::size_t r = 0; r < g.rows(); ++r) {
                                const double* gr = g.data().data() + r * n;
                                for (std::size_t c = 0; c < n; ++c) (*gb)[c] += gr[c];
                              }
                            }
                          });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= factor;
  return a.tape()->record(std::move(out), {a}, [a, factor](const Tensor& g, const Tensor&, Tape& t) {
    add_into(t.accumulator(a), g, factor);
  });
}

Var scale_by(Var a, Var s) {
  same_tape(a, s, "scale_by");
  const double factor = s.value().item();
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= factor;
  return a.tape()->record(std::move(out), {a, s}, [a, s](const Tensor& g, const Tensor&, Tape& t) {
    add_into(t.accumulator(a), g, s.value().item());
    if (Tensor* gs = t.accumulator(s)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * a.value()[i];
      (*gs)[0] += acc;
    }
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v = std::exp(v);
  return a.tape()->record(std::move(out), {a}, [a](const Tensor& g, const Tensor& y, Tape& t) {
    if (Tensor* ga = t.accumulator(a)) {
      for (std::size_t i = 0; i < g.numel(); ++i) (*ga)[i] += g[i] * y[i];
    }
  });
}

Var gelu(Var a) {
  // tanh approximation
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kK = 0.044715;
  Tensor out = a.value();
  for (auto& v : out.storage()) {
    const double u = kC * (v + kK * v * v * v);
    v = 0.5 * v * (1.0 + std::tanh(u));
  }
  return a.tape()->record(std::move(out), {a}, [a](const Tensor& g, const Tensor&, Tape& t) {
    Tensor* ga = t.accumulator(a);
    if (!ga) return;
    const Tensor& x = a.value();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const double v = x[i];
      const double th = std::tanh(kC * (v + kK * v * v * v));
      const double du = kC * (1.0 + 3.0 * kK * v * v);
      (*ga)[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  same_tape(x, gain, "layer_norm");
  same_tape(x, bias, "layer_norm");
  const Tensor& xv = x.value();
  Tensor out = layer_norm(xv, gain.value(), bias.value(), eps);
  const std::size_t d = xv.cols();
  const std::size_t rows = xv.rows();
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += in[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
    inv_std[r] = 1.0 / std::sqrt(var / static_cast<double>(d) + eps);
  }
  return x.tape()->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, d, rows, inv_std = std::move(inv_std)](const Tensor& g, const Tensor&, Tape& t) {
        Tensor* gx = t.accumulator(x);
        Tensor* gg = t.accumulator(gain);
        Tensor* gb = t.accumulator(bias);
        const Tensor& xv = x.value();
        const Tensor& gam = gain.value();
        std::vector<double> xhat(d), gxh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* in = xv.data().data() + r * d;
          const double* gr = g.data().data() + r * d;
          double mu = 0.0;
          for (std::size_t c = 0; c < d; ++c) mu += in[c];
          mu /= static_cast<double>(d);
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t c = 0; c < d; ++c) {
            xhat[c] = (in[c] - mu) * inv_std[r];
            gxh[c] = gr[c] * gam[c];
            sum_g += gxh[c];
            sum_gx += gxh[c] * xhat[c];
            if (gg) (*gg)[c] += gr[c] * xhat[c];
            if (gb) (*gb)[c] += gr[c];
          }
          if (gx) {
            double* o = gx->data().data() + r * d;
            const double scale = inv_std[r] / static_cast<double>(d);
            for (std::size_t c = 0; c < d; ++c) {
              o[c] += scale * (static_cast<double>(d) * gxh[c] - sum_g - xhat[c] * sum_gx);
            }
          }
        }
      });
}

Var softmax_rows(Var x, double temperature, const std::vector<bool>* key_mask) {
  if (!(temperature > 0.0)) {
    throw ParameterError("softmax_rows: temperature must be positive, got " +
                         std::to_string(temperature));
  }
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows();
  const std::size_t cols = xv.cols();
  if (key_mask && key_mask->size() != cols) {
    throw DimensionError("softmax_rows: mask length " + std::to_string(key_mask->size()) +
                         " vs " + std::to_string(cols) + " columns");
  }
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * cols;
    double* o = out.data().data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c) {
      if (!key_mask || !(*key_mask)[c]) mx = std::max(mx, in[c]);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      o[c] = (key_mask && (*key_mask)[c]) ? 0.0 : std::exp((in[c] - mx) / temperature);
      total += o[c];
    }
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  return x.tape()->record(std::move(out), {x},
                          [x, temperature, cols](const Tensor& g, const Tensor& y, Tape& t) {
                            Tensor* gx = t.accumulator(x);
                            if (!gx) return;
                            for (std::size_t r = 0; r < y.rows(); ++r) {
                              const double* yr = y.data().data() + r * cols;
                              const double* gr = g.data().data() + r * cols;
                              double* o = gx->data().data() + r * cols;
                              double inner = 0.0;
                              for (std::size_t c = 0; c < cols; ++c) inner += gr[c] * yr[c];
                              for (std::size_t c = 0; c < cols; ++c) {
                                o[c] += yr[c] * (gr[c] - inner) / temperature;
                              }
                            }
                          });
}

Var log_softmax_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double* in = xv.data().data() + r * cols;
    double* o = out.data().data() + r * cols;
    double mx = in[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(in[c] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) o[c] = in[c] - lse;
  }
  return x.tape()->record(std::move(out), {x}, [x, cols](const Tensor& g, const Tensor& y, Tape& t) {
    Tensor* gx = t.accumulator(x);
    if (!gx) return;
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double* yr = y.data().data() + r * cols;
      const double* gr = g.data().data() + r * cols;
      double* o = gx->data().data() + r * cols;
      double gsum = 0.0;
      for (std::size_t c = 0; c < cols; ++c) gsum += gr[c];
      for (std::size_t c = 0; c < cols; ++c) o[c] += gr[c] - std::exp(yr[c]) * gsum;
    }
  });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  if (start + count > cols) {
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_string(xv.shape()));
  }
  const std::size_t rows = xv.rows();
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < count; ++c) out.at(r, c) = xv.data()[r * cols + start + c];
  }
  return x.tape()->record(std::move(out), {x},
                          [x, start, count, cols](const Tensor& g, const Tensor&, Tape& t) {
                            Tensor* gx = t.accumulator(x);
                            if (!gx) return;
                            for (std::size_t r = 0; r < g.rows(); ++r) {
                              for (std::size_t c = 0; c < count; ++c) {
                                (*gx)[r * cols + start + c] += g.at(r, c);
                              }
                            }
                          });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    same_tape(parts.front(), p, "concat_cols");
    if (p.value().rows() != rows) {
      throw DimensionError("concat_cols: row count mismatch " +
                           shape_string(parts.front().value().shape()) + " vs " +
                           shape_string(p.value().shape()));
    }
    total += p.value().cols();
  }
  Tensor out({rows, total});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < pv.cols(); ++c) out.at(r, offset + c) = pv.at(r, c);
    }
    offset += pv.cols();
  }
  return parts.front().tape()->record(
      std::move(out), parts, [parts, total](const Tensor& g, const Tensor&, Tape& t) {
        std::size_t offset = 0;
        for (const Var& p : parts) {
          const std::size_t w = p.value().cols();
          if (Tensor* gp = t.accumulator(p)) {
            for (std::size_t r = 0; r < g.rows(); ++r) {
              for (std::size_t c = 0; c < w; ++c) (*gp)[r * w + c] += g[r * total + offset + c];
            }
          }
          offset += w;
        }
      });
}

Var slice_rows(Var x, std::size_t start, std::size_t count) {
  const Tensor& xv = x.value();
  if (start + count > xv.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_string(xv.shape()));
  }
  const std::size_t cols = xv.cols();
  std::vector<double> data(xv.data().begin() + static_cast<std::ptrdiff_t>(start * cols),
                           xv.data().begin() + static_cast<std::ptrdiff_t>((start + count) * cols));
  Tensor out({count, cols}, std::move(data));
  return x.tape()->record(std::move(out), {x},
                          [x, start, cols](const Tensor& g, const Tensor&, Tape& t) {
                            Tensor* gx = t.accumulator(x);
                            if (!gx) return;
                            for (std::size_t i = 0; i < g.numel(); ++i) (*gx)[start * cols + i] += g[i];
                          });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t cols = parts.front().value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    same_tape(parts.front(), p, "concat_rows");
    if (p.value().cols() != cols) {
      throw DimensionError("concat_rows: column count mismatch " +
                           shape_string(parts.front().value().shape()) + " vs " +
                           shape_string(p.value().shape()));
    }
    rows += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const Var& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  Tensor out({rows, cols}, std::move(data));
  return parts.front().tape()->record(std::move(out), parts,
                                      [parts](const Tensor& g, const Tensor&, Tape& t) {
                                        std::size_t offset = 0;
                                        for (const Var& p : parts) {
                                          const std::size_t n = p.value().numel();
                                          if (Tensor* gp = t.accumulator(p)) {
                                            for (std::size_t i = 0; i < n; ++i) (*gp)[i] += g[offset + i];
                                          }
                                          offset += n;
                                        }
                                      });
}

Var gather_rows(Var table, const std::vector<std::size_t>& ids) {
  const Tensor& tv = table.value();
  const std::size_t cols = tv.cols();
  Tensor out({ids.size(), cols});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= tv.rows()) {
      throw DimensionError("gather_rows: id " + std::to_string(ids[i]) + " outside table " +
                           shape_string(tv.shape()));
    }
    for (std::size_t c = 0; c < cols; ++c) out.at(i, c) = tv.at(ids[i], c);
  }
  return table.tape()->record(std::move(out), {table},
                              [table, ids, cols](const Tensor& g, const Tensor&, Tape& t) {
                                Tensor* gt = t.accumulator(table);
                                if (!gt) return;
                                for (std::size_t i = 0; i < ids.size(); ++i) {
                                  for (std::size_t c = 0; c < cols; ++c) gt->at(ids[i], c) += g.at(i, c);
                                }
                              });
}

Var l2_normalize_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  const std::size_t rows = xv.rows();
  Tensor out(xv.shape());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += xv.at(r, c) * xv.at(r, c);
    norms[r] = std::max(std::sqrt(ss), 1e-12);
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = xv.at(r, c) / norms[r];
  }
  return x.tape()->record(std::move(out), {x},
                          [x, cols, norms = std::move(norms)](const Tensor& g, const Tensor& y, Tape& t) {
                            Tensor* gx = t.accumulator(x);
                            if (!gx) return;
                            for (std::size_t r = 0; r < y.rows(); ++r) {
                              double inner = 0.0;
                              for (std::size_t c = 0; c < cols; ++c) inner += g.at(r, c) * y.at(r, c);
                              for (std::size_t c = 0; c < cols; ++c) {
                                gx->at(r, c) += (g.at(r, c) - y.at(r, c) * inner) / norms[r];
                              }
                            }
                          });
}

Var diagonal(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.rows() != xv.cols()) {
    throw DimensionError("diagonal: expected a square matrix, got " + shape_string(xv.shape()));
  }
  const std::size_t n = xv.rows();
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) out[i] = xv.at(i, i);
  return x.tape()->record(std::move(out), {x}, [x, n](const Tensor& g, const Tensor&, Tape& t) {
    if (Tensor* gx = t.accumulator(x)) {
      for (std::size_t i = 0; i < n; ++i) gx->at(i, i) += g[i];
    }
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return x.tape()->record(Tensor::scalar(total), {x}, [x](const Tensor& g, const Tensor&, Tape& t) {
    if (Tensor* gx = t.accumulator(x)) {
      for (auto& v : gx->storage()) v += g[0];
    }
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().numel());
  return scale(sum(x), 1.0 / n);
}

Var dot(Var a, Var b) {
  same_tape(a, b, "dot");
  same_shape(a.value(), b.value(), "dot");
  double total = 0.0;
  for (std::size_t i = 0; i < a.value().numel(); ++i) total += a.value()[i] * b.value()[i];
  return a.tape()->record(Tensor::scalar(total), {a, b}, [a, b](const Tensor& g, const Tensor&, Tape& t) {
    add_into(t.accumulator(a), b.value(), g[0]);
    add_into(t.accumulator(b), a.value(), g[0]);
  });
}

}  // namespace cvloc::numerics
