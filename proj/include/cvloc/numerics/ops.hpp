#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "cvloc/numerics/tape.hpp"

// Differentiable ops recorded on a Tape. Every op requires its Var inputs to
// live on the same tape and returns a Var on that tape.
namespace cvloc::numerics {

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
// x[m x n] + bias[n] broadcast over rows.
Var add_row(Var x, Var bias);
Var scale(Var a, double factor);
// a * s for a one-element Var s.
Var scale_by(Var a, Var s);
Var exp(Var a);
Var gelu(Var a);

Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

// Row-wise softmax of x / temperature. Columns flagged in key_mask are
// excluded (probability exactly 0).
Var softmax_rows(Var x, double temperature = 1.0, const std::vector<bool>* key_mask = nullptr);
Var log_softmax_rows(Var x);

Var slice_cols(Var x, std::size_t start, std::size_t count);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var x, std::size_t start, std::size_t count);
Var concat_rows(const std::vector<Var>& parts);
// Embedding lookup: rows of table[V x d] selected by ids.
Var gather_rows(Var table, const std::vector<std::size_t>& ids);

Var l2_normalize_rows(Var x);
Var diagonal(Var x);
Var sum(Var x);
Var mean(Var x);
// Scalar sum_i a_i * b_i over same-shaped inputs.
Var dot(Var a, Var b);

}  // namespace cvloc::numerics
