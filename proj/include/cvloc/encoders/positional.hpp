#pragma once

#include <cstddef>

#include "cvloc/numerics/tensor.hpp"

namespace cvloc::encoders {

// Source coordinate in the original table for output row i when stretching a
// table of base_rows to target_rows: x(i) = i * (base_rows - 1) / (target_rows - 1).
double interpolation_coordinate(std::size_t i, std::size_t base_rows, std::size_t target_rows);

// Stretches a positional table [N0 x d] to [N x d] by full linear interpolation:
//   P*(x) = (1 - (x - floor x)) * P(floor x) + (x - floor x) * P(ceil x).
// The first and last rows are carried over exactly.
numerics::Tensor expand_positional_embedding(const numerics::Tensor& table, std::size_t target_rows);

}  // namespace cvloc::encoders
