#include "cvloc/encoders/positional.hpp"

#include <cmath>
#include <string>

#include "cvloc/errors.hpp"

namespace cvloc::encoders {

double interpolation_coordinate(std::size_t i, std::size_t base_rows, std::size_t target_rows) {
  if (target_rows == 1) return 0.0;
  return static_cast<double>(i) * static_cast<double>(base_rows - 1) /
         static_cast<double>(target_rows - 1);
}

numerics::Tensor expand_positional_embedding(const numerics::Tensor& table, std::size_t target_rows) {
  if (table.rank() != 2) {
    throw DimensionError("expand_positional_embedding: expected a matrix, got " +
                         numerics::shape_string(table.shape()));
  }
  const std::size_t base = table.rows();
  const std::size_t d = table.cols();
  if (base < 2) throw ParameterError("expand_positional_embedding: base table needs at least 2 rows");
  if (target_rows < base) {
    throw ParameterError("expand_positional_embedding: shrinking " + std::to_string(base) + " -> " +
                         std::to_string(target_rows) + " rows is not supported");
  }
  if (target_rows == base) return table;

  numerics::Tensor out({target_rows, d});
  for (std::size_t i = 0; i < target_rows; ++i) {
    const double x = interpolation_coordinate(i, base, target_rows);
    const auto lo = static_cast<std::size_t>(std::floor(x));
    const auto hi = std::min(static_cast<std::size_t>(std::ceil(x)), base - 1);
    const double frac = x - static_cast<double>(lo);
    for (std::size_t c = 0; c < d; ++c) {
      out.at(i, c) = (1.0 - frac) * table.at(lo, c) + frac * table.at(hi, c);
    }
  }
  // Endpoints are copied, not recomputed, so they survive rounding in x(i).
  for (std::size_t c = 0; c < d; ++c) {
    out.at(0, c) = table.at(0, c);
    out.at(target_rows - 1, c) = table.at(base - 1, c);
  }
  return out;
}

}  // namespace cvloc::encoders
