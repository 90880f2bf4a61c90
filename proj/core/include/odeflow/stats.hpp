#pragma once

#include <span>
#include <vector>

namespace odeflow {

/// 1-based ranks with ties sharing their average rank.
std::vector<double> average_ranks(std::span<const double> v);

/// Spearman rank correlation. Returns 0 when either input has no spread, since
/// no ordering exists to correlate.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace odeflow
