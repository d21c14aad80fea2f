#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "support/reference.hpp"

namespace advin::ref {

struct GradCheck {
  std::size_t checked = 0;
  /// Coordinates where the h=1e-3 difference straddles a ReLU/max kink; these
  /// are compared against a difference at h=1e-6 instead.
  std::size_t kinks = 0;
  std::size_t failures = 0;
  double worst = 0.0;
  std::string first_failure;
};

inline constexpr double kStep = 1e-3;
inline constexpr double kTolerance = 1e-3;

/// Compares `analytic[i]` to central differences of `f` over `v[i]` for every
/// i. `f` must read `v`.
inline void check_coordinates(std::vector<double>& v, const std::vector<double>& analytic,
                              const std::function<double()>& f, GradCheck& out,
                              const std::string& label) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    ++out.checked;
    const double n1 = central_difference(v, i, kStep, f);
    double err = relative_error(analytic[i], n1);
    if (err > kTolerance) {
      // A kink inside [x-h, x+h] makes the wide difference meaningless; the
      // narrow ones agree with each other when the function is smooth there.
      const double n2 = central_difference(v, i, 1e-6, f);
      const double n3 = central_difference(v, i, 1e-7, f);
      if (relative_error(n2, n3) < 1e-4 && relative_error(n1, n2) > kTolerance) {
        ++out.kinks;
        err = relative_error(analytic[i], n2);
      }
    }
    out.worst = std::max(out.worst, err);
    if (err > kTolerance) {
      if (out.failures++ == 0) {
        out.first_failure = label + "[" + std::to_string(i) + "] analytic " +
                            std::to_string(analytic[i]) + " numeric " + std::to_string(n1);
      }
    }
  }
}

inline std::vector<double> to_doubles(const Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace advin::ref
