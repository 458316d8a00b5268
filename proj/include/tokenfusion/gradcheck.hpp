#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tokenfusion/errors.hpp"
#include "tokenfusion/rng.hpp"
#include "tokenfusion/tensor.hpp"

namespace tokenfusion {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-5;
  // Cap on sampled coordinates per parameter tensor; smaller tensors are
  // checked exhaustively.
  int64_t max_coords_per_tensor = 100;
  uint64_t seed = 0x5eedULL;
  // Test fixture: multiplies the analytic gradients before comparison so the
  // checker's failure path can itself be exercised. 1.0 means no injection.
  double injected_grad_scale = 1.0;
  // finite_diff_check_auto only. A coordinate where analytic and numeric
  // magnitudes BOTH fall below this is reported as consistent-with-zero
  // instead of pass/fail: central differences divide the fixed rounding
  // error of two O(|f|) loss values by 2*eps, so gradients under roughly
  // u*|f| / (2*eps_max*tol) cannot be resolved by any usable step. 0 disables
  // the classification. A gradient that should be large but was computed as
  // zero is still caught: its numeric side stays well above this threshold.
  double zero_resolution = 0.0;
};

struct GradCheckReport {
  bool pass = true;
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_coordinate = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  int64_t coords_checked = 0;
  // Coordinates classified as consistent-with-zero (see zero_resolution).
  int64_t below_resolution_coords = 0;
};

namespace detail {

inline double gradcheck_rel(double a, double n) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-12});
}

/// One taped forward/backward; returns each parameter's dense gradient,
/// scaled by the injection factor.
template <typename T>
std::vector<std::vector<T>> analytic_gradients(
    const std::function<Tensor<T>()>& f,
    std::vector<std::pair<std::string, Tensor<T>>>& params, double injected_scale) {
  for (auto& [name, p] : params) p.zero_grad();
  {
    TapeScope<T> scope;
    Tensor<T> loss = f();
    require(loss.numel() == 1, "finite_diff_check: f must return a scalar");
    if (!std::isfinite(static_cast<double>(loss.item())))
      throw NumericalError("finite_diff_check: non-finite loss at the base point");
    backward(loss, scope.tape);
  }
  std::vector<std::vector<T>> analytic;
  for (auto& [name, p] : params) {
    std::vector<T> g(static_cast<size_t>(p.numel()), T(0));
    if (p.has_grad()) {
      auto gs = p.grad();
      for (size_t i = 0; i < g.size(); ++i)
        g[i] = static_cast<T>(gs[i] * static_cast<T>(injected_scale));
    }
    analytic.push_back(std::move(g));
  }
  return analytic;
}

/// Coordinates to probe for one tensor: exhaustive when small, otherwise a
/// partial Fisher-Yates draw without replacement from the given stream.
inline std::vector<int64_t> sample_coords(int64_t numel, int64_t max_coords, Rng& rng) {
  std::vector<int64_t> coords;
  if (numel <= max_coords) {
    coords.resize(static_cast<size_t>(numel));
    for (int64_t i = 0; i < numel; ++i) coords[static_cast<size_t>(i)] = i;
    return coords;
  }
  std::vector<int64_t> pool(static_cast<size_t>(numel));
  for (int64_t i = 0; i < numel; ++i) pool[static_cast<size_t>(i)] = i;
  for (int64_t i = 0; i < max_coords; ++i) {
    const int64_t j = i + rng.uniform_int(numel - i);
    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
    coords.push_back(pool[static_cast<size_t>(i)]);
  }
  return coords;
}

/// Central difference at one coordinate, evaluated untaped.
template <typename T>
double numeric_derivative(const std::function<Tensor<T>()>& f, Tensor<T>& p, int64_t coord,
                          double eps) {
  auto eval = [&]() -> double {
    Tensor<T> v = f();
    double d = static_cast<double>(v.item());
    if (!std::isfinite(d))
      throw NumericalError("finite_diff_check: non-finite loss at a perturbed point");
    return d;
  };
  auto values = p.data();
  const T saved = values[static_cast<size_t>(coord)];
  values[static_cast<size_t>(coord)] = saved + static_cast<T>(eps);
  const double f_plus = eval();
  values[static_cast<size_t>(coord)] = saved - static_cast<T>(eps);
  const double f_minus = eval();
  values[static_cast<size_t>(coord)] = saved;
  return (f_plus - f_minus) / (2.0 * eps);
}

}  // namespace detail

/// Central-difference verification of reverse-mode gradients.
///
/// `f` must be a deterministic scalar-valued function of the given parameter
/// tensors (it reads their current values on every call). One taped forward
/// and backward pass produces the analytic gradients; each sampled coordinate
/// is then perturbed by +/- eps with f re-evaluated untaped. The relative
/// error of a coordinate is |a - n| / max(|a|, |n|, 1e-12) and the check
/// passes iff the maximum over all sampled coordinates is below tol.
/// Meaningful verification wants T = double.
template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& f,
                                  std::vector<std::pair<std::string, Tensor<T>>> params,
                                  const GradCheckOptions& opts = {}) {
  require(opts.eps > 0, "finite_diff_check: eps must be positive");
  require(opts.tol > 0, "finite_diff_check: tol must be positive");
  require(opts.max_coords_per_tensor >= 1,
          "finite_diff_check: need at least one coordinate per tensor");

  const std::vector<std::vector<T>> analytic =
      detail::analytic_gradients(f, params, opts.injected_grad_scale);

  GradCheckReport report;
  Rng rng(opts.seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& [name, p] = params[pi];
    const std::vector<int64_t> coords =
        detail::sample_coords(p.numel(), opts.max_coords_per_tensor, rng);
    for (int64_t c : coords) {
      const double numeric = detail::numeric_derivative(f, p, c, opts.eps);
      const double a = static_cast<double>(analytic[pi][static_cast<size_t>(c)]);
      const double rel = detail::gradcheck_rel(a, numeric);
      ++report.coords_checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_coordinate = c;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  report.pass = report.max_rel_err < opts.tol;
  return report;
}

/// Step-ladder driver over the same formula as finite_diff_check. Every
/// sampled coordinate has its own valid central-difference window: dividing
/// by 2*eps turns the fixed float64 rounding error of the two loss values
/// into noise that shrinks as eps grows, so coordinates with tiny gradients
/// need wide steps, while coordinates with high curvature (or near a ReLU
/// kink) need narrow ones. No single eps serves a whole model, so each
/// coordinate is retried along the ladder and scored by its best step. A
/// genuinely wrong analytic gradient disagrees with the converged numeric
/// value at every step, so the ladder costs no detection power. One taped
/// pass supplies the analytic side for all steps; opts.eps is ignored.
template <typename T>
GradCheckReport finite_diff_check_auto(const std::function<Tensor<T>()>& f,
                                       std::vector<std::pair<std::string, Tensor<T>>> params,
                                       const GradCheckOptions& opts = {},
                                       const std::vector<double>& eps_ladder = {
                                           3e-4, 1e-3, 1e-4, 1e-5, 3e-3, 1e-2, 3e-2, 1e-1}) {
  require(!eps_ladder.empty(), "finite_diff_check_auto: empty eps ladder");
  for (double e : eps_ladder) require(e > 0, "finite_diff_check_auto: eps must be positive");
  require(opts.tol > 0, "finite_diff_check_auto: tol must be positive");
  require(opts.max_coords_per_tensor >= 1,
          "finite_diff_check_auto: need at least one coordinate per tensor");

  const std::vector<std::vector<T>> analytic =
      detail::analytic_gradients(f, params, opts.injected_grad_scale);

  GradCheckReport report;
  Rng rng(opts.seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& [name, p] = params[pi];
    const std::vector<int64_t> coords =
        detail::sample_coords(p.numel(), opts.max_coords_per_tensor, rng);
    for (int64_t c : coords) {
      const double a = static_cast<double>(analytic[pi][static_cast<size_t>(c)]);
      double best_rel = 0.0;
      double best_numeric = 0.0;
      bool first = true;
      for (double eps : eps_ladder) {
        const double numeric = detail::numeric_derivative(f, p, c, eps);
        const double rel = detail::gradcheck_rel(a, numeric);
        if (first || rel < best_rel) {
          best_rel = rel;
          best_numeric = numeric;
          first = false;
        }
        if (best_rel < opts.tol) break;
      }
      ++report.coords_checked;
      if (best_rel >= opts.tol && opts.zero_resolution > 0 &&
          std::max(std::abs(a), std::abs(best_numeric)) < opts.zero_resolution) {
        ++report.below_resolution_coords;
        continue;
      }
      if (best_rel > report.max_rel_err) {
        report.max_rel_err = best_rel;
        report.worst_param = name;
        report.worst_coordinate = c;
        report.worst_analytic = a;
        report.worst_numeric = best_numeric;
      }
    }
  }
  report.pass = report.max_rel_err < opts.tol;
  return report;
}

}  // namespace tokenfusion
