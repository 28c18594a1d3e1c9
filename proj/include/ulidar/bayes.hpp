// ============================================================================
// bayes.hpp -- iterative Bayesian depth estimation (coordinate descent MAP)
//
// Latent depth x, multiscale depths d(l) and per-pixel scale eps are updated
// in turn:
//
//   x_n    <- argmin_x  sum_{l, n' in v_n} w(l)_{n',n} |x - d(l)_{n'}|
//   d(l)_n <- argmin_d  (d - dML(l)_n)^2 / (2 sbar2(l)_n)
//                       + sum_{n' in v_n} w(l)_{n,n'} |d - x_{n'}| / eps_{n'}
//   eps_n  <- (C(x_n) + beta) / (L Nbar + alpha + 1)
//
// Each block is separable over pixels given the others, so the updates are
// computed in parallel from the previous block values and every sweep is an
// exact block coordinate descent step. Solver state is kept in bin units.
// ============================================================================
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "core.hpp"
#include "multiscale.hpp"
#include "parallel.hpp"

namespace ulidar {

// ============================================================================
// Scalar proximal operators
// ============================================================================

/// Minimizer of C(x) = sum_i w_i |x - v_i|. Returns the smallest value whose
/// cumulative weight (in sorted order) reaches half the total, which is the
/// left end of the minimizing interval.
inline double weighted_median(std::span<const double> values,
                              std::span<const double> weights) {
  if (values.size() != weights.size()) {
    throw Error("weighted_median: values and weights differ in length");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw Error("weighted_median: negative or NaN weight");
    total += w;
  }
  if (!(total > 0.0)) throw Error("weighted_median: all weights are zero");

  std::vector<std::pair<double, double>> items;
  items.reserve(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (weights[i] > 0.0) items.emplace_back(values[i], weights[i]);
  }
  std::sort(items.begin(), items.end());
  double cum = 0.0;
  for (const auto& [v, w] : items) {
    cum += w;
    if (2.0 * cum >= total) return v;
  }
  return items.back().first;
}

/// Objective of the generalized soft-thresholding problem.
inline double soft_threshold_objective(double d, double d_ml, double sbar2,
                                       std::span<const double> anchors,
                                       std::span<const double> coeffs) {
  double f = std::isinf(sbar2) ? 0.0 : (d - d_ml) * (d - d_ml) / (2.0 * sbar2);
  for (std::size_t j = 0; j < anchors.size(); ++j) {
    f += coeffs[j] * std::abs(d - anchors[j]);
  }
  return f;
}

/// Unique minimizer of (d - d_ml)^2 / (2 sbar2) + sum_j c_j |d - x_j|.
/// Breakpoints are sorted and the stationarity condition is solved on each
/// linear piece of the subgradient. With sbar2 = inf the problem reduces to
/// a weighted median and the smallest minimizing breakpoint is returned.
inline double soft_threshold_update(double d_ml, double sbar2,
                                    std::span<const double> anchors,
                                    std::span<const double> coeffs) {
  if (!(sbar2 > 0.0)) throw Error("soft_threshold_update: sbar2 must be > 0");
  if (anchors.size() != coeffs.size()) {
    throw Error("soft_threshold_update: anchors and coeffs differ in length");
  }
  std::vector<std::pair<double, double>> pts;
  pts.reserve(anchors.size());
  for (std::size_t j = 0; j < anchors.size(); ++j) {
    if (coeffs[j] < 0.0) throw Error("soft_threshold_update: negative coeff");
    if (coeffs[j] > 0.0) pts.emplace_back(anchors[j], coeffs[j]);
  }
  if (pts.empty()) return d_ml;
  if (std::isinf(sbar2)) {
    std::vector<double> v, w;
    for (const auto& [x, c] : pts) {
      v.push_back(x);
      w.push_back(c);
    }
    return weighted_median(v, w);
  }

  std::sort(pts.begin(), pts.end());
  std::size_t m = 0;  // merge equal anchors
  for (std::size_t j = 1; j < pts.size(); ++j) {
    if (pts[j].first == pts[m].first) {
      pts[m].second += pts[j].second;
    } else {
      pts[++m] = pts[j];
    }
  }
  pts.resize(m + 1);

  double total = 0.0;
  for (const auto& p : pts) total += p.second;
  double below = 0.0;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k <= pts.size(); ++k) {
    const double lo = k == 0 ? -kInf : pts[k - 1].first;
    const double hi = k == pts.size() ? kInf : pts[k].first;
    const double cand = d_ml - sbar2 * (2.0 * below - total);
    if (cand > lo && cand < hi) return cand;
    if (k == pts.size()) break;
    const double g_lo = (pts[k].first - d_ml) / sbar2 + 2.0 * below - total;
    const double g_hi = g_lo + 2.0 * pts[k].second;
    if (g_lo <= 0.0 && g_hi >= 0.0) return pts[k].first;
    below += pts[k].second;
  }

  // Only reachable through rounding at a piece boundary.
  double best = d_ml, best_f = kInf;
  std::vector<double> a, c;
  for (const auto& [x, w] : pts) {
    a.push_back(x);
    c.push_back(w);
  }
  for (const auto& [x, w] : pts) {
    const double f = soft_threshold_objective(x, d_ml, sbar2, a, c);
    if (f < best_f) {
      best_f = f;
      best = x;
    }
  }
  return best;
}

/// Mode of the inverse-gamma conditional of eps_n.
inline double variance_update(double cost, std::size_t scales,
                              std::size_t neighbors, double alpha,
                              double beta) {
  if (!(cost >= 0.0)) throw Error("variance_update: cost must be >= 0");
  return (cost + beta) /
         (static_cast<double>(scales) * static_cast<double>(neighbors) +
          alpha + 1.0);
}

// ============================================================================
// Guidance weights
// ============================================================================

/// Square neighborhood of the given radius, offsets in row-major order.
struct Neighborhood {
  int radius = 1;

  [[nodiscard]] std::size_t size() const {
    const auto w = static_cast<std::size_t>(2 * radius + 1);
    return w * w;
  }
  [[nodiscard]] int dr(std::size_t o) const {
    return static_cast<int>(o) / (2 * radius + 1) - radius;
  }
  [[nodiscard]] int dc(std::size_t o) const {
    return static_cast<int>(o) % (2 * radius + 1) - radius;
  }
  /// Offset index of the mirrored offset (-dr, -dc).
  [[nodiscard]] std::size_t mirror(std::size_t o) const { return size() - 1 - o; }
};

/// w(l)_{n',n} for every scale l, center pixel n and neighbor n' = n + offset.
/// Neighbors outside the image carry weight 0.
class GuidanceWeights {
 public:
  GuidanceWeights() = default;
  GuidanceWeights(std::size_t scales, std::size_t rows, std::size_t cols,
                  Neighborhood nb)
      : scales_{scales}, rows_{rows}, cols_{cols}, nb_{nb},
        data_(scales * rows * cols * nb.size(), 0.0) {}

  double& at(std::size_t l, std::size_t n, std::size_t o) {
    return data_[(l * rows_ * cols_ + n) * nb_.size() + o];
  }
  [[nodiscard]] double at(std::size_t l, std::size_t n, std::size_t o) const {
    return data_[(l * rows_ * cols_ + n) * nb_.size() + o];
  }
  [[nodiscard]] std::size_t scales() const noexcept { return scales_; }
  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] const Neighborhood& neighborhood() const noexcept { return nb_; }
  [[nodiscard]] std::span<const double> values() const noexcept { return data_; }

  /// Neighbor pixel index of n at offset o, or -1 outside the image.
  [[nodiscard]] long neighbor(std::size_t n, std::size_t o) const {
    const long r = static_cast<long>(n / cols_) + nb_.dr(o);
    const long c = static_cast<long>(n % cols_) + nb_.dc(o);
    if (r < 0 || c < 0 || r >= static_cast<long>(rows_) ||
        c >= static_cast<long>(cols_)) {
      return -1;
    }
    return r * static_cast<long>(cols_) + c;
  }

 private:
  std::size_t scales_ = 0, rows_ = 0, cols_ = 0;
  Neighborhood nb_;
  std::vector<double> data_;
};

/// Per-pixel lower median across scales (always one of the plane values).
inline Grid<double> median_reference(const std::vector<Grid<double>>& planes) {
  const std::size_t l = planes.size();
  Grid<double> out(planes.at(0).rows(), planes.at(0).cols());
  std::vector<double> v(l);
  for (std::size_t n = 0; n < out.size(); ++n) {
    for (std::size_t k = 0; k < l; ++k) v[k] = planes[k][n];
    std::nth_element(v.begin(), v.begin() + static_cast<long>((l - 1) / 2), v.end());
    out[n] = v[(l - 1) / 2];
  }
  return out;
}

inline DepthMap median_reference(const MultiscaleDepthStack& stack) {
  std::vector<Grid<double>> planes;
  for (const auto& p : stack.planes()) planes.push_back(p.grid());
  return DepthMap(median_reference(planes));
}

/// w(l)_{n',n} = exp(-(d(l)_{n'} - ref_n)^2 / (2 h^2)). Units of the planes,
/// reference and h must agree.
inline GuidanceWeights compute_guidance_weights(
    const std::vector<Grid<double>>& planes, const Grid<double>& reference,
    double h, Neighborhood nb = {}) {
  if (!(h > 0.0)) throw Error("guidance bandwidth h must be > 0");
  if (nb.radius < 0) throw Error("neighborhood radius must be >= 0");
  const std::size_t rows = reference.rows(), cols = reference.cols();
  GuidanceWeights w(planes.size(), rows, cols, nb);
  const double inv = 1.0 / (2.0 * h * h);
  for (std::size_t l = 0; l < planes.size(); ++l) {
    if (!planes[l].same_shape(reference)) {
      throw Error("guidance weights: plane and reference shapes differ");
    }
    for (std::size_t n = 0; n < rows * cols; ++n) {
      for (std::size_t o = 0; o < nb.size(); ++o) {
        const long m = w.neighbor(n, o);
        if (m < 0) continue;
        const double dev = planes[l][static_cast<std::size_t>(m)] - reference[n];
        w.at(l, n, o) = std::exp(-dev * dev * inv);
      }
    }
  }
  return w;
}

inline GuidanceWeights compute_guidance_weights(const MultiscaleDepthStack& stack,
                                                const DepthMap& reference,
                                                double h, Neighborhood nb = {}) {
  std::vector<Grid<double>> planes;
  for (const auto& p : stack.planes()) planes.push_back(p.grid());
  return compute_guidance_weights(planes, reference.grid(), h, nb);
}

// ============================================================================
// Solver
// ============================================================================

struct BayesParams {
  double alpha = 0.01;
  double beta = 0.01;        ///< normalized depth units
  int radius = 1;            ///< 3x3 neighborhood
  int max_iters = 50;
  double tol = 1e-4;         ///< max |dx| in normalized units
  double h_bins = 2.0;       ///< guidance bandwidth in bins

  void validate() const {
    if (!(alpha > 0.0) || !(beta > 0.0)) {
      throw Error("alpha and beta must be positive");
    }
    if (!(tol > 0.0)) throw Error("tol must be positive");
    if (radius < 0) throw Error("neighborhood radius must be >= 0");
    if (max_iters < 1) throw Error("max_iters must be >= 1");
    if (!(h_bins > 0.0)) throw Error("guidance bandwidth must be positive");
  }
};

/// sbar2(l)_n = sigma^2 / max(s_bar(l)_n, 1) in bin^2 units.
inline std::vector<Grid<double>> sigma_bar_sq(
    const std::vector<Grid<double>>& photon_counts, double irf_sigma) {
  std::vector<Grid<double>> out;
  for (const auto& counts : photon_counts) {
    Grid<double> g(counts.rows(), counts.cols());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = irf_sigma * irf_sigma / std::max(counts[i], 1.0);
    }
    out.push_back(std::move(g));
  }
  return out;
}

struct BayesResult {
  DepthMap depth;
  UncertaintyMap uncertainty;
  std::vector<Grid<double>> refined;  ///< final d(l), bin units
  int iterations = 0;
  bool converged = false;
  std::vector<double> objective;      ///< after each sweep
};

namespace detail {

struct BayesState {
  std::vector<Grid<double>> d;
  Grid<double> x;
  Grid<double> eps;  // bins
};

inline double latent_cost(const GuidanceWeights& w,
                          const std::vector<Grid<double>>& d, double x,
                          std::size_t n) {
  double c = 0.0;
  const auto& nb = w.neighborhood();
  for (std::size_t l = 0; l < d.size(); ++l) {
    for (std::size_t o = 0; o < nb.size(); ++o) {
      const long m = w.neighbor(n, o);
      if (m < 0) continue;
      c += w.at(l, n, o) * std::abs(x - d[l][static_cast<std::size_t>(m)]);
    }
  }
  return c;
}

}  // namespace detail

/// Negative log posterior (up to constants) in bin units.
inline double bayes_objective(const GuidanceWeights& w,
                              const std::vector<Grid<double>>& d_ml,
                              const std::vector<Grid<double>>& sbar2,
                              const std::vector<Grid<double>>& d,
                              const Grid<double>& x, const Grid<double>& eps,
                              double beta_bins, double log_coeff) {
  double f = 0.0;
  for (std::size_t n = 0; n < x.size(); ++n) {
    const double c = detail::latent_cost(w, d, x[n], n);
    f += (c + beta_bins) / eps[n] + log_coeff * std::log(eps[n]);
  }
  for (std::size_t l = 0; l < d.size(); ++l) {
    for (std::size_t n = 0; n < x.size(); ++n) {
      const double e = d[l][n] - d_ml[l][n];
      f += e * e / (2.0 * sbar2[l][n]);
    }
  }
  return f;
}

/// Runs the coordinate-descent sweeps on a normalized stack. `sbar2` is in
/// bin^2 units, one map per plane.
inline BayesResult run_bayes(const MultiscaleDepthStack& stack,
                             const std::vector<Grid<double>>& sbar2,
                             std::size_t bins, const BayesParams& params = {}) {
  params.validate();
  const std::size_t scales = stack.scales();
  const std::size_t rows = stack.rows(), cols = stack.cols();
  const std::size_t pixels = rows * cols;
  if (sbar2.size() != scales) {
    throw Error(detail::concat("expected ", scales, " sbar2 maps, got ",
                               sbar2.size()));
  }
  for (const auto& s : sbar2) {
    if (s.rows() != rows || s.cols() != cols) {
      throw Error("sbar2 map shape differs from the stack");
    }
  }
  const double t = static_cast<double>(bins);
  const Neighborhood nb{params.radius};
  const std::size_t nbar = nb.size();
  const double den = static_cast<double>(scales * nbar) + params.alpha + 1.0;
  const double beta_bins = params.beta * t;

  std::vector<Grid<double>> d_ml;
  for (const auto& p : stack.planes()) d_ml.push_back(to_bins(p, bins));
  const Grid<double> reference = median_reference(d_ml);
  const GuidanceWeights w =
      compute_guidance_weights(d_ml, reference, params.h_bins, nb);

  detail::BayesState s{d_ml, reference, Grid<double>(rows, cols, 1.0)};
  BayesResult result;

  auto update_eps = [&](detail::BayesState& st) {
    parallel_for(pixels, [&](std::size_t n) {
      st.eps[n] = (detail::latent_cost(w, st.d, st.x[n], n) + beta_bins) / den;
    });
  };

  for (int iter = 1; iter <= params.max_iters; ++iter) {
    // x: weighted median over (scale, neighbor) pairs.
    Grid<double> x_new(rows, cols);
    parallel_for(pixels, [&](std::size_t n) {
      std::vector<double> vals, wts;
      vals.reserve(scales * nbar);
      wts.reserve(scales * nbar);
      for (std::size_t l = 0; l < scales; ++l) {
        for (std::size_t o = 0; o < nbar; ++o) {
          const long m = w.neighbor(n, o);
          if (m < 0) continue;
          vals.push_back(s.d[l][static_cast<std::size_t>(m)]);
          wts.push_back(w.at(l, n, o));
        }
      }
      x_new[n] = weighted_median(vals, wts);
    });
    const Grid<double> x_old = std::move(s.x);
    s.x = std::move(x_new);
    if (iter == 1) update_eps(s);

    // d(l): generalized soft thresholding against neighboring x.
    std::vector<Grid<double>> d_new(scales, Grid<double>(rows, cols));
    parallel_for(scales * pixels, [&](std::size_t idx) {
      const std::size_t l = idx / pixels, n = idx % pixels;
      double anchors[64], coeffs[64];
      std::size_t k = 0;
      for (std::size_t o = 0; o < nbar && k < 64; ++o) {
        const long m = w.neighbor(n, o);
        if (m < 0) continue;
        const auto mm = static_cast<std::size_t>(m);
        anchors[k] = s.x[mm];
        coeffs[k] = w.at(l, mm, nb.mirror(o)) / s.eps[mm];
        ++k;
      }
      d_new[l][n] = soft_threshold_update(
          d_ml[l][n], sbar2[l][n], std::span<const double>(anchors, k),
          std::span<const double>(coeffs, k));
    });
    s.d = std::move(d_new);
    update_eps(s);

    double delta = 0.0;
    for (std::size_t n = 0; n < pixels; ++n) {
      if (!std::isfinite(s.x[n]) || !std::isfinite(s.eps[n])) {
        throw Error(detail::concat("non-finite value at pixel ", n,
                                   " in iteration ", iter));
      }
      delta = std::max(delta, std::abs(s.x[n] - x_old[n]) / t);
    }
    for (const auto& dl : s.d) {
      for (std::size_t n = 0; n < pixels; ++n) {
        if (!std::isfinite(dl[n])) {
          throw Error(detail::concat("non-finite depth at pixel ", n,
                                     " in iteration ", iter));
        }
      }
    }
    result.objective.push_back(
        bayes_objective(w, d_ml, sbar2, s.d, s.x, s.eps, beta_bins, den));
    result.iterations = iter;
    if (delta < params.tol) {
      result.converged = true;
      break;
    }
  }

  Grid<double> eps_norm(rows, cols);
  for (std::size_t n = 0; n < pixels; ++n) {
    eps_norm[n] = variance_update(detail::latent_cost(w, s.d, s.x[n], n) / t,
                                  scales, nbar, params.alpha, params.beta);
  }
  result.depth = from_bins(s.x, bins);
  result.uncertainty = UncertaintyMap(std::move(eps_norm));
  result.refined = std::move(s.d);
  return result;
}

/// Cube -> multiscale stack -> Bayesian estimate.
inline BayesResult bayes_from_cube(const HistogramCube& cube, const Irf& irf,
                                   const ScaleSpec& spec,
                                   const BayesParams& params = {}) {
  auto st = build_stack(cube, irf, spec);
  return run_bayes(st.stack, sigma_bar_sq(st.photon_counts, irf.sigma()),
                   cube.bins(), params);
}

}  // namespace ulidar
