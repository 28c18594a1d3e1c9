// ============================================================================
// multiscale.hpp -- multiscale maximum-likelihood depth extraction
//
// The cube is cross-correlated with the IRF, optionally smoothed by a 3-D
// uniform kernel, then summed over k x k spatial neighborhoods (same
// resolution, no decimation). Neighbor sums of Poisson counts are Poisson, so
// every filtered histogram supports the same ML depth estimate:
//
//   d_ML = argmax_d sum_t y(t) log g(t - d)
// ============================================================================
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "core.hpp"
#include "parallel.hpp"

namespace ulidar {

enum class Padding { kReplicate, kZero };

// ============================================================================
// Filters
// ============================================================================

/// Per-pixel cross-correlation along time, out(t) = sum_u y(t + u) g(u), with
/// zero extension past either end of the histogram.
inline RealCube matched_filter(const RealCube& cube, const Irf& irf) {
  RealCube out(cube.rows, cube.cols, cube.bins);
  const long bins = static_cast<long>(cube.bins);
  const int u0 = irf.first_delay();
  const auto taps = irf.taps();
  parallel_for(cube.rows * cube.cols, [&](std::size_t n) {
    const auto y = cube.pixel(n);
    auto o = out.pixel(n);
    for (long t = 0; t < bins; ++t) {
      double acc = 0.0;
      for (std::size_t i = 0; i < taps.size(); ++i) {
        const long s = t + u0 + static_cast<long>(i);
        if (s >= 0 && s < bins) acc += y[static_cast<std::size_t>(s)] * taps[i];
      }
      o[static_cast<std::size_t>(t)] = acc;
    }
  });
  return out;
}

inline RealCube matched_filter(const HistogramCube& cube, const Irf& irf) {
  return matched_filter(RealCube::from(cube), irf);
}

namespace detail {

inline void require_odd(std::size_t k) {
  if (k == 0 || k % 2 == 0) {
    throw Error(detail::concat("filter size must be odd and >= 1, got ", k));
  }
}

/// Running k-sum along time for every pixel, zero padding.
inline void box_sum_time(RealCube& cube, std::size_t k) {
  if (k == 1) return;
  const long h = static_cast<long>(k / 2);
  const long bins = static_cast<long>(cube.bins);
  parallel_for(cube.rows * cube.cols, [&](std::size_t n) {
    auto px = cube.pixel(n);
    std::vector<double> in(px.begin(), px.end());
    double acc = 0.0;
    for (long s = 0; s <= std::min(h, bins - 1); ++s) acc += in[static_cast<std::size_t>(s)];
    for (long t = 0; t < bins; ++t) {
      px[static_cast<std::size_t>(t)] = acc;
      const long add = t + h + 1;
      const long drop = t - h;
      if (add < bins) acc += in[static_cast<std::size_t>(add)];
      if (drop >= 0) acc -= in[static_cast<std::size_t>(drop)];
    }
  });
}

/// Running k-sum of whole histograms along one spatial axis. `along_cols`
/// slides over columns within each row, otherwise over rows within each
/// column.
inline void box_sum_space(RealCube& cube, std::size_t k, bool along_cols,
                          Padding pad) {
  if (k == 1) return;
  const long h = static_cast<long>(k / 2);
  const std::size_t bins = cube.bins;
  const long len = static_cast<long>(along_cols ? cube.cols : cube.rows);
  const std::size_t lines = along_cols ? cube.rows : cube.cols;
  const std::size_t stride = along_cols ? bins : cube.cols * bins;

  parallel_for(lines, [&](std::size_t line) {
    double* base = cube.data.data() +
                   (along_cols ? line * cube.cols * bins : line * bins);
    std::vector<double> in(static_cast<std::size_t>(len) * bins);
    for (long i = 0; i < len; ++i) {
      std::copy_n(base + i * static_cast<long>(stride), bins,
                  in.begin() + i * static_cast<long>(bins));
    }
    auto src = [&](long i) -> const double* {
      if (i < 0 || i >= len) {
        if (pad == Padding::kZero) return nullptr;
        i = std::clamp<long>(i, 0, len - 1);
      }
      return in.data() + i * static_cast<long>(bins);
    };
    std::vector<double> acc(bins, 0.0);
    for (long j = -h; j <= h; ++j) {
      if (const double* s = src(j)) {
        for (std::size_t t = 0; t < bins; ++t) acc[t] += s[t];
      }
    }
    for (long i = 0; i < len; ++i) {
      std::copy(acc.begin(), acc.end(), base + i * static_cast<long>(stride));
      if (i + 1 == len) break;
      if (const double* s = src(i + h + 1)) {
        for (std::size_t t = 0; t < bins; ++t) acc[t] += s[t];
      }
      if (const double* s = src(i - h)) {
        for (std::size_t t = 0; t < bins; ++t) acc[t] -= s[t];
      }
    }
  });
}

}  // namespace detail

/// k x k x k uniform sum: replicate padding in space, zero padding in time.
inline RealCube box_filter_3d(RealCube cube, std::size_t k) {
  detail::require_odd(k);
  detail::box_sum_time(cube, k);
  detail::box_sum_space(cube, k, true, Padding::kReplicate);
  detail::box_sum_space(cube, k, false, Padding::kReplicate);
  return cube;
}

/// Per-bin k x k neighbor sum at full resolution.
inline RealCube spatial_box_filter(RealCube cube, std::size_t k,
                                   Padding pad = Padding::kReplicate) {
  detail::require_odd(k);
  detail::box_sum_space(cube, k, true, pad);
  detail::box_sum_space(cube, k, false, pad);
  return cube;
}

// ============================================================================
// ML depth
// ============================================================================

inline constexpr double kLogFloor = -27.631021115928547;  // log(1e-12)

struct MlDepth {
  double depth = 0.0;   ///< normalized, bin / T
  std::size_t bin = 0;  ///< winning integer shift
  bool empty = false;   ///< histogram had no counts
};

/// Precomputed log-IRF weights for repeated ML depth searches.
class MlKernel {
 public:
  explicit MlKernel(const Irf& irf) : first_{irf.first_delay()} {
    for (double g : irf.taps()) {
      weights_.push_back(g > 1e-12 ? std::log(g) - kLogFloor : 0.0);
    }
  }

  /// argmax over integer shifts d in [0, T) of sum_t y(t) log max(g(t-d),
  /// 1e-12). Since the floor term contributes log(1e-12) * sum(y) for every d,
  /// only bins inside the IRF window change the score. Ties, up to a relative
  /// 1e-12, go to the smallest d.
  template <typename T>
  MlDepth operator()(std::span<const T> y) const {
    const long bins = static_cast<long>(y.size());
    bool any = false;
    for (const T v : y) {
      if (v != T{}) {
        any = true;
        break;
      }
    }
    if (!any) return {0.0, 0, true};
    double best = -INFINITY;
    long best_d = 0;
    for (long d = 0; d < bins; ++d) {
      double s = 0.0;
      for (std::size_t i = 0; i < weights_.size(); ++i) {
        const long t = d + first_ + static_cast<long>(i);
        if (t >= 0 && t < bins) s += static_cast<double>(y[static_cast<std::size_t>(t)]) * weights_[i];
      }
      // Symmetric taps make mirrored shifts tie exactly in real arithmetic;
      // the margin keeps summation-order rounding from breaking such ties.
      if (d == 0 || s > best + 1e-12 * std::max(1.0, std::abs(best))) {
        best = s;
        best_d = d;
      }
    }
    return {static_cast<double>(best_d) / static_cast<double>(bins),
            static_cast<std::size_t>(best_d), false};
  }

 private:
  int first_;
  std::vector<double> weights_;
};

template <typename T>
MlDepth ml_depth(std::span<const T> histogram, const Irf& irf) {
  return MlKernel(irf)(histogram);
}

// ============================================================================
// Multiscale stack
// ============================================================================

/// Filter bank: temporal uniform kernel sizes (1 = matched filter only) times
/// spatial neighborhood sizes. Planes are ordered temporal-major.
struct ScaleSpec {
  std::vector<std::size_t> temporal{1, 7, 13};
  std::vector<std::size_t> spatial{1, 3, 7, 13};

  [[nodiscard]] std::size_t scales() const {
    return temporal.size() * spatial.size();
  }

  static ScaleSpec twelve() { return {}; }
  static ScaleSpec four() { return ScaleSpec{{1}, {1, 3, 7, 13}}; }
  static ScaleSpec eight() { return ScaleSpec{{1, 7}, {1, 3, 7, 13}}; }
  static ScaleSpec with_scales(std::size_t l) {
    if (l == 12) return twelve();
    if (l == 8) return eight();
    if (l == 4) return four();
    throw Error(detail::concat("supported scale counts are 4, 8 and 12, got ", l));
  }

  void validate() const {
    if (temporal.empty() || spatial.empty()) throw Error("empty scale spec");
    for (auto k : temporal) detail::require_odd(k);
    for (auto k : spatial) detail::require_odd(k);
  }
};

struct StackResult {
  MultiscaleDepthStack stack;
  /// Photon count supporting each plane's estimate, s_bar(l, n): the
  /// filtered histogram total divided by the temporal kernel size.
  std::vector<Grid<double>> photon_counts;
  /// Pixels whose filtered histogram was empty, per plane.
  std::vector<Grid<std::uint8_t>> empty;
};

inline StackResult build_stack(const HistogramCube& cube, const Irf& irf,
                               const ScaleSpec& spec = ScaleSpec::twelve()) {
  spec.validate();
  if (cube.bins() < 2) throw Error("cube needs at least 2 time bins");
  if (irf.taps().size() >= cube.bins()) {
    throw Error(detail::concat("IRF support of ", irf.taps().size(),
                               " taps is not shorter than ", cube.bins(),
                               " bins"));
  }
  const std::size_t rows = cube.rows(), cols = cube.cols();
  const std::size_t pixels = rows * cols;
  const MlKernel kernel(irf);
  const RealCube correlated = matched_filter(cube, irf);

  std::vector<DepthMap> planes;
  StackResult out;
  for (const std::size_t kt : spec.temporal) {
    const RealCube temporal =
        kt == 1 ? correlated : box_filter_3d(correlated, kt);
    for (const std::size_t ks : spec.spatial) {
      const RealCube filtered =
          ks == 1 ? temporal : spatial_box_filter(temporal, ks);
      Grid<double> depth(rows, cols);
      Grid<double> counts(rows, cols);
      Grid<std::uint8_t> empty(rows, cols);
      parallel_for(pixels, [&](std::size_t n) {
        const auto h = filtered.pixel(n);
        const MlDepth d = kernel(h);
        double total = 0.0;
        for (double v : h) total += v;
        depth[n] = d.depth;
        counts[n] = total / static_cast<double>(kt);
        empty[n] = d.empty ? 1 : 0;
      });
      planes.emplace_back(std::move(depth));
      out.photon_counts.push_back(std::move(counts));
      out.empty.push_back(std::move(empty));
    }
  }
  out.stack = MultiscaleDepthStack(std::move(planes));
  return out;
}

}  // namespace ulidar
