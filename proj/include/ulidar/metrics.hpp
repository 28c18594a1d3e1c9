// ============================================================================
// metrics.hpp -- depth error metrics (DAE, RMSE, SEE) and Canny edges
// ============================================================================
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "core.hpp"

namespace ulidar {

namespace detail {
inline void require_same_shape(const Grid<double>& a, const Grid<double>& b,
                               const char* what) {
  if (!a.same_shape(b)) {
    throw Error(detail::concat(what, ": shape mismatch, prediction ",
                               shape_str(a), " vs truth ", shape_str(b)));
  }
}
}  // namespace detail

/// Depth absolute error, (1/N) ||x - x*||_1.
inline double dae(const Grid<double>& x, const Grid<double>& truth) {
  detail::require_same_shape(x, truth, "dae");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += std::abs(x[i] - truth[i]);
  return s / static_cast<double>(x.size());
}

/// sqrt(||x - x*||_2^2 / N).
inline double rmse(const Grid<double>& x, const Grid<double>& truth) {
  detail::require_same_shape(x, truth, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = x[i] - truth[i];
    s += e * e;
  }
  return std::sqrt(s / static_cast<double>(x.size()));
}

inline double dae(const DepthMap& x, const DepthMap& t) { return dae(x.grid(), t.grid()); }
inline double rmse(const DepthMap& x, const DepthMap& t) { return rmse(x.grid(), t.grid()); }

// ============================================================================
// Canny
// ============================================================================

struct CannyParams {
  double sigma = 1.0;
  double low = 0.1;   ///< fraction of the maximum gradient magnitude
  double high = 0.2;  ///< fraction of the maximum gradient magnitude
};

struct EdgeSet {
  std::size_t rows = 0, cols = 0;
  std::vector<std::pair<std::size_t, std::size_t>> pixels;  ///< (row, col)
  Grid<std::uint8_t> mask;

  [[nodiscard]] std::size_t size() const noexcept { return pixels.size(); }
  [[nodiscard]] bool contains(std::size_t r, std::size_t c) const {
    return mask(r, c) != 0;
  }
};

namespace detail {

inline Grid<double> gaussian_blur(const Grid<double>& img, double sigma) {
  if (!(sigma > 0.0)) return img;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  const long rows = static_cast<long>(img.rows()), cols = static_cast<long>(img.cols());
  Grid<double> tmp(img.rows(), img.cols()), out(img.rows(), img.cols());
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const long cc = std::clamp<long>(c + i, 0, cols - 1);
        acc += k[static_cast<std::size_t>(i + radius)] *
               img(static_cast<std::size_t>(r), static_cast<std::size_t>(cc));
      }
      tmp(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
    }
  }
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        const long rr = std::clamp<long>(r + i, 0, rows - 1);
        acc += k[static_cast<std::size_t>(i + radius)] *
               tmp(static_cast<std::size_t>(rr), static_cast<std::size_t>(c));
      }
      out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = acc;
    }
  }
  return out;
}

}  // namespace detail

/// Gaussian blur, Sobel gradients, non-maximum suppression and hysteresis.
/// Throws when no edge survives, since SEE is undefined on an empty set.
inline EdgeSet canny_edges(const Grid<double>& image,
                           const CannyParams& p = {}) {
  if (!(p.low < p.high)) throw Error("canny: low threshold must be < high");
  const long rows = static_cast<long>(image.rows());
  const long cols = static_cast<long>(image.cols());
  const Grid<double> g = detail::gaussian_blur(image, p.sigma);
  auto px = [&](long r, long c) {
    return g(static_cast<std::size_t>(std::clamp<long>(r, 0, rows - 1)),
             static_cast<std::size_t>(std::clamp<long>(c, 0, cols - 1)));
  };

  Grid<double> mag(image.rows(), image.cols());
  Grid<std::uint8_t> dir(image.rows(), image.cols());
  double max_mag = 0.0;
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      const double gx = (px(r - 1, c + 1) + 2 * px(r, c + 1) + px(r + 1, c + 1)) -
                        (px(r - 1, c - 1) + 2 * px(r, c - 1) + px(r + 1, c - 1));
      const double gy = (px(r + 1, c - 1) + 2 * px(r + 1, c) + px(r + 1, c + 1)) -
                        (px(r - 1, c - 1) + 2 * px(r - 1, c) + px(r - 1, c + 1));
      const double m = std::hypot(gx, gy);
      const auto i = static_cast<std::size_t>(r), j = static_cast<std::size_t>(c);
      mag(i, j) = m;
      max_mag = std::max(max_mag, m);
      double angle = std::atan2(gy, gx) * 180.0 / 3.14159265358979323846;
      if (angle < 0) angle += 180.0;
      dir(i, j) = angle < 22.5 || angle >= 157.5 ? 0
                  : angle < 67.5                 ? 1
                  : angle < 112.5                ? 2
                                                 : 3;
    }
  }

  EdgeSet edges{image.rows(), image.cols(), {},
                Grid<std::uint8_t>(image.rows(), image.cols(), 0)};
  if (!(max_mag > 1e-12)) {
    throw Error("canny: image has no gradients, edge set is empty");
  }

  // Non-maximum suppression. Ties keep the pixel on the low-index side.
  static constexpr int kStep[4][2] = {{0, 1}, {1, 1}, {1, 0}, {1, -1}};
  auto mag_at = [&](long r, long c) {
    if (r < 0 || c < 0 || r >= rows || c >= cols) return 0.0;
    return mag(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
  };
  Grid<double> thin(image.rows(), image.cols(), 0.0);
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      const int k = dir(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      const double m = mag_at(r, c);
      const double fwd = mag_at(r + kStep[k][0], c + kStep[k][1]);
      const double bwd = mag_at(r - kStep[k][0], c - kStep[k][1]);
      if (m >= fwd && m > bwd) {
        thin(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m;
      }
    }
  }

  // Hysteresis: weak pixels survive when 8-connected to a strong one.
  const double hi = p.high * max_mag, lo = p.low * max_mag;
  std::vector<std::pair<long, long>> queue;
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      const auto i = static_cast<std::size_t>(r), j = static_cast<std::size_t>(c);
      if (thin(i, j) >= hi && thin(i, j) > 0.0) {
        edges.mask(i, j) = 1;
        queue.emplace_back(r, c);
      }
    }
  }
  while (!queue.empty()) {
    const auto [r, c] = queue.back();
    queue.pop_back();
    for (long dr = -1; dr <= 1; ++dr) {
      for (long dc = -1; dc <= 1; ++dc) {
        const long rr = r + dr, cc = c + dc;
        if (rr < 0 || cc < 0 || rr >= rows || cc >= cols) continue;
        const auto i = static_cast<std::size_t>(rr), j = static_cast<std::size_t>(cc);
        if (!edges.mask(i, j) && thin(i, j) >= lo && thin(i, j) > 0.0) {
          edges.mask(i, j) = 1;
          queue.emplace_back(rr, cc);
        }
      }
    }
  }
  for (std::size_t r = 0; r < image.rows(); ++r) {
    for (std::size_t c = 0; c < image.cols(); ++c) {
      if (edges.mask(r, c)) edges.pixels.emplace_back(r, c);
    }
  }
  if (edges.pixels.empty()) throw Error("canny: no edges above threshold");
  return edges;
}

/// Soft edge error: (10 / |E|) sum_{n in E} min_{j in 3x3(n)} |x_j - x*_j|,
/// window clipped at the image border.
inline double see(const Grid<double>& x, const Grid<double>& truth,
                  const EdgeSet& edges) {
  detail::require_same_shape(x, truth, "see");
  if (edges.pixels.empty()) throw Error("see: empty edge set");
  if (edges.rows != x.rows() || edges.cols != x.cols()) {
    throw Error("see: edge set shape differs from the depth maps");
  }
  const long rows = static_cast<long>(x.rows()), cols = static_cast<long>(x.cols());
  double sum = 0.0;
  for (const auto& [r0, c0] : edges.pixels) {
    double best = INFINITY;
    for (long dr = -1; dr <= 1; ++dr) {
      for (long dc = -1; dc <= 1; ++dc) {
        const long r = static_cast<long>(r0) + dr, c = static_cast<long>(c0) + dc;
        if (r < 0 || c < 0 || r >= rows || c >= cols) continue;
        const auto i = static_cast<std::size_t>(r), j = static_cast<std::size_t>(c);
        best = std::min(best, std::abs(x(i, j) - truth(i, j)));
      }
    }
    sum += best;
  }
  return 10.0 / static_cast<double>(edges.pixels.size()) * sum;
}

inline double see(const DepthMap& x, const DepthMap& truth, const EdgeSet& e) {
  return see(x.grid(), truth.grid(), e);
}

}  // namespace ulidar
