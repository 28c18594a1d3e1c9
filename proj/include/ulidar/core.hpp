// ============================================================================
// core.hpp -- shared domain types for single-photon Lidar reconstruction
//
// Depth convention: every public depth map is normalized to [0, 1] by the
// number of time bins T (depth = bin / T). Time bins are 0-based. Internal
// solvers may work in bin units and convert at their boundaries.
// ============================================================================
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ulidar {

// ============================================================================
// Errors
// ============================================================================

/// Data or model error: invalid input values, mismatched shapes, corrupt
/// files, numerical breakdown.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}
}  // namespace detail

// ============================================================================
// Grid -- dense row-major 2-D array
// ============================================================================
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_{rows}, cols_{cols}, data_(rows * cols, fill) {}
  Grid(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_{rows}, cols_{cols}, data_{std::move(data)} {
    if (data_.size() != rows_ * cols_) {
      throw Error(detail::concat("grid storage length ", data_.size(),
                                 " does not match ", rows_, "x", cols_));
    }
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  [[nodiscard]] std::span<T> values() noexcept { return data_; }
  [[nodiscard]] std::span<const T> values() const noexcept { return data_; }
  [[nodiscard]] const std::vector<T>& vec() const noexcept { return data_; }

  [[nodiscard]] bool same_shape(const Grid& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }
  template <typename U>
  [[nodiscard]] bool same_shape(const Grid<U>& o) const noexcept {
    return rows_ == o.rows() && cols_ == o.cols();
  }

  friend bool operator==(const Grid&, const Grid&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

inline std::string shape_str(std::size_t rows, std::size_t cols) {
  return detail::concat(rows, "x", cols);
}

template <typename T>
std::string shape_str(const Grid<T>& g) {
  return shape_str(g.rows(), g.cols());
}

// ============================================================================
// HistogramCube -- photon counts y(row, col, bin)
// ============================================================================
class HistogramCube {
 public:
  HistogramCube() = default;
  HistogramCube(std::size_t rows, std::size_t cols, std::size_t bins)
      : rows_{rows}, cols_{cols}, bins_{bins}, counts_(rows * cols * bins, 0u) {}
  HistogramCube(std::size_t rows, std::size_t cols, std::size_t bins,
                std::vector<std::uint32_t> counts)
      : rows_{rows}, cols_{cols}, bins_{bins}, counts_{std::move(counts)} {
    if (counts_.size() != rows_ * cols_ * bins_) {
      throw Error(detail::concat("cube storage length ", counts_.size(),
                                 " does not match ", rows_, "x", cols_, "x",
                                 bins_));
    }
  }

  /// Builds a cube from signed counts, rejecting negatives.
  static HistogramCube from_signed(std::size_t rows, std::size_t cols,
                                   std::size_t bins,
                                   std::span<const std::int64_t> counts) {
    if (counts.size() != rows * cols * bins) {
      throw Error(detail::concat("cube storage length ", counts.size(),
                                 " does not match ", rows, "x", cols, "x",
                                 bins));
    }
    std::vector<std::uint32_t> out(counts.size());
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (counts[i] < 0) {
        const std::size_t px = i / bins;
        throw Error(detail::concat("negative count ", counts[i], " at row ",
                                   px / cols, ", col ", px % cols, ", bin ",
                                   i % bins));
      }
      out[i] = static_cast<std::uint32_t>(counts[i]);
    }
    return {rows, cols, bins, std::move(out)};
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t bins() const noexcept { return bins_; }
  [[nodiscard]] std::size_t pixels() const noexcept { return rows_ * cols_; }

  std::uint32_t& operator()(std::size_t r, std::size_t c, std::size_t t) {
    return counts_[(r * cols_ + c) * bins_ + t];
  }
  std::uint32_t operator()(std::size_t r, std::size_t c, std::size_t t) const {
    return counts_[(r * cols_ + c) * bins_ + t];
  }

  /// Histogram of pixel index n = row * cols + col.
  [[nodiscard]] std::span<const std::uint32_t> pixel(std::size_t n) const {
    return std::span<const std::uint32_t>(counts_).subspan(n * bins_, bins_);
  }
  [[nodiscard]] std::span<std::uint32_t> pixel(std::size_t n) {
    return std::span<std::uint32_t>(counts_).subspan(n * bins_, bins_);
  }

  [[nodiscard]] std::span<const std::uint32_t> counts() const noexcept {
    return counts_;
  }

  [[nodiscard]] std::uint64_t total() const noexcept {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

  friend bool operator==(const HistogramCube&, const HistogramCube&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t bins_ = 0;
  std::vector<std::uint32_t> counts_;
};

/// Real-valued cube with the same (row, col, bin) layout, used for filtered
/// histograms.
struct RealCube {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t bins = 0;
  std::vector<double> data;

  RealCube() = default;
  RealCube(std::size_t r, std::size_t c, std::size_t t)
      : rows{r}, cols{c}, bins{t}, data(r * c * t, 0.0) {}

  static RealCube from(const HistogramCube& cube) {
    RealCube out(cube.rows(), cube.cols(), cube.bins());
    auto src = cube.counts();
    for (std::size_t i = 0; i < src.size(); ++i) out.data[i] = src[i];
    return out;
  }

  double& operator()(std::size_t r, std::size_t c, std::size_t t) {
    return data[(r * cols + c) * bins + t];
  }
  double operator()(std::size_t r, std::size_t c, std::size_t t) const {
    return data[(r * cols + c) * bins + t];
  }
  [[nodiscard]] std::span<const double> pixel(std::size_t n) const {
    return std::span<const double>(data).subspan(n * bins, bins);
  }
  [[nodiscard]] std::span<double> pixel(std::size_t n) {
    return std::span<double>(data).subspan(n * bins, bins);
  }
};

// ============================================================================
// Irf -- discretized instrument response g(u), unit sum
// ============================================================================

/// Taps are stored over a finite window. Tap i holds g(u) at the integer
/// delay u = shift + (i - center), so the peak tap sits at `center` and the
/// Gaussian mean mu is at delay `shift` (rounded). A return from a target at
/// depth d (bins) puts mass g(t - d) into bin t.
class Irf {
 public:
  Irf() = default;
  Irf(std::vector<double> taps, std::size_t center, int shift = 0,
      double sigma = 0.0)
      : taps_{std::move(taps)}, center_{center}, shift_{shift}, sigma_{sigma} {
    if (taps_.empty() || center_ >= taps_.size()) {
      throw Error("IRF needs at least one tap and a center inside the window");
    }
    double sum = 0.0;
    for (double v : taps_) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw Error("IRF taps must be finite and non-negative");
      }
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw Error(detail::concat("IRF taps sum to ", sum, ", expected 1"));
    }
  }

  [[nodiscard]] std::span<const double> taps() const noexcept { return taps_; }
  [[nodiscard]] std::size_t center() const noexcept { return center_; }
  [[nodiscard]] int shift() const noexcept { return shift_; }
  /// Pulse width in bins: the Gaussian parameter when known, otherwise the
  /// standard deviation of the taps.
  [[nodiscard]] double sigma() const noexcept {
    if (sigma_ > 0.0) return sigma_;
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < taps_.size(); ++i) mean += taps_[i] * static_cast<double>(i);
    for (std::size_t i = 0; i < taps_.size(); ++i) {
      const double u = static_cast<double>(i) - mean;
      var += taps_[i] * u * u;
    }
    return std::sqrt(var);
  }

  /// Smallest and largest integer delay with a stored tap.
  [[nodiscard]] int first_delay() const noexcept {
    return shift_ - static_cast<int>(center_);
  }
  [[nodiscard]] int last_delay() const noexcept {
    return first_delay() + static_cast<int>(taps_.size()) - 1;
  }

  /// g(u) at an integer delay; zero outside the window.
  [[nodiscard]] double at(int delay) const noexcept {
    const int i = delay - first_delay();
    if (i < 0 || i >= static_cast<int>(taps_.size())) return 0.0;
    return taps_[static_cast<std::size_t>(i)];
  }

  /// g(u) at a real delay by linear interpolation of the taps.
  [[nodiscard]] double interp(double delay) const noexcept {
    const double fl = std::floor(delay);
    const double frac = delay - fl;
    const int i = static_cast<int>(fl);
    return (1.0 - frac) * at(i) + frac * at(i + 1);
  }

 private:
  std::vector<double> taps_;
  std::size_t center_ = 0;
  int shift_ = 0;
  double sigma_ = 0.0;
};

// ============================================================================
// Depth / uncertainty maps
// ============================================================================

/// Normalized depth map, every value in [0, 1].
class DepthMap {
 public:
  DepthMap() = default;
  DepthMap(std::size_t rows, std::size_t cols, double fill = 0.0)
      : grid_(rows, cols, fill) {
    validate();
  }
  explicit DepthMap(Grid<double> grid) : grid_{std::move(grid)} { validate(); }

  [[nodiscard]] std::size_t rows() const noexcept { return grid_.rows(); }
  [[nodiscard]] std::size_t cols() const noexcept { return grid_.cols(); }
  [[nodiscard]] std::size_t size() const noexcept { return grid_.size(); }
  double operator()(std::size_t r, std::size_t c) const { return grid_(r, c); }
  double operator[](std::size_t i) const { return grid_[i]; }
  [[nodiscard]] const Grid<double>& grid() const noexcept { return grid_; }
  [[nodiscard]] std::span<const double> values() const noexcept {
    return grid_.values();
  }

  friend bool operator==(const DepthMap&, const DepthMap&) = default;

 private:
  void validate() const {
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      const double v = grid_[i];
      if (!(v >= 0.0 && v <= 1.0)) {
        throw Error(detail::concat("depth value ", v, " at index ", i,
                                   " outside [0, 1]"));
      }
    }
  }
  Grid<double> grid_;
};

/// Strictly positive per-pixel uncertainty, normalized depth units.
class UncertaintyMap {
 public:
  UncertaintyMap() = default;
  explicit UncertaintyMap(Grid<double> grid) : grid_{std::move(grid)} {
    for (std::size_t i = 0; i < grid_.size(); ++i) {
      if (!(grid_[i] > 0.0) || !std::isfinite(grid_[i])) {
        throw Error(detail::concat("uncertainty value ", grid_[i],
                                   " at index ", i, " is not positive"));
      }
    }
  }
  [[nodiscard]] std::size_t rows() const noexcept { return grid_.rows(); }
  [[nodiscard]] std::size_t cols() const noexcept { return grid_.cols(); }
  double operator()(std::size_t r, std::size_t c) const { return grid_(r, c); }
  double operator[](std::size_t i) const { return grid_[i]; }
  [[nodiscard]] const Grid<double>& grid() const noexcept { return grid_; }

 private:
  Grid<double> grid_;
};

/// L depth planes sharing one shape, plane index 0..L-1 (plane 1..L in the
/// usual 1-based numbering).
class MultiscaleDepthStack {
 public:
  MultiscaleDepthStack() = default;
  explicit MultiscaleDepthStack(std::vector<DepthMap> planes)
      : planes_{std::move(planes)} {
    if (planes_.empty()) throw Error("multiscale stack needs at least one plane");
    for (const auto& p : planes_) {
      if (p.rows() != planes_[0].rows() || p.cols() != planes_[0].cols()) {
        throw Error(detail::concat("stack plane shape ",
                                   shape_str(p.rows(), p.cols()),
                                   " differs from ",
                                   shape_str(planes_[0].rows(),
                                             planes_[0].cols())));
      }
    }
  }

  [[nodiscard]] std::size_t scales() const noexcept { return planes_.size(); }
  [[nodiscard]] std::size_t rows() const noexcept { return planes_.front().rows(); }
  [[nodiscard]] std::size_t cols() const noexcept { return planes_.front().cols(); }
  [[nodiscard]] const DepthMap& plane(std::size_t l) const { return planes_.at(l); }
  [[nodiscard]] const std::vector<DepthMap>& planes() const noexcept {
    return planes_;
  }

 private:
  std::vector<DepthMap> planes_;
};

/// Ground truth for simulation: depth x*, unscaled reflectivity pattern and
/// per-bin background level.
struct Scene {
  DepthMap depth;
  Grid<double> reflectivity;
  Grid<double> background;

  Scene() = default;
  Scene(DepthMap d, Grid<double> refl, Grid<double> bg)
      : depth{std::move(d)}, reflectivity{std::move(refl)},
        background{std::move(bg)} {
    if (!reflectivity.same_shape(depth.grid()) ||
        !background.same_shape(depth.grid())) {
      throw Error("scene depth, reflectivity and background shapes differ");
    }
    for (std::size_t i = 0; i < reflectivity.size(); ++i) {
      if (!(reflectivity[i] >= 0.0) || !(background[i] >= 0.0)) {
        throw Error("scene reflectivity and background must be non-negative");
      }
    }
  }
};

// ============================================================================
// Conversions
// ============================================================================

/// Normalized depth to bin units (depth * T).
inline Grid<double> to_bins(const DepthMap& depth, std::size_t bins) {
  if (bins < 2) throw Error("to_bins needs at least 2 time bins");
  Grid<double> out(depth.rows(), depth.cols());
  const double t = static_cast<double>(bins);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = depth[i] * t;
  return out;
}

/// Bin units back to a normalized depth map, clamping into [0, 1].
inline DepthMap from_bins(const Grid<double>& bins_map, std::size_t bins) {
  Grid<double> out(bins_map.rows(), bins_map.cols());
  const double t = static_cast<double>(bins);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = bins_map[i] / t;
    out[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  }
  return DepthMap(std::move(out));
}

}  // namespace ulidar
