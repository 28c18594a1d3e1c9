// ============================================================================
// simulate.hpp -- synthetic SPAD histogram cubes under the Poisson model
//
//   y(n, t) ~ Poisson( r_n g(t - d_n) + b_n )
//
// d_n is in bins (normalized depth * T) and may be fractional; g is then
// linearly interpolated between taps and renormalized over [0, T) so each
// pixel carries exactly r_n expected signal photons.
// ============================================================================
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "core.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace ulidar {

// ============================================================================
// IRF
// ============================================================================

/// Gaussian IRF N(u; mu, sigma^2) sampled over mu +- ceil(4 sigma) bins and
/// renormalized to unit sum.
inline Irf make_gaussian_irf(std::size_t bins, double mu, double sigma) {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw Error(detail::concat("IRF sigma must be positive, got ", sigma));
  }
  const auto half = static_cast<std::size_t>(std::ceil(4.0 * sigma));
  const std::size_t width = 2 * half + 1;
  if (width > bins) {
    throw Error(detail::concat("IRF window of ", width, " taps exceeds ", bins,
                               " time bins"));
  }
  const int shift = static_cast<int>(std::lround(mu));
  std::vector<double> taps(width);
  double sum = 0.0;
  for (std::size_t i = 0; i < width; ++i) {
    const double u = shift + static_cast<double>(i) - static_cast<double>(half);
    const double z = (u - mu) / sigma;
    taps[i] = std::exp(-0.5 * z * z);
    sum += taps[i];
  }
  for (double& v : taps) v /= sum;
  return Irf(std::move(taps), half, shift, sigma);
}

// ============================================================================
// Noise levels
// ============================================================================

struct NoiseSpec {
  double ppp = 4.0;
  double sbr = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(ppp > 0.0) || !(sbr > 0.0) || !std::isfinite(ppp)) {
      throw Error(detail::concat("PPP and SBR must be positive (ppp=", ppp,
                                 ", sbr=", sbr, ")"));
    }
  }
};

struct RateMaps {
  Grid<double> reflectivity;  ///< expected signal photons per pixel, r_n
  Grid<double> background;    ///< expected background photons per bin, b_n
};

/// Scales a reflectivity pattern and picks a uniform background so that
/// PPP = mean(r + b T) and SBR = sum(r) / sum(b T) hold exactly.
inline RateMaps rates_from_ppp_sbr(const Grid<double>& pattern,
                                   std::size_t bins, const NoiseSpec& spec) {
  spec.validate();
  if (pattern.size() == 0) throw Error("empty reflectivity pattern");
  double sum = 0.0;
  for (double v : pattern.values()) {
    if (!(v >= 0.0)) throw Error("reflectivity pattern must be non-negative");
    sum += v;
  }
  const double mean = sum / static_cast<double>(pattern.size());
  if (!(mean > 0.0)) throw Error("reflectivity pattern has zero mean");

  const double signal_mean = spec.ppp * spec.sbr / (1.0 + spec.sbr);
  const double background_total = spec.ppp / (1.0 + spec.sbr);
  RateMaps out{Grid<double>(pattern.rows(), pattern.cols()),
               Grid<double>(pattern.rows(), pattern.cols(),
                            background_total / static_cast<double>(bins))};
  const double scale = signal_mean / mean;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    out.reflectivity[i] = pattern[i] * scale;
  }
  return out;
}

/// Scene with its reflectivity pattern rescaled to the requested noise level.
inline Scene apply_noise_level(const Scene& scene, std::size_t bins,
                               const NoiseSpec& spec) {
  auto rates = rates_from_ppp_sbr(scene.reflectivity, bins, spec);
  return Scene(scene.depth, std::move(rates.reflectivity),
               std::move(rates.background));
}

// ============================================================================
// Sampling
// ============================================================================

/// Expected signal photons per bin for one pixel: r g(t - d) over [0, T),
/// normalized so the total is r (unless the pulse lies entirely outside).
inline void signal_profile(const Irf& irf, double depth_bins, double r,
                           std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  const auto bins = static_cast<long>(out.size());
  const long lo = std::max<long>(
      0, static_cast<long>(std::floor(depth_bins + irf.first_delay())));
  const long hi = std::min<long>(
      bins - 1, static_cast<long>(std::ceil(depth_bins + irf.last_delay())));
  double mass = 0.0;
  for (long t = lo; t <= hi; ++t) {
    const double g = irf.interp(static_cast<double>(t) - depth_bins);
    out[static_cast<std::size_t>(t)] = g;
    mass += g;
  }
  if (mass <= 0.0) return;
  const double scale = r / mass;
  for (long t = lo; t <= hi; ++t) out[static_cast<std::size_t>(t)] *= scale;
}

struct SampleStats {
  std::uint64_t signal_photons = 0;
  std::uint64_t background_photons = 0;

  [[nodiscard]] double ppp(std::size_t pixels) const {
    return static_cast<double>(signal_photons + background_photons) /
           static_cast<double>(pixels);
  }
  [[nodiscard]] double sbr() const {
    return background_photons == 0
               ? INFINITY
               : static_cast<double>(signal_photons) /
                     static_cast<double>(background_photons);
  }
};

struct SampledCube {
  HistogramCube cube;
  SampleStats stats;
};

/// Draws y(n, t) ~ Poisson(s(n, t)). Signal and background photons are drawn
/// separately (their sum has the same law) so the realized SBR is known.
/// Pixel n uses the Philox stream (seed, n): output does not depend on the
/// thread count.
inline SampledCube sample_cube_with_stats(const Scene& scene, const Irf& irf,
                                          std::size_t bins,
                                          std::uint64_t seed) {
  const std::size_t rows = scene.depth.rows();
  const std::size_t cols = scene.depth.cols();
  const std::size_t pixels = rows * cols;
  HistogramCube cube(rows, cols, bins);
  std::vector<std::uint64_t> sig(pixels, 0), bg(pixels, 0);
  const double t_scale = static_cast<double>(bins);

  parallel_for(pixels, [&](std::size_t n) {
    PhiloxStream rng(seed, n);
    std::vector<double> profile(bins);
    signal_profile(irf, scene.depth[n] * t_scale, scene.reflectivity[n],
                   profile);
    const double b = scene.background[n];
    auto hist = cube.pixel(n);
    std::uint64_t s_count = 0, b_count = 0;
    for (std::size_t t = 0; t < bins; ++t) {
      const std::uint32_t s = rng.poisson(profile[t]);
      const std::uint32_t k = rng.poisson(b);
      hist[t] = s + k;
      s_count += s;
      b_count += k;
    }
    sig[n] = s_count;
    bg[n] = b_count;
  });

  SampleStats stats;
  for (std::size_t n = 0; n < pixels; ++n) {
    stats.signal_photons += sig[n];
    stats.background_photons += bg[n];
  }
  return {std::move(cube), stats};
}

inline HistogramCube sample_cube(const Scene& scene, const Irf& irf,
                                 std::size_t bins, std::uint64_t seed) {
  return sample_cube_with_stats(scene, irf, bins, seed).cube;
}

/// Expected photon cube s(n, t) without Poisson noise.
inline RealCube expected_cube(const Scene& scene, const Irf& irf,
                              std::size_t bins) {
  RealCube out(scene.depth.rows(), scene.depth.cols(), bins);
  const double t_scale = static_cast<double>(bins);
  for (std::size_t n = 0; n < scene.depth.size(); ++n) {
    auto px = out.pixel(n);
    signal_profile(irf, scene.depth[n] * t_scale, scene.reflectivity[n], px);
    for (double& v : px) v += scene.background[n];
  }
  return out;
}

// ============================================================================
// Procedural scenes
// ============================================================================

enum class ScenePreset { kFlat, kStep, kPlanes, kSpheres, kRandom };

inline ScenePreset parse_scene_preset(const std::string& name) {
  if (name == "flat") return ScenePreset::kFlat;
  if (name == "step") return ScenePreset::kStep;
  if (name == "planes") return ScenePreset::kPlanes;
  if (name == "spheres") return ScenePreset::kSpheres;
  if (name == "random") return ScenePreset::kRandom;
  throw Error("unknown scene preset '" + name +
              "' (flat, step, planes, spheres, random)");
}

/// Scene with unit-mean reflectivity pattern and zero background; pair with
/// apply_noise_level. Depths stay inside [0.15, 0.85] so the pulse is never
/// clipped by the ends of the histogram.
inline Scene make_scene(ScenePreset preset, std::size_t rows, std::size_t cols,
                        std::uint64_t seed = 0, double flat_depth = 0.5) {
  Grid<double> depth(rows, cols, flat_depth);
  Grid<double> refl(rows, cols, 1.0);
  PhiloxStream rng(seed, stream_id(0x5CE7E, rows, cols));
  const double fr = static_cast<double>(rows);
  const double fc = static_cast<double>(cols);

  auto add_sphere = [&](double cy, double cx, double radius, double front) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double dy = (static_cast<double>(r) - cy) / radius;
        const double dx = (static_cast<double>(c) - cx) / radius;
        const double q = dx * dx + dy * dy;
        if (q < 1.0) {
          const double z = front + 0.1 * (1.0 - std::sqrt(1.0 - q));
          depth(r, c) = std::min(depth(r, c), z);
        }
      }
    }
  };
  auto add_box = [&](double r0, double c0, double r1, double c1, double z,
                     double slope) {
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        const double y = static_cast<double>(r), x = static_cast<double>(c);
        if (y >= r0 && y < r1 && x >= c0 && x < c1) {
          depth(r, c) = std::min(depth(r, c), z + slope * (x - c0) / fc);
        }
      }
    }
  };

  switch (preset) {
    case ScenePreset::kFlat:
      break;
    case ScenePreset::kStep:
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          depth(r, c) = c < cols / 2 ? 0.3 : 0.6;
        }
      }
      break;
    case ScenePreset::kPlanes:
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          depth(r, c) = 0.6 + 0.2 * static_cast<double>(r) / fr;
        }
      }
      add_box(0.2 * fr, 0.15 * fc, 0.7 * fr, 0.55 * fc, 0.3, 0.1);
      add_box(0.5 * fr, 0.6 * fc, 0.9 * fr, 0.9 * fc, 0.45, -0.05);
      break;
    case ScenePreset::kSpheres:
      for (std::size_t i = 0; i < depth.size(); ++i) depth[i] = 0.7;
      add_sphere(0.35 * fr, 0.3 * fc, 0.22 * std::min(fr, fc), 0.3);
      add_sphere(0.65 * fr, 0.7 * fc, 0.18 * std::min(fr, fc), 0.45);
      break;
    case ScenePreset::kRandom: {
      const double base = 0.55 + 0.2 * rng.uniform();
      const double gy = 0.1 * (rng.uniform() - 0.5);
      const double gx = 0.1 * (rng.uniform() - 0.5);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          depth(r, c) = base + gy * static_cast<double>(r) / fr +
                        gx * static_cast<double>(c) / fc;
        }
      }
      const int objects = 2 + static_cast<int>(rng.next_u32() % 4);
      for (int k = 0; k < objects; ++k) {
        const double z = 0.2 + 0.35 * rng.uniform();
        if (rng.next_u32() % 2 == 0) {
          const double r0 = fr * 0.8 * rng.uniform();
          const double c0 = fc * 0.8 * rng.uniform();
          const double h = fr * (0.15 + 0.35 * rng.uniform());
          const double w = fc * (0.15 + 0.35 * rng.uniform());
          add_box(r0, c0, r0 + h, c0 + w, z, 0.1 * (rng.uniform() - 0.5));
        } else {
          add_sphere(fr * rng.uniform(), fc * rng.uniform(),
                     std::min(fr, fc) * (0.1 + 0.2 * rng.uniform()), z);
        }
      }
      const double fy = 1.0 + 5.0 * rng.uniform();
      const double fx = 1.0 + 5.0 * rng.uniform();
      const double phase = 6.283185307179586 * rng.uniform();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double tex =
              std::sin(fy * 6.283185307179586 * static_cast<double>(r) / fr +
                       phase) *
              std::cos(fx * 6.283185307179586 * static_cast<double>(c) / fc);
          refl(r, c) = 0.6 + 0.35 * tex;
        }
      }
      break;
    }
  }
  for (std::size_t i = 0; i < depth.size(); ++i) {
    depth[i] = std::clamp(depth[i], 0.15, 0.85);
  }
  return Scene(DepthMap(std::move(depth)), std::move(refl),
               Grid<double>(rows, cols, 0.0));
}

/// Scene from a user depth map with uniform reflectivity.
inline Scene scene_from_depth(const DepthMap& depth) {
  return Scene(depth, Grid<double>(depth.rows(), depth.cols(), 1.0),
               Grid<double>(depth.rows(), depth.cols(), 0.0));
}

}  // namespace ulidar
