// Finite-difference oracle for the network gradients.
//
// The network is piecewise smooth: LeakyReLU, |d - x| and the l1 loss have
// kinks. A central difference whose probes land on different linear pieces
// than the base point measures a secant, not the derivative. Each probe
// therefore records the branch taken at every kink; when any probe
// disagrees with the base point the step is halved until all agree, so
// every difference is taken inside one smooth piece.
#pragma once

#include <ulidar/unroll/network.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace gradcheck {

using namespace ulidar;
using namespace ulidar::unroll;

inline std::vector<std::int8_t> branches(const ForwardResult<double>& f,
                                         const Grid<double>& truth) {
  std::vector<std::int8_t> s;
  auto signs = [&](const Tensor<double>& t) {
    for (double v : t.data) s.push_back(v >= 0.0 ? 1 : 0);
  };
  auto sgn = [](double v) -> std::int8_t { return v > 0 ? 1 : (v < 0 ? -1 : 0); };
  for (const auto& c : f.stages) {
    for (const auto& t : c.fe_pre) signs(t);
    for (std::size_t i = 0; i < 3; ++i) signs(c.sq_pre[i]);
    if (c.wbar.size()) {
      for (const auto& t : c.ex_pre) signs(t);
      for (const auto& g : c.g_pre) {
        for (std::size_t i = 0; i < 3; ++i) signs(g[i]);
      }
      const std::size_t np = c.x.plane_size();
      for (std::size_t i = 0; i < c.d_in.size(); ++i) {
        s.push_back(sgn(c.d_in.data[i] - c.x.data[i % np]));
      }
    }
    for (std::size_t n = 0; n < truth.size(); ++n) s.push_back(sgn(c.x.data[n] - truth[n]));
  }
  return s;
}

struct Result {
  double max_rel = 0.0;        ///< with kink-aware steps
  double max_rel_fixed = 0.0;  ///< plain central differences at the nominal step
  std::size_t coords = 0;
  std::size_t shrunk = 0;      ///< coordinates that needed a smaller step
  std::string worst;
};

/// loss(fp) - loss(fm) summed pixel by pixel, which avoids cancelling two
/// large totals.
inline double loss_difference(const ForwardResult<double>& fp,
                              const ForwardResult<double>& fm, const Grid<double>& truth) {
  double d = 0.0;
  for (std::size_t k = 0; k < fp.stages.size(); ++k) {
    for (std::size_t n = 0; n < truth.size(); ++n) {
      d += std::abs(fp.stages[k].x.data[n] - truth[n]) -
           std::abs(fm.stages[k].x.data[n] - truth[n]);
    }
  }
  return d;
}

inline double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compares backward() against central differences of loss() for every
/// weight. Relative errors use max(|analytic|, |numeric|, floor).
inline Result check(NetworkWeights<double>& w, const Tensor<double>& input,
                    const Grid<double>& truth, const std::vector<Tensor<double>>& noise,
                    SelectMode mode, double h = 1e-3, double floor = 1e-8) {
  const auto base = forward(input, w, mode, &noise);
  const auto sig0 = branches(base, truth);
  const auto grad = backward(base, truth, w);
  std::vector<const Kernel<double>*> g;
  grad.for_each([&](const std::string&, const Kernel<double>& k) { g.push_back(&k); });

  Result r;
  std::size_t idx = 0;
  w.for_each([&](const std::string& name, Kernel<double>& k) {
    for (std::size_t j = 0; j < k.size(); ++j) {
      const double orig = k.w[j];
      auto eval = [&](double step, double& diff, bool& smooth) {
        k.w[j] = orig + step;
        const auto fp = forward(input, w, mode, &noise);
        k.w[j] = orig - step;
        const auto fm = forward(input, w, mode, &noise);
        k.w[j] = orig;
        diff = loss_difference(fp, fm, truth);
        smooth = branches(fp, truth) == sig0 && branches(fm, truth) == sig0;
      };
      double diff;
      bool smooth;
      eval(h, diff, smooth);
      const double analytic = g[idx]->w[j];
      const double fixed = diff / (2.0 * h);
      // One Richardson step on (step, step / 2) cancels the O(step^2)
      // truncation term; both differences must stay on the base branches.
      double step = h, half = 0.0;
      bool half_smooth = false;
      for (;;) {
        if (smooth) eval(0.5 * step, half, half_smooth);
        if ((smooth && half_smooth) || step < 1e-9) break;
        step *= 0.5;
        eval(step, diff, smooth);
      }
      if (step < h) ++r.shrunk;
      const double numeric = (4.0 * half / step - diff / (2.0 * step)) / 3.0;
      const double e = rel_error(analytic, numeric, floor);
      r.max_rel_fixed = std::max(r.max_rel_fixed, rel_error(analytic, fixed, floor));
      if (e > r.max_rel) {
        r.max_rel = e;
        r.worst = name + "[" + std::to_string(j) + "]";
      }
      ++r.coords;
    }
    ++idx;
  });
  return r;
}

/// The standard small instance: 8x8 input, K = 2, L = 4, frozen noise.
struct Instance {
  NetworkWeights<double> weights;
  Tensor<double> input;
  Grid<double> truth;
  std::vector<Tensor<double>> noise;
};

inline Instance make_instance(std::uint64_t seed, std::size_t size = 8, int stages = 2,
                              int scales = 4) {
  NetConfig cfg;
  cfg.stages = stages;
  cfg.scales = scales;
  cfg.seed = seed;
  Instance in{init_weights<double>(cfg),
              Tensor<double>(static_cast<std::size_t>(scales), size, size),
              Grid<double>(size, size), {}};
  PhiloxStream rng(seed, 0xD47A);
  for (auto& v : in.input.data) v = 0.2 + 0.6 * rng.uniform();
  for (auto& v : in.truth.values()) v = 0.2 + 0.6 * rng.uniform();
  in.noise = gumbel_noise<double>(cfg, size, size, seed, 0xF00D);
  return in;
}

}  // namespace gradcheck
