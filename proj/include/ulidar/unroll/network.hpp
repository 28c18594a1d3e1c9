// ============================================================================
// network.hpp -- the unrolled attention network
//
// Each of the K stages mirrors one sweep of the Bayesian coordinate descent:
//
//   feature extraction   3 x (conv L->L, LeakyReLU)          d -> f
//   squeeze (hard attn)  a = sigmoid(PAConv(f)), logits = a * f,
//                        x_n = d_n(l'), l' = argmax_l logits_n(l)
//   expansion (soft)     e = FE(|d - x|); per scale l a 2-channel PAConv on
//                        (f(l), e(l)), wbar = softmax(rho * z)[0],
//                        dbar(l) = wbar d(l) + (1 - wbar) x
//
// The last stage stops after the squeeze block. Training replaces the argmax
// by Gumbel-Softmax with a straight-through estimator; a relaxed mode that
// also uses the soft weights in the forward pass is provided so the
// hand-written gradients can be checked against finite differences.
// ============================================================================
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "../core.hpp"
#include "../rng.hpp"
#include "layers.hpp"

namespace ulidar::unroll {

struct NetConfig {
  int stages = 4;          ///< K
  int scales = 12;         ///< L, also the channel count
  double leaky = 0.2;
  double tau = 1.0;        ///< Gumbel-Softmax temperature
  double rho = 2.0;        ///< expansion softmax sharpening
  double alpha = 0.01;     ///< uncertainty prior
  double beta = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    if (stages < 2) throw Error("network needs at least 2 stages");
    if (scales < 1) throw Error("network needs at least 1 scale");
    if (!(tau > 0.0)) throw Error("Gumbel temperature must be positive");
  }
};

/// (K - 1)(90 L^2 + 144 L) + 63 L^2 bias-free 3x3 weights.
inline std::uint64_t count_parameters(const NetConfig& cfg) {
  const auto k = static_cast<std::uint64_t>(cfg.stages);
  const auto l = static_cast<std::uint64_t>(cfg.scales);
  return (k - 1) * (90 * l * l + 144 * l) + 63 * l * l;
}

// ============================================================================
// Weights
// ============================================================================

template <typename T>
struct StageWeights {
  std::array<Kernel<T>, 3> fe;     ///< feature extraction, L -> L
  std::array<Kernel<T>, 4> sq;     ///< squeeze PAConv (cube), L -> L
  std::array<Kernel<T>, 3> ex_fe;  ///< expansion difference features, L -> L
  std::vector<std::array<Kernel<T>, 4>> group;  ///< per-scale PAConv, 2 -> 2
  bool has_expansion = true;
};

template <typename T>
struct NetworkWeights {
  NetConfig config;
  std::vector<StageWeights<T>> stages;

  NetworkWeights() = default;
  explicit NetworkWeights(const NetConfig& cfg) : config{cfg} {
    cfg.validate();
    const auto l = static_cast<std::size_t>(cfg.scales);
    for (int s = 0; s < cfg.stages; ++s) {
      StageWeights<T> sw;
      for (auto& k : sw.fe) k = Kernel<T>(l, l);
      for (auto& k : sw.sq) k = Kernel<T>(l, l);
      sw.has_expansion = s + 1 < cfg.stages;
      if (sw.has_expansion) {
        for (auto& k : sw.ex_fe) k = Kernel<T>(l, l);
        sw.group.resize(l);
        for (auto& g : sw.group) {
          for (auto& k : g) k = Kernel<T>(2, 2);
        }
      }
      stages.push_back(std::move(sw));
    }
  }

  /// Visits every kernel in canonical (file) order with its tensor name.
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  [[nodiscard]] std::uint64_t parameter_count() const {
    std::uint64_t n = 0;
    for_each([&](const std::string&, const Kernel<T>& k) { n += k.size(); });
    return n;
  }

  /// Same shapes, zero values.
  [[nodiscard]] NetworkWeights zeros_like() const { return NetworkWeights(config); }

  template <typename U>
  [[nodiscard]] NetworkWeights<U> cast() const {
    NetworkWeights<U> out(config);
    std::vector<const Kernel<T>*> src;
    for_each([&](const std::string&, const Kernel<T>& k) { src.push_back(&k); });
    std::size_t i = 0;
    out.for_each([&](const std::string&, Kernel<U>& k) {
      for (std::size_t j = 0; j < k.size(); ++j) k.w[j] = static_cast<U>(src[i]->w[j]);
      ++i;
    });
    return out;
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    for (std::size_t s = 0; s < self.stages.size(); ++s) {
      auto& sw = self.stages[s];
      const std::string p = "s" + std::to_string(s + 1) + ".";
      for (std::size_t i = 0; i < 3; ++i) fn(p + "fe.conv" + std::to_string(i), sw.fe[i]);
      for (std::size_t i = 0; i < 4; ++i) fn(p + "sq.conv" + std::to_string(i), sw.sq[i]);
      if (!sw.has_expansion) continue;
      for (std::size_t i = 0; i < 3; ++i) {
        fn(p + "ex.fe.conv" + std::to_string(i), sw.ex_fe[i]);
      }
      for (std::size_t l = 0; l < sw.group.size(); ++l) {
        for (std::size_t i = 0; i < 4; ++i) {
          fn(p + "ex.g" + std::to_string(l + 1) + ".conv" + std::to_string(i),
             sw.group[l][i]);
        }
      }
    }
  }
};

/// Fan-in scaled uniform init with LeakyReLU gain: bound = gain sqrt(3 / fan_in),
/// gain = sqrt(2 / (1 + slope^2)). Tensor i draws from Philox stream (seed, i).
template <typename T>
NetworkWeights<T> init_weights(const NetConfig& cfg) {
  NetworkWeights<T> w(cfg);
  const double gain = std::sqrt(2.0 / (1.0 + cfg.leaky * cfg.leaky));
  std::uint64_t index = 0;
  w.for_each([&](const std::string&, Kernel<T>& k) {
    PhiloxStream rng(cfg.seed, stream_id(0x1417, index++));
    const double bound = gain * std::sqrt(3.0 / (9.0 * static_cast<double>(k.in)));
    for (auto& v : k.w) v = static_cast<T>(bound * (2.0 * rng.uniform() - 1.0));
  });
  return w;
}

// ============================================================================
// Forward pass
// ============================================================================

enum class SelectMode {
  kInfer,    ///< deterministic argmax, no noise
  kTrain,    ///< Gumbel noise, hard forward, straight-through gradient
  kRelaxed,  ///< Gumbel noise, soft forward (exactly differentiable)
};

/// Hard selection over L logits at every pixel. In train and relaxed modes
/// soft = softmax((logits + noise) / tau) and hard = one-hot(argmax soft);
/// in infer mode hard = one-hot(argmax logits). Ties pick the smallest index.
template <typename T>
struct Selection {
  Tensor<T> soft;
  Tensor<T> hard;
  std::vector<std::uint16_t> index;
};

template <typename T>
Selection<T> gumbel_hard_select(const Tensor<T>& logits, T tau, SelectMode mode,
                                const Tensor<T>* noise) {
  const std::size_t l = logits.channels, np = logits.plane_size();
  Selection<T> s{Tensor<T>(l, logits.height, logits.width),
                 Tensor<T>(l, logits.height, logits.width),
                 std::vector<std::uint16_t>(np, 0)};
  std::vector<T> y(l);
  for (std::size_t n = 0; n < np; ++n) {
    std::size_t best = 0;
    if (mode == SelectMode::kInfer) {
      for (std::size_t k = 1; k < l; ++k) {
        if (logits.data[k * np + n] > logits.data[best * np + n]) best = k;
      }
      s.soft.data[best * np + n] = T{1};
    } else {
      T ymax = -INFINITY;
      for (std::size_t k = 0; k < l; ++k) {
        const T g = noise ? noise->data[k * np + n] : T{};
        y[k] = (logits.data[k * np + n] + g) / tau;
        if (y[k] > ymax) {
          ymax = y[k];
          best = k;
        }
      }
      T z{};
      for (std::size_t k = 0; k < l; ++k) {
        y[k] = std::exp(y[k] - ymax);
        z += y[k];
      }
      for (std::size_t k = 0; k < l; ++k) s.soft.data[k * np + n] = y[k] / z;
    }
    s.hard.data[best * np + n] = T{1};
    s.index[n] = static_cast<std::uint16_t>(best);
  }
  return s;
}

/// Activations retained for the backward pass.
template <typename T>
struct StageCache {
  Tensor<T> d_in;                   ///< stage input stack (L planes)
  std::array<Tensor<T>, 3> fe_pre, fe_act;
  std::array<Tensor<T>, 4> sq_pre;
  std::array<Tensor<T>, 3> sq_act;
  Tensor<T> attention;              ///< sigmoid of the last PAConv layer
  Tensor<T> logits;                 ///< selection weights w = a * f
  Tensor<T> noise;
  Selection<T> select;
  Tensor<T> x;                      ///< squeezed depth, 1 channel

  // expansion (absent in the last stage)
  Tensor<T> diff;                   ///< |d - x|
  std::array<Tensor<T>, 3> ex_pre, ex_act;
  std::vector<Tensor<T>> g_in;      ///< per scale 2-channel input
  std::vector<std::array<Tensor<T>, 4>> g_pre;
  std::vector<std::array<Tensor<T>, 3>> g_act;
  Tensor<T> wbar;                   ///< expansion weights in [0, 1]
  Tensor<T> d_out;                  ///< refined stack dbar
};

/// Expansion output for one entry: x + wbar (d - x), kept inside [min, max]
/// of (d, x) so rounding cannot leave the segment.
template <typename T>
T convex_step(T d, T x, T wbar) {
  return std::clamp(x + wbar * (d - x), std::min(d, x), std::max(d, x));
}

template <typename T>
struct ForwardResult {
  std::vector<StageCache<T>> stages;
  SelectMode mode = SelectMode::kInfer;

  [[nodiscard]] const Tensor<T>& output() const { return stages.back().x; }
};

namespace detail {

template <typename T>
std::array<Tensor<T>, 3> run_chain3(const Tensor<T>& in,
                                    const std::array<Kernel<T>, 3>& k, T slope,
                                    std::array<Tensor<T>, 3>& pre) {
  std::array<Tensor<T>, 3> act;
  const Tensor<T>* cur = &in;
  for (std::size_t i = 0; i < 3; ++i) {
    pre[i] = conv3x3(*cur, k[i]);
    act[i] = leaky_relu(pre[i], slope);
    cur = &act[i];
  }
  return act;
}

template <typename T>
Tensor<T> channel(const Tensor<T>& t, std::size_t c) {
  Tensor<T> out(1, t.height, t.width);
  std::copy_n(t.plane(c), t.plane_size(), out.data.begin());
  return out;
}

}  // namespace detail

/// Runs all stages. `noise` holds one L-plane Gumbel tensor per stage and is
/// required for train and relaxed modes (nullptr means zero noise).
template <typename T>
ForwardResult<T> forward(const Tensor<T>& stack, const NetworkWeights<T>& weights,
                         SelectMode mode,
                         const std::vector<Tensor<T>>* noise = nullptr) {
  const NetConfig& cfg = weights.config;
  const auto l = static_cast<std::size_t>(cfg.scales);
  if (stack.channels != l) {
    throw Error(ulidar::detail::concat("network expects ", l,
                                       " input planes, got ", stack.channels));
  }
  if (noise && noise->size() != weights.stages.size()) {
    throw Error("one Gumbel noise tensor per stage is required");
  }
  const T slope = static_cast<T>(cfg.leaky);
  const T rho = static_cast<T>(cfg.rho);
  const std::size_t np = stack.plane_size();

  ForwardResult<T> res;
  res.mode = mode;
  Tensor<T> d = stack;
  for (std::size_t s = 0; s < weights.stages.size(); ++s) {
    const auto& sw = weights.stages[s];
    StageCache<T> c;
    c.d_in = d;
    c.fe_act = detail::run_chain3(c.d_in, sw.fe, slope, c.fe_pre);
    const Tensor<T>& feat = c.fe_act[2];

    // Squeeze.
    const Tensor<T>* cur = &feat;
    for (std::size_t i = 0; i < 4; ++i) {
      c.sq_pre[i] = conv3x3(*cur, sw.sq[i]);
      if (i < 3) {
        c.sq_act[i] = leaky_relu(c.sq_pre[i], slope);
        cur = &c.sq_act[i];
      }
    }
    c.attention = c.sq_pre[3];
    for (auto& v : c.attention.data) v = sigmoid(v);
    c.logits = c.attention;
    for (std::size_t i = 0; i < c.logits.size(); ++i) c.logits.data[i] *= feat.data[i];
    if (noise && mode != SelectMode::kInfer) c.noise = (*noise)[s];
    c.select = gumbel_hard_select(c.logits, static_cast<T>(cfg.tau), mode,
                                  c.noise.size() ? &c.noise : nullptr);
    c.x = Tensor<T>(1, d.height, d.width);
    for (std::size_t n = 0; n < np; ++n) {
      if (mode == SelectMode::kRelaxed) {
        T acc{}, lo = d.data[n], hi = d.data[n];
        for (std::size_t k = 0; k < l; ++k) {
          const T v = d.data[k * np + n];
          acc += c.select.soft.data[k * np + n] * v;
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        c.x.data[n] = std::clamp(acc, lo, hi);
      } else {
        c.x.data[n] = d.data[c.select.index[n] * np + n];
      }
    }

    if (sw.has_expansion) {
      c.diff = Tensor<T>(l, d.height, d.width);
      for (std::size_t k = 0; k < l; ++k) {
        for (std::size_t n = 0; n < np; ++n) {
          c.diff.data[k * np + n] = std::abs(d.data[k * np + n] - c.x.data[n]);
        }
      }
      c.ex_act = detail::run_chain3(c.diff, sw.ex_fe, slope, c.ex_pre);
      c.wbar = Tensor<T>(l, d.height, d.width);
      c.d_out = Tensor<T>(l, d.height, d.width);
      c.g_in.resize(l);
      c.g_pre.resize(l);
      c.g_act.resize(l);
      for (std::size_t k = 0; k < l; ++k) {
        Tensor<T> gin(2, d.height, d.width);
        std::copy_n(feat.plane(k), np, gin.plane(0));
        std::copy_n(c.ex_act[2].plane(k), np, gin.plane(1));
        c.g_in[k] = std::move(gin);
        const Tensor<T>* g = &c.g_in[k];
        for (std::size_t i = 0; i < 4; ++i) {
          c.g_pre[k][i] = conv3x3(*g, sw.group[k][i]);
          if (i < 3) {
            c.g_act[k][i] = leaky_relu(c.g_pre[k][i], slope);
            g = &c.g_act[k][i];
          }
        }
        const Tensor<T>& z = c.g_pre[k][3];
        for (std::size_t n = 0; n < np; ++n) {
          // softmax over two channels, first channel
          const T wb = sigmoid(rho * (z.data[n] - z.data[np + n]));
          c.wbar.data[k * np + n] = wb;
          c.d_out.data[k * np + n] = convex_step(d.data[k * np + n], c.x.data[n], wb);
        }
      }
      d = c.d_out;
    }
    res.stages.push_back(std::move(c));
  }
  return res;
}

/// Gumbel noise for every stage, drawn from Philox stream (seed, stream + s).
template <typename T>
std::vector<Tensor<T>> gumbel_noise(const NetConfig& cfg, std::size_t h,
                                    std::size_t w, std::uint64_t seed,
                                    std::uint64_t stream) {
  std::vector<Tensor<T>> out;
  for (int s = 0; s < cfg.stages; ++s) {
    PhiloxStream rng(seed, stream_id(stream, static_cast<std::uint64_t>(s), 0x6E));
    Tensor<T> t(static_cast<std::size_t>(cfg.scales), h, w);
    for (auto& v : t.data) v = static_cast<T>(rng.gumbel());
    out.push_back(std::move(t));
  }
  return out;
}

// ============================================================================
// Loss and diagnostics
// ============================================================================

/// sum_k || x^k - x* ||_1 with 64-bit accumulation.
template <typename T>
double loss(const ForwardResult<T>& fwd, const Grid<double>& truth) {
  double total = 0.0;
  for (const auto& c : fwd.stages) {
    if (c.x.plane_size() != truth.size()) {
      throw Error("loss: prediction and ground truth shapes differ");
    }
    for (std::size_t n = 0; n < truth.size(); ++n) {
      total += std::abs(static_cast<double>(c.x.data[n]) - truth[n]);
    }
  }
  return total;
}

/// delta^k_n = (1 / (L + 2)) sum_l |x^k_n - d^{k,(l)}_n| for every stage.
template <typename T>
std::vector<Grid<double>> stage_change(const ForwardResult<T>& fwd) {
  std::vector<Grid<double>> out;
  for (const auto& c : fwd.stages) {
    const std::size_t l = c.d_in.channels, np = c.d_in.plane_size();
    Grid<double> g(c.d_in.height, c.d_in.width);
    for (std::size_t n = 0; n < np; ++n) {
      double s = 0.0;
      for (std::size_t k = 0; k < l; ++k) {
        s += std::abs(static_cast<double>(c.x.data[n]) -
                      static_cast<double>(c.d_in.data[k * np + n]));
      }
      g[n] = s / static_cast<double>(l + 2);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// eps_n = ( mean_{k<K} C^k_n + beta ) / (L + 2 + alpha), with
/// C^k_n = sum_l softmax_l(1 - wbar^k)_n |d^{k,(l)}_n - x^K_n|.
template <typename T>
Grid<double> uncertainty(const ForwardResult<T>& fwd, const NetConfig& cfg) {
  const auto& last = fwd.stages.back().x;
  const std::size_t np = last.plane_size();
  const auto l = static_cast<std::size_t>(cfg.scales);
  Grid<double> cost(last.height, last.width, 0.0);
  std::size_t used = 0;
  std::vector<double> e(l);
  for (const auto& c : fwd.stages) {
    if (c.wbar.size() == 0) continue;
    ++used;
    for (std::size_t n = 0; n < np; ++n) {
      double mx = -INFINITY;
      for (std::size_t k = 0; k < l; ++k) {
        e[k] = 1.0 - static_cast<double>(c.wbar.data[k * np + n]);
        mx = std::max(mx, e[k]);
      }
      double z = 0.0;
      for (std::size_t k = 0; k < l; ++k) {
        e[k] = std::exp(e[k] - mx);
        z += e[k];
      }
      double cn = 0.0;
      for (std::size_t k = 0; k < l; ++k) {
        cn += e[k] / z *
              std::abs(static_cast<double>(c.d_in.data[k * np + n]) -
                       static_cast<double>(last.data[n]));
      }
      cost[n] += cn;
    }
  }
  Grid<double> eps(last.height, last.width);
  const double den = static_cast<double>(l) + 2.0 + cfg.alpha;
  for (std::size_t n = 0; n < np; ++n) {
    const double mean_cost = used ? cost[n] / static_cast<double>(used) : 0.0;
    eps[n] = (mean_cost + cfg.beta) / den;
  }
  return eps;
}

template <typename T>
Grid<double> to_grid(const Tensor<T>& t, std::size_t channel = 0) {
  Grid<double> g(t.height, t.width);
  const T* p = t.plane(channel);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<double>(p[i]);
  return g;
}

template <typename T>
Tensor<T> stack_tensor(const MultiscaleDepthStack& stack) {
  Tensor<T> t(stack.scales(), stack.rows(), stack.cols());
  for (std::size_t k = 0; k < stack.scales(); ++k) {
    const auto v = stack.plane(k).values();
    std::transform(v.begin(), v.end(), t.plane(k),
                   [](double x) { return static_cast<T>(x); });
  }
  return t;
}

// ============================================================================
// Backward pass
// ============================================================================

/// Reverse-mode gradient of loss() w.r.t. every kernel. Hard selections use
/// the straight-through estimator (d x / d d(l) = hard(l), d x / d soft(l) =
/// d(l)); in relaxed mode the soft forward is differentiated exactly. |.| and
/// the l1 loss use subgradient 0 at 0. `scale` multiplies the loss.
template <typename T>
NetworkWeights<T> backward(const ForwardResult<T>& fwd, const Grid<double>& truth,
                           const NetworkWeights<T>& weights, T scale = T{1}) {
  if (fwd.mode == SelectMode::kInfer) {
    throw Error("backward needs a forward pass run in train or relaxed mode");
  }
  if (fwd.stages.size() != weights.stages.size() || fwd.stages.empty() ||
      fwd.stages.front().fe_pre[0].size() == 0) {
    throw Error("backward: missing retained activations");
  }
  const NetConfig& cfg = weights.config;
  const T slope = static_cast<T>(cfg.leaky);
  const T rho = static_cast<T>(cfg.rho);
  const T tau = static_cast<T>(cfg.tau);
  const auto l = static_cast<std::size_t>(cfg.scales);
  NetworkWeights<T> grad = weights.zeros_like();

  Tensor<T> g_dbar;  // gradient w.r.t. this stage's output stack
  for (std::size_t si = fwd.stages.size(); si-- > 0;) {
    const auto& c = fwd.stages[si];
    const auto& sw = weights.stages[si];
    auto& gw = grad.stages[si];
    const std::size_t np = c.d_in.plane_size();
    const std::size_t h = c.d_in.height, w = c.d_in.width;

    Tensor<T> g_x(1, h, w);
    for (std::size_t n = 0; n < np; ++n) {
      const double e = static_cast<double>(c.x.data[n]) - truth[n];
      g_x.data[n] = e > 0 ? scale : (e < 0 ? -scale : T{});
    }
    Tensor<T> g_d(l, h, w);     // w.r.t. d_in
    Tensor<T> g_feat(l, h, w);  // w.r.t. features fe_act[2]

    if (sw.has_expansion) {
      Tensor<T> g_diff_feat(l, h, w);
      for (std::size_t k = 0; k < l; ++k) {
        Tensor<T> g_z(2, h, w);
        for (std::size_t n = 0; n < np; ++n) {
          const std::size_t i = k * np + n;
          const T gb = g_dbar.data[i];
          const T dv = c.d_in.data[i], xv = c.x.data[n], wb = c.wbar.data[i];
          const T g_wb = gb * (dv - xv);
          g_d.data[i] += gb * wb;
          g_x.data[n] += gb * (T{1} - wb);
          const T dz = g_wb * rho * wb * (T{1} - wb);
          g_z.data[n] = dz;
          g_z.data[np + n] = -dz;
        }
        Tensor<T> g = conv3x3_backward(c.g_act[k][2], sw.group[k][3], g_z, gw.group[k][3]);
        for (std::size_t i = 3; i-- > 0;) {
          g = leaky_relu_backward(c.g_pre[k][i], g, slope);
          const Tensor<T>& in = i == 0 ? c.g_in[k] : c.g_act[k][i - 1];
          g = conv3x3_backward(in, sw.group[k][i], g, gw.group[k][i]);
        }
        for (std::size_t n = 0; n < np; ++n) {
          g_feat.data[k * np + n] += g.data[n];
          g_diff_feat.data[k * np + n] = g.data[np + n];
        }
      }
      Tensor<T> g = g_diff_feat;
      for (std::size_t i = 3; i-- > 0;) {
        g = leaky_relu_backward(c.ex_pre[i], g, slope);
        const Tensor<T>& in = i == 0 ? c.diff : c.ex_act[i - 1];
        g = conv3x3_backward(in, sw.ex_fe[i], g, gw.ex_fe[i]);
      }
      for (std::size_t k = 0; k < l; ++k) {
        for (std::size_t n = 0; n < np; ++n) {
          const std::size_t i = k * np + n;
          const T e = c.d_in.data[i] - c.x.data[n];
          const T sgn = e > T{} ? T{1} : (e < T{} ? T{-1} : T{});
          g_d.data[i] += g.data[i] * sgn;
          g_x.data[n] -= g.data[i] * sgn;
        }
      }
    }

    // Squeeze: x from (soft, hard) selection over d.
    const auto& sel = c.select;
    const auto& route = fwd.mode == SelectMode::kRelaxed ? sel.soft : sel.hard;
    Tensor<T> g_logits(l, h, w);
    for (std::size_t n = 0; n < np; ++n) {
      T dot{};
      for (std::size_t k = 0; k < l; ++k) {
        const std::size_t i = k * np + n;
        g_d.data[i] += g_x.data[n] * route.data[i];
        dot += sel.soft.data[i] * (g_x.data[n] * c.d_in.data[i]);
      }
      for (std::size_t k = 0; k < l; ++k) {
        const std::size_t i = k * np + n;
        const T g_soft = g_x.data[n] * c.d_in.data[i];
        g_logits.data[i] = sel.soft.data[i] * (g_soft - dot) / tau;
      }
    }
    const Tensor<T>& feat = c.fe_act[2];
    Tensor<T> g_pre3(l, h, w);
    for (std::size_t i = 0; i < g_logits.size(); ++i) {
      const T a = c.attention.data[i];
      g_feat.data[i] += g_logits.data[i] * a;
      g_pre3.data[i] = g_logits.data[i] * feat.data[i] * a * (T{1} - a);
    }
    Tensor<T> g = conv3x3_backward(c.sq_act[2], sw.sq[3], g_pre3, gw.sq[3]);
    for (std::size_t i = 3; i-- > 0;) {
      g = leaky_relu_backward(c.sq_pre[i], g, slope);
      const Tensor<T>& in = i == 0 ? feat : c.sq_act[i - 1];
      g = conv3x3_backward(in, sw.sq[i], g, gw.sq[i]);
    }
    for (std::size_t i = 0; i < g.size(); ++i) g_feat.data[i] += g.data[i];

    // Feature extraction.
    g = g_feat;
    for (std::size_t i = 3; i-- > 0;) {
      g = leaky_relu_backward(c.fe_pre[i], g, slope);
      const Tensor<T>& in = i == 0 ? c.d_in : c.fe_act[i - 1];
      g = conv3x3_backward(in, sw.fe[i], g, gw.fe[i]);
    }
    for (std::size_t i = 0; i < g.size(); ++i) g_d.data[i] += g.data[i];
    g_dbar = std::move(g_d);
  }
  return grad;
}

}  // namespace ulidar::unroll
