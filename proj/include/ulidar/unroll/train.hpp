// ============================================================================
// train.hpp -- ADAM training of the unrolled network
// ============================================================================
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "../multiscale.hpp"
#include "../parallel.hpp"
#include "../simulate.hpp"
#include "network.hpp"

namespace ulidar::unroll {

/// One training pair: L-plane input stack and its ground-truth depth.
struct Sample {
  Tensor<float> stack;
  Grid<double> truth;
};

struct TrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double lr = 1e-4;
  int decay_epoch = 100;  ///< lr halves from this (0-based) epoch on
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0) throw Error("epochs must be >= 0");
    if (batch_size < 1) throw Error("batch size must be >= 1");
    if (!(lr >= 0.0)) throw Error("learning rate must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw Error("ADAM betas must lie in [0, 1)");
    }
  }
};

inline double learning_rate(const TrainConfig& cfg, int epoch) {
  return epoch >= cfg.decay_epoch ? 0.5 * cfg.lr : cfg.lr;
}

/// First and second moment estimates, one buffer per kernel.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::int64_t step = 0;
};

template <typename T>
AdamState make_adam_state(const NetworkWeights<T>& w) {
  AdamState s;
  w.for_each([&](const std::string&, const Kernel<T>& k) {
    s.m.emplace_back(k.size(), 0.0);
    s.v.emplace_back(k.size(), 0.0);
  });
  return s;
}

template <typename T>
void adam_step(NetworkWeights<T>& w, const NetworkWeights<T>& grad,
               AdamState& state, const TrainConfig& cfg, double lr) {
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  std::vector<const Kernel<T>*> g;
  grad.for_each([&](const std::string&, const Kernel<T>& k) { g.push_back(&k); });
  std::size_t i = 0;
  w.for_each([&](const std::string&, Kernel<T>& k) {
    auto& m = state.m[i];
    auto& v = state.v[i];
    const auto& gk = g[i]->w;
    for (std::size_t j = 0; j < k.size(); ++j) {
      const double gj = static_cast<double>(gk[j]);
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.eps);
      k.w[j] = static_cast<T>(static_cast<double>(k.w[j]) - update);
    }
    ++i;
  });
}

template <typename T>
void accumulate(NetworkWeights<T>& into, const NetworkWeights<T>& g) {
  std::vector<const Kernel<T>*> src;
  g.for_each([&](const std::string&, const Kernel<T>& k) { src.push_back(&k); });
  std::size_t i = 0;
  into.for_each([&](const std::string&, Kernel<T>& k) {
    for (std::size_t j = 0; j < k.size(); ++j) k.w[j] += src[i]->w[j];
    ++i;
  });
}

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;  ///< per sample, per pixel
  double lr = 0.0;
};

struct TrainResult {
  NetworkWeights<float> weights;
  std::vector<EpochLog> history;
};

/// Mini-batch ADAM over `data`. Sample order is a seeded shuffle per epoch
/// and Gumbel noise comes from stream (seed, epoch, sample index), so results
/// do not depend on the thread count: per-sample gradients are computed in
/// parallel and summed in sample order.
inline TrainResult train(const std::vector<Sample>& data, NetworkWeights<float> w,
                         const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw Error("training set is empty");
  for (const auto& s : data) {
    if (s.stack.channels != static_cast<std::size_t>(w.config.scales)) {
      throw Error(ulidar::detail::concat("training sample has ", s.stack.channels,
                                         " planes, network expects ",
                                         w.config.scales));
    }
    if (s.stack.height != s.truth.rows() || s.stack.width != s.truth.cols()) {
      throw Error("training sample stack and ground truth shapes differ");
    }
  }
  TrainResult result;
  AdamState adam = make_adam_state(w);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    PhiloxStream shuffle(cfg.seed, stream_id(0x5A0F, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(shuffle.next_u32() % i);
      std::swap(order[i - 1], order[j]);
    }
    const double lr = learning_rate(cfg, epoch);
    double epoch_loss = 0.0;
    std::size_t epoch_pixels = 0;
    const auto bs = static_cast<std::size_t>(cfg.batch_size);
    for (std::size_t b0 = 0, batch = 0; b0 < order.size(); b0 += bs, ++batch) {
      const std::size_t nb = std::min(bs, order.size() - b0);
      std::vector<NetworkWeights<float>> grads(nb);
      std::vector<double> losses(nb);
      parallel_for(nb, [&](std::size_t i) {
        const std::size_t idx = order[b0 + i];
        const Sample& s = data[idx];
        const auto noise = gumbel_noise<float>(
            w.config, s.stack.height, s.stack.width, cfg.seed,
            stream_id(static_cast<std::uint64_t>(epoch), idx, 0x7A));
        const auto fwd = forward(s.stack, w, SelectMode::kTrain, &noise);
        losses[i] = loss(fwd, s.truth);
        grads[i] = backward(fwd, s.truth, w, 1.0f / static_cast<float>(nb));
      });
      double batch_loss = 0.0;
      for (std::size_t i = 0; i < nb; ++i) {
        batch_loss += losses[i];
        epoch_pixels += data[order[b0 + i]].truth.size();
      }
      if (!std::isfinite(batch_loss)) {
        throw Error(ulidar::detail::concat("non-finite training loss at epoch ",
                                           epoch, ", batch ", batch));
      }
      epoch_loss += batch_loss;
      for (std::size_t i = 1; i < nb; ++i) accumulate(grads[0], grads[i]);
      adam_step(w, grads[0], adam, cfg, lr);
    }
    EpochLog log{epoch, epoch_loss / static_cast<double>(epoch_pixels), lr};
    result.history.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  result.weights = std::move(w);
  return result;
}

// ============================================================================
// Datasets
// ============================================================================

struct DatasetSpec {
  std::size_t count = 64;
  std::size_t rows = 32, cols = 32, bins = 256;
  double irf_sigma = 2.0;
  std::vector<NoiseSpec> noise{{4.0, 1.0, 0}};  ///< cycled over samples
  std::size_t scales = 12;
  std::uint64_t seed = 0;
};

/// Stack + ground truth for one simulated scene.
inline Sample make_sample(const Scene& scene, const Irf& irf, std::size_t bins,
                          const NoiseSpec& noise, std::size_t scales) {
  const Scene noisy = apply_noise_level(scene, bins, noise);
  const HistogramCube cube = sample_cube(noisy, irf, bins, noise.seed);
  auto st = build_stack(cube, irf, ScaleSpec::with_scales(scales));
  return {stack_tensor<float>(st.stack), scene.depth.grid()};
}

/// Procedural scenes cycling through the planes, spheres, step and random
/// presets, each with its own scene and photon seed.
inline std::vector<Sample> make_procedural_dataset(const DatasetSpec& spec) {
  if (spec.noise.empty()) throw Error("dataset needs at least one noise level");
  static constexpr ScenePreset kCycle[] = {ScenePreset::kPlanes, ScenePreset::kSpheres,
                                           ScenePreset::kStep, ScenePreset::kRandom};
  const Irf irf = make_gaussian_irf(spec.bins, 0.0, spec.irf_sigma);
  std::vector<Sample> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const Scene scene = make_scene(kCycle[i % 4], spec.rows, spec.cols,
                                   stream_id(spec.seed, i, 0x5CE));
    NoiseSpec noise = spec.noise[i % spec.noise.size()];
    noise.seed = stream_id(spec.seed, i, 0xC0B);
    out.push_back(make_sample(scene, irf, spec.bins, noise, spec.scales));
  }
  return out;
}

}  // namespace ulidar::unroll
