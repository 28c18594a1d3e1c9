// ============================================================================
// layers.hpp -- planar tensors and the 3x3 convolution kernels of the network
//
// Tensors are channel-major (C x H x W). Convolutions are bias-free spatial
// cross-correlations with replicate padding.
// ============================================================================
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "../core.hpp"

namespace ulidar::unroll {

template <typename T>
struct Tensor {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::size_t c, std::size_t h, std::size_t w, T fill = T{})
      : channels{c}, height{h}, width{w}, data(c * h * w, fill) {}

  [[nodiscard]] std::size_t plane_size() const noexcept { return height * width; }
  [[nodiscard]] std::size_t size() const noexcept { return data.size(); }

  T* plane(std::size_t c) { return data.data() + c * plane_size(); }
  const T* plane(std::size_t c) const { return data.data() + c * plane_size(); }
  T& operator()(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * height + y) * width + x];
  }
  T operator()(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * height + y) * width + x];
  }

  [[nodiscard]] bool same_shape(const Tensor& o) const noexcept {
    return channels == o.channels && height == o.height && width == o.width;
  }
  void zero() { std::fill(data.begin(), data.end(), T{}); }
};

/// Bias-free 3x3 convolution weights, layout [out][in][ky][kx].
template <typename T>
struct Kernel {
  std::size_t out = 0, in = 0;
  std::vector<T> w;

  Kernel() = default;
  Kernel(std::size_t o, std::size_t i) : out{o}, in{i}, w(o * i * 9, T{}) {}

  T& at(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) {
    return w[((o * in + i) * 3 + ky) * 3 + kx];
  }
  T at(std::size_t o, std::size_t i, std::size_t ky, std::size_t kx) const {
    return w[((o * in + i) * 3 + ky) * 3 + kx];
  }
  [[nodiscard]] std::size_t size() const noexcept { return w.size(); }
};

namespace detail {

/// Replicate-padded copy, C x (H + 2) x (W + 2).
template <typename T>
std::vector<T> pad_replicate(const Tensor<T>& in) {
  const std::size_t h = in.height, w = in.width;
  const std::size_t ph = h + 2, pw = w + 2;
  std::vector<T> out(in.channels * ph * pw);
  for (std::size_t c = 0; c < in.channels; ++c) {
    const T* src = in.plane(c);
    T* dst = out.data() + c * ph * pw;
    for (std::size_t py = 0; py < ph; ++py) {
      const std::size_t y = py == 0 ? 0 : (py == ph - 1 ? h - 1 : py - 1);
      T* row = dst + py * pw;
      const T* srow = src + y * w;
      row[0] = srow[0];
      std::copy(srow, srow + w, row + 1);
      row[pw - 1] = srow[w - 1];
    }
  }
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> conv3x3(const Tensor<T>& in, const Kernel<T>& k) {
  if (k.in != in.channels) {
    throw Error(ulidar::detail::concat("conv3x3: kernel expects ", k.in,
                                       " input channels, got ", in.channels));
  }
  const std::size_t h = in.height, w = in.width, pw = w + 2;
  const std::size_t pplane = (h + 2) * pw;
  const auto pad = detail::pad_replicate(in);
  Tensor<T> out(k.out, h, w);
  for (std::size_t co = 0; co < k.out; ++co) {
    T* dst = out.plane(co);
    for (std::size_t ci = 0; ci < k.in; ++ci) {
      const T* src = pad.data() + ci * pplane;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const T wv = k.at(co, ci, ky, kx);
          for (std::size_t y = 0; y < h; ++y) {
            const T* s = src + (y + ky) * pw + kx;
            T* d = dst + y * w;
            for (std::size_t x = 0; x < w; ++x) d[x] += wv * s[x];
          }
        }
      }
    }
  }
  return out;
}

/// Accumulates d(loss)/d(kernel) into `grad_k` and returns d(loss)/d(input).
template <typename T>
Tensor<T> conv3x3_backward(const Tensor<T>& in, const Kernel<T>& k,
                           const Tensor<T>& grad_out, Kernel<T>& grad_k) {
  const std::size_t h = in.height, w = in.width, pw = w + 2, ph = h + 2;
  const std::size_t pplane = ph * pw;
  const auto pad = detail::pad_replicate(in);
  std::vector<T> gpad(in.channels * pplane, T{});

  for (std::size_t co = 0; co < k.out; ++co) {
    const T* g = grad_out.plane(co);
    for (std::size_t ci = 0; ci < k.in; ++ci) {
      const T* src = pad.data() + ci * pplane;
      T* gdst = gpad.data() + ci * pplane;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const T wv = k.at(co, ci, ky, kx);
          T acc{};
          for (std::size_t y = 0; y < h; ++y) {
            const T* s = src + (y + ky) * pw + kx;
            T* gd = gdst + (y + ky) * pw + kx;
            const T* gr = g + y * w;
            T row{};
            for (std::size_t x = 0; x < w; ++x) {
              row += gr[x] * s[x];
              gd[x] += wv * gr[x];
            }
            acc += row;
          }
          grad_k.at(co, ci, ky, kx) += acc;
        }
      }
    }
  }

  // Fold the padded gradient back onto the replicated border pixels.
  Tensor<T> gin(in.channels, h, w);
  for (std::size_t c = 0; c < in.channels; ++c) {
    const T* gp = gpad.data() + c * pplane;
    T* gi = gin.plane(c);
    for (std::size_t py = 0; py < ph; ++py) {
      const std::size_t y = py == 0 ? 0 : (py == ph - 1 ? h - 1 : py - 1);
      for (std::size_t px = 0; px < pw; ++px) {
        const std::size_t x = px == 0 ? 0 : (px == pw - 1 ? w - 1 : px - 1);
        gi[y * w + x] += gp[py * pw + px];
      }
    }
  }
  return gin;
}

template <typename T>
T leaky_relu(T x, T slope) {
  return x >= T{} ? x : slope * x;
}

template <typename T>
T leaky_relu_grad(T x, T slope) {
  return x >= T{} ? T{1} : slope;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& in, T slope) {
  Tensor<T> out = in;
  for (auto& v : out.data) v = leaky_relu(v, slope);
  return out;
}

/// grad_in = grad_out * lrelu'(pre)
template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& pre, const Tensor<T>& grad_out,
                              T slope) {
  Tensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.data[i] *= leaky_relu_grad(pre.data[i], slope);
  }
  return g;
}

template <typename T>
T sigmoid(T x) {
  return x >= T{} ? T{1} / (T{1} + std::exp(-x))
                  : std::exp(x) / (T{1} + std::exp(x));
}

}  // namespace ulidar::unroll
