// ============================================================================
// weights_io.hpp -- URW1 weight files
//
// Little-endian: "URW1", u32 version (1), u32 K, u32 L, then one record per
// kernel in canonical order until end of file:
//   u16 name length, name bytes, u8 rank (4), u32 dims[rank], f32 payload
// ============================================================================
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "../io.hpp"
#include "network.hpp"

namespace ulidar::unroll {

inline constexpr std::uint32_t kWeightsVersion = 1;

template <typename T>
void write_weights(std::ostream& os, const NetworkWeights<T>& w) {
  os.write("URW1", 4);
  io::detail::put_u32(os, kWeightsVersion);
  io::detail::put_u32(os, static_cast<std::uint32_t>(w.config.stages));
  io::detail::put_u32(os, static_cast<std::uint32_t>(w.config.scales));
  w.for_each([&](const std::string& name, const Kernel<T>& k) {
    const auto len = static_cast<std::uint16_t>(name.size());
    os.put(static_cast<char>(len & 0xFF));
    os.put(static_cast<char>(len >> 8));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(4);
    for (std::size_t d : {k.out, k.in, std::size_t{3}, std::size_t{3}}) {
      io::detail::put_u32(os, static_cast<std::uint32_t>(d));
    }
    for (T v : k.w) io::detail::put_f32(os, static_cast<float>(v));
  });
  if (!os) throw Error("failed writing weights");
}

/// Reads a weight file; `base` supplies the non-architectural settings
/// (slope, temperature, ...) while K and L come from the header.
template <typename T = float>
NetworkWeights<T> read_weights(std::istream& is, NetConfig base = {}) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "URW1", 4) != 0) {
    throw Error("not a weights file (bad magic)");
  }
  const auto version = io::detail::get_u32(is, "version");
  if (version != kWeightsVersion) {
    throw Error(ulidar::detail::concat("unsupported weights version ", version));
  }
  base.stages = static_cast<int>(io::detail::get_u32(is, "K"));
  base.scales = static_cast<int>(io::detail::get_u32(is, "L"));
  if (base.stages < 2 || base.stages > 64 || base.scales < 1 || base.scales > 256) {
    throw Error(ulidar::detail::concat("implausible network shape K=", base.stages,
                                       " L=", base.scales));
  }
  NetworkWeights<T> w(base);
  w.for_each([&](const std::string& name, Kernel<T>& k) {
    unsigned char lb[2];
    if (!is.read(reinterpret_cast<char*>(lb), 2)) {
      throw Error("weights file ends before tensor '" + name + "'");
    }
    const std::size_t len = lb[0] | (static_cast<std::size_t>(lb[1]) << 8);
    std::string got(len, '\0');
    if (!is.read(got.data(), static_cast<std::streamsize>(len))) {
      throw Error("truncated tensor name");
    }
    if (got != name) {
      throw Error("weights file has tensor '" + got + "' where '" + name +
                  "' was expected");
    }
    const int rank = is.get();
    if (rank != 4) {
      throw Error(ulidar::detail::concat("tensor '", name, "' has rank ", rank,
                                         ", expected 4"));
    }
    const std::size_t expect[4] = {k.out, k.in, 3, 3};
    for (std::size_t d : expect) {
      const auto got_d = io::detail::get_u32(is, "tensor dims");
      if (got_d != d) {
        throw Error(ulidar::detail::concat("tensor '", name, "' has dimension ",
                                           got_d, ", expected ", d));
      }
    }
    for (auto& v : k.w) v = static_cast<T>(io::detail::get_f32(is, true));
  });
  if (is.peek() != std::char_traits<char>::eof()) {
    throw Error("trailing data after the last tensor in weights file");
  }
  return w;
}

template <typename T>
void write_weights(const std::filesystem::path& p, const NetworkWeights<T>& w) {
  auto os = io::detail::open_out(p);
  write_weights(os, w);
}

template <typename T = float>
NetworkWeights<T> read_weights(const std::filesystem::path& p, NetConfig base = {}) {
  auto is = io::detail::open_in(p);
  return read_weights<T>(is, base);
}

}  // namespace ulidar::unroll
