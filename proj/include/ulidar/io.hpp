// ============================================================================
// io.hpp -- file formats
//
//   cube (.spc)  little-endian: "SPC1", u32 version (1), u32 rows, u32 cols,
//                u32 bins, u8 dtype (0 = u32 counts), payload row-major
//                (row, col, bin)
//   PFM          "Pf" grayscale, scale -1.0 (little-endian), rows stored
//                bottom-to-top as the format requires
//   CSV          one image row per line
//   PLY          ASCII, one vertex per pixel (col, row, depth * T)
// ============================================================================
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "core.hpp"

namespace ulidar::io {

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF),
                     static_cast<char>((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw Error(std::string("truncated file while reading ") + what);
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
  put_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline float get_f32(std::istream& is, bool little_endian) {
  std::uint32_t u = get_u32(is, "float payload");
  if (!little_endian) {
    u = ((u & 0xFF) << 24) | ((u & 0xFF00) << 8) | ((u >> 8) & 0xFF00) | (u >> 24);
  }
  return std::bit_cast<float>(u);
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot open '" + p.string() + "' for writing");
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot open '" + p.string() + "'");
  return is;
}

}  // namespace detail

// ============================================================================
// Cube
// ============================================================================

inline constexpr std::uint32_t kCubeVersion = 1;

inline void write_cube(std::ostream& os, const HistogramCube& cube) {
  os.write("SPC1", 4);
  detail::put_u32(os, kCubeVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(cube.rows()));
  detail::put_u32(os, static_cast<std::uint32_t>(cube.cols()));
  detail::put_u32(os, static_cast<std::uint32_t>(cube.bins()));
  os.put(0);
  for (std::uint32_t c : cube.counts()) detail::put_u32(os, c);
  if (!os) throw Error("failed writing cube");
}

inline HistogramCube read_cube(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "SPC1", 4) != 0) {
    throw Error("not a cube file (bad magic)");
  }
  const auto version = detail::get_u32(is, "version");
  if (version != kCubeVersion) {
    throw Error(ulidar::detail::concat("unsupported cube version ", version));
  }
  const auto rows = detail::get_u32(is, "rows");
  const auto cols = detail::get_u32(is, "cols");
  const auto bins = detail::get_u32(is, "bins");
  const int dtype = is.get();
  if (dtype != 0) {
    throw Error(ulidar::detail::concat("unsupported cube dtype code ", dtype));
  }
  const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols * bins;
  std::vector<std::uint32_t> counts(n);
  for (auto& c : counts) c = detail::get_u32(is, "cube payload");
  return {rows, cols, bins, std::move(counts)};
}

inline void write_cube(const std::filesystem::path& p, const HistogramCube& c) {
  auto os = detail::open_out(p);
  write_cube(os, c);
}

inline HistogramCube read_cube(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  return read_cube(is);
}

// ============================================================================
// PFM
// ============================================================================

inline void write_pfm(std::ostream& os, const Grid<double>& img) {
  os << "Pf\n" << img.cols() << ' ' << img.rows() << "\n-1.0\n";
  for (std::size_t r = img.rows(); r-- > 0;) {
    for (std::size_t c = 0; c < img.cols(); ++c) {
      detail::put_f32(os, static_cast<float>(img(r, c)));
    }
  }
  if (!os) throw Error("failed writing PFM");
}

inline Grid<double> read_pfm(std::istream& is) {
  std::string magic;
  std::size_t width = 0, height = 0;
  double scale = 0.0;
  if (!(is >> magic) || magic != "Pf") {
    throw Error("not a grayscale PFM file (expected 'Pf')");
  }
  if (!(is >> width >> height >> scale) || scale == 0.0) {
    throw Error("malformed PFM header");
  }
  is.get();  // single whitespace before the payload
  Grid<double> img(height, width);
  const bool little = scale < 0.0;
  for (std::size_t r = height; r-- > 0;) {
    for (std::size_t c = 0; c < width; ++c) {
      img(r, c) = detail::get_f32(is, little);
    }
  }
  return img;
}

inline void write_pfm(const std::filesystem::path& p, const Grid<double>& img) {
  auto os = detail::open_out(p);
  write_pfm(os, img);
}

inline Grid<double> read_pfm(const std::filesystem::path& p) {
  auto is = detail::open_in(p);
  return read_pfm(is);
}

// ============================================================================
// CSV / PLY
// ============================================================================

inline void write_csv(std::ostream& os, const Grid<double>& img) {
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t r = 0; r < img.rows(); ++r) {
    for (std::size_t c = 0; c < img.cols(); ++c) {
      if (c) os << ',';
      os << img(r, c);
    }
    os << '\n';
  }
}

inline void write_csv(const std::filesystem::path& p, const Grid<double>& img) {
  auto os = detail::open_out(p);
  write_csv(os, img);
}

/// Point cloud with x = col, y = row, z = depth * bins; optional 8-bit gray
/// intensity scaled from [min, max] of the intensity image.
inline std::string export_ply(const DepthMap& depth, std::size_t bins,
                              const Grid<double>* intensity = nullptr) {
  if (intensity && !intensity->same_shape(depth.grid())) {
    throw Error("PLY intensity shape differs from the depth map");
  }
  std::ostringstream os;
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  os << "ply\nformat ascii 1.0\nelement vertex " << depth.size() << '\n'
     << "property float x\nproperty float y\nproperty float z\n";
  double lo = 0.0, hi = 1.0;
  if (intensity) {
    os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    lo = INFINITY;
    hi = -INFINITY;
    for (double v : intensity->values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  os << "end_header\n";
  const double t = static_cast<double>(bins);
  for (std::size_t r = 0; r < depth.rows(); ++r) {
    for (std::size_t c = 0; c < depth.cols(); ++c) {
      os << c << ' ' << r << ' ' << depth(r, c) * t;
      if (intensity) {
        const double span = hi > lo ? hi - lo : 1.0;
        const int g = static_cast<int>(
            std::lround(255.0 * ((*intensity)(r, c) - lo) / span));
        os << ' ' << g << ' ' << g << ' ' << g;
      }
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace ulidar::io
