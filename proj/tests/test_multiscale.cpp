#include <gtest/gtest.h>

#include <ulidar/multiscale.hpp>
#include <ulidar/simulate.hpp>

#include <cmath>

using namespace ulidar;

namespace {

RealCube random_cube(std::size_t r, std::size_t c, std::size_t t, std::uint64_t seed,
                     bool integer = false) {
  RealCube out(r, c, t);
  PhiloxStream rng(seed, 0);
  for (double& v : out.data) v = integer ? static_cast<double>(rng.next_u32() % 20) : rng.uniform();
  return out;
}

long clampl(long v, long lo, long hi) { return std::min(std::max(v, lo), hi); }

// Brute-force k x k x k window sum, replicate in space and zero in time.
RealCube naive_box3(const RealCube& in, std::size_t k) {
  const long h = static_cast<long>(k / 2);
  const long R = static_cast<long>(in.rows), C = static_cast<long>(in.cols),
             T = static_cast<long>(in.bins);
  RealCube out(in.rows, in.cols, in.bins);
  for (long r = 0; r < R; ++r)
    for (long c = 0; c < C; ++c)
      for (long t = 0; t < T; ++t) {
        double s = 0.0;
        for (long dr = -h; dr <= h; ++dr)
          for (long dc = -h; dc <= h; ++dc)
            for (long dt = -h; dt <= h; ++dt) {
              const long tt = t + dt;
              if (tt < 0 || tt >= T) continue;
              s += in(static_cast<std::size_t>(clampl(r + dr, 0, R - 1)),
                      static_cast<std::size_t>(clampl(c + dc, 0, C - 1)),
                      static_cast<std::size_t>(tt));
            }
        out(static_cast<std::size_t>(r), static_cast<std::size_t>(c), static_cast<std::size_t>(t)) = s;
      }
  return out;
}

RealCube naive_spatial(const RealCube& in, std::size_t k, Padding pad) {
  const long h = static_cast<long>(k / 2);
  const long R = static_cast<long>(in.rows), C = static_cast<long>(in.cols);
  RealCube out(in.rows, in.cols, in.bins);
  for (long r = 0; r < R; ++r)
    for (long c = 0; c < C; ++c)
      for (std::size_t t = 0; t < in.bins; ++t) {
        double s = 0.0;
        for (long dr = -h; dr <= h; ++dr)
          for (long dc = -h; dc <= h; ++dc) {
            long rr = r + dr, cc = c + dc;
            if (pad == Padding::kZero && (rr < 0 || cc < 0 || rr >= R || cc >= C)) continue;
            rr = clampl(rr, 0, R - 1);
            cc = clampl(cc, 0, C - 1);
            s += in(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc), t);
          }
        out(static_cast<std::size_t>(r), static_cast<std::size_t>(c), t) = s;
      }
  return out;
}

void expect_close(const RealCube& a, const RealCube& b, double tol) {
  ASSERT_EQ(a.data.size(), b.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    ASSERT_NEAR(a.data[i], b.data[i], tol * std::max(1.0, std::abs(b.data[i]))) << "index " << i;
  }
}

}  // namespace

// ============================================================================
// Matched filter
// ============================================================================

TEST(MatchedFilter, ZeroCubeGivesZero) {
  const auto out = matched_filter(HistogramCube(2, 2, 32), make_gaussian_irf(32, 0, 1.5));
  for (double v : out.data) EXPECT_EQ(v, 0.0);
}

TEST(MatchedFilter, SingleCountGivesReversedIrf) {
  HistogramCube c(1, 1, 64);
  c(0, 0, 30) = 1;
  const Irf g = make_gaussian_irf(64, 0, 2.0);
  const auto out = matched_filter(c, g);
  // out(t) = sum_u y(t+u) g(u) = g(30 - t)
  for (long t = 0; t < 64; ++t) {
    EXPECT_DOUBLE_EQ(out(0, 0, static_cast<std::size_t>(t)), g.at(static_cast<int>(30 - t)));
  }
  std::size_t peak = 0;
  for (std::size_t t = 1; t < 64; ++t) {
    if (out(0, 0, t) > out(0, 0, peak)) peak = t;
  }
  EXPECT_EQ(peak, 30u);
}

TEST(MatchedFilter, PreservesMassAwayFromBoundaries) {
  HistogramCube c(1, 2, 64);
  c(0, 0, 20) = 3;
  c(0, 0, 40) = 5;
  c(0, 1, 1) = 4;  // near the start: part of the kernel falls outside
  const auto out = matched_filter(c, make_gaussian_irf(64, 0, 2.0));
  double s0 = 0, s1 = 0;
  for (std::size_t t = 0; t < 64; ++t) {
    s0 += out(0, 0, t);
    s1 += out(0, 1, t);
  }
  EXPECT_NEAR(s0, 8.0, 1e-12);
  EXPECT_LT(s1, 4.0);
}

// ============================================================================
// Box filters
// ============================================================================

TEST(BoxFilter3d, SizeOneIsIdentity) {
  const RealCube c = random_cube(4, 5, 6, 1);
  EXPECT_EQ(box_filter_3d(c, 1).data, c.data);
}

TEST(BoxFilter3d, OnesCubeInteriorCounts27) {
  RealCube c(3, 3, 3);
  std::fill(c.data.begin(), c.data.end(), 1.0);
  EXPECT_EQ(box_filter_3d(c, 3)(1, 1, 1), 27.0);
}

TEST(BoxFilter3d, MatchesBruteForce) {
  const RealCube c = random_cube(5, 5, 8, 2);
  expect_close(box_filter_3d(c, 3), naive_box3(c, 3), 1e-12);
  const RealCube d = random_cube(6, 4, 10, 3);
  expect_close(box_filter_3d(d, 7), naive_box3(d, 7), 1e-12);
}

TEST(BoxFilter3d, SeparableIntoOneDimensionalSums) {
  const RealCube c = random_cube(7, 6, 12, 4);
  RealCube seq = c;
  detail::box_sum_time(seq, 5);
  detail::box_sum_space(seq, 5, true, Padding::kReplicate);
  detail::box_sum_space(seq, 5, false, Padding::kReplicate);
  EXPECT_EQ(box_filter_3d(c, 5).data, seq.data);
}

TEST(BoxFilter3d, RejectsEvenSize) {
  EXPECT_THROW(box_filter_3d(RealCube(2, 2, 2), 4), Error);
  EXPECT_THROW(spatial_box_filter(RealCube(2, 2, 2), 0), Error);
}

TEST(SpatialBoxFilter, SizeOneIsIdentity) {
  const RealCube c = random_cube(4, 4, 3, 5);
  EXPECT_EQ(spatial_box_filter(c, 1).data, c.data);
}

TEST(SpatialBoxFilter, InteriorIsExactNeighbourSum) {
  const RealCube c = random_cube(6, 6, 4, 6, true);
  const RealCube out = spatial_box_filter(c, 3);
  for (std::size_t t = 0; t < 4; ++t) {
    double s = 0.0;
    for (std::size_t r = 1; r <= 3; ++r)
      for (std::size_t cc = 2; cc <= 4; ++cc) s += c(r, cc, t);
    EXPECT_EQ(out(2, 3, t), s);
  }
}

TEST(SpatialBoxFilter, MatchesBruteForceK7) {
  const RealCube c = random_cube(9, 11, 5, 7);
  expect_close(spatial_box_filter(c, 7), naive_spatial(c, 7, Padding::kReplicate), 1e-12);
}

TEST(SpatialBoxFilter, PoissonClosureWithZeroPadding) {
  for (std::size_t k : {3u, 7u, 13u}) {
    const RealCube c = random_cube(16, 16, 32, 8 + k, true);
    const RealCube got = spatial_box_filter(c, k, Padding::kZero);
    const RealCube want = naive_spatial(c, k, Padding::kZero);
    EXPECT_EQ(got.data, want.data) << "k=" << k;
    for (double v : got.data) ASSERT_EQ(v, std::floor(v));
  }
}

// ============================================================================
// ML depth
// ============================================================================

TEST(MlDepth, SpikeRecoversBin) {
  const std::size_t T = 256;
  const Irf g = make_gaussian_irf(T, 0, 2.0);
  std::vector<double> y(T, 0.0);
  y[100] = 5.0;
  const MlDepth d = ml_depth<double>(y, g);
  EXPECT_EQ(d.bin, 100u);
  EXPECT_DOUBLE_EQ(d.depth, 100.0 / 256.0);
  EXPECT_FALSE(d.empty);
}

TEST(MlDepth, SelfMatchedIrfShape) {
  const std::size_t T = 1024;
  const Irf g = make_gaussian_irf(T, 0, 3.0);
  std::vector<double> y(T, 0.0);
  for (int u = g.first_delay(); u <= g.last_delay(); ++u) y[static_cast<std::size_t>(300 + u)] = g.at(u);
  EXPECT_EQ(ml_depth<double>(y, g).bin, 300u);
}

TEST(MlDepth, EmptyHistogramFlagged) {
  std::vector<std::uint32_t> y(64, 0);
  const MlDepth d = ml_depth<std::uint32_t>(y, make_gaussian_irf(64, 0, 1.0));
  EXPECT_TRUE(d.empty);
  EXPECT_EQ(d.depth, 0.0);
}

// The definition as oracle: full log-likelihood scan with the 1e-12 floor.
TEST(MlDepth, MatchesExhaustiveScan) {
  const std::size_t T = 64;
  const Irf g = make_gaussian_irf(T, 0, 1.7);
  PhiloxStream rng(77, 0);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> y(T);
    for (double& v : y) v = static_cast<double>(rng.poisson(0.3));
    if (trial % 3 == 0) y[rng.next_u32() % T] += 4;
    bool any = false;
    for (double v : y) any |= v > 0;
    if (!any) continue;
    double best = -INFINITY;
    std::size_t best_d = 0;
    for (std::size_t d = 0; d < T; ++d) {
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        s += y[t] * std::log(std::max(g.at(static_cast<int>(t) - static_cast<int>(d)), 1e-12));
      }
      if (d == 0 || s > best + 1e-9 * std::abs(best)) {
        best = s;
        best_d = d;
      }
    }
    EXPECT_EQ(ml_depth<double>(y, g).bin, best_d) << "trial " << trial;
  }
}

TEST(MlDepth, TiesGoToSmallestShift) {
  const std::size_t T = 64;
  const Irf g = make_gaussian_irf(T, 0, 1.0);
  std::vector<double> y(T, 0.0);
  y[10] = 1.0;
  y[40] = 1.0;
  EXPECT_EQ(ml_depth<double>(y, g).bin, 10u);
}

TEST(MlDepth, PureIrfPixelLocalizesExactly) {
  const std::size_t T = 256;
  const Irf g = make_gaussian_irf(T, 0, 2.0);
  for (int trial = 0; trial < 40; ++trial) {
    const double depth = (20.0 + 5.0 * trial) / static_cast<double>(T);
    const Scene s(DepthMap(1, 1, depth), Grid<double>(1, 1, 2000.0), Grid<double>(1, 1, 0.0));
    const HistogramCube c = sample_cube(s, g, T, static_cast<std::uint64_t>(trial));
    EXPECT_EQ(ml_depth<std::uint32_t>(c.pixel(0), g).bin, static_cast<std::size_t>(20 + 5 * trial));
  }
}

// ============================================================================
// Stack
// ============================================================================

TEST(Stack, NoiselessFlatSceneAllPlanesAgree) {
  const std::size_t T = 128;
  const Irf g = make_gaussian_irf(T, 0, 2.0);
  const Scene s(DepthMap(16, 16, 0.3), Grid<double>(16, 16, 100.0), Grid<double>(16, 16, 0.0));
  // Noiseless: round the expected cube to integer counts.
  const RealCube e = expected_cube(s, g, T);
  HistogramCube c(16, 16, T);
  for (std::size_t i = 0; i < e.data.size(); ++i) {
    c.pixel(i / T)[i % T] = static_cast<std::uint32_t>(std::lround(e.data[i]));
  }
  const auto st = build_stack(c, g);
  ASSERT_EQ(st.stack.scales(), 12u);
  for (const auto& p : st.stack.planes()) {
    for (double v : p.values()) EXPECT_NEAR(v, 0.3, 1.0 / T);
  }
}

TEST(Stack, PlaneOrderingIsTemporalMajor) {
  const ScaleSpec s = ScaleSpec::twelve();
  // plane 5 (1-based) = (7^3 temporal, 1x1 spatial)
  EXPECT_EQ(s.temporal[(5 - 1) / s.spatial.size()], 7u);
  EXPECT_EQ(s.spatial[(5 - 1) % s.spatial.size()], 1u);
  // and the stack actually builds that plane from the 7^3 filter
  const std::size_t T = 64;
  const Irf g = make_gaussian_irf(T, 0, 1.0);
  HistogramCube c(5, 5, T);
  PhiloxStream rng(4, 4);
  for (std::size_t n = 0; n < 25; ++n)
    for (std::size_t t = 0; t < T; ++t) c.pixel(n)[t] = rng.poisson(0.2);
  const auto st = build_stack(c, g);
  const RealCube f = box_filter_3d(matched_filter(c, g), 7);
  const MlKernel k(g);
  for (std::size_t n = 0; n < 25; ++n) {
    EXPECT_EQ(st.stack.plane(4)[n], k(f.pixel(n)).depth);
  }
}

TEST(Stack, FourScaleVariantUsesMatchedFilterOnly) {
  const ScaleSpec s = ScaleSpec::four();
  EXPECT_EQ(s.temporal, std::vector<std::size_t>({1}));
  EXPECT_EQ(s.spatial, std::vector<std::size_t>({1, 3, 7, 13}));
  EXPECT_EQ(ScaleSpec::with_scales(8).scales(), 8u);
  EXPECT_THROW(ScaleSpec::with_scales(5), Error);
}

TEST(Stack, PhotonCountsDivideByTemporalKernel) {
  const std::size_t T = 64;
  const Irf g = make_gaussian_irf(T, 0, 1.0);
  HistogramCube c(3, 3, T);
  for (std::size_t n = 0; n < 9; ++n) c.pixel(n)[30] = 2;
  const auto st = build_stack(c, g);
  EXPECT_NEAR(st.photon_counts[0](1, 1), 2.0, 1e-12);       // matched filter, 1x1
  EXPECT_NEAR(st.photon_counts[1](1, 1), 18.0, 1e-12);      // 3x3 spatial
  EXPECT_NEAR(st.photon_counts[4](1, 1), 2.0 * 49.0, 1e-9);  // 7^3 / 7
}

TEST(Stack, SpatialSmoothingReducesVariance) {
  const std::size_t T = 128;
  const Irf g = make_gaussian_irf(T, 0, 2.0);
  const Scene base = make_scene(ScenePreset::kFlat, 48, 48, 0, 0.5);
  const Scene s = apply_noise_level(base, T, {4.0, 1.0, 0});
  const auto st = build_stack(sample_cube(s, g, T, 21), g, ScaleSpec::four());
  double prev = INFINITY;
  for (std::size_t l = 0; l < 4; ++l) {
    double m = 0.0, v = 0.0;
    const auto vals = st.stack.plane(l).values();
    for (double x : vals) m += x / static_cast<double>(vals.size());
    for (double x : vals) v += (x - m) * (x - m) / static_cast<double>(vals.size() - 1);
    // 3 sigma of the sample variance of a Gaussian estimate
    const double slack = 3.0 * v * std::sqrt(2.0 / static_cast<double>(vals.size() - 1));
    EXPECT_LE(v, prev + slack) << "plane " << l;
    prev = v;
  }
}

TEST(Stack, RejectsIrfWiderThanHistogram) {
  const Irf g({0.2, 0.2, 0.2, 0.2, 0.2}, 2);
  EXPECT_THROW(build_stack(HistogramCube(2, 2, 4), g), Error);
}
