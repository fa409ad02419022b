#include <gtest/gtest.h>

#include "mpseg/metrics.hpp"
#include "mpseg/phantom.hpp"

using namespace mpseg;

namespace {

PhantomConfig noiseless() {
  PhantomConfig c;
  c.t2w_noise = 0.0;
  c.dwi_noise = 0.0;
  return c;
}

// Tumor region of the (distorted) ADC map: closer to the tumor value than to background.
ImageVolume adc_tumor_region(const PhantomCase& p, const PhantomConfig& c) {
  ImageVolume m(p.image.adc.dims(), p.image.adc.spacing(), {}, ChannelKind::MASK);
  const double cut = 0.5 * (c.adc_tumor + c.adc_background);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = p.image.adc[i] < cut ? 1.0f : 0.0f;
  return m;
}

double count(const ImageVolume& m) {
  double n = 0;
  for (float v : m.data()) n += v > 0.5f;
  return n;
}

}  // namespace

TEST(Phantom, NoiselessAdcRoundTrip) {
  for (auto bvals : {std::vector<double>{0, 1000}, std::vector<double>{0, 500, 1000, 1500}}) {
    auto c = noiseless();
    c.b_values = bvals;
    c.adc_texture = 0.2;
    const auto p = generate_case(c);
    const ADCMap fit = fit_adc(p.series, bvals.size() == 2 ? FitMethod::two_point : FitMethod::least_squares);
    double worst = 0.0;
    for (std::size_t i = 0; i < p.true_adc.size(); ++i) worst = std::max(worst, std::abs(fit.values[i] - p.true_adc[i]));
    // Float signal storage costs ~1e-7 in ln S, i.e. ~1e-10 in D at b = 1000.
    EXPECT_LT(worst, 1e-9);
  }
}

TEST(Phantom, SameSeedBitwiseIdentical) {
  PhantomConfig c;
  c.seed = 42;
  c.distortion_mm = 2.0;
  const auto a = generate_case(c), b = generate_case(c);
  EXPECT_EQ(a.image.t2w.storage(), b.image.t2w.storage());
  EXPECT_EQ(a.image.b1000.storage(), b.image.b1000.storage());
  EXPECT_EQ(a.image.adc.storage(), b.image.adc.storage());
  EXPECT_EQ(a.image.mask.storage(), b.image.mask.storage());
  c.seed = 43;
  EXPECT_NE(generate_case(c).image.t2w.storage(), a.image.t2w.storage());
}

TEST(Phantom, DistortionDegradesAlignmentMonotonically) {
  auto c = noiseless();
  c.s0_texture = 0.0;
  double prev = 2.0;
  for (double amp : {0.0, 1.0, 2.0, 3.0}) {
    c.distortion_mm = amp;
    const auto p = generate_case(c);
    const double d = dsc(adc_tumor_region(p, c), p.image.mask);
    if (amp == 0.0) EXPECT_EQ(d, 1.0);
    else EXPECT_LT(d, prev) << amp;
    prev = d;
  }
  EXPECT_LT(prev, 1.0);
}

TEST(Phantom, WarpPreservesVolume) {
  auto c = noiseless();
  c.s0_texture = 0.0;
  for (double amp : {1.0, 2.0, 3.0}) {
    c.distortion_mm = amp;
    const auto p = generate_case(c);
    const double warped = count(adc_tumor_region(p, c)), truth = count(p.image.mask);
    EXPECT_NEAR(warped / truth, 1.0, 0.02) << amp;
  }
}

TEST(Phantom, DistortionOnlyTouchesDiffusionChannels) {
  auto c = noiseless();
  const auto flat = generate_case(c);
  c.distortion_mm = 3.0;
  const auto warped = generate_case(c);
  EXPECT_EQ(flat.image.t2w.storage(), warped.image.t2w.storage());
  EXPECT_EQ(flat.image.mask.storage(), warped.image.mask.storage());
  EXPECT_NE(flat.image.b1000.storage(), warped.image.b1000.storage());
  for (int z = 0; z < c.dims.z; ++z)
    for (int x = 0; x < c.dims.x; ++x) {
      const double u = warped.displacement(x, 0, z);
      ASSERT_GE(u, 0.0);
      ASSERT_LE(u, 3.0 + 1e-12);
    }
}

TEST(Phantom, TumorIsBrighterOnT2wAndDarkerOnAdc) {
  const auto p = generate_case(PhantomConfig{});
  double t_in = 0, t_out = 0, a_in = 0, a_out = 0, n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < p.image.mask.size(); ++i) {
    const bool in = p.image.mask[i] > 0.5f;
    (in ? t_in : t_out) += p.image.t2w[i];
    (in ? a_in : a_out) += p.image.adc[i];
    (in ? n_in : n_out) += 1;
  }
  EXPECT_GT(t_in / n_in, t_out / n_out);
  EXPECT_LT(a_in / n_in, a_out / n_out);
}

TEST(Phantom, ConfigErrors) {
  PhantomConfig c;
  c.tumor_center = {2.0, 19.2, 32.0};
  try {
    generate_case(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TumorOutOfBounds);
  }
  c = {};
  c.tumor_radii.y = 0;
  EXPECT_THROW(generate_case(c), Error);
  c = {};
  c.distortion_mm = -1;
  EXPECT_THROW(generate_case(c), Error);
}

TEST(Phantom, ErodeRemovesOneFaceLayer) {
  ImageVolume m({7, 7, 7}, {1, 1, 1}, {}, ChannelKind::MASK);
  for (int z = 1; z < 6; ++z)
    for (int y = 1; y < 6; ++y)
      for (int x = 1; x < 6; ++x) m(x, y, z) = 1.0f;
  const auto e = erode(m);
  EXPECT_EQ(count(e), 27.0);
  EXPECT_EQ(e(3, 3, 3), 1.0f);
  EXPECT_EQ(e(1, 3, 3), 0.0f);
  EXPECT_EQ(count(erode(m, 3)), 0.0);
}

TEST(Phantom, ConfigJson) {
  PhantomConfig c;
  c.seed = 7;
  const auto j = to_json(c);
  EXPECT_EQ(j.at("seed").get<std::uint64_t>(), 7u);
  EXPECT_EQ(j.at("dims").size(), 3u);
}
