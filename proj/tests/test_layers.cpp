#include <gtest/gtest.h>

#include "grad_check.hpp"
#include "mpseg/nn/blocks.hpp"
#include "mpseg/nn/layers.hpp"

using namespace mpseg;
using namespace mpseg::nn;
using gradcheck::random_tensor;

namespace {

// Direct 7-loop convolution, weight layout (out, in, kz, ky, kx).
Tensor<double> naive_conv(const Tensor<double>& x, const Conv3d<double>& conv) {
  const auto& g = conv.geom();
  const Dims3 od = g.grid_dims(x.dims);
  Tensor<double> y(conv.out_channels(), od);
  const auto& w = conv.weight()->value;
  const auto& b = conv.bias()->value;
  const int k = g.kernel, cin = conv.in_channels();
  for (int o = 0; o < conv.out_channels(); ++o)
    for (int z = 0; z < od.z; ++z)
      for (int yy = 0; yy < od.y; ++yy)
        for (int xx = 0; xx < od.x; ++xx) {
          double s = b[o];
          for (int c = 0; c < cin; ++c)
            for (int kz = 0; kz < k; ++kz)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                  const int iz = z * g.stride - g.pad + kz * g.dilation;
                  const int iy = yy * g.stride - g.pad + ky * g.dilation;
                  const int ix = xx * g.stride - g.pad + kx * g.dilation;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= x.dims.z || iy >= x.dims.y || ix >= x.dims.x) continue;
                  s += w[(((o * cin + c) * k + kz) * k + ky) * k + kx] * x.at(c, ix, iy, iz);
                }
          y.at(o, xx, yy, z) = s;
        }
  return y;
}

// Transposed convolution by scattering, weight layout (in, out, kz, ky, kx).
Tensor<double> naive_convT(const Tensor<double>& x, const ConvTranspose3d<double>& up, int cout) {
  const Dims3 od = up.output_dims(x.dims);
  Tensor<double> y(cout, od);
  const auto& w = up.weight()->value;
  const int cin = x.channels;
  for (int c = 0; c < cin; ++c)
    for (int z = 0; z < x.dims.z; ++z)
      for (int yy = 0; yy < x.dims.y; ++yy)
        for (int xx = 0; xx < x.dims.x; ++xx)
          for (int o = 0; o < cout; ++o)
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int oz = 2 * z - 1 + kz, oy = 2 * yy - 1 + ky, ox = 2 * xx - 1 + kx;
                  if (oz < 0 || oy < 0 || ox < 0 || oz >= od.z || oy >= od.y || ox >= od.x) continue;
                  y.at(o, ox, oy, oz) += w[(((c * cout + o) * 3 + kz) * 3 + ky) * 3 + kx] * x.at(c, xx, yy, z);
                }
  const auto& b = up.parameters()[1].param->value;
  for (int o = 0; o < cout; ++o)
    for (std::size_t i = 0; i < y.voxels(); ++i) y.channel(o)[i] += b[o];
  return y;
}

struct ConvCase {
  int in, out, k, stride, dilation;
  Dims3 dims;
};

}  // namespace

class ConvGeometry : public ::testing::TestWithParam<ConvCase> {};

TEST_P(ConvGeometry, MatchesNaiveAndFiniteDifferences) {
  const ConvCase p = GetParam();
  Rng rng(17);
  Conv3d<double> conv(p.in, p.out, p.k, p.stride, p.dilation, rng);
  const auto x = random_tensor(p.in, p.dims, rng);
  const auto y = conv.forward(x);
  const auto ref = naive_conv(x, conv);
  ASSERT_EQ(y.dims, ref.dims);
  for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y.data[i], ref.data[i], 1e-12);

  ConvCache<double> cache;
  const auto r = gradcheck::check(
      [&](const Tensor<double>& in, bool rec) { return conv.forward(in, rec ? &cache : nullptr); },
      [&](const Tensor<double>& dy) { return conv.backward(dy, cache); }, x, conv.parameters(), rng);
  EXPECT_LT(r.input, 1e-6);
  EXPECT_LT(r.params, 1e-6) << r.worst_param;
}

INSTANTIATE_TEST_SUITE_P(Layers, ConvGeometry,
                         ::testing::Values(ConvCase{2, 3, 3, 1, 1, {5, 4, 3}}, ConvCase{2, 3, 3, 2, 1, {6, 4, 4}},
                                           ConvCase{1, 2, 3, 1, 2, {7, 6, 5}}, ConvCase{3, 2, 3, 1, 4, {9, 9, 5}},
                                           ConvCase{3, 4, 1, 1, 1, {4, 3, 2}}, ConvCase{3, 4, 1, 2, 1, {4, 4, 2}}));

TEST(Conv3d, PaddingKeepsResolutionAtAnyDilation) {
  Rng rng(1);
  for (int d : {1, 2, 4}) {
    Conv3d<float> conv(1, 1, 3, 1, d, rng);
    EXPECT_EQ(conv.forward(Tensor<float>(1, {16, 16, 8})).dims, (Dims3{16, 16, 8}));
  }
  Conv3d<float> s2(1, 1, 3, 2, 1, rng);
  EXPECT_EQ(s2.forward(Tensor<float>(1, {16, 16, 8})).dims, (Dims3{8, 8, 4}));
}

TEST(Conv3d, TiedLayerAliasesStorage) {
  Rng rng(2);
  Conv3d<float> a(2, 3, 3, 1, 1, rng);
  Conv3d<float> b(a, 2);
  EXPECT_EQ(a.weight().get(), b.weight().get());
  EXPECT_EQ(a.bias().get(), b.bias().get());
  EXPECT_EQ(b.geom().dilation, 2);
  EXPECT_EQ(b.geom().pad, 2);
}

TEST(Conv3d, InputGradientLeavesParamsUntouched) {
  Rng rng(3);
  Conv3d<double> conv(2, 2, 3, 1, 1, rng);
  ConvCache<double> cache;
  const auto y = conv.forward(random_tensor(2, {4, 4, 4}, rng), &cache);
  conv.input_gradient(random_tensor(2, y.dims, rng), cache);
  for (double g : conv.weight()->grad) EXPECT_EQ(g, 0.0);
}

TEST(ConvTranspose3d, DoublesExtentMatchesNaiveAndGradients) {
  Rng rng(4);
  ConvTranspose3d<double> up(3, 2, rng);
  const auto x = random_tensor(3, {3, 2, 2}, rng);
  const auto y = up.forward(x);
  EXPECT_EQ(y.dims, (Dims3{6, 4, 4}));
  const auto ref = naive_convT(x, up, 2);
  for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y.data[i], ref.data[i], 1e-12);
  ConvCache<double> cache;
  const auto r = gradcheck::check([&](const Tensor<double>& in, bool rec) { return up.forward(in, rec ? &cache : nullptr); },
                                  [&](const Tensor<double>& dy) { return up.backward(dy, cache); }, x, up.parameters(), rng);
  EXPECT_LT(r.input, 1e-6);
  EXPECT_LT(r.params, 1e-6) << r.worst_param;
}

TEST(InstanceNorm3d, NormalizesAndGradients) {
  Rng rng(5);
  InstanceNorm3d<double> norm(3);
  auto x = random_tensor(3, {4, 3, 2}, rng, 3.0);
  for (auto& v : x.data) v += 5.0;
  const auto y = norm.forward(x);
  for (int c = 0; c < 3; ++c) {
    double m = 0, s = 0;
    for (std::size_t i = 0; i < y.voxels(); ++i) m += y.channel(c)[i];
    m /= y.voxels();
    for (std::size_t i = 0; i < y.voxels(); ++i) s += (y.channel(c)[i] - m) * (y.channel(c)[i] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(s / y.voxels(), 1.0, 1e-4);
  }
  for (auto& p : norm.parameters())
    for (auto& v : p.param->value) v += 0.3 * rng.normal();
  NormCache<double> cache;
  const auto r = gradcheck::check([&](const Tensor<double>& in, bool rec) { return norm.forward(in, rec ? &cache : nullptr); },
                                  [&](const Tensor<double>& dy) { return norm.backward(dy, cache); }, x, norm.parameters(), rng);
  EXPECT_LT(r.input, 1e-5);
  EXPECT_LT(r.params, 1e-6) << r.worst_param;
}

TEST(PReLU, SlopeAndGradients) {
  Rng rng(6);
  PReLU<double> act(2);
  Tensor<double> x(2, {2, 1, 1});
  x.data = {-2.0, 3.0, -1.0, 0.5};
  const auto y = act.forward(x);
  EXPECT_DOUBLE_EQ(y.data[0], -0.5);
  EXPECT_DOUBLE_EQ(y.data[1], 3.0);
  auto z = random_tensor(2, {3, 3, 2}, rng);
  for (auto& v : z.data)
    if (std::abs(v) < 1e-3) v = 0.1;  // keep away from the kink
  ActCache<double> cache;
  const auto r = gradcheck::check([&](const Tensor<double>& in, bool rec) { return act.forward(in, rec ? &cache : nullptr); },
                                  [&](const Tensor<double>& dy) { return act.backward(dy, cache); }, z, act.parameters(), rng);
  EXPECT_LT(r.input, 1e-6);
  EXPECT_LT(r.params, 1e-6);
}

// A conv bias feeding an instance norm has an exactly zero gradient, so the
// relative-error floor sits above central-difference roundoff.
TEST(ResidualBlock, GradientsWithAndWithoutProjection) {
  Rng rng(7);
  for (auto [in, out, stride, dil] : {std::tuple{3, 3, 1, 1}, std::tuple{2, 4, 2, 1}, std::tuple{2, 3, 1, 2}}) {
    ResidualBlock<double> block(in, out, stride, dil, rng);
    EXPECT_EQ(block.shortcut().has_value(), in != out || stride != 1);
    const auto x = random_tensor(in, {4, 4, 4}, rng);
    ResidualCache<double> cache;
    const auto r = gradcheck::check([&](const Tensor<double>& t, bool rec) { return block.forward(t, rec ? &cache : nullptr); },
                                    [&](const Tensor<double>& dy) { return block.backward(dy, cache); }, x,
                                    block.parameters(), rng, 1e-5, 1e-5);
    EXPECT_LT(r.input, 1e-4);
    EXPECT_LT(r.params, 1e-4) << r.worst_param;
  }
}

TEST(UpBlock, GradientsThroughBothInputs) {
  Rng rng(8);
  UpBlock<double> up(4, 2, rng);
  const auto x = random_tensor(4, {2, 2, 2}, rng);
  const auto skip = random_tensor(2, {4, 4, 4}, rng);
  UpCache<double> cache;
  Tensor<double> dskip;
  const auto r = gradcheck::check(
      [&](const Tensor<double>& t, bool rec) { return up.forward(t, skip, rec ? &cache : nullptr); },
      [&](const Tensor<double>& dy) {
        auto [dx, ds] = up.backward(dy, cache);
        dskip = ds;
        return dx;
      },
      x, up.parameters(), rng, 1e-5, 1e-5);
  EXPECT_LT(r.input, 1e-4);
  EXPECT_LT(r.params, 1e-4) << r.worst_param;
  EXPECT_EQ(dskip.dims, skip.dims);
}
