#include <gtest/gtest.h>

#include <map>
#include <set>

#include "grad_check.hpp"
#include "mpseg/architectures.hpp"
#include "mpseg/losses.hpp"

namespace mpseg {
// Readable parameter values in test names.
inline void PrintTo(Variant v, std::ostream* os) { *os << to_string(v); }
}  // namespace mpseg

using namespace mpseg;
using nn::Tensor;

namespace {

// Closed-form trainable scalar counts.
std::size_t conv_p(std::size_t i, std::size_t o, std::size_t k) { return o * i * k * k * k + o; }
std::size_t res_p(std::size_t i, std::size_t o, bool stride2 = false) {
  const bool proj = i != o || stride2;
  return conv_p(i, o, 3) + conv_p(o, o, 3) + 2 * (2 * o) + 2 * o + (proj ? conv_p(i, o, 1) : 0);
}
std::size_t up_p(std::size_t i, std::size_t o) { return i * o * 27 + o + 2 * o + o + res_p(2 * o, o) + res_p(o, o); }

std::size_t first_block_p(Variant v, std::size_t f) {
  switch (v) {
    case Variant::baseline_1ch: return res_p(1, f);
    case Variant::baseline_2ch: return res_p(2, f);
    case Variant::baseline_3ch: return res_p(3, f);
    // Second dilated head reuses every convolution; only norms and PReLUs are new.
    case Variant::multihead_1: return res_p(1, f) + res_p(3, f) + (4 * f + 2 * f);
    case Variant::multihead_2: return res_p(1, f) + res_p(2, f) + (4 * f + 2 * f);
    case Variant::multihead_3: return res_p(1, f) + 2 * res_p(2, f) + conv_p(2 * f, f, 1);
  }
  return 0;
}

std::size_t total_p(Variant v, const std::vector<int>& f, int bottleneck) {
  std::size_t n = first_block_p(v, f[0]) + res_p(f[0], f[0]);
  for (std::size_t l = 1; l <= f.size(); ++l) {
    const std::size_t out = l < f.size() ? f[l] : bottleneck;
    n += res_p(f[l - 1], out, true) + res_p(out, out);
    n += up_p(out, f[l - 1]);
  }
  return n + conv_p(f[0], 1, 1);
}

ModelSpec small_spec(Variant v, std::vector<int> filters = {4, 6, 8, 8}, int bottleneck = 8) {
  ModelSpec s = make_spec(v);
  s.level_filters = std::move(filters);
  s.bottleneck_filters = bottleneck;
  s.seed = 42;
  return s;
}

Tensor<float> random_input(int c, Dims3 d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(c, d);
  for (auto& v : t.data) v = static_cast<float>(rng.normal());
  return t;
}

}  // namespace

TEST(Architecture, SingleConvParameterCount) {
  Rng rng(0);
  nn::Conv3d<float> conv(1, 32, 3, 1, 1, rng);
  EXPECT_EQ(count_parameters(conv.parameters()), 896u);
}

TEST(Architecture, ParameterCountsMatchClosedForm) {
  for (Variant v : all_variants()) {
    const auto spec = make_spec(v);
    const SegmentationModel<float> m(spec);
    EXPECT_EQ(count_parameters(m), total_p(v, spec.level_filters, spec.bottleneck_filters)) << to_string(v);
  }
}

TEST(Architecture, MultiheadDeltaIsFirstBlockOnly) {
  const auto base = SegmentationModel<float>(make_spec(Variant::baseline_3ch));
  for (Variant v : {Variant::multihead_1, Variant::multihead_2, Variant::multihead_3}) {
    const SegmentationModel<float> m(make_spec(v));
    const long delta = static_cast<long>(count_parameters(m)) - static_cast<long>(count_parameters(base));
    EXPECT_EQ(delta, static_cast<long>(first_block_p(v, 32)) - static_cast<long>(first_block_p(Variant::baseline_3ch, 32)));
  }
  // One input channel instead of three: the first conv and the first block's
  // projection shortcut each lose two input channels of weights.
  const SegmentationModel<float> one(make_spec(Variant::baseline_1ch));
  EXPECT_EQ(count_parameters(base) - count_parameters(one), 2u * 32 * 27 + 2u * 32 * 1);
}

TEST(Architecture, DeeperLevelsStructurallyIdentical) {
  const SegmentationModel<float> base(make_spec(Variant::baseline_3ch));
  std::map<std::string, std::vector<int>> ref;
  for (const auto& p : base.named_parameters())
    if (p.name.rfind("enc1.first.", 0) != 0) ref[p.name] = p.param->shape;
  for (Variant v : {Variant::multihead_1, Variant::multihead_2, Variant::multihead_3}) {
    const SegmentationModel<float> m(make_spec(v));
    std::map<std::string, std::vector<int>> got;
    for (const auto& p : m.named_parameters())
      if (p.name.rfind("enc1.first.", 0) != 0) got[p.name] = p.param->shape;
    EXPECT_EQ(got, ref) << to_string(v);
  }
}

TEST(Architecture, SharedTensorsAliasedOnlyInModels1And2) {
  for (Variant v : {Variant::multihead_1, Variant::multihead_2, Variant::multihead_3}) {
    const SegmentationModel<float> m(make_spec(v));
    const auto& heads = m.first_block().heads();
    ASSERT_EQ(heads.size(), 3u);
    const bool shared = v != Variant::multihead_3;
    const auto& a = *heads[1];
    const auto& b = *heads[2];
    EXPECT_EQ(a.conv1().weight() == b.conv1().weight(), shared);
    EXPECT_EQ(a.conv2().weight() == b.conv2().weight(), shared);
    EXPECT_EQ(a.conv1().bias() == b.conv1().bias(), shared);
    EXPECT_EQ(a.conv1().geom().dilation, 2);
    EXPECT_EQ(b.conv1().geom().dilation, 4);
    if (shared) {
      a.conv1().weight()->value[5] = 123.0f;
      EXPECT_EQ(b.conv1().weight()->value[5], 123.0f);
    } else {
      std::set<const void*> ptrs;
      std::size_t n = 0;
      for (const auto& h : heads)
        for (const auto& p : h->parameters()) {
          ptrs.insert(p.param.get());
          ++n;
        }
      EXPECT_EQ(ptrs.size(), n);
    }
    // T2W head never shares with the dilated heads.
    EXPECT_NE(heads[0]->conv1().weight(), a.conv1().weight());
  }
}

TEST(Architecture, OutputShapeEqualsInputShape) {
  for (Variant v : all_variants()) {
    const SegmentationModel<float> m(small_spec(v));
    for (Dims3 d : {Dims3{16, 16, 16}, Dims3{32, 16, 16}, Dims3{16, 48, 32}}) {
      const auto y = m.forward(random_input(m.spec().in_channels, d, 1));
      EXPECT_EQ(y.channels, 1);
      EXPECT_EQ(y.dims, d) << to_string(v);
      for (float z : y.data) ASSERT_TRUE(std::isfinite(z));
    }
  }
}

TEST(Architecture, FullWidthForwardShapes) {
  for (Variant v : all_variants()) {
    const SegmentationModel<float> m(make_spec(v));
    const auto y = m.forward(random_input(m.spec().in_channels, {32, 32, 16}, 2));
    EXPECT_EQ(y.dims, (Dims3{32, 32, 16})) << to_string(v);
  }
}

TEST(Architecture, T2WHeadIsolatedFromDiffusionChannels) {
  for (Variant v : {Variant::multihead_2, Variant::multihead_3}) {
    const SegmentationModel<float> m(small_spec(v));
    auto x = random_input(3, {16, 16, 16}, 3);
    const auto ref = m.first_block().head_outputs(x)[0];
    Rng rng(9);
    for (int c : {1, 2})
      for (std::size_t i = 0; i < x.voxels(); ++i) x.channel(c)[i] = static_cast<float>(10 * rng.normal());
    const auto got = m.first_block().head_outputs(x)[0];
    EXPECT_EQ(got.data, ref.data) << to_string(v);
  }
}

TEST(Architecture, ZeroInputFiniteAndDeterministic) {
  ModelSpec s = small_spec(Variant::multihead_1);
  SegmentationModel<float> m(s);
  for (auto& p : m.named_parameters())
    if (p.name.size() > 4 && p.name.ends_with("bias") && p.name.find("norm") == std::string::npos)
      std::fill(p.param->value.begin(), p.param->value.end(), 0.0f);
  const auto y = m.forward(Tensor<float>(3, {16, 16, 16}));
  for (float z : y.data) ASSERT_TRUE(std::isfinite(z));
  const auto x = random_input(3, {16, 16, 16}, 4);
  EXPECT_EQ(m.forward(x).data, m.forward(x).data);
}

TEST(Architecture, InputErrors) {
  const SegmentationModel<float> m(small_spec(Variant::baseline_3ch));
  try {
    m.forward(Tensor<float>(3, {16, 16, 12}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IndivisibleShape);
  }
  try {
    m.forward(Tensor<float>(2, {16, 16, 16}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ChannelMismatch);
  }
  EXPECT_THROW(variant_from_string("unet3plus"), Error);
  ModelSpec bad = make_spec(Variant::baseline_2ch);
  bad.in_channels = 3;
  EXPECT_THROW(SegmentationModel<float>{bad}, Error);
}

TEST(Architecture, SpecJsonRoundTrip) {
  const auto s = small_spec(Variant::multihead_3, {4, 8, 8}, 16);
  const auto r = spec_from_json(to_json(s));
  EXPECT_EQ(r.variant, s.variant);
  EXPECT_EQ(r.level_filters, s.level_filters);
  EXPECT_EQ(r.bottleneck_filters, 16);
  EXPECT_EQ(r.seed, 42u);
}

class ModelGradient : public ::testing::TestWithParam<Variant> {};

// Dice loss of the whole network against single-weight central differences.
TEST_P(ModelGradient, DiceLossMatchesFiniteDifferences) {
  ModelSpec s = make_spec(GetParam());
  s.level_filters = {2, 3, 3, 3};
  s.bottleneck_filters = 3;
  s.seed = 7;
  SegmentationModel<double> m(s);
  Rng rng(5);
  // The bottleneck is 1x1x1 here, where zero norm biases would park every
  // PReLU exactly on its kink; jitter all weights off that point.
  for (const auto& p : m.parameters())
    for (auto& v : p.param->value) v += 0.1 * rng.normal();
  Tensor<double> x(s.in_channels, {16, 16, 16});
  for (auto& v : x.data) v = rng.normal();
  std::vector<double> target(x.voxels());
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = (i % 7 < 3) ? 1.0 : 0.0;
  const LossConfig cfg{LossKind::dice};

  auto loss = [&]() {
    const auto y = m.forward(x);
    return compute_loss_from_logits<double>(cfg, y.data, target).value;
  };
  m.zero_grad();
  ModelCache<double> cache;
  const auto y = m.forward(x, &cache);
  const auto lr = compute_loss_from_logits<double>(cfg, y.data, target);
  Tensor<double> g(1, y.dims);
  g.data.assign(lr.grad.begin(), lr.grad.end());
  m.backward(g, cache);

  struct Sample {
    std::string name;
    double num, ana;
  };
  std::vector<Sample> samples;
  double scale = 0.0;
  for (const auto& p : m.parameters()) {
    for (std::size_t i : {std::size_t{0}, p.param->size() / 2, p.param->size() - 1}) {
      const double keep = p.param->value[i];
      const double h = 1e-7;  // small enough that PReLU kinks are rarely straddled
      p.param->value[i] = keep + h;
      const double fp = loss();
      p.param->value[i] = keep - h;
      const double fm = loss();
      p.param->value[i] = keep;
      samples.push_back({p.name, (fp - fm) / (2 * h), p.param->grad[i]});
      scale = std::max(scale, std::abs(samples.back().ana));
    }
  }
  // Relative to the largest sampled gradient: several tensors (e.g. biases
  // ahead of an instance norm) have an exactly zero true gradient.
  double worst = 0.0;
  std::string where;
  for (const auto& s : samples) {
    const double err = std::abs(s.num - s.ana) / std::max({std::abs(s.num), std::abs(s.ana), 1e-3 * scale});
    if (err > worst) {
      worst = err;
      where = s.name + " num=" + std::to_string(s.num) + " ana=" + std::to_string(s.ana);
    }
  }
  const auto checked = samples.size();
  EXPECT_GT(checked, 100u);
  EXPECT_LT(worst, 1e-3) << where;
}

INSTANTIATE_TEST_SUITE_P(Variants, ModelGradient,
                         ::testing::Values(Variant::baseline_1ch, Variant::baseline_3ch, Variant::multihead_1,
                                           Variant::multihead_2, Variant::multihead_3),
                         [](const auto& info) { return to_string(info.param); });
