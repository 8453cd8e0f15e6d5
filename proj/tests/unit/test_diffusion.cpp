#include <gtest/gtest.h>

#include "imd/diffusion/backbone.hpp"
#include "imd/diffusion/schedule.hpp"
#include "support.hpp"

namespace imd {
namespace {

using diffusion::BackboneSpec;

TEST(Schedule, AlphaBarStartsAtOneAndDecreases) {
  for (auto [T, lo, hi] : {std::tuple{1000, 1e-4, 0.02}, std::tuple{10, 0.1, 0.5}, std::tuple{1, 0.3, 0.3}}) {
    const auto s = diffusion::make_schedule(T, lo, hi);
    ASSERT_EQ(s.total_steps(), T);
    EXPECT_EQ(s[0], 1.0);
    for (int t = 1; t <= T; ++t) {
      EXPECT_LT(s[t], s[t - 1]);
      EXPECT_GT(s[t], 0.0);
    }
  }
}

TEST(Schedule, LinearBetaClosedForm) {
  const auto s = diffusion::make_schedule(1000, 1e-4, 0.02);
  double ab = 1;
  for (int t = 1; t <= 500; ++t) ab *= 1 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0);
  EXPECT_NEAR(s[500], ab, 1e-15);
}

TEST(Schedule, RejectsBadRanges) {
  EXPECT_THROW(diffusion::make_schedule(0), ConfigError);
  EXPECT_THROW(diffusion::make_schedule(10, 0.02, 1e-4), ConfigError);
  EXPECT_THROW(diffusion::make_schedule(10, 0.0, 0.1), ConfigError);
  EXPECT_THROW(diffusion::make_schedule(10, 0.1, 1.0), ConfigError);
}

TEST(AddNoise, TimestepZeroIsIdentity) {
  const auto s = diffusion::make_schedule();
  const auto z = test::random_tensor<float>({4, 3, 3}, 1);
  EXPECT_EQ(diffusion::add_noise(z, 0, s, 7).data, z.data);
}

TEST(AddNoise, SeededDeterminism) {
  const auto s = diffusion::make_schedule();
  const auto z = test::random_tensor<float>({4, 3, 3}, 1);
  EXPECT_EQ(diffusion::add_noise(z, 300, s, 7).data, diffusion::add_noise(z, 300, s, 7).data);
  EXPECT_NE(diffusion::add_noise(z, 300, s, 7).data, diffusion::add_noise(z, 300, s, 8).data);
}

TEST(AddNoise, AffineInInput) {
  const auto s = diffusion::make_schedule();
  const auto z = test::random_tensor<double>({2, 4, 4}, 3);
  auto z3 = z;
  for (auto& v : z3.data) v *= 3;
  const auto n1 = diffusion::add_noise(z, 250, s, 11), n3 = diffusion::add_noise(z3, 250, s, 11);
  for (std::size_t i = 0; i < z.numel(); ++i)
    EXPECT_NEAR(n3.data[i] - n1.data[i], std::sqrt(s[250]) * 2 * z.data[i], 1e-12);
}

TEST(AddNoise, MonteCarloVarianceAt500) {
  const auto s = diffusion::make_schedule();
  const Tensor<double> z({100000});
  const auto n = diffusion::add_noise(z, 500, s, 2024);
  double mean = 0, sq = 0;
  for (double v : n.data) mean += v;
  mean /= n.numel();
  for (double v : n.data) sq += (v - mean) * (v - mean);
  const double var = sq / (n.numel() - 1);
  EXPECT_NEAR(var / (1 - s[500]), 1.0, 0.02);
}

TEST(AddNoise, RejectsOutOfRangeTimestep) {
  const auto s = diffusion::make_schedule(10);
  EXPECT_THROW(diffusion::add_noise(Tensor<float>({2}), 11, s, 0), ConfigError);
  EXPECT_THROW(diffusion::add_noise(Tensor<float>({2}), -1, s, 0), ConfigError);
}

// ---------------------------------------------------------------- backbone

TEST(Backbone, TapConventions) {
  BackboneSpec s;
  EXPECT_EQ(s.tapped_block(), 2);
  EXPECT_EQ(s.level_of_up_block(2), 0);
  EXPECT_EQ(s.level_of_up_block(1), 1);
  s.tap = diffusion::TapConvention::Stage;
  s.block_index = 0;
  EXPECT_EQ(s.tapped_block(), 1);
  s.block_index = 1;
  EXPECT_EQ(s.tapped_block(), 3);
  s.block_index = 2;
  EXPECT_THROW(s.tapped_block(), ConfigError);
}

struct DeskModel {
  BackboneSpec spec;
  ad::ParamSet<float> params;
  DeskModel() {
    diffusion::init_latent_encoder(params, spec, 1);
    diffusion::init_unet(params, spec, 2);
  }
  Tensor<float> features(const Tensor<float>& image, const Tensor<float>& prompt, int t = 0) {
    ad::Tape<float> tape;
    ad::Binder<float> p(tape, params);
    auto z = diffusion::encode_latent(p, tape.constant(image));
    return diffusion::extract_features(p, z, t, tape.constant(prompt), spec).value();
  }
};

Tensor<float> test_image(int h, int w) {
  Tensor<float> t({3, h, w});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        t.at(c, y, x) = static_cast<float>(0.5 + 0.4 * std::sin(0.3 * x + 0.7 * c) * std::cos(0.2 * y - 0.1 * c));
  return t;
}

TEST(Backbone, OutputShapeAndStride) {
  DeskModel m;
  const auto f = m.features(test_image(64, 64), test::random_tensor<float>({16, 32}, 4));
  EXPECT_EQ(f.shape, (Shape{64, 8, 8}));
  const auto g = m.features(test_image(32, 48), test::random_tensor<float>({16, 32}, 4));
  EXPECT_EQ(g.shape, (Shape{64, 4, 6}));
}

TEST(Backbone, PromptChangesFeatures) {
  DeskModel m;
  const auto img = test_image(64, 64);
  const auto f1 = m.features(img, test::random_tensor<float>({16, 32}, 4));
  const auto f2 = m.features(img, test::random_tensor<float>({16, 32}, 5));
  double diff = 0;
  for (std::size_t i = 0; i < f1.numel(); ++i) diff = std::max(diff, double(std::abs(f1.data[i] - f2.data[i])));
  EXPECT_GT(diff, 0.0);
}

TEST(Backbone, DeterministicInference) {
  DeskModel m;
  const auto img = test_image(64, 64);
  const auto prompt = test::random_tensor<float>({16, 32}, 4);
  EXPECT_EQ(m.features(img, prompt).data, m.features(img, prompt).data);
}

TEST(Backbone, PromptWidthMismatchIsShapeError) {
  DeskModel m;
  EXPECT_THROW(m.features(test_image(64, 64), test::random_tensor<float>({16, 31}, 4)), ShapeError);
}

TEST(Backbone, LatentNeedsStride8Dims) {
  DeskModel m;
  EXPECT_THROW(m.features(test_image(60, 64), test::random_tensor<float>({16, 32}, 4)), ShapeError);
}

TEST(Backbone, GoldenFeatureMap) {
  DeskModel m;
  test::expect_golden("backbone_features", m.features(test_image(64, 64), test::random_tensor<float>({16, 32}, 4)),
                      1e-4);
}

TEST(Backbone, AdapterMatchesDirectPath) {
  DeskModel m;
  const auto prompt = test::random_tensor<float>({16, 32}, 4);
  Tensor<std::uint8_t> px({64, 64, 3});
  for (std::size_t i = 0; i < px.numel(); ++i) px.data[i] = static_cast<std::uint8_t>((i * 37) % 251);
  const Image img(px, "x");
  diffusion::DeskUnetExtractor ex(m.params, m.spec, diffusion::make_schedule(), 0);
  const auto fm = ex.extract(img, 0, prompt);
  EXPECT_EQ(fm.stride, 8);
  EXPECT_EQ(fm.data.data, m.features(image_to_tensor<float>(img), prompt).data);
}

BackboneSpec toy_spec() {
  BackboneSpec s;
  s.latent_channels = 3;
  s.widths = {4, 8};
  s.groups = 2;
  s.blocks_per_up_level = 1;
  s.block_index = 1;
  s.out_channels = 3;
  s.prompt_dim = 5;
  s.time_dim = 4;
  return s;
}

TEST(Backbone, GradientWrtPromptAndLatent) {
  const auto spec = toy_spec();
  ad::ParamSet<double> params;
  diffusion::init_unet(params, spec, 9);
  const auto probe = test::random_tensor<double>({3, 4, 4}, 10);
  auto f = [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& in) {
    ad::Binder<double> p(tape, params);
    auto feats = diffusion::extract_features(p, in[0], 3, in[1], spec);
    return ad::sum(ad::mul(feats, tape.constant(probe)));
  };
  const auto r = test::grad_check(f, {test::random_tensor<double>({3, 4, 4}, 11), test::random_tensor<double>({3, 5}, 12)});
  EXPECT_LT(r.worst, 1e-3) << r.details;
}

TEST(Backbone, GradientWrtWeights) {
  const auto spec = toy_spec();
  ad::ParamSet<double> params;
  diffusion::init_unet(params, spec, 9);
  const auto latent = test::random_tensor<double>({3, 4, 4}, 11);
  const auto prompt = test::random_tensor<double>({3, 5}, 12);
  const auto probe = test::random_tensor<double>({3, 4, 4}, 10);
  for (const std::string name : {"unet.up1.attn.k.w", "unet.down0.res.c1.w", "unet.out.w"}) {
    const double err = test::param_grad_error(params, name, [&](ad::Binder<double>& p) {
      auto& tape = p.tape();
      return ad::sum(ad::mul(diffusion::extract_features(p, tape.constant(latent), 0, tape.constant(prompt), spec),
                             tape.constant(probe)));
    });
    EXPECT_LT(err, 1e-3) << name;
  }
}

}  // namespace
}  // namespace imd
