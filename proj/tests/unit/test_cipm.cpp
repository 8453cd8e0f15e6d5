#include <numbers>

#include <gtest/gtest.h>

#include "imd/cipm/cipm.hpp"
#include "support.hpp"

namespace imd {
namespace {

using cipm::CipmSpec;
using cipm::PromptMode;

cipm::CipmSpec toy_spec() {
  CipmSpec s;
  s.encoder_dim = 4;
  s.grid = 2;
  s.key_dim = 3;
  s.prompt_dim = 5;
  return s;
}

template <class T>
ad::ParamSet<T> toy_params(const CipmSpec& s, std::uint64_t seed = 3) {
  ad::ParamSet<T> p;
  cipm::init_cipm(p, s, seed);
  return p;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> prompts(const ad::ParamSet<T>& params, const CipmSpec& spec, const Tensor<T>& fa,
                                        const Tensor<T>& fb, PromptMode mode = PromptMode::Cross) {
  ad::Tape<T> tape;
  ad::Binder<T> p(tape, params);
  auto [a, b] = cipm::make_prompts(p, tape.constant(fa), tape.constant(fb), spec, mode);
  return {a.value(), b.value()};
}

TEST(Cipm, PromptShapeIsGridTokensByWidth) {
  CipmSpec spec;
  const auto params = toy_params<float>(spec);
  const auto fa = test::random_tensor<float>({32, 16, 16}, 1), fb = test::random_tensor<float>({32, 16, 16}, 2);
  for (auto mode : {PromptMode::Cross, PromptMode::Individual, PromptMode::Shared, PromptMode::Empty}) {
    const auto [a, b] = prompts(params, spec, fa, fb, mode);
    const int tokens = mode == PromptMode::Shared ? 512 : 256;  // shared concatenates both images
    EXPECT_EQ(a.shape, (Shape{tokens, 32})) << cipm::to_string(mode);
    EXPECT_EQ(b.shape, (Shape{tokens, 32})) << cipm::to_string(mode);
  }
}

TEST(Cipm, IdenticalInputsGiveIdenticalPrompts) {
  const auto spec = toy_spec();
  const auto params = toy_params<double>(spec);
  const auto f = test::random_tensor<double>({4, 2, 2}, 5);
  const auto [a, b] = prompts(params, spec, f, f);
  EXPECT_EQ(a.data, b.data);
}

TEST(Cipm, SwappingInputsSwapsPrompts) {
  const auto spec = toy_spec();
  const auto params = toy_params<double>(spec);
  const auto fa = test::random_tensor<double>({4, 2, 2}, 5), fb = test::random_tensor<double>({4, 2, 2}, 6);
  const auto [p, q] = prompts(params, spec, fa, fb);
  const auto [q2, p2] = prompts(params, spec, fb, fa);
  EXPECT_EQ(p.data, p2.data);
  EXPECT_EQ(q.data, q2.data);
  EXPECT_NE(p.data, q.data);
}

TEST(Cipm, SingleTokenEqualsMlpOfValue) {
  auto spec = toy_spec();
  spec.grid = 1;
  const auto params = toy_params<double>(spec);
  const auto fa = test::random_tensor<double>({4, 1, 1}, 7), fb = test::random_tensor<double>({4, 1, 1}, 8);
  const auto [pa, pb] = prompts(params, spec, fa, fb);
  // hand evaluation: softmax of a single logit is 1, so P_A = MLP(W_V f_B)
  auto mlp_of_value = [&](const Tensor<double>& f) {
    const auto& wv = params.at("cipm.v.w");
    std::vector<double> v(3, 0.0), h(10, 0.0), out(5, 0.0);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 4; ++j) v[i] += wv.at(i, j) * f.data[j];
    const auto &w1 = params.at("cipm.mlp.l1.w"), &b1 = params.at("cipm.mlp.l1.b");
    const auto &w2 = params.at("cipm.mlp.l2.w"), &b2 = params.at("cipm.mlp.l2.b");
    for (int i = 0; i < 10; ++i) {
      double s = b1.data[i];
      for (int j = 0; j < 3; ++j) s += w1.at(i, j) * v[j];
      h[i] = 0.5 * s * (1 + std::erf(s / std::numbers::sqrt2));
    }
    for (int i = 0; i < 5; ++i) {
      out[i] = b2.data[i];
      for (int j = 0; j < 10; ++j) out[i] += w2.at(i, j) * h[j];
    }
    return out;
  };
  const auto ea = mlp_of_value(fb), eb = mlp_of_value(fa);
  ASSERT_EQ(pa.shape, (Shape{1, 5}));
  for (int i = 0; i < 5; ++i) {
    EXPECT_NEAR(pa.data[i], ea[i], 1e-12);
    EXPECT_NEAR(pb.data[i], eb[i], 1e-12);
  }
}

TEST(Cipm, ValueScalingScalesAttendedVectors) {
  auto spec = toy_spec();
  spec.key_dim = spec.prompt_dim = 5;
  spec.identity_mlp = true;
  const auto params = toy_params<double>(spec);
  const auto ta = test::random_tensor<double>({4, 4}, 9), tb = test::random_tensor<double>({4, 4}, 10);
  auto attended = [&](double c) {
    ad::Tape<double> tape;
    ad::Binder<double> p(tape, params);
    auto vb = tb;
    for (auto& v : vb.data) v *= c;
    return cipm::to_prompt(p, cipm::attend(p, tape.constant(ta), tape.constant(tb), tape.constant(vb)), spec).value();
  };
  const auto base = attended(1.0), scaled = attended(-2.5);
  for (std::size_t i = 0; i < base.numel(); ++i) EXPECT_NEAR(scaled.data[i], -2.5 * base.data[i], 1e-12);
}

TEST(Cipm, AttentionRowsSumToOne) {
  // constant value tokens pass through a row-stochastic attention unchanged
  auto spec = toy_spec();
  spec.key_dim = spec.prompt_dim = 5;
  spec.identity_mlp = true;
  const auto params = toy_params<double>(spec);
  const auto ta = test::random_tensor<double>({4, 4}, 9, -3, 3), tb = test::random_tensor<double>({4, 4}, 10, -3, 3);
  Tensor<double> vb({4, 4});
  const double col[4] = {0.3, -1.2, 2.0, 0.7};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) vb.at(i, j) = col[i];
  ad::Tape<double> tape;
  ad::Binder<double> p(tape, params);
  const auto out = cipm::attend(p, tape.constant(ta), tape.constant(tb), tape.constant(vb)).value();
  const auto& wv = params.at("cipm.v.w");
  for (int i = 0; i < 5; ++i) {
    double expect = 0;
    for (int j = 0; j < 4; ++j) expect += wv.at(i, j) * col[j];
    for (int n = 0; n < 4; ++n) EXPECT_NEAR(out.at(i, n), expect, 1e-12);
  }
}

TEST(Cipm, GridMismatchIsShapeError) {
  const auto spec = toy_spec();
  const auto params = toy_params<double>(spec);
  EXPECT_THROW(prompts(params, spec, test::random_tensor<double>({4, 2, 2}, 1), test::random_tensor<double>({4, 3, 3}, 2)),
               ShapeError);
}

TEST(Cipm, AblationModes) {
  const auto spec = toy_spec();
  const auto params = toy_params<double>(spec);
  const auto fa = test::random_tensor<double>({4, 2, 2}, 5), fb = test::random_tensor<double>({4, 2, 2}, 6);
  const auto [ea, eb] = prompts(params, spec, fa, fb, PromptMode::Empty);
  for (double v : ea.data) EXPECT_EQ(v, 0.0);
  for (double v : eb.data) EXPECT_EQ(v, 0.0);
  const auto [sa, sb] = prompts(params, spec, fa, fb, PromptMode::Shared);
  EXPECT_EQ(sa.data, sb.data);
  EXPECT_EQ(sa.shape, (Shape{8, 5}));
  // individual prompts ignore the partner image
  const auto [ia, ib] = prompts(params, spec, fa, fb, PromptMode::Individual);
  const auto [ia2, ic] = prompts(params, spec, fa, test::random_tensor<double>({4, 2, 2}, 99), PromptMode::Individual);
  EXPECT_EQ(ia.data, ia2.data);
  EXPECT_NE(ib.data, ic.data);
  EXPECT_THROW(cipm::prompt_mode_from_string("bogus"), ConfigError);
}

TEST(Cipm, GradientsWrtEveryWeight) {
  const auto spec = toy_spec();
  const auto base = toy_params<double>(spec);
  const auto fa = test::random_tensor<double>({4, 2, 2}, 5), fb = test::random_tensor<double>({4, 2, 2}, 6);
  const auto probe = test::random_tensor<double>({4, 5}, 7);
  for (const auto& [name, t] : base) {
    const double err = test::param_grad_error(base, name, [&](ad::Binder<double>& p) {
      auto& tape = p.tape();
      return ad::sum(ad::mul(cipm::cross_prompt(p, tape.constant(fa), tape.constant(fb), spec).first,
                             tape.constant(probe)));
    });
    EXPECT_LT(err, 1e-3) << name;
  }
}

TEST(Cipm, GradientsWrtEncoderGrids) {
  const auto spec = toy_spec();
  const auto params = toy_params<double>(spec);
  const auto probe = test::random_tensor<double>({4, 5}, 7);
  auto f = [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& in) {
    ad::Binder<double> p(tape, params);
    auto [pa, pb] = cipm::cross_prompt(p, in[0], in[1], spec);
    return ad::add(ad::sum(ad::mul(pa, tape.constant(probe))), ad::sum(ad::square(pb)));
  };
  const auto r = test::grad_check(f, {test::random_tensor<double>({4, 2, 2}, 5), test::random_tensor<double>({4, 2, 2}, 6)});
  EXPECT_LT(r.worst, 1e-3) << r.details;
}

TEST(Cipm, EncoderGridShapeDeterminismAndGolden) {
  CipmSpec spec;
  ad::ParamSet<float> params;
  cipm::init_image_encoder(params, spec, 11);
  Tensor<float> img({3, 64, 64});
  for (std::size_t i = 0; i < img.numel(); ++i) img.data[i] = static_cast<float>(((i * 7919) % 256) / 255.0);
  auto run = [&] {
    ad::Tape<float> tape;
    ad::Binder<float> p(tape, params);
    return cipm::encode_image(p, tape.constant(img), spec).value();
  };
  const auto g = run();
  EXPECT_EQ(g.shape, (Shape{32, 16, 16}));
  EXPECT_EQ(g.data, run().data);
  test::expect_golden("cipm_encoder_grid", g, 1e-5);
}

}  // namespace
}  // namespace imd
