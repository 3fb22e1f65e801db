#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "sambay/scaling.hpp"

using namespace sambay;

namespace {

std::vector<std::pair<double, double>> synthetic(double A, double b, double C, double d_lo, double d_hi,
                                                 std::size_t n, double noise = 0, std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < n; ++i) {
    const double D = d_lo * std::pow(d_hi / d_lo, double(i) / double(n - 1));
    double L = A * std::pow(D, -b) + C;
    if (noise > 0) L *= 1 + noise * nd(rng);
    pts.emplace_back(D, L);
  }
  return pts;
}

}  // namespace

TEST(AspectRatio, GoldenSet) {
  EXPECT_EQ(solve_aspect_ratio(Arch::SambaY), 124u);
  EXPECT_EQ(solve_aspect_ratio(Arch::SambaYOCO), 126u);
  EXPECT_EQ(solve_aspect_ratio(Arch::MambaY), 120u);
  EXPECT_EQ(solve_aspect_ratio(Arch::SambaYMLP), 120u);
  EXPECT_EQ(solve_aspect_ratio(Arch::SambaYA), 126u);
  EXPECT_EQ(solve_aspect_ratio(Arch::SambaYAA), 126u);
  EXPECT_EQ(solve_aspect_ratio(Arch::SambaYDA), 124u);
  EXPECT_EQ(solve_aspect_ratio(Arch::TransformerPP), 128u);
  EXPECT_EQ(solve_aspect_ratio("S-GDNY"), 126u);
  EXPECT_EQ(solve_aspect_ratio("GDNY"), 122u);
}

TEST(AspectRatio, PluggedBackIntoPolynomial) {
  for (const auto& p : iso_polynomials()) {
    const double root = iso_root(p);
    EXPECT_NEAR((p.c1 * root + p.c2 * root * root) / 237568.0, 1.0, 1e-12) << p.name;
    const double a = double(solve_aspect_ratio(p));
    EXPECT_EQ(std::fmod(a, 2.0), 0.0);
    EXPECT_GE(a, root);
    EXPECT_LT(a - root, 2.0);
    EXPECT_LE(std::abs(p.c1 * a + p.c2 * a * a - 237568.0) / 237568.0, 0.035) << p.name;
  }
}

TEST(AspectRatio, NoPositiveRoot) {
  EXPECT_THROW(solve_aspect_ratio(IsoPolynomial{"bad", 0, 0}), ConfigError);
  EXPECT_THROW(solve_aspect_ratio(IsoPolynomial{"bad", -5, 0}), ConfigError);
  EXPECT_THROW(solve_aspect_ratio(IsoPolynomial{"bad", 1, -1}), ConfigError);
  EXPECT_THROW(solve_aspect_ratio("unknown"), ConfigError);
}

TEST(Schedule, LearningRate) {
  EXPECT_NEAR(learning_rate(16), 4.00e-4, 1e-18);
  EXPECT_NEAR(learning_rate(8), 5.66e-4, 0.005e-4);
  EXPECT_NEAR(learning_rate(12), 4.62e-4, 0.005e-4);
  EXPECT_NEAR(learning_rate(24), 3.27e-4, 0.005e-4);
  EXPECT_NEAR(learning_rate(64 * 16), 4e-4 / 8, 1e-18);
  EXPECT_NEAR(learning_rate(16, 4 * BaseConstants::batch0), 8e-4, 1e-18);
  EXPECT_THROW(learning_rate(0), ConfigError);
}

TEST(Schedule, TokensForDepth) {
  EXPECT_NEAR(tokens_for_depth(8, Arch::TransformerPP), 12.5e9, 1e-3);
  EXPECT_NEAR(tokens_for_depth(16, Arch::TransformerPP), 100e9, 1e-3);
  EXPECT_NEAR(tokens_for_depth(24, Arch::SambaY) / 1e9, 342.1, 0.05);
  EXPECT_THROW(tokens_for_depth(0, Arch::SambaY), ConfigError);
}

TEST(Schedule, BatchAndTokenScaling) {
  EXPECT_DOUBLE_EQ(batch_for_tokens(100e9), BaseConstants::batch0);
  EXPECT_DOUBLE_EQ(batch_for_tokens(400e9), 2 * 2097152.0);
  EXPECT_DOUBLE_EQ(lr_token_scaling(3e-4, 100e9), 3e-4);
  EXPECT_NEAR(lr_token_scaling(3e-4, 800e9), 1.5e-4, 1e-18);
  EXPECT_DOUBLE_EQ(independent_wd(4e-4), 0.1);
  EXPECT_DOUBLE_EQ(independent_wd(8e-4), 0.05);
}

TEST(Schedule, WarmupThenLinearDecay) {
  const std::size_t total = 1000, warm = 10;
  EXPECT_GT(lr_schedule(0, total, warm), 0.0);
  EXPECT_LT(lr_schedule(0, total, warm), 0.2);
  for (std::size_t s = 1; s < warm; ++s) EXPECT_GT(lr_schedule(s, total, warm), lr_schedule(s - 1, total, warm));
  EXPECT_DOUBLE_EQ(lr_schedule(warm, total, warm), 1.0);
  EXPECT_DOUBLE_EQ(lr_schedule(total, total, warm), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(warm + (total - warm) / 2, total, warm), 0.5);
  // 1% of the token budget as warmup
  EXPECT_DOUBLE_EQ(lr_schedule(10, 1000, 0.01 * 1000 * 64.0, 64.0), 1.0);
  EXPECT_THROW(lr_schedule(0, 10, std::size_t{11}), ConfigError);
}

TEST(MuP, PlanByParameterization) {
  ModelConfig c;
  c.arch = Arch::SambaY;
  c.width = 256;
  c.base_width = 128;
  c.parameterization = Parameterization::SP;
  auto p = mup_plan(c);
  for (const auto& g : p.groups) {
    EXPECT_EQ(g.lr_multiplier, 1.0);
    EXPECT_EQ(g.weight_decay, 0.1);
    EXPECT_EQ(g.weight_multiplier, 1.0);
  }
  EXPECT_EQ(p.residual_multiplier, 1.0);
  EXPECT_EQ(p.logit_multiplier, 1.0);

  c.parameterization = Parameterization::MuP;
  p = mup_plan(c);
  EXPECT_DOUBLE_EQ(p.group(ParamGroup::Hidden).lr_multiplier, 0.5);
  EXPECT_EQ(p.group(ParamGroup::Embedding).lr_multiplier, 1.0);
  EXPECT_EQ(p.group(ParamGroup::Vector).weight_decay, 0.1);
  EXPECT_EQ(p.residual_multiplier, 1.0);
  EXPECT_DOUBLE_EQ(p.logit_multiplier, 0.5);
  c.width = 512;
  EXPECT_DOUBLE_EQ(mup_plan(c).group(ParamGroup::Hidden).lr_multiplier, 0.25);

  c.parameterization = Parameterization::MuPPP;
  p = mup_plan(c);
  EXPECT_EQ(p.group(ParamGroup::Vector).weight_decay, 0.0);
  EXPECT_EQ(p.group(ParamGroup::Embedding).weight_decay, 0.0);
  EXPECT_EQ(p.group(ParamGroup::Unembedding).weight_decay, 0.0);
  EXPECT_EQ(p.group(ParamGroup::Hidden).weight_decay, 0.1);
  EXPECT_DOUBLE_EQ(p.residual_multiplier, 1.0 / std::sqrt(16.0));
  EXPECT_EQ(p.beta1, 0.9);
  EXPECT_EQ(p.beta2, 0.95);
  EXPECT_EQ(p.eps, 1e-8);
}

// Zero weight decay under muP++ exactly for embeddings, unembeddings, norm
// weights, lambda vectors and the other rank-1-in-width parameters.
TEST(MuP, ZeroWeightDecayParameterByParameter) {
  static const std::set<std::string> vector_like{"weight", "bias", "conv_weight", "conv_bias", "dt_bias",
                                                 "a_log", "d", "lambda_q1", "lambda_k1", "lambda_q2",
                                                 "lambda_k2", "head_norm", "norm_weight"};
  for (Arch a : all_archs()) {
    for (bool tie : {true, false}) {
      ModelConfig c;
      c.arch = a;
      c.width = 32;
      c.head_dim = 8;
      c.tie_embeddings = tie;
      c.normalized_gmu = true;
      c.norm = NormKind::Layer;
      const auto plan = mup_plan(c);
      for (const auto& s : enumerate_params(c)) {
        const std::string leaf = s.name.substr(s.name.rfind('.') + 1);
        const bool embed = s.name == "embed.weight" || s.name == "unembed.weight";
        const bool expect_zero = embed || vector_like.count(leaf) > 0;
        EXPECT_EQ(weight_decay_for(plan, s) == 0.0, expect_zero) << arch_name(a) << " " << s.name;
        if (!expect_zero) EXPECT_DOUBLE_EQ(lr_multiplier_for(plan, s), 1.0);
      }
    }
  }
}

TEST(MuP, CoordinateCheck) {
  std::vector<int> tokens(48);
  std::mt19937_64 rng(3);
  for (auto& t : tokens) t = int(rng() % 260);
  ModelConfig c;
  c.arch = Arch::SambaY;
  c.depth = 8;
  c.head_dim = 32;
  c.base_width = 128;
  c.parameterization = Parameterization::MuPPP;
  const auto pp = coordinate_check(c, {128, 256, 512}, 7, tokens);
  EXPECT_LE(pp.band(), 2.0);
  c.parameterization = Parameterization::SP;
  const auto sp = coordinate_check(c, {128, 256, 512}, 7, tokens);
  EXPECT_TRUE(sp.strictly_increasing()) << sp.rms[0] << " " << sp.rms[1] << " " << sp.rms[2];
}

TEST(Fit, NoiselessRecovery) {
  const auto pts = synthetic(2.0, 0.5, 0.58, 1.0, 1e4, 8);
  const auto f = fit_power_law(pts);
  EXPECT_NEAR(f.A, 2.0, 1e-6);
  EXPECT_NEAR(f.b, 0.5, 1e-6);
  EXPECT_NEAR(f.C, 0.58, 1e-6);
  EXPECT_NEAR(f.r_squared, 1.0, 1e-12);
  EXPECT_EQ(f.residuals.size(), 8u);
}

TEST(Fit, OnePercentNoise) {
  const auto pts = synthetic(2.0, 0.5, 0.58, 1.0, 1e4, 8, 0.01, 1234);
  const auto f = fit_power_law(pts, FitAxis::Tokens);
  EXPECT_NEAR(f.A / 2.0, 1.0, 0.1);
  EXPECT_NEAR(f.b / 0.5, 1.0, 0.1);
  EXPECT_NEAR(f.C / 0.58, 1.0, 0.1);
  EXPECT_GE(f.r_squared, 0.999);
  EXPECT_EQ(f.axis, FitAxis::Tokens);
}

TEST(Fit, ConstantCurve) {
  std::vector<std::pair<double, double>> pts;
  for (int i = 0; i < 6; ++i) pts.emplace_back(std::pow(10.0, i), 1.7);
  const auto f = fit_power_law(pts);
  EXPECT_DOUBLE_EQ(f.C, 1.7);
  EXPECT_EQ(f.A, 0.0);
  EXPECT_EQ(f.r_squared, 1.0);
}

TEST(Fit, ScaleEquivariance) {
  const auto pts = synthetic(2.0, 0.5, 0.58, 1.0, 1e4, 8, 0.01, 99);
  const auto f = fit_power_law(pts);
  const double k = 1e18;
  auto scaled = pts;
  for (auto& p : scaled) p.first *= k;
  const auto g = fit_power_law(scaled);
  EXPECT_NEAR(g.b, f.b, 1e-6);
  EXPECT_NEAR(g.C, f.C, 1e-6);
  EXPECT_NEAR(g.A / (f.A * std::pow(k, f.b)), 1.0, 1e-6);
}

TEST(Fit, FullScaleFlops) {
  // Realistic axis: D in FLOPs, C at a realistic irreducible loss.
  const auto pts = synthetic(3e4, 0.2, 0.58, 1e19, 1e22, 6);
  const auto f = fit_power_law(pts);
  EXPECT_NEAR(f.b, 0.2, 1e-6);
  EXPECT_NEAR(f.C, 0.58, 1e-6);
  EXPECT_NEAR(f.A / 3e4, 1.0, 1e-5);
}

TEST(Fit, RejectsBadInput) {
  EXPECT_THROW(fit_power_law({{1, 1}, {2, 1}, {3, 1}}), ConfigError);
  EXPECT_THROW(fit_power_law({{1, 1}, {2, 1}, {3, 1}, {0, 1}}), ConfigError);
  EXPECT_THROW(fit_power_law({{1, 1}, {2, 1}, {3, -1}, {4, 1}}), ConfigError);
}

TEST(Flops, Estimator) {
  EXPECT_DOUBLE_EQ(flops_estimate(1e9, 1e11), 6e20);
  const ModelConfig t = full_scale_config(Arch::TransformerPP, 16);
  const ModelConfig s = full_scale_config(Arch::SambaY, 16);
  const auto ft = flops_estimate(t, 1e11), fs = flops_estimate(s, 1e11);
  EXPECT_DOUBLE_EQ(flops_estimate(t, 2e11).flops, 2 * ft.flops);
  EXPECT_LT(std::abs(fs.flops / ft.flops - 1), 0.02);
  EXPECT_EQ(ft.estimator, "6*N*T");
  const auto fa = flops_estimate(t, 1e11, 4096);
  EXPECT_GT(fa.flops, ft.flops);
  EXPECT_NE(fa.estimator, ft.estimator);
  // SWA layers see at most the window, so SambaY's attention term is smaller.
  EXPECT_LT(flops_estimate(s, 1e11, 4096).flops - fs.flops, fa.flops - ft.flops);
}
