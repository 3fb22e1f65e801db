#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "sambay/arch.hpp"
#include "sambay/scaling.hpp"
#include "support/oracles.hpp"

using namespace sambay;

namespace {

std::vector<MixerKind> mixers(const LayerPlan& p) {
  std::vector<MixerKind> m;
  for (const auto& l : p.layers) m.push_back(l.mixer);
  return m;
}

constexpr auto S = MixerKind::SSM;
constexpr auto W = MixerKind::SWA;
constexpr auto F = MixerKind::Full;
constexpr auto X = MixerKind::Cross;
constexpr auto G = MixerKind::GMU;

ModelConfig desk(Arch arch, std::size_t depth = 4) {
  ModelConfig c;
  c.arch = arch;
  c.depth = depth;
  c.width = 8;
  c.attn_width = 8;
  c.head_dim = 4;
  c.kv_group = 2;
  c.mlp_width = 12;
  c.window = 3;
  c.vocab_size = 11;
  c.ssm_state = 2;
  c.conv_kernel = 3;
  return c;
}

double round1(double millions) { return std::round(millions * 10.0) / 10.0; }

struct Table6Row {
  Arch arch;
  std::size_t depth;
  std::size_t width;
  double nonembed_m;
  double total_m;
  double lr;
  double tokens_b;  // <0: fixed budget, not the depth formula
};

const std::vector<Table6Row>& table6() {
  static const std::vector<Table6Row> rows{
      {Arch::TransformerPP, 8, 1024, 121.6, 154.4, 5.66e-4, 12.5},
      {Arch::TransformerPP, 12, 1536, 410.5, 459.7, 4.62e-4, 42.2},
      {Arch::TransformerPP, 16, 2048, 973.1, 1038.6, 4.00e-4, 100.0},
      {Arch::TransformerPP, 20, 2560, 1900.5, 1982.5, 3.58e-4, 195.3},
      {Arch::TransformerPP, 24, 3072, 3284.1, 3382.4, 3.27e-4, 337.5},
      {Arch::SambaY, 8, 992, 123.3, 155.0, 5.66e-4, 12.7},
      {Arch::SambaY, 12, 1488, 416.1, 463.7, 4.62e-4, 42.8},
      {Arch::SambaY, 16, 1984, 986.3, 1049.8, 4.00e-4, 101.4},
      {Arch::SambaY, 20, 2480, 1926.5, 2005.8, 3.58e-4, 198.0},
      {Arch::SambaY, 24, 2976, 3328.9, 3424.2, 3.27e-4, 342.1},
      {Arch::SambaYOCO, 8, 1008, 123.2, 155.4, 5.66e-4, 12.7},
      {Arch::SambaYOCO, 12, 1512, 415.6, 464.0, 4.62e-4, 42.7},
      {Arch::SambaYOCO, 16, 2016, 985.2, 1049.7, 4.00e-4, 101.2},
      {Arch::SambaYOCO, 20, 2520, 1924.3, 2004.9, 3.58e-4, 197.8},
      {Arch::SambaYOCO, 24, 3024, 3325.1, 3421.9, 3.27e-4, 341.7},
      {Arch::MambaY, 16, 1920, 975.2, 1036.6, 4.00e-4, -1},
      {Arch::SambaYA, 16, 2016, 985.2, 1049.7, 4.00e-4, -1},
      {Arch::SambaYAA, 16, 2016, 985.2, 1049.7, 4.00e-4, -1},
      {Arch::SambaYMLP, 16, 1920, 985.0, 1046.4, 4.00e-4, -1},
  };
  return rows;
}

}  // namespace

TEST(Plan, SambaYDepth8) {
  ModelConfig c;
  c.arch = Arch::SambaY;
  c.depth = 8;
  const auto p = build_layer_plan(c);
  EXPECT_EQ(mixers(p), (std::vector<MixerKind>{S, W, S, W, F, G, X, G}));
  ASSERT_TRUE(p.kv_producer && p.tap_layer);
  EXPECT_EQ(*p.kv_producer, 4u);
  EXPECT_TRUE(p.layers[4].kv_producer);
  EXPECT_EQ(*p.tap_layer, 2u);
  EXPECT_EQ(p.tap_source, MemorySource::LastSsm);
  EXPECT_EQ(p.self_decoder_layers, 4u);
}

TEST(Plan, OtherArchsDepth8) {
  ModelConfig c;
  c.depth = 8;
  c.arch = Arch::SambaYOCO;
  EXPECT_EQ(mixers(build_layer_plan(c)), (std::vector<MixerKind>{S, W, S, W, F, X, X, X}));
  EXPECT_FALSE(build_layer_plan(c).tap_layer.has_value());
  c.arch = Arch::TransformerLS;
  EXPECT_EQ(mixers(build_layer_plan(c)), (std::vector<MixerKind>{W, W, W, F, W, W, W, F}));
  c.arch = Arch::TransformerPP;
  EXPECT_EQ(mixers(build_layer_plan(c)), std::vector<MixerKind>(8, F));
  c.arch = Arch::MambaY;
  auto p = build_layer_plan(c);
  EXPECT_EQ(mixers(p), (std::vector<MixerKind>{S, S, S, S, F, G, X, G}));
  EXPECT_EQ(*p.tap_layer, 3u);
  c.arch = Arch::SambaYAA;
  p = build_layer_plan(c);
  EXPECT_EQ(mixers(p), (std::vector<MixerKind>{S, W, S, W, F, G, G, G}));
  EXPECT_EQ(*p.tap_layer, 4u);
  EXPECT_EQ(p.tap_source, MemorySource::MiddleAttention);
  c.arch = Arch::SambaYA;
  p = build_layer_plan(c);
  EXPECT_EQ(mixers(p), (std::vector<MixerKind>{S, W, S, W, F, G, X, G}));
  EXPECT_EQ(*p.tap_layer, 4u);
  EXPECT_EQ(p.tap_source, MemorySource::LastAttention);
  c.arch = Arch::SambaYMLP;
  p = build_layer_plan(c);
  EXPECT_EQ(*p.tap_layer, 4u);
  EXPECT_EQ(p.tap_source, MemorySource::MlpBranch);
  c.arch = Arch::SambaYDA;
  EXPECT_EQ(mixers(build_layer_plan(c)), (std::vector<MixerKind>{S, W, S, W, F, G, X, G}));
}

TEST(Plan, SambaYCountsAcrossDepths) {
  for (std::size_t d : {4u, 8u, 12u, 16u, 20u, 24u}) {
    ModelConfig c;
    c.arch = Arch::SambaY;
    c.depth = d;
    const auto p = build_layer_plan(c);
    EXPECT_EQ(p.layers.size(), d);
    EXPECT_EQ(p.count(S), d / 4);
    EXPECT_EQ(p.count(W), d / 4);
    EXPECT_EQ(p.count(G), d / 4);
    EXPECT_EQ(p.shared_kv_readers(), d / 4);
    EXPECT_EQ(*p.tap_layer, d / 2 - 2);
  }
}

TEST(Plan, YocoDepthMustBeMultipleOfFour) {
  for (Arch a : all_archs()) {
    ModelConfig c;
    c.arch = a;
    c.depth = 6;
    c.kv_group = 2;
    if (!is_yoco(a)) {
      EXPECT_NO_THROW(build_layer_plan(c));
    } else {
      EXPECT_THROW(build_layer_plan(c), ConfigError) << arch_name(a);
    }
  }
}

TEST(Plan, RejectsInconsistentHeads) {
  auto c = desk(Arch::SambaY);
  c.head_dim = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = desk(Arch::SambaY);
  c.kv_group = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = desk(Arch::SambaY);
  c.window = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = desk(Arch::SambaY);
  c.aspect_ratio = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Plan, NamesRoundTrip) {
  for (Arch a : all_archs()) EXPECT_EQ(parse_arch(arch_name(a)), a);
  EXPECT_THROW(parse_arch("gpt"), ConfigError);
  for (auto p : {Parameterization::SP, Parameterization::MuP, Parameterization::MuPPP})
    EXPECT_EQ(parse_parameterization(parameterization_name(p)), p);
}

TEST(Counts, Table6NonEmbeddingTotalsAndSchedule) {
  for (const auto& row : table6()) {
    const ModelConfig c = full_scale_config(row.arch, row.depth);
    SCOPED_TRACE(arch_name(row.arch) + " d=" + std::to_string(row.depth));
    EXPECT_EQ(c.w(), row.width);
    EXPECT_EQ(c.n_heads(), row.depth);
    EXPECT_EQ(c.n_kv_heads(), row.depth / 4);
    EXPECT_EQ(c.d_head(), 128u);
    EXPECT_EQ(c.w_mlp(), 4 * row.width);
    const auto pc = count_params(c);
    EXPECT_DOUBLE_EQ(round1(pc.closed.total_nonembed / 1e6), row.nonembed_m);
    EXPECT_DOUBLE_EQ(round1((pc.closed.total_nonembed + pc.embed) / 1e6), row.total_m);
    EXPECT_DOUBLE_EQ(pc.embed, 32000.0 * static_cast<double>(row.width));
    const double lr = learning_rate(static_cast<double>(row.depth));
    EXPECT_NEAR(lr, row.lr, 0.005e-4);
    if (row.tokens_b > 0) {
      EXPECT_DOUBLE_EQ(round1(tokens_for_depth(row.depth, row.arch) / 1e9), row.tokens_b);
    }
  }
}

TEST(Counts, ClosedFormIsTheIsoPolynomial) {
  for (Arch a : all_archs()) {
    const auto poly = iso_polynomial(a);
    for (std::size_t d : {8u, 12u, 16u, 20u, 24u}) {
      const ModelConfig c = full_scale_config(a, d);
      const double alpha = static_cast<double>(c.resolved_aspect_ratio());
      const double d3 = std::pow(static_cast<double>(d), 3);
      const double expect = (poly.c1 * alpha + poly.c2 * alpha * alpha) * d3;
      EXPECT_NEAR(count_params(c).closed.total_nonembed / expect, 1.0, 1e-12)
          << arch_name(a) << " d=" << d;
    }
  }
}

// exact - closed must be exactly the terms the closed form leaves out,
// itemised here from the layer plan.
TEST(Counts, ExactMinusClosedIsTheNeglectedTerms) {
  for (Arch a : all_archs()) {
    for (std::size_t d : {8u, 16u, 24u}) {
      ModelConfig c = full_scale_config(a, d);
      for (bool ngmu : {false, true}) {
        c.normalized_gmu = ngmu;
        const auto p = build_layer_plan(c);
        const double w = double(c.w()), di = 2 * w, N = 16, K = 4, R = std::ceil(w / 16);
        const double kv = double(c.n_kv_heads() * c.d_head());
        const double H = double(c.n_heads()), hd = double(c.d_head());
        double neglected = (2.0 * d + 1) * w;
        if (p.kv_producer) neglected += 2 * w * kv;
        neglected += double(p.count(S)) * (di * K + di + (R + 2 * N) * di + di * R + di + di * N + di);
        if (c.differential()) neglected += double(p.count(W) + p.count(F) + p.count(X)) * (4 * H * hd + hd);
        if (ngmu) neglected += double(p.count(G)) * double(c.tap_width());
        const auto pc = count_params(c);
        EXPECT_DOUBLE_EQ(pc.exact.total_nonembed - pc.closed.total_nonembed, neglected)
            << arch_name(a) << " d=" << d;
        EXPECT_DOUBLE_EQ(pc.exact.mlp, pc.closed.mlp);
        EXPECT_DOUBLE_EQ(pc.exact.gmu - pc.closed.gmu, ngmu ? double(p.count(G)) * double(c.tap_width()) : 0.0);
      }
    }
  }
}

// The instantiated counts stay within a few percent of the Transformer++
// budget; the gap is the even rounding of alpha plus the neglected terms.
TEST(Counts, InstantiatedCountNearBudget) {
  for (Arch a : all_archs()) {
    for (std::size_t d : {8u, 12u, 16u, 20u, 24u}) {
      const ModelConfig c = full_scale_config(a, d);
      const double budget = 237568.0 * std::pow(double(d), 3);
      const auto pc = count_params(c);
      const double closed_gap = std::abs(pc.closed.total_nonembed - budget) / budget;
      const double exact_gap = std::abs(pc.exact.total_nonembed - budget) / budget;
      EXPECT_LE(closed_gap, 0.035) << arch_name(a) << " d=" << d;
      EXPECT_LE(exact_gap, 0.025) << arch_name(a) << " d=" << d;
    }
  }
}

TEST(Counts, EnumerationMatchesAllocation) {
  for (Arch a : all_archs()) {
    auto c = desk(a, 8);
    const auto m = Model<float>::init(c, 3);
    double total = 0;
    for (const auto& t : m.params()) total += double(t.numel());
    const auto pc = count_params(c);
    EXPECT_DOUBLE_EQ(total, pc.exact.total_nonembed + pc.embed) << arch_name(a);
  }
}

TEST(Groups, AssignmentByParameterKind) {
  auto c = desk(Arch::SambaYDA, 4);
  c.tie_embeddings = false;
  for (const auto& s : enumerate_params(c)) {
    const std::string& n = s.name;
    auto ends = [&](const std::string& suf) {
      return n.size() >= suf.size() && n.compare(n.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (n == "embed.weight") {
      EXPECT_EQ(s.group, ParamGroup::Embedding);
    } else if (n == "unembed.weight") {
      EXPECT_EQ(s.group, ParamGroup::Unembedding);
    } else if (s.shape.size() == 1 || ends("a_log") || ends("conv_weight") || n.find("lambda_") != std::string::npos) {
      EXPECT_EQ(s.group, ParamGroup::Vector) << n;
    } else {
      EXPECT_EQ(s.group, ParamGroup::Hidden) << n;
      EXPECT_EQ(s.shape.size(), 2u);
    }
  }
}

TEST(Init, MuPPPHiddenUniformBound) {
  ModelConfig c;
  c.arch = Arch::TransformerPP;
  c.depth = 4;
  c.width = 1024;
  c.attn_width = 1024;
  c.head_dim = 128;
  c.mlp_width = 64;
  c.parameterization = Parameterization::MuPPP;
  const auto m = Model<float>::init(c, 11);
  const auto q = m.param("layers.0.mixer.q_proj");
  float mx = 0;
  for (float v : q.data()) mx = std::max(mx, std::abs(v));
  EXPECT_LE(mx, 1.0f / 32.0f);
  EXPECT_GT(mx, 0.99f / 32.0f);
}

TEST(Init, TiedEmbeddingStd) {
  ModelConfig c;
  c.arch = Arch::SambaY;
  c.depth = 4;
  c.width = 512;
  c.attn_width = 32;
  c.head_dim = 8;
  c.mlp_width = 16;
  c.ssm_state = 2;
  const auto m = Model<double>::init(c, 5);
  const auto e = m.embedding();
  ASSERT_GE(e.numel(), 100000u);
  double ss = 0;
  for (double v : e.data()) ss += v * v;
  const double std = std::sqrt(ss / double(e.numel()));
  EXPECT_NEAR(std, 0.02, 0.002);
  EXPECT_EQ(&m.unembedding().data()[0], &m.embedding().data()[0]);
}

TEST(Init, SpOutputProjectionStd) {
  ModelConfig c;
  c.arch = Arch::TransformerPP;
  c.depth = 16;
  c.width = 64;
  c.attn_width = 64;
  c.head_dim = 16;
  c.mlp_width = 64;
  c.parameterization = Parameterization::SP;
  const auto m = Model<double>::init(c, 9);
  double ss = 0, n = 0, ss_h = 0, n_h = 0;
  for (std::size_t i = 0; i < m.specs().size(); ++i) {
    for (double v : m.params()[i].data()) {
      if (m.specs()[i].init == InitRule::OutputProj) {
        ss += v * v;
        n += 1;
      } else if (m.specs()[i].init == InitRule::Hidden) {
        ss_h += v * v;
        n_h += 1;
      }
    }
  }
  EXPECT_NEAR(std::sqrt(ss / n) / (0.02 / std::sqrt(32.0)), 1.0, 0.03);
  EXPECT_NEAR(std::sqrt(ss_h / n_h) / 0.02, 1.0, 0.03);
}

TEST(Init, UntiedAndSsmConstants) {
  auto c = desk(Arch::SambaY, 4);
  c.tie_embeddings = false;
  c.width = 64;
  const auto m = Model<double>::init(c, 1);
  for (double v : m.unembedding().data()) EXPECT_EQ(v, 0.0);
  double ss = 0;
  for (double v : m.embedding().data()) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / double(m.embedding().numel())), 1e-4, 1e-5);
  const auto a_log = m.param("layers.0.mixer.a_log");
  for (std::size_t ch = 0; ch < a_log.dim(0); ++ch)
    for (std::size_t j = 0; j < a_log.dim(1); ++j) EXPECT_DOUBLE_EQ(a_log.at(ch, j), std::log(double(j + 1)));
  for (double v : m.param("layers.0.mixer.d").data()) EXPECT_EQ(v, 1.0);
  for (double v : m.param("layers.0.mixer.dt_bias").data()) {
    const double dt = std::log1p(std::exp(v));
    EXPECT_GE(dt, 1e-3 * (1 - 1e-9));
    EXPECT_LE(dt, 1e-1 * (1 + 1e-9));
  }
}

TEST(Init, DeterministicInSeed) {
  for (Arch a : all_archs()) {
    const auto c = desk(a, 8);
    const auto m1 = Model<float>::init(c, 42), m2 = Model<float>::init(c, 42), m3 = Model<float>::init(c, 43);
    bool differs = false;
    for (std::size_t i = 0; i < m1.params().size(); ++i) {
      const auto x = m1.params()[i].data(), y = m2.params()[i].data(), z = m3.params()[i].data();
      ASSERT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << m1.specs()[i].name;
      differs |= !std::equal(x.begin(), x.end(), z.begin());
    }
    EXPECT_TRUE(differs);
  }
}

TEST(Multipliers, ByParameterization) {
  auto c = desk(Arch::SambaY, 8);
  c.width = 32;
  c.base_width = 8;
  c.parameterization = Parameterization::SP;
  EXPECT_EQ(residual_multiplier(c), 1.0);
  EXPECT_EQ(logit_multiplier(c), 1.0);
  EXPECT_DOUBLE_EQ(attention_scale(c), 0.5);
  c.parameterization = Parameterization::MuP;
  EXPECT_EQ(residual_multiplier(c), 1.0);
  EXPECT_DOUBLE_EQ(logit_multiplier(c), 0.25);
  c.parameterization = Parameterization::MuPPP;
  EXPECT_DOUBLE_EQ(residual_multiplier(c), 0.25);
  EXPECT_DOUBLE_EQ(logit_multiplier(c), 0.25);
  EXPECT_DOUBLE_EQ(attention_scale(c), 0.5);  // 1/sqrt(32/8)
}

TEST(Forward, ShapesAndCapture) {
  for (Arch a : all_archs()) {
    const auto c = desk(a, 8);
    const auto m = Model<double>::init(c, 2);
    const std::vector<int> toks{1, 4, 2, 7, 3, 3, 9, 0, 5};
    ForwardCapture<double> cap;
    const auto logits = m.forward(toks, {}, &cap);
    ASSERT_EQ(logits.shape(), (Shape{toks.size(), c.vocab_size}));
    const auto again = m.logits_from_hidden(cap.pre_logits);
    for (std::size_t i = 0; i < logits.numel(); ++i) ASSERT_EQ(logits[i], again[i]);
    for (std::size_t i = 0; i < m.layers().size(); ++i) {
      const auto k = m.plan().layers[i].mixer;
      EXPECT_EQ(cap.ssm_states[i].has_value(), k == S);
      EXPECT_EQ(cap.kv[i].has_value(), k == W || k == F);
    }
    if (m.plan().tap_layer) EXPECT_EQ(cap.tap.cols(), c.tap_width());
  }
}

TEST(Forward, SubsetPositionsMatchFullRows) {
  const std::vector<int> toks{1, 4, 2, 7, 3, 3, 9, 0, 5, 6, 10, 2};
  const std::vector<int> pos{3, 7, 11};
  for (Arch a : all_archs()) {
    const auto c = desk(a, 8);
    const auto m = Model<double>::init(c, 4);
    const auto full = m.forward(toks);
    ForwardCapture<double> cap;
    const auto part = m.forward(toks, pos, &cap);
    ASSERT_EQ(part.rows(), pos.size());
    for (std::size_t r = 0; r < pos.size(); ++r)
      for (std::size_t v = 0; v < c.vocab_size; ++v)
        EXPECT_NEAR(part.at(r, v), full.at(std::size_t(pos[r]), v), 1e-12) << arch_name(a);
    for (std::size_t i = 0; i < m.layers().size(); ++i) {
      const bool cross_decoder = is_yoco(a) && i >= m.plan().self_decoder_layers;
      EXPECT_EQ(cap.token_evals[i], cross_decoder ? pos.size() : toks.size()) << arch_name(a) << " layer " << i;
    }
  }
}

TEST(Forward, CausalInTokens) {
  const std::vector<int> toks{1, 4, 2, 7, 3, 3, 9, 0};
  for (Arch a : all_archs()) {
    const auto m = Model<double>::init(desk(a, 8), 6);
    const auto base = m.forward(toks);
    auto changed = toks;
    changed[5] = 8;
    const auto pert = m.forward(changed);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t v = 0; v < base.cols(); ++v) ASSERT_EQ(base.at(r, v), pert.at(r, v)) << arch_name(a);
    double diff = 0;
    for (std::size_t v = 0; v < base.cols(); ++v) diff += std::abs(base.at(5, v) - pert.at(5, v));
    EXPECT_GT(diff, 0.0);
  }
}

TEST(Forward, RejectsBadPositions) {
  const auto m = Model<double>::init(desk(Arch::SambaY), 1);
  const std::vector<int> toks{1, 2, 3};
  EXPECT_THROW(m.forward(toks, std::vector<int>{2, 1}), ConfigError);
  EXPECT_THROW(m.forward(toks, std::vector<int>{3}), ConfigError);
  EXPECT_THROW(m.forward(std::vector<int>{}), ConfigError);
  EXPECT_THROW(m.forward(std::vector<int>{1, 11}), ConfigError);
}

TEST(Forward, FromTensorsRoundTrip) {
  const auto c = desk(Arch::SambaYMLP, 8);
  const auto m = Model<double>::init(c, 8);
  std::map<std::string, Tensor<double>> map;
  for (std::size_t i = 0; i < m.specs().size(); ++i) map[m.specs()[i].name] = m.params()[i];
  const auto m2 = Model<double>::from_tensors(c, map);
  const std::vector<int> toks{1, 2, 3, 4};
  const auto a = m.forward(toks), b = m2.forward(toks);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
  map.erase(map.begin());
  EXPECT_THROW(Model<double>::from_tensors(c, map), ConfigError);
}

// Whole-model finite-difference check, every parameter, for each mixer
// combination and tap source.
TEST(Forward, WholeModelGradient) {
  const std::vector<int> toks{1, 4, 2, 7, 3, 9};
  const std::vector<int> targets{4, 2, 7, 3, 9, 1};
  for (Arch a : {Arch::SambaY, Arch::SambaYDA, Arch::TransformerLS, Arch::SambaYA, Arch::SambaYAA,
                 Arch::SambaYMLP, Arch::MambaY}) {
    for (auto par : {Parameterization::SP, Parameterization::MuPPP}) {
      auto c = desk(a, 4);
      c.parameterization = par;
      c.normalized_gmu = a == Arch::SambaYA;
      auto m = Model<double>::init(c, 12);
      m.set_requires_grad(true);
      auto loss = [&] { return cross_entropy(m.forward(toks), targets); };
      const double err = oracle::gradient_error(loss, m.params(), 1e-5);
      EXPECT_LT(err, 1e-4) << arch_name(a) << " " << parameterization_name(par);
    }
  }
}
