#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sambay/arch.hpp"
#include "sambay/error.hpp"

namespace sambay {

struct BaseConstants {
  static constexpr double eta0 = 4e-4;
  static constexpr double batch0 = 2097152.0;  // 2^21 tokens
  static constexpr double tokens0 = 100e9;
  static constexpr double depth0 = 16.0;
  static constexpr double lambda0 = 0.1;
  static constexpr double beta1 = 0.9;
  static constexpr double beta2 = 0.95;
  static constexpr double eps = 1e-8;
  // Non-embedding budget per d^3 of the iso-parametric family (14.5 * 128^2).
  static constexpr double budget = 237568.0;
  static constexpr double warmup_tokens = 1e9;
};

// c1 * alpha + c2 * alpha^2 = 237568, the per-d^3 non-embedding cost of a
// variant with w = alpha * d and w_attn = 128 d.
struct IsoPolynomial {
  std::string name;
  double c1 = 0;
  double c2 = 0;
};

// Every registered polynomial, including GDNY and S-GDNY, which have no
// instantiable architecture here.
const std::vector<IsoPolynomial>& iso_polynomials();
IsoPolynomial iso_polynomial(Arch arch);
IsoPolynomial iso_polynomial(const std::string& name);

// Positive root of the polynomial before rounding.
double iso_root(const IsoPolynomial& p);
// Positive root rounded up to the next even integer.
std::size_t solve_aspect_ratio(const IsoPolynomial& p);
std::size_t solve_aspect_ratio(Arch arch);
std::size_t solve_aspect_ratio(const std::string& name);

// Full-scale configuration of an arch at depth d: w = alpha d,
// w_attn = 128 d, head_dim 128, 32K tied vocabulary.
ModelConfig full_scale_config(Arch arch, std::size_t depth);

// eta = eta0 sqrt(B d0 / (B0 d))
double learning_rate(double depth, double batch = BaseConstants::batch0);
// T = T0 N(d) / N(d0), with N the closed-form non-embedding count of the
// full-scale config and N(d0) that of Transformer++ at d0.
double tokens_for_depth(std::size_t depth, Arch arch);
// B = B0 sqrt(T / T0). Not used by default.
double batch_for_tokens(double tokens);
// eta' = eta (T0 / T)^(1/3). Not used by default.
double lr_token_scaling(double eta, double tokens);
// lambda = lambda0 eta0 / eta. Not used by default.
double independent_wd(double eta);

// Linear warmup over warmup_steps then linear decay to 0 at total_steps.
double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps);
double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_tokens, double batch_tokens);

struct GroupPlan {
  ParamGroup group = ParamGroup::Hidden;
  double lr_multiplier = 1;
  double weight_decay = 0.1;
  double weight_multiplier = 1;
  std::string init;
};

struct MuPPlan {
  Parameterization parameterization = Parameterization::MuPPP;
  std::vector<GroupPlan> groups;  // embedding, unembedding, hidden_matrix, vector_like
  double residual_multiplier = 1;
  double logit_multiplier = 1;
  double attention_scale = 1;
  double eta0 = BaseConstants::eta0;
  double batch0 = BaseConstants::batch0;
  double tokens0 = BaseConstants::tokens0;
  double depth0 = BaseConstants::depth0;
  double lambda0 = BaseConstants::lambda0;
  double beta1 = BaseConstants::beta1;
  double beta2 = BaseConstants::beta2;
  double eps = BaseConstants::eps;

  const GroupPlan& group(ParamGroup g) const;
};

MuPPlan mup_plan(const ModelConfig& cfg);

// Optimizer settings for one parameter under a plan.
double lr_multiplier_for(const MuPPlan& plan, const ParamSpec& spec);
double weight_decay_for(const MuPPlan& plan, const ParamSpec& spec);

// RMS of the final residual stream (before the final norm) at init, one
// model per width, same seed and tokens. base.base_width is kept, so the
// muP multipliers are taken relative to it.
struct CoordinateCheck {
  std::vector<std::size_t> widths;
  std::vector<double> rms;

  // max(rms) / min(rms)
  double band() const;
  bool strictly_increasing() const;
};

CoordinateCheck coordinate_check(const ModelConfig& base, const std::vector<std::size_t>& widths,
                                 std::uint64_t seed, const std::vector<int>& tokens);

// ---------------------------------------------------------------------------
// Power-law fit L = A D^-b + C.

enum class FitAxis { Flops, Tokens };

struct PowerLawFit {
  double A = 0;
  double b = 0;
  double C = 0;
  double r_squared = 0;
  std::vector<double> residuals;
  double sse = 0;
  std::size_t iterations = 0;
  FitAxis axis = FitAxis::Flops;

  double predict(double D) const;
};

class FitError : public NumericError {
 public:
  FitError(const std::string& msg, PowerLawFit best) : NumericError(msg), best_(std::move(best)) {}
  const PowerLawFit& best() const { return best_; }

 private:
  PowerLawFit best_;
};

// Levenberg-Marquardt on (log A, log b, softplus^-1 C) over D normalised by
// its geometric mean, multi-started from A in {0.1, 1, 10} (normalised
// units), b in {0.1, 0.3, 0.5, 1}, C in {0, min L / 2, 0.99 min L}.
PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points,
                          FitAxis axis = FitAxis::Flops);

// ---------------------------------------------------------------------------
// Training compute.

struct FlopsEstimate {
  double flops = 0;
  double n_params = 0;
  double tokens = 0;
  std::string estimator;
};

// 6 N T with N the closed-form non-embedding count. With seq_len > 0 adds
// 12 w_attn L_ctx per token per attention layer, L_ctx being the mean
// attended context (seq_len/2 causal, capped by the window).
FlopsEstimate flops_estimate(const ModelConfig& cfg, double tokens, std::size_t seq_len = 0);
double flops_estimate(double n_params, double tokens);

}  // namespace sambay
