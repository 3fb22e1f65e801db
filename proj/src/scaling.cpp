#include "sambay/scaling.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>

namespace sambay {

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

const std::vector<IsoPolynomial>& iso_polynomials() {
  // S-GDNY is not written out; its coefficients follow from SambaY's
  // bookkeeping with each SSM's 6w^2 replaced by the GDN layer's 6.75w^2
  // (q/k at 0.75w, v/gate/out at 1.5w).
  static const std::vector<IsoPolynomial> polys{
      {"Transformer++", 0, 14.5}, {"TransformerLS", 0, 14.5}, {"SambaY", 144, 14.5},
      {"SambaY+DA", 144, 14.5},   {"Samba+YOCO", 208, 13.5},  {"MambaY", 64, 16},
      {"SambaY-MLP", 144, 15.5},  {"SambaY-A", 208, 13.5},    {"SambaY-AA", 208, 13.5},
      {"GDNY", 64, 15.75},        {"S-GDNY", 144, 14.25},
  };
  return polys;
}

IsoPolynomial iso_polynomial(const std::string& name) {
  const std::string key = lower(name);
  for (const auto& p : iso_polynomials()) {
    if (lower(p.name) == key) return p;
  }
  return iso_polynomial(parse_arch(name));
}

IsoPolynomial iso_polynomial(Arch arch) {
  const std::string name = arch_name(arch);
  for (const auto& p : iso_polynomials()) {
    if (p.name == name) return p;
  }
  throw ConfigError("no iso-parametric polynomial registered for " + name);
}

double iso_root(const IsoPolynomial& p) {
  const double c = -BaseConstants::budget;
  if (p.c2 == 0) {
    if (p.c1 <= 0) throw ConfigError(p.name + ": polynomial has no positive root");
    return -c / p.c1;
  }
  const double disc = p.c1 * p.c1 - 4 * p.c2 * c;
  if (disc < 0) throw ConfigError(p.name + ": polynomial has no positive root");
  const double root = (-p.c1 + std::sqrt(disc)) / (2 * p.c2);
  if (!(root > 0)) throw ConfigError(p.name + ": polynomial has no positive root");
  return root;
}

std::size_t solve_aspect_ratio(const IsoPolynomial& p) {
  const double root = iso_root(p);
  const double nearest = 2 * std::round(root / 2);
  if (std::abs(root - nearest) < 1e-9) return static_cast<std::size_t>(nearest);
  return static_cast<std::size_t>(2 * std::ceil(root / 2));
}

std::size_t solve_aspect_ratio(Arch arch) { return solve_aspect_ratio(iso_polynomial(arch)); }

std::size_t solve_aspect_ratio(const std::string& name) {
  return solve_aspect_ratio(iso_polynomial(name));
}

ModelConfig full_scale_config(Arch arch, std::size_t depth) {
  ModelConfig cfg;
  cfg.arch = arch;
  cfg.depth = depth;
  cfg.aspect_ratio = solve_aspect_ratio(arch);
  cfg.attn_width = 128 * depth;
  cfg.head_dim = 128;
  cfg.kv_group = 4;
  cfg.vocab_size = 32000;
  cfg.tie_embeddings = true;
  return cfg;
}

double learning_rate(double depth, double batch) {
  if (depth <= 0 || batch <= 0) throw ConfigError("learning_rate: depth and batch must be positive");
  return BaseConstants::eta0 *
         std::sqrt(batch * BaseConstants::depth0 / (BaseConstants::batch0 * depth));
}

double tokens_for_depth(std::size_t depth, Arch arch) {
  if (depth == 0) throw ConfigError("tokens_for_depth: depth must be positive");
  const double n = count_params(full_scale_config(arch, depth)).closed.total_nonembed;
  const double n0 = count_params(full_scale_config(Arch::TransformerPP, 16)).closed.total_nonembed;
  return BaseConstants::tokens0 * n / n0;
}

double batch_for_tokens(double tokens) {
  if (tokens <= 0) throw ConfigError("batch_for_tokens: tokens must be positive");
  return BaseConstants::batch0 * std::sqrt(tokens / BaseConstants::tokens0);
}

double lr_token_scaling(double eta, double tokens) {
  if (tokens <= 0 || eta <= 0) throw ConfigError("lr_token_scaling: eta and tokens must be positive");
  return eta * std::cbrt(BaseConstants::tokens0 / tokens);
}

double independent_wd(double eta) {
  if (eta <= 0) throw ConfigError("independent_wd: eta must be positive");
  return BaseConstants::lambda0 * BaseConstants::eta0 / eta;
}

double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps) {
  if (total_steps == 0 || warmup_steps > total_steps) {
    throw ConfigError("lr_schedule: warmup must fit inside a positive step budget");
  }
  if (step >= total_steps) return 0.0;
  if (step < warmup_steps) {
    return static_cast<double>(step + 1) / static_cast<double>(warmup_steps + 1);
  }
  return static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup_steps);
}

double lr_schedule(std::size_t step, std::size_t total_steps, double warmup_tokens, double batch_tokens) {
  if (batch_tokens <= 0 || warmup_tokens < 0) throw ConfigError("lr_schedule: invalid token counts");
  const auto warm = static_cast<std::size_t>(std::ceil(warmup_tokens / batch_tokens));
  return lr_schedule(step, total_steps, warm);
}

const GroupPlan& MuPPlan::group(ParamGroup g) const {
  for (const auto& gp : groups) {
    if (gp.group == g) return gp;
  }
  throw ConfigError("mup plan has no group " + group_name(g));
}

MuPPlan mup_plan(const ModelConfig& cfg) {
  MuPPlan plan;
  plan.parameterization = cfg.parameterization;
  plan.residual_multiplier = residual_multiplier(cfg);
  plan.logit_multiplier = logit_multiplier(cfg);
  plan.attention_scale = attention_scale(cfg);
  const bool sp = cfg.parameterization == Parameterization::SP;
  const bool pp = cfg.parameterization == Parameterization::MuPPP;
  const double hidden_lr = sp ? 1.0 : static_cast<double>(cfg.base()) / static_cast<double>(cfg.w());
  const double no_wd = pp ? 0.0 : BaseConstants::lambda0;

  GroupPlan emb{ParamGroup::Embedding, 1.0, no_wd, 1.0,
                cfg.tie_embeddings ? "normal(0, 0.02^2)" : "normal(0, 1e-4^2)"};
  GroupPlan unemb{ParamGroup::Unembedding, 1.0, no_wd, plan.logit_multiplier,
                  cfg.tie_embeddings ? "tied to embedding" : "zeros"};
  GroupPlan hidden{ParamGroup::Hidden, hidden_lr, BaseConstants::lambda0, 1.0,
                   sp ? "normal(0, 0.02^2), output projections / sqrt(2d)"
                      : "uniform(+-1/sqrt(fan_in))"};
  GroupPlan vec{ParamGroup::Vector, 1.0, no_wd, 1.0, "per-parameter constant"};
  plan.groups = {emb, unemb, hidden, vec};
  return plan;
}

double lr_multiplier_for(const MuPPlan& plan, const ParamSpec& spec) {
  return plan.group(spec.group).lr_multiplier;
}

double weight_decay_for(const MuPPlan& plan, const ParamSpec& spec) {
  return plan.group(spec.group).weight_decay;
}

double CoordinateCheck::band() const {
  if (rms.empty()) return 1.0;
  const auto [lo, hi] = std::minmax_element(rms.begin(), rms.end());
  return *hi / *lo;
}

bool CoordinateCheck::strictly_increasing() const {
  for (std::size_t i = 1; i < rms.size(); ++i)
    if (!(rms[i] > rms[i - 1])) return false;
  return true;
}

CoordinateCheck coordinate_check(const ModelConfig& base, const std::vector<std::size_t>& widths,
                                 std::uint64_t seed, const std::vector<int>& tokens) {
  CoordinateCheck out;
  for (std::size_t w : widths) {
    ModelConfig cfg = base;
    cfg.width = w;
    cfg.attn_width = w;
    cfg.mlp_width = 0;
    cfg.dt_rank = 0;
    const auto model = Model<float>::init(cfg, seed);
    ForwardCapture<float> cap;
    NoGradGuard guard;
    model.forward(tokens, {}, &cap);
    double ss = 0;
    for (float v : cap.pre_logits.data()) ss += double(v) * double(v);
    out.widths.push_back(w);
    out.rms.push_back(std::sqrt(ss / double(cap.pre_logits.numel())));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Power-law fitting

double PowerLawFit::predict(double D) const { return A * std::pow(D, -b) + C; }

namespace {

double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double inv_softplus(double y) { return y > 30 ? y : std::log(std::expm1(std::max(y, 1e-300))); }

struct LmResult {
  Eigen::Vector3d p;
  double sse = std::numeric_limits<double>::infinity();
  std::size_t iterations = 0;
  bool converged = false;
};

LmResult levenberg_marquardt(const std::vector<double>& x, const std::vector<double>& y,
                             Eigen::Vector3d p) {
  const std::size_t n = x.size();
  auto residuals = [&](const Eigen::Vector3d& q, Eigen::VectorXd& r) {
    const double A = std::exp(q[0]), b = std::exp(q[1]), C = softplus(q[2]);
    for (std::size_t i = 0; i < n; ++i) r[i] = y[i] - A * std::pow(x[i], -b) - C;
    return r.squaredNorm();
  };
  Eigen::VectorXd r(n), r_new(n);
  Eigen::MatrixXd J(n, 3);
  double sse = residuals(p, r);
  double mu = 1e-3;
  LmResult out;
  for (std::size_t it = 0; it < 1000; ++it) {
    out.iterations = it + 1;
    const double A = std::exp(p[0]), b = std::exp(p[1]);
    for (std::size_t i = 0; i < n; ++i) {
      const double t = A * std::pow(x[i], -b);
      J(i, 0) = t;
      J(i, 1) = -t * std::log(x[i]) * b;
      J(i, 2) = sigmoid(p[2]);
    }
    const Eigen::Matrix3d JtJ = J.transpose() * J;
    const Eigen::Vector3d g = J.transpose() * r;
    bool accepted = false;
    for (int tries = 0; tries < 50 && !accepted; ++tries) {
      Eigen::Matrix3d M = JtJ;
      for (int k = 0; k < 3; ++k) M(k, k) += mu * std::max(JtJ(k, k), 1e-12);
      const Eigen::Vector3d step = M.ldlt().solve(g);
      if (!step.allFinite()) {
        mu *= 10;
        continue;
      }
      const Eigen::Vector3d cand = p + step;
      const double sse_new = residuals(cand, r_new);
      if (std::isfinite(sse_new) && sse_new <= sse) {
        const double rel_step = step.norm() / (p.norm() + 1e-12);
        const double rel_gain = (sse - sse_new) / std::max(sse, 1e-300);
        p = cand;
        r = r_new;
        sse = sse_new;
        mu = std::max(mu / 10, 1e-15);
        accepted = true;
        if (rel_step < 1e-13 || sse < 1e-28 || (rel_gain < 1e-15 && rel_step < 1e-9)) {
          out.converged = true;
        }
      } else {
        mu *= 10;
      }
    }
    if (!accepted) {
      // No descent direction left: a (possibly flat) minimum.
      out.converged = g.norm() < 1e-8 * std::max(1.0, sse) || sse < 1e-20;
      break;
    }
    if (out.converged) break;
  }
  out.p = p;
  out.sse = sse;
  return out;
}

}  // namespace

PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& points, FitAxis axis) {
  if (points.size() < 4) throw ConfigError("fit_power_law: need at least 4 points");
  std::vector<double> D, L;
  for (const auto& [d, l] : points) {
    if (!(d > 0) || !(l > 0) || !std::isfinite(d) || !std::isfinite(l)) {
      throw ConfigError("fit_power_law: D and L must be positive and finite");
    }
    D.push_back(d);
    L.push_back(l);
  }
  const std::size_t n = D.size();
  double log_ref = 0;
  for (double d : D) log_ref += std::log(d);
  log_ref /= static_cast<double>(n);
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(std::log(D[i]) - log_ref);

  const double mean = std::accumulate(L.begin(), L.end(), 0.0) / static_cast<double>(n);
  double ss_tot = 0;
  for (double l : L) ss_tot += (l - mean) * (l - mean);
  const double min_l = *std::min_element(L.begin(), L.end());

  PowerLawFit fit;
  fit.axis = axis;
  if (ss_tot <= 1e-24 * mean * mean) {
    // Flat curve: no decay to fit.
    fit.A = 0;
    fit.b = 0;
    fit.C = mean;
    fit.r_squared = 1.0;
    fit.residuals.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) fit.residuals[i] = L[i] - mean;
    return fit;
  }

  LmResult best;
  best.p.setZero();
  bool any_converged = false;
  for (double a0 : {0.1, 1.0, 10.0}) {
    for (double b0 : {0.1, 0.3, 0.5, 1.0}) {
      for (double c0 : {0.0, min_l / 2, 0.99 * min_l}) {
        const Eigen::Vector3d start(std::log(a0), std::log(b0), inv_softplus(std::max(c0, 1e-12)));
        LmResult r = levenberg_marquardt(x, L, start);
        if (!std::isfinite(r.sse)) continue;
        const bool better = r.sse < best.sse;
        if (r.converged && (!any_converged || better)) {
          best = r;
          any_converged = true;
        } else if (!any_converged && better) {
          best = r;
        }
      }
    }
  }
  const double A_n = std::exp(best.p[0]);
  fit.b = std::exp(best.p[1]);
  fit.C = softplus(best.p[2]);
  // A (D/ref)^-b = A ref^b D^-b
  fit.A = A_n * std::exp(fit.b * log_ref);
  fit.iterations = best.iterations;
  fit.sse = 0;
  fit.residuals.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    fit.residuals[i] = L[i] - (A_n * std::pow(x[i], -fit.b) + fit.C);
    fit.sse += fit.residuals[i] * fit.residuals[i];
  }
  fit.r_squared = 1.0 - fit.sse / ss_tot;
  if (!any_converged) {
    throw FitError("fit_power_law: Levenberg-Marquardt did not converge from any of 36 starts", fit);
  }
  return fit;
}

// ---------------------------------------------------------------------------
// FLOPs

double flops_estimate(double n_params, double tokens) { return 6.0 * n_params * tokens; }

FlopsEstimate flops_estimate(const ModelConfig& cfg, double tokens, std::size_t seq_len) {
  FlopsEstimate e;
  e.n_params = count_params(cfg).closed.total_nonembed;
  e.tokens = tokens;
  e.flops = flops_estimate(e.n_params, tokens);
  e.estimator = "6*N*T";
  if (seq_len > 0) {
    const LayerPlan plan = build_layer_plan(cfg);
    const double wa = static_cast<double>(cfg.n_heads() * cfg.d_head());
    const double full_ctx = (static_cast<double>(seq_len) + 1) / 2;
    double per_token = 0;
    for (const LayerSpec& l : plan.layers) {
      if (l.mixer == MixerKind::Full || l.mixer == MixerKind::Cross) {
        per_token += 12 * wa * full_ctx;
      } else if (l.mixer == MixerKind::SWA) {
        per_token += 12 * wa * std::min(full_ctx, static_cast<double>(cfg.window));
      }
    }
    e.flops += per_token * tokens;
    e.estimator = "6*N*T + 12*w_attn*ctx*T per attention layer";
  }
  return e;
}

}  // namespace sambay
