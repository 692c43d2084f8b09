#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "ebft/data.hpp"
#include "ebft/features.hpp"
#include "ebft/rollouts.hpp"
#include "ebft/whitening.hpp"

namespace ebft {

struct HeldoutPair {
  Tokens context;
  Tokens completion;
};

/// Strided (context, completion) extraction from long sequences, the same
/// anchor rule the trainer uses.
inline std::vector<HeldoutPair> extract_pairs(const Corpus& corpus, int stride, int g,
                                              int max_pairs = 0) {
  std::vector<HeldoutPair> pairs;
  for (const auto& seq : corpus.sequences) {
    if (static_cast<int>(seq.size()) <= g) continue;
    const StridedPlan plan = plan_strides(static_cast<int>(seq.size()), stride, g);
    for (int b = 1; b <= plan.B; ++b) {
      pairs.push_back({plan_context(plan, seq, b), plan_ground_truth(plan, seq, b)});
      if (max_pairs > 0 && static_cast<int>(pairs.size()) >= max_pairs) return pairs;
    }
  }
  return pairs;
}

/// phi applied to a bare sequence (context-only evaluation): the whole
/// sequence is treated as the completion window.
inline FeatureVector embed_sequence(const FeatureMapSpec& spec, const Tokens& tokens) {
  TokenSequence seq;
  seq.tokens = tokens;
  seq.role = SeqRole::kConcatenated;
  seq.context_len = 0;
  return embed(spec, seq);
}

// ---------------------------------------------------------------------------
// Conditional feature-matching loss.
// ---------------------------------------------------------------------------

struct CFMEstimate {
  double value = 0.0;      // clamped at zero (the loss is nonnegative)
  double raw = 0.0;        // unclamped U-statistic mean (unbiased)
  double stderr_ = 0.0;    // across held-out pairs
  int gen_len = 0;
  int num_pairs = 0;       // m
  int rollouts_per_pair = 0;  // n
};

/// Unbiased single-pair estimate of || E phi - psi ||^2 from n rollout
/// features: the U-statistic over ordered pairs,
///   1/(n(n-1)) sum_{a != b} <phi_a - psi, phi_b - psi>.
inline double cfm_u_statistic(const std::vector<VectorXd>& rollout_feats, const VectorXd& psi) {
  const int n = static_cast<int>(rollout_feats.size());
  if (n < 2) throw std::invalid_argument("cfm_u_statistic: need n >= 2");
  VectorXd sum = VectorXd::Zero(psi.size());
  double sq = 0.0;
  for (const auto& f : rollout_feats) {
    sum += f - psi;
    sq += (f - psi).squaredNorm();
  }
  return (sum.squaredNorm() - sq) / (static_cast<double>(n) * (n - 1));
}

inline CFMEstimate cfm_loss(const PolicyModel& model, const std::vector<HeldoutPair>& pairs,
                            const FeatureMapSpec& spec, int n, uint64_t seed) {
  if (pairs.empty()) throw std::invalid_argument("cfm_loss: empty held-out set");
  if (n < 2) throw std::invalid_argument("cfm_loss: need n >= 2 rollouts per pair");
  CFMEstimate est;
  est.gen_len = static_cast<int>(pairs.front().completion.size());
  est.num_pairs = static_cast<int>(pairs.size());
  est.rollouts_per_pair = n;

  std::vector<double> us;
  us.reserve(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& pr = pairs[i];
    const int g = static_cast<int>(pr.completion.size());
    const auto sampled =
        sample_completions(model, pr.context, g, n, 1.0, mix_seed(seed, 0xcf, i));
    std::vector<VectorXd> feats;
    feats.reserve(static_cast<size_t>(n));
    for (const auto& comp : sampled.completions)
      feats.push_back(embed(spec, concat(pr.context, comp)).values);
    const VectorXd psi = embed(spec, concat(pr.context, pr.completion)).values;
    us.push_back(cfm_u_statistic(feats, psi));
  }
  double mean = 0.0;
  for (double u : us) mean += u;
  mean /= static_cast<double>(us.size());
  double var = 0.0;
  for (double u : us) var += (u - mean) * (u - mean);
  var = us.size() > 1 ? var / (static_cast<double>(us.size()) - 1.0) : 0.0;
  est.raw = mean;
  est.value = std::max(0.0, mean);
  est.stderr_ = std::sqrt(var / static_cast<double>(us.size()));
  return est;
}

/// Exact mean negative log-likelihood per completion (no sampling).
inline double ce_eval(const PolicyModel& model, const std::vector<HeldoutPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("ce_eval: empty held-out set");
  double total = 0.0;
  for (const auto& pr : pairs) total -= log_prob(model, pr.context, pr.completion).total;
  return total / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Enumeration utilities (exact values on small |V|^G).
// ---------------------------------------------------------------------------

inline std::vector<Tokens> enumerate_completions(int vocab_size, int g,
                                                 std::int64_t cap = kOneHotDimCap) {
  std::int64_t total = 1;
  for (int i = 0; i < g; ++i) {
    total *= vocab_size;
    if (total > cap) throw std::invalid_argument("enumerate_completions: |V|^G exceeds cap");
  }
  std::vector<Tokens> out;
  out.reserve(static_cast<size_t>(total));
  Tokens cur(static_cast<size_t>(g), 0);
  for (std::int64_t idx = 0; idx < total; ++idx) {
    std::int64_t rem = idx;
    for (int t = g - 1; t >= 0; --t) {
      cur[static_cast<size_t>(t)] = static_cast<Token>(rem % vocab_size);
      rem /= vocab_size;
    }
    out.push_back(cur);
  }
  return out;
}

/// Exact model distribution over V^G completions, in enumerate order.
inline VectorXd exact_completion_dist(const PolicyModel& model, const Tokens& context, int g) {
  const auto completions = enumerate_completions(model.vocab.size, g);
  VectorXd probs(static_cast<Eigen::Index>(completions.size()));
  for (size_t i = 0; i < completions.size(); ++i)
    probs[static_cast<Eigen::Index>(i)] = std::exp(log_prob(model, context, completions[i]).total);
  return probs;
}

/// Exact source distribution over V^G completions, in enumerate order.
inline VectorXd exact_source_dist(const SyntheticSource& source, const Tokens& context, int g) {
  const auto completions = enumerate_completions(source.vocab_size(), g);
  VectorXd probs(static_cast<Eigen::Index>(completions.size()));
  for (size_t i = 0; i < completions.size(); ++i)
    probs[static_cast<Eigen::Index>(i)] = source.conditional_prob(context, completions[i]);
  return probs;
}

/// Exact L_CFM(theta; c, y) = || E_{z~p_theta} phi_c(z) - phi_c(y) ||^2.
inline double exact_cfm_value(const PolicyModel& model, const Tokens& context, const Tokens& gt,
                              const FeatureMapSpec& spec) {
  const int g = static_cast<int>(gt.size());
  const auto completions = enumerate_completions(model.vocab.size, g);
  const VectorXd probs = exact_completion_dist(model, context, g);
  VectorXd mu = VectorXd::Zero(spec.dim());
  for (size_t i = 0; i < completions.size(); ++i)
    mu += probs[static_cast<Eigen::Index>(i)] * embed(spec, concat(context, completions[i])).values;
  return (mu - embed(spec, concat(context, gt)).values).squaredNorm();
}

/// Exact per-context offset Var[phi_c(y) | c] under the source distribution.
inline double exact_conditional_offset(const SyntheticSource& source, const Tokens& context,
                                       int g, const FeatureMapSpec& spec) {
  const auto completions = enumerate_completions(source.vocab_size(), g);
  const VectorXd probs = exact_source_dist(source, context, g);
  VectorXd mu = VectorXd::Zero(spec.dim());
  double second = 0.0;
  for (size_t i = 0; i < completions.size(); ++i) {
    const VectorXd phi = embed(spec, concat(context, completions[i])).values;
    mu += probs[static_cast<Eigen::Index>(i)] * phi;
    second += probs[static_cast<Eigen::Index>(i)] * phi.squaredNorm();
  }
  return second - mu.squaredNorm();
}

// ---------------------------------------------------------------------------
// Feature-matching loss profile over completion lengths.
// ---------------------------------------------------------------------------

struct ProfilePoint {
  int gen_len = 0;
  double cfm = 0.0;
  double stderr_ = 0.0;
  std::optional<double> offset;  // E_c Var[phi_c(y)|c], when enumerable
};

using FeatureSpecFactory = std::function<FeatureMapSpec(int gen_len)>;

inline std::vector<ProfilePoint> fm_profile(const PolicyModel& model, const Corpus& corpus,
                                            const FeatureSpecFactory& spec_for,
                                            const std::vector<int>& gen_lens, int stride, int n,
                                            uint64_t seed,
                                            const SyntheticSource* source = nullptr,
                                            std::int64_t offset_cap = 1024, int max_pairs = 0) {
  std::vector<ProfilePoint> points;
  for (int g : gen_lens) {
    const auto pairs = extract_pairs(corpus, stride, g, max_pairs);
    if (pairs.empty()) throw std::invalid_argument("fm_profile: no pairs at G=" + std::to_string(g));
    const FeatureMapSpec spec = spec_for(g);
    const CFMEstimate est = cfm_loss(model, pairs, spec, n, mix_seed(seed, 0xbf, static_cast<uint64_t>(g)));
    ProfilePoint pt;
    pt.gen_len = g;
    pt.cfm = est.raw;
    pt.stderr_ = est.stderr_;
    if (source != nullptr) {
      double total = 1.0;
      bool enumerable = true;
      for (int i = 0; i < g; ++i) {
        total *= source->vocab_size();
        if (total > static_cast<double>(offset_cap)) {
          enumerable = false;
          break;
        }
      }
      if (enumerable) {
        double acc = 0.0;
        for (const auto& pr : pairs)
          acc += exact_conditional_offset(*source, pr.context, g, spec);
        pt.offset = acc / static_cast<double>(pairs.size());
      }
    }
    points.push_back(std::move(pt));
  }
  return points;
}

// ---------------------------------------------------------------------------
// Exponential-tilt oracle (KL-regularized feature matching on enumerable
// supports). The primal
//     min_rho  (1/beta) KL(rho||q) + || E_rho[phi] - v ||^2,   v = mu_p / alpha
// is solved by mirror descent (projected gradient in the KL geometry) with
// backtracking over the simplex, in log space so extreme tilts stay finite.
// The norm-constrained dual
//     max_{||h|| <= 1}  -v^T h - (1/bt) log E_q exp(-bt phi^T h)
// at bt = 2 beta ||E_rho*[phi] - v|| is solved independently by projected
// gradient ascent; strong duality makes the value gap a joint optimality
// certificate. The optimal rho* is the exponential tilt
// q(y) exp(-chi^T phi(y)) / Z with chi = 2 beta (E_rho*[phi] - v).
// ---------------------------------------------------------------------------

struct TiltOracleOptions {
  int primal_iters = 200000;
  int dual_iters = 50000;
  double primal_tol = 1e-11;  // sup-norm of the projected gradient
  double dual_tol = 1e-12;
};

struct TiltOracleResult {
  VectorXd rho_star;      // optimal distribution over V^G
  VectorXd log_rho_star;  // finite even when atoms underflow
  VectorXd chi;           // tilt vector
  double beta_tilde = 0.0;
  double primal_sq_value = 0.0;    // squared-form objective at rho*
  double norm_primal_value = 0.0;  // norm-form objective at rho* (with beta_tilde)
  double dual_value = 0.0;
  double duality_gap = 0.0;
  double tilt_residual = 0.0;  // max | log(rho*/q) + chi^T phi - const |
  bool converged = false;
  int primal_iters = 0;
  int dual_iters = 0;
};

namespace detail {

inline double logsumexp(const VectorXd& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.array() - m).exp().sum());
}

}  // namespace detail

inline TiltOracleResult ebm_tilt_oracle(const VectorXd& q, const VectorXd& p,
                                        const MatrixXd& feats, double beta, double alpha,
                                        const TiltOracleOptions& opts = {}) {
  const Eigen::Index ny = q.size();
  if (p.size() != ny || feats.rows() != ny)
    throw std::invalid_argument("ebm_tilt_oracle: shape mismatch");
  if (std::abs(q.sum() - 1.0) > 1e-9 || std::abs(p.sum() - 1.0) > 1e-9)
    throw std::invalid_argument("ebm_tilt_oracle: distributions must sum to 1");
  for (Eigen::Index y = 0; y < ny; ++y)
    if (!(q[y] > 0.0)) throw std::invalid_argument("ebm_tilt_oracle: q must have full support");
  if (!(beta > 0.0) || !(alpha > 0.0))
    throw std::invalid_argument("ebm_tilt_oracle: beta and alpha must be positive");

  const VectorXd log_q = q.array().log();
  const VectorXd v = (feats.transpose() * p) / alpha;

  TiltOracleResult res;

  // Primal mirror descent in log space, warm-started at the tilt that is
  // stationary if rho were q.
  VectorXd chi0 = 2.0 * beta * (feats.transpose() * q - v);
  VectorXd log_rho = log_q - feats * chi0;
  log_rho.array() -= detail::logsumexp(log_rho);

  auto objective = [&](const VectorXd& lr) {
    const VectorXd rho = lr.array().exp();
    double kl = 0.0;
    for (Eigen::Index y = 0; y < ny; ++y)
      if (rho[y] > 0.0) kl += rho[y] * (lr[y] - log_q[y]);
    return kl / beta + (feats.transpose() * rho - v).squaredNorm();
  };

  double obj = objective(log_rho);
  double eta = 1e-2;
  int it = 0;
  for (; it < opts.primal_iters; ++it) {
    const VectorXd rho = log_rho.array().exp();
    const VectorXd moment_gap = feats.transpose() * rho - v;
    const VectorXd grad =
        ((log_rho - log_q).array() + 1.0).matrix() / beta + 2.0 * (feats * moment_gap);
    const double mean_grad = rho.dot(grad);
    const double resid = (grad.array() - mean_grad).abs().maxCoeff();
    const double scale = std::max(1.0, grad.array().abs().maxCoeff());
    if (resid <= opts.primal_tol * scale) break;

    bool stepped = false;
    for (int bt = 0; bt < 60; ++bt) {
      VectorXd trial = log_rho - eta * grad;
      trial.array() -= detail::logsumexp(trial);
      const double trial_obj = objective(trial);
      if (trial_obj <= obj) {
        log_rho = std::move(trial);
        obj = trial_obj;
        eta *= 1.25;
        stepped = true;
        break;
      }
      eta *= 0.5;
    }
    if (!stepped) break;  // step size exhausted at numerical floor
  }
  res.primal_iters = it;

  res.log_rho_star = log_rho;
  res.rho_star = log_rho.array().exp();
  const VectorXd moment_gap = feats.transpose() * res.rho_star - v;
  res.chi = 2.0 * beta * moment_gap;
  res.beta_tilde = res.chi.norm();
  res.primal_sq_value = obj;

  double kl_star = 0.0;
  for (Eigen::Index y = 0; y < ny; ++y)
    if (res.rho_star[y] > 0.0) kl_star += res.rho_star[y] * (log_rho[y] - log_q[y]);

  // Tilt-form residual: log rho* - log q + chi^T phi should be constant.
  {
    VectorXd ell = log_rho - log_q + feats * res.chi;
    const double c = res.rho_star.dot(ell);  // probability-weighted constant
    res.tilt_residual = (ell.array() - c).abs().maxCoeff();
  }

  if (res.beta_tilde < 1e-10) {
    // Degenerate regularization (p == q and alpha == 1): rho* = q, chi = 0.
    res.norm_primal_value = moment_gap.norm();
    res.dual_value = (feats.transpose() * q - v).norm();
    res.duality_gap = std::abs(res.norm_primal_value - res.dual_value);
    res.converged = true;
    return res;
  }

  res.norm_primal_value = kl_star / res.beta_tilde + moment_gap.norm();

  // Independent dual solve over the unit ball.
  const double bt = res.beta_tilde;
  auto dual_value = [&](const VectorXd& h) {
    return -v.dot(h) - detail::logsumexp(log_q - bt * (feats * h)) / bt;
  };
  VectorXd h = -v;
  if (h.norm() > 0.0) h /= h.norm();
  double dv = dual_value(h);
  double step = 1.0 / (1.0 + v.norm());
  int dit = 0;
  for (; dit < opts.dual_iters; ++dit) {
    VectorXd lw = log_q - bt * (feats * h);
    lw.array() -= detail::logsumexp(lw);
    const VectorXd rho_h = lw.array().exp();
    const VectorXd grad = -v + feats.transpose() * rho_h;
    // projected gradient residual on the ball
    VectorXd pg = grad;
    if (h.norm() >= 1.0 - 1e-12) {
      const double radial = grad.dot(h);
      if (radial > 0.0) pg = grad - radial * h;
    }
    if (pg.norm() <= opts.dual_tol * (1.0 + v.norm())) break;

    bool stepped = false;
    for (int bts = 0; bts < 60; ++bts) {
      VectorXd trial = h + step * grad;
      if (trial.norm() > 1.0) trial /= trial.norm();
      const double trial_val = dual_value(trial);
      if (trial_val >= dv + 1e-18) {
        h = std::move(trial);
        dv = trial_val;
        step *= 1.25;
        stepped = true;
        break;
      }
      step *= 0.5;
    }
    if (!stepped) break;
  }
  res.dual_iters = dit;
  res.dual_value = dv;
  res.duality_gap = std::abs(res.norm_primal_value - res.dual_value);
  res.converged = res.duality_gap <= 1e-6;
  return res;
}

/// Norm-constrained maximum-likelihood tilt: maximizes E_p[log rho_chi] over
/// ||chi|| <= radius with rho_chi ~ q exp(-chi^T phi). Used as the
/// independent route for the alpha = 1 interpretation of the oracle.
inline VectorXd constrained_mle_tilt(const VectorXd& q, const VectorXd& p, const MatrixXd& feats,
                                     double radius, int max_iters = 50000, double tol = 1e-12) {
  const VectorXd log_q = q.array().log();
  const VectorXd mu_p = feats.transpose() * p;
  auto value = [&](const VectorXd& chi) {
    return -mu_p.dot(chi) - detail::logsumexp(log_q - feats * chi);
  };
  VectorXd chi = VectorXd::Zero(feats.cols());
  double val = value(chi);
  double step = 1.0;
  for (int it = 0; it < max_iters; ++it) {
    VectorXd lw = log_q - feats * chi;
    lw.array() -= detail::logsumexp(lw);
    const VectorXd rho = lw.array().exp();
    const VectorXd grad = -mu_p + feats.transpose() * rho;
    VectorXd pg = grad;
    if (chi.norm() >= radius - 1e-12) {
      const double radial = grad.dot(chi) / std::max(radius, 1e-300);
      if (radial > 0.0) pg = grad - (grad.dot(chi) / chi.squaredNorm()) * chi;
    }
    if (pg.norm() <= tol * (1.0 + mu_p.norm())) break;
    bool stepped = false;
    for (int bt = 0; bt < 60; ++bt) {
      VectorXd trial = chi + step * grad;
      if (trial.norm() > radius) trial *= radius / trial.norm();
      const double tv = value(trial);
      if (tv >= val + 1e-18) {
        chi = std::move(trial);
        val = tv;
        step *= 1.25;
        stepped = true;
        break;
      }
      step *= 0.5;
    }
    if (!stepped) break;
  }
  return chi;
}

/// Direct mirror-descent solve of the norm-form primal
///   min_rho (1/beta_tilde) KL(rho||q) + || E_rho[phi] - v ||,
/// used to exercise the beta <-> beta_tilde rescaling equivalence.
inline VectorXd solve_norm_problem(const VectorXd& q, const MatrixXd& feats, const VectorXd& v,
                                   double beta_tilde, int max_iters = 100000, double tol = 1e-11) {
  const VectorXd log_q = q.array().log();
  VectorXd log_rho = log_q;
  auto objective = [&](const VectorXd& lr) {
    const VectorXd rho = lr.array().exp();
    double kl = 0.0;
    for (Eigen::Index y = 0; y < lr.size(); ++y)
      if (rho[y] > 0.0) kl += rho[y] * (lr[y] - log_q[y]);
    return kl / beta_tilde + (feats.transpose() * rho - v).norm();
  };
  double obj = objective(log_rho);
  double eta = 1e-2;
  for (int it = 0; it < max_iters; ++it) {
    const VectorXd rho = log_rho.array().exp();
    const VectorXd gap = feats.transpose() * rho - v;
    const double gn = gap.norm();
    if (!(gn > 0.0)) break;
    const VectorXd grad =
        ((log_rho - log_q).array() + 1.0).matrix() / beta_tilde + feats * (gap / gn);
    const double mean_grad = rho.dot(grad);
    const double resid = (grad.array() - mean_grad).abs().maxCoeff();
    if (resid <= tol * std::max(1.0, grad.array().abs().maxCoeff())) break;
    bool stepped = false;
    for (int bt = 0; bt < 60; ++bt) {
      VectorXd trial = log_rho - eta * grad;
      trial.array() -= detail::logsumexp(trial);
      const double trial_obj = objective(trial);
      if (trial_obj <= obj) {
        log_rho = std::move(trial);
        obj = trial_obj;
        eta *= 1.25;
        stepped = true;
        break;
      }
      eta *= 0.5;
    }
    if (!stepped) break;
  }
  return log_rho.array().exp();
}

}  // namespace ebft
