#pragma once

#include <Eigen/SVD>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "ebft/rewards.hpp"

namespace ebft {

// Per-context whitening: features are premultiplied by (Sigma^+)^{1/2},
// the square-root pseudo-inverse of the empirical second-moment matrix
// Sigma = (1/n) sum_j phi_j phi_j^T, fitted from the current rollouts only
// and treated as a constant w.r.t. the policy parameters.

constexpr double kSvdTruncation = 1e-8;  // relative to the largest singular value

struct WhitenTransform {
  MatrixXd factor;  // (Sigma^+)^{1/2}, symmetric PSD
  int rank = 0;
  int n = 0;  // rollouts the fit used
  VectorXd singular_values;  // of Phi / sqrt(n), descending
};

/// Fits the transform by SVD of the feature matrix (never by eigendecomposition
/// of the second-moment matrix, which squares the condition number).
inline WhitenTransform fit_whitener(const std::vector<VectorXd>& feats,
                                    double tau = kSvdTruncation) {
  const int n = static_cast<int>(feats.size());
  if (n < 1) throw std::invalid_argument("fit_whitener: need at least one feature");
  const Eigen::Index d = feats.front().size();
  MatrixXd a(d, n);
  for (int j = 0; j < n; ++j) {
    if (feats[static_cast<size_t>(j)].size() != d)
      throw std::invalid_argument("fit_whitener: feature dimension mismatch");
    a.col(j) = feats[static_cast<size_t>(j)] / std::sqrt(static_cast<double>(n));
  }
  Eigen::JacobiSVD<MatrixXd> svd(a, Eigen::ComputeThinU);
  const VectorXd& s = svd.singularValues();
  const double cutoff = s.size() > 0 ? tau * s[0] : 0.0;

  WhitenTransform w;
  w.n = n;
  w.singular_values = s;
  w.factor = MatrixXd::Zero(d, d);
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s[i] > cutoff && s[i] > 0.0) {
      w.factor += svd.matrixU().col(i) * svd.matrixU().col(i).transpose() / s[i];
      w.rank += 1;
    }
  }
  return w;
}

inline VectorXd whiten(const WhitenTransform& w, const VectorXd& feat) {
  if (feat.size() != w.factor.rows())
    throw std::invalid_argument("whiten: feature dimension mismatch");
  return w.factor * feat;
}

// ---------------------------------------------------------------------------
// Whitened-geometry diagnostics (multiplicity structure of repeated rollouts).
// Phi_tilde here follows the ((Phi Phi^T)^+)^{1/2} Phi convention, under which
// columns of identical rollouts have inner product 1/multiplicity and columns
// of different rollouts are orthogonal.
// ---------------------------------------------------------------------------

struct WhitenedFeatures {
  MatrixXd phi_tilde;             // d x n
  VectorXd psi_tilde;             // d
  std::vector<int> group;         // distinct-feature class per rollout (0..K-1)
  std::vector<int> multiplicity;  // n_k per class
  VectorXd x_psi;                 // projection coefficients of psi in the distinct basis
  int distinct = 0;               // K
  bool assumptions_hold = true;   // n <= d and distinct features independent
};

/// Groups rollouts by exact token-sequence equality (rollouts are discrete;
/// feature proximity would be ill-defined).
inline std::vector<int> distinct_groups(const std::vector<Tokens>& rollouts) {
  std::vector<int> group(rollouts.size(), -1);
  std::vector<const Tokens*> reps;
  for (size_t j = 0; j < rollouts.size(); ++j) {
    for (size_t k = 0; k < reps.size(); ++k) {
      if (*reps[k] == rollouts[j]) {
        group[j] = static_cast<int>(k);
        break;
      }
    }
    if (group[j] < 0) {
      group[j] = static_cast<int>(reps.size());
      reps.push_back(&rollouts[j]);
    }
  }
  return group;
}

inline WhitenedFeatures whitened_features(const std::vector<VectorXd>& feats,
                                          const VectorXd& gt_feat, const std::vector<int>& group,
                                          double tau = kSvdTruncation) {
  const int n = static_cast<int>(feats.size());
  if (n < 1 || group.size() != feats.size())
    throw std::invalid_argument("whitened_features: bad inputs");
  const Eigen::Index d = feats.front().size();

  WhitenedFeatures out;
  out.group = group;
  out.distinct = 0;
  for (int g : group) out.distinct = std::max(out.distinct, g + 1);
  out.multiplicity.assign(static_cast<size_t>(out.distinct), 0);
  for (int g : group) out.multiplicity[static_cast<size_t>(g)] += 1;

  MatrixXd phi(d, n);
  for (int j = 0; j < n; ++j) phi.col(j) = feats[static_cast<size_t>(j)];
  Eigen::JacobiSVD<MatrixXd> svd(phi, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorXd& s = svd.singularValues();
  const double cutoff = s.size() > 0 ? tau * s[0] : 0.0;
  MatrixXd half_pinv = MatrixXd::Zero(d, d);  // ((Phi Phi^T)^+)^{1/2}
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s[i] > cutoff && s[i] > 0.0)
      half_pinv += svd.matrixU().col(i) * svd.matrixU().col(i).transpose() / s[i];
  out.phi_tilde = half_pinv * phi;
  out.psi_tilde = half_pinv * gt_feat;

  // Representative (first-occurrence) column per distinct class.
  MatrixXd distinct_cols(d, out.distinct);
  std::vector<bool> seen(static_cast<size_t>(out.distinct), false);
  for (int j = 0; j < n; ++j) {
    const int g = group[static_cast<size_t>(j)];
    if (!seen[static_cast<size_t>(g)]) {
      distinct_cols.col(g) = phi.col(j);
      seen[static_cast<size_t>(g)] = true;
    }
  }
  Eigen::JacobiSVD<MatrixXd> dsvd(distinct_cols, Eigen::ComputeThinU | Eigen::ComputeThinV);
  int drank = 0;
  for (Eigen::Index i = 0; i < dsvd.singularValues().size(); ++i)
    if (dsvd.singularValues()[i] > tau * dsvd.singularValues()[0]) drank += 1;
  out.assumptions_hold = (n <= d) && (drank == out.distinct);
  if (!out.assumptions_hold)
    logf(LogLevel::kWarn,
         "whitening: multiplicity closed forms need n <= d and independent distinct features "
         "(n=%d, d=%d, rank=%d, K=%d); matrix-level values still apply",
         n, static_cast<int>(d), drank, out.distinct);
  out.x_psi = dsvd.solve(gt_feat);  // least-squares projection coefficients
  return out;
}

// ---------------------------------------------------------------------------
// Whitened rewards.
// ---------------------------------------------------------------------------

enum class WhitenVariant {
  kBasic,  // plain whitened dot products
  kI,      // alignment cosine-normalized, diversity whitened (paper default)
  kII,     // both terms cosine-normalized
  kIII,    // alignment normalized by the ground-truth norm only
};

inline RewardSet whitened_rewards(const std::vector<VectorXd>& rollout_feats,
                                  const VectorXd& gt_feat, WhitenVariant variant,
                                  double alpha = 1.0, double tau = kSvdTruncation) {
  const int n = static_cast<int>(rollout_feats.size());
  if (n < 2) throw std::invalid_argument("whitened_rewards: need n >= 2");
  detail::check_feature_dims(rollout_feats, gt_feat);

  const WhitenTransform w = fit_whitener(rollout_feats, tau);
  std::vector<VectorXd> wf(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) wf[static_cast<size_t>(j)] = w.factor * rollout_feats[static_cast<size_t>(j)];
  const VectorXd wpsi = w.factor * gt_feat;
  const double psi_norm = wpsi.norm();

  RewardSet rs;
  rs.alpha = alpha;
  rs.alignment.resize(n);
  rs.diversity.resize(n);
  for (int j = 0; j < n; ++j) {
    const double dot_align = wf[static_cast<size_t>(j)].dot(wpsi);
    const double nj = wf[static_cast<size_t>(j)].norm();
    double at = 0.0;
    switch (variant) {
      case WhitenVariant::kBasic:
        at = 2.0 * dot_align;
        break;
      case WhitenVariant::kI:
      case WhitenVariant::kII: {
        const double denom = nj * psi_norm;
        if (denom > 0.0)
          at = 2.0 * dot_align / denom;
        else
          rs.degenerate_normalizations += 1;
        break;
      }
      case WhitenVariant::kIII: {
        if (psi_norm > 0.0)
          at = 2.0 * dot_align / psi_norm;
        else
          rs.degenerate_normalizations += 1;
        break;
      }
    }
    double dt = 0.0;
    for (int k = 0; k < n; ++k) {
      if (k == j) continue;
      const double dot_div = wf[static_cast<size_t>(j)].dot(wf[static_cast<size_t>(k)]);
      if (variant == WhitenVariant::kII) {
        const double denom = nj * wf[static_cast<size_t>(k)].norm();
        if (denom > 0.0)
          dt += dot_div / denom;
        else
          rs.degenerate_normalizations += 1;
      } else {
        dt += dot_div;
      }
    }
    rs.alignment[j] = at;
    rs.diversity[j] = 2.0 / (n - 1) * dt;
  }
  rs.rewards = rs.alignment - alpha * rs.diversity;
  rs.baselines = VectorXd::Zero(n);
  return rs;
}

/// Proxy loss logged alongside the unwhitened CFM metric: (1/n) sum_j
/// (AT_j - DT_j / 2). Larger is better under the reward sign convention;
/// consumers negate as needed.
inline double whitened_fm_proxy(const RewardSet& rs) {
  return (rs.alignment - 0.5 * rs.diversity).mean();
}

// ---------------------------------------------------------------------------
// Exact divergences on finite distributions (oracle machinery).
// ---------------------------------------------------------------------------

inline double kl_divergence(const VectorXd& p, const VectorXd& q) {
  double kl = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) {
      if (!(q[i] > 0.0)) return std::numeric_limits<double>::infinity();
      kl += p[i] * std::log(p[i] / q[i]);
    }
  }
  return kl;
}

/// D_chi2(p || q) = sum (p - q)^2 / q.
inline double chi2_divergence(const VectorXd& p, const VectorXd& q) {
  double v = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double diff = p[i] - q[i];
    if (diff == 0.0) continue;
    if (!(q[i] > 0.0)) return std::numeric_limits<double>::infinity();
    v += diff * diff / q[i];
  }
  return v;
}

/// Population whitened feature-matching value
/// (mu_P - mu_Q)^T Sigma_Q^+ (mu_P - mu_Q) with Sigma_Q = E_Q[phi phi^T],
/// computed from the SVD of diag(sqrt(q)) * F. With one-hot features and
/// full-support q this equals D_chi2(p || q) exactly.
inline double population_whitened_fm(const VectorXd& p, const VectorXd& q, const MatrixXd& feats,
                                     double tau = kSvdTruncation) {
  if (p.size() != q.size() || p.size() != feats.rows())
    throw std::invalid_argument("population_whitened_fm: shape mismatch");
  MatrixXd b = feats;
  for (Eigen::Index y = 0; y < q.size(); ++y) b.row(y) *= std::sqrt(q[y]);
  const VectorXd diff = feats.transpose() * p - feats.transpose() * q;
  Eigen::JacobiSVD<MatrixXd> svd(b, Eigen::ComputeThinV);
  const VectorXd& s = svd.singularValues();
  const double cutoff = s.size() > 0 ? tau * s[0] : 0.0;
  double value = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s[i] > cutoff && s[i] > 0.0) {
      const double c = svd.matrixV().col(i).dot(diff) / s[i];
      value += c * c;
    }
  }
  return value;
}

/// Numeric maximization of the chi-squared variational objective
///   g(f) = 2 (E_P f - E_Q f) - E_Q f^2
/// by steepest ascent with exact line search (the objective is a concave
/// quadratic). Independent of the closed form f* = dP/dQ - 1.
struct VariationalChi2 {
  double value = 0.0;
  VectorXd f;
  int iters = 0;
};

inline double variational_chi2_objective(const VectorXd& p, const VectorXd& q, const VectorXd& f) {
  return 2.0 * (p.dot(f) - q.dot(f)) - (q.array() * f.array().square()).sum();
}

inline VariationalChi2 variational_chi2_maximize(const VectorXd& p, const VectorXd& q,
                                                 int max_iters = 200000, double tol = 1e-14) {
  VariationalChi2 out;
  out.f = VectorXd::Zero(p.size());
  for (out.iters = 0; out.iters < max_iters; ++out.iters) {
    const VectorXd grad = 2.0 * (p - q) - 2.0 * (q.array() * out.f.array()).matrix();
    const double gn = grad.norm();
    if (gn < tol) break;
    const double curvature = 2.0 * (q.array() * grad.array().square()).sum();
    if (curvature <= 0.0) break;
    const double step = grad.squaredNorm() / curvature;
    out.f += step * grad;
  }
  out.value = variational_chi2_objective(p, q, out.f);
  return out;
}

}  // namespace ebft
