#pragma once

#include <optional>
#include <stdexcept>
#include <vector>

#include "ebft/policy.hpp"

namespace ebft {

// Feature-matching rewards r_j = AT_j - alpha * DT_j, the leave-one-out
// baseline corrected for the coupling of rewards across rollouts, and
// assembly of the REINFORCE gradient estimate.

struct RewardSet {
  VectorXd rewards;    // r_j
  VectorXd baselines;  // b_j (zero when unavailable)
  VectorXd alignment;  // AT_j
  VectorXd diversity;  // DT_j
  double alpha = 1.0;
  bool baselines_available = false;
  int degenerate_normalizations = 0;  // zero-norm alignment/diversity terms forced to 0

  int n() const { return static_cast<int>(rewards.size()); }
  VectorXd advantages() const { return rewards - baselines; }
};

namespace detail {

inline void check_feature_dims(const std::vector<VectorXd>& feats, const VectorXd& gt) {
  for (const auto& f : feats)
    if (f.size() != gt.size())
      throw std::invalid_argument("feature dimension mismatch across rollouts");
}

}  // namespace detail

/// AT_j = 2 <phi_j, psi>;  DT_j = 2/(n-1) sum_{j' != j} <phi_j, phi_j'>;
/// r_j = AT_j - alpha * DT_j. Baselines are left zero.
inline RewardSet fm_rewards(const std::vector<VectorXd>& rollout_feats, const VectorXd& gt_feat,
                            double alpha = 1.0) {
  const int n = static_cast<int>(rollout_feats.size());
  if (n < 2) throw std::invalid_argument("fm_rewards: diversity term undefined for n < 2");
  detail::check_feature_dims(rollout_feats, gt_feat);

  RewardSet rs;
  rs.alpha = alpha;
  rs.alignment.resize(n);
  rs.diversity.resize(n);
  MatrixXd gram(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) gram(i, j) = gram(j, i) = rollout_feats[i].dot(rollout_feats[j]);
  for (int j = 0; j < n; ++j) {
    rs.alignment[j] = 2.0 * rollout_feats[j].dot(gt_feat);
    rs.diversity[j] = 2.0 / (n - 1) * (gram.row(j).sum() - gram(j, j));
  }
  rs.rewards = rs.alignment - alpha * rs.diversity;
  rs.baselines = VectorXd::Zero(n);
  return rs;
}

/// Leave-one-out baseline with the correction that makes b_j independent of
/// rollout j (the diversity terms of the other rollouts still reference
/// phi_j; the T2 correction removes that coupling):
///   b_j = 1/(n-1) sum_{j'!=j} T1^{(j')}
///       - 1/(n-2) sum_{j'!=j} T2^{(j')}
///       + 1/(n-2) T2^{(j)},
/// with T1^{(j)} = 2 <phi_j, psi> and T2^{(j)} = 2/(n-1) sum_{j'!=j} <phi_j, phi_j'>.
/// Returns nothing for n < 3 (denominator n-2); callers fall back to zero.
inline std::optional<VectorXd> rloo_baselines(const std::vector<VectorXd>& rollout_feats,
                                              const VectorXd& gt_feat) {
  const int n = static_cast<int>(rollout_feats.size());
  if (n < 3) return std::nullopt;
  detail::check_feature_dims(rollout_feats, gt_feat);

  VectorXd t1(n), t2(n);
  MatrixXd gram(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i; j < n; ++j) gram(i, j) = gram(j, i) = rollout_feats[i].dot(rollout_feats[j]);
  for (int j = 0; j < n; ++j) {
    t1[j] = 2.0 * rollout_feats[j].dot(gt_feat);
    t2[j] = 2.0 / (n - 1) * (gram.row(j).sum() - gram(j, j));
  }
  const double t1_sum = t1.sum();
  const double t2_sum = t2.sum();
  VectorXd b(n);
  for (int j = 0; j < n; ++j) {
    b[j] = (t1_sum - t1[j]) / (n - 1) - (t2_sum - t2[j]) / (n - 2) + t2[j] / (n - 2);
  }
  return b;
}

/// Attaches RLOO baselines when n >= 3, otherwise leaves zeros and warns.
inline void attach_rloo_baselines(RewardSet& rs, const std::vector<VectorXd>& rollout_feats,
                                  const VectorXd& gt_feat) {
  auto b = rloo_baselines(rollout_feats, gt_feat);
  if (b) {
    rs.baselines = std::move(*b);
    rs.baselines_available = true;
  } else {
    rs.baselines = VectorXd::Zero(rs.n());
    rs.baselines_available = false;
    logf(LogLevel::kWarn, "RLOO baselines need n >= 3 (got n=%d); using zero baseline", rs.n());
  }
}

struct GradientEstimate {
  VectorXd grad;  // gradient of the loss; the optimizer descends along -grad
  int n = 0;
};

/// -(1/n) sum_j grad_log_prob(c, y_j) * (r_j - b_j).
inline GradientEstimate reinforce_gradient(const PolicyModel& policy, const Tokens& context,
                                           const std::vector<Tokens>& rollouts,
                                           const RewardSet& rewards) {
  const int n = static_cast<int>(rollouts.size());
  if (n != rewards.n()) throw std::invalid_argument("reinforce_gradient: rollout/reward mismatch");
  GradientEstimate est;
  est.n = n;
  est.grad = VectorXd::Zero(policy.param_count());
  const VectorXd adv = rewards.advantages();
  for (int j = 0; j < n; ++j) {
    if (adv[j] == 0.0) continue;  // exact zero contributes nothing
    est.grad -= grad_log_prob(policy, context, rollouts[static_cast<size_t>(j)]) * (adv[j] / n);
  }
  return est;
}

}  // namespace ebft
