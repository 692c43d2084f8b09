#pragma once

#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebft/policy.hpp"

namespace ebft {

// Strided block-parallel rollouts: one source sequence of length T yields
// B = floor((T - G) / s) nested (context, completion) pairs anchored every
// s tokens, and all B branch continuations are sampled concurrently under a
// branch-isolating attention mask.

struct StridedPlan {
  int T = 0;
  int s = 0;
  int G = 0;
  int B = 0;

  /// Anchor of branch b (1-indexed): context c_b = tokens [0, b*s).
  int anchor(int b) const { return b * s; }
  int max_prefix() const { return B * s; }
  bool empty() const { return B < 1; }
};

inline StridedPlan plan_strides(int t, int s, int g) {
  if (g < 1) throw std::invalid_argument("plan_strides: G must be >= 1");
  if (t <= g) throw std::invalid_argument("plan_strides: need T > G");
  if (s < 1) throw std::invalid_argument("plan_strides: stride must be >= 1");
  StridedPlan plan;
  plan.T = t;
  plan.s = s;
  plan.G = g;
  plan.B = (t - g) / s;  // may be 0: empty-plan signal, callers skip
  return plan;
}

inline Tokens plan_context(const StridedPlan& plan, const Tokens& source, int b) {
  if (b < 1 || b > plan.B) throw std::out_of_range("branch index");
  return Tokens(source.begin(), source.begin() + plan.anchor(b));
}

inline Tokens plan_ground_truth(const StridedPlan& plan, const Tokens& source, int b) {
  if (b < 1 || b > plan.B) throw std::out_of_range("branch index");
  return Tokens(source.begin() + plan.anchor(b), source.begin() + plan.anchor(b) + plan.G);
}

// ---------------------------------------------------------------------------
// Attention mask for generation call g (0-indexed). The buffer at call g is
// [prefix of length B*s | g interleaved generation rounds of B tokens], so
// the mask has side B*s + B*g. Row layout of generated tokens: round u,
// branch b sits at index B*s + u*B + (b-1). A generated token attends to its
// anchor prefix, its own branch's earlier tokens, and itself -- never across
// branches and never to prefix tokens past its anchor.
// ---------------------------------------------------------------------------

struct BlockMask {
  MatrixXd additive;  // 0 where attention is allowed, -inf elsewhere
  int call_index = 0;
  int side = 0;

  bool allowed(int i, int j) const { return additive(i, j) == 0.0; }
};

inline BlockMask build_mask(const StridedPlan& plan, int g) {
  if (g < 0 || g >= plan.G) throw std::out_of_range("build_mask: call index");
  if (plan.empty()) throw std::invalid_argument("build_mask: empty plan");
  const int prefix = plan.max_prefix();
  const int side = prefix + plan.B * g;
  const double ninf = -std::numeric_limits<double>::infinity();

  BlockMask mask;
  mask.call_index = g;
  mask.side = side;
  mask.additive = MatrixXd::Constant(side, side, ninf);

  auto branch_of = [&](int i) { return (i - prefix) % plan.B + 1; };
  auto round_of = [&](int i) { return (i - prefix) / plan.B; };

  for (int i = 0; i < side; ++i) {
    if (i < prefix) {
      for (int j = 0; j <= i; ++j) mask.additive(i, j) = 0.0;  // causal prefix
      continue;
    }
    const int b = branch_of(i);
    const int u = round_of(i);
    for (int j = 0; j < plan.anchor(b); ++j) mask.additive(i, j) = 0.0;
    for (int v = 0; v <= u; ++v) mask.additive(i, prefix + v * plan.B + (b - 1)) = 0.0;
  }
  return mask;
}

/// Position ids for the buffer at call g: prefix positions are their own
/// index; branch b's generated token of round u takes position b*s + u, the
/// slot it would occupy in a sequential continuation.
inline std::vector<int> strided_positions(const StridedPlan& plan, int g) {
  std::vector<int> pos;
  pos.reserve(static_cast<size_t>(plan.max_prefix() + plan.B * g));
  for (int i = 0; i < plan.max_prefix(); ++i) pos.push_back(i);
  for (int u = 0; u < g; ++u)
    for (int b = 1; b <= plan.B; ++b) pos.push_back(plan.anchor(b) + u);
  return pos;
}

/// Textual 0 / inf grid of the mask, one row per line, block separators
/// after the prefix and after each generation round.
inline std::string mask_grid(const StridedPlan& plan, const BlockMask& mask) {
  std::ostringstream out;
  const int prefix = plan.max_prefix();
  auto hline = [&] {
    for (int j = 0; j < mask.side; ++j) out << (j ? " -" : "-");
    out << "\n";
  };
  for (int i = 0; i < mask.side; ++i) {
    for (int j = 0; j < mask.side; ++j) out << (j ? " " : "") << (mask.allowed(i, j) ? "0" : "∞");
    out << "\n";
    const int k = i + 1 - prefix;
    if ((i + 1 == prefix || (k > 0 && k % plan.B == 0)) && i + 1 < mask.side) hline();
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Parallel sampling.
// ---------------------------------------------------------------------------

/// Generated tokens in generation order [y_{1,0}, ..., y_{B,0}, y_{1,1}, ...].
struct InterleavedBuffer {
  Tokens tokens;
  int B = 0;
  int G = 0;

  bool complete() const { return static_cast<int>(tokens.size()) == B * G; }
};

inline Tokens deinterleave(const InterleavedBuffer& buf, int b) {
  if (!buf.complete()) throw std::invalid_argument("deinterleave: incomplete buffer");
  if (b < 1 || b > buf.B) throw std::out_of_range("branch index");
  Tokens out;
  out.reserve(static_cast<size_t>(buf.G));
  for (int u = 0; u < buf.G; ++u)
    out.push_back(buf.tokens[static_cast<size_t>(u * buf.B + (b - 1))]);
  return out;
}

inline InterleavedBuffer interleave(const std::vector<Tokens>& per_branch) {
  InterleavedBuffer buf;
  buf.B = static_cast<int>(per_branch.size());
  buf.G = buf.B > 0 ? static_cast<int>(per_branch.front().size()) : 0;
  for (const auto& t : per_branch)
    if (static_cast<int>(t.size()) != buf.G)
      throw std::invalid_argument("interleave: ragged branches");
  for (int u = 0; u < buf.G; ++u)
    for (int b = 0; b < buf.B; ++b) buf.tokens.push_back(per_branch[static_cast<size_t>(b)][static_cast<size_t>(u)]);
  return buf;
}

struct ParallelSampleResult {
  InterleavedBuffer buffer;
  std::vector<LogProbRecord> log_probs;  // per branch, temperature 1
};

/// Next-token logits for every branch at call g under the custom mask.
/// Returns a B x vocab matrix (row b-1 is branch b). `generated` holds the
/// interleaved tokens produced by calls 0..g-1.
inline MatrixXd strided_branch_logits(const PolicyModel& model, const StridedPlan& plan,
                                      const Tokens& source, const Tokens& generated, int g) {
  if (static_cast<int>(generated.size()) != plan.B * g)
    throw std::invalid_argument("strided_branch_logits: buffer/call mismatch");
  const int prefix = plan.max_prefix();

  if (model.kind == PolicyKind::kTabular) {
    MatrixXd logits(plan.B, model.vocab.size);
    for (int b = 1; b <= plan.B; ++b) {
      Tokens ctx(source.begin(), source.begin() + plan.anchor(b));
      for (int u = 0; u < g; ++u) ctx.push_back(generated[static_cast<size_t>(u * plan.B + (b - 1))]);
      const Eigen::Index row = model.tabular_row_index(ctx);
      logits.row(b - 1) =
          model.params.segment(row * model.vocab.size, model.vocab.size).transpose();
    }
    return logits;
  }

  Tokens buffer(source.begin(), source.begin() + prefix);
  buffer.insert(buffer.end(), generated.begin(), generated.end());
  const BlockMask mask = build_mask(plan, g);
  const std::vector<int> pos = strided_positions(plan, g);
  const MatrixXd all = transformer_forward(model.transformer, model.vocab.size, model.params,
                                           buffer, pos, mask.additive);
  MatrixXd logits(plan.B, model.vocab.size);
  for (int b = 1; b <= plan.B; ++b) {
    const int row = g == 0 ? plan.anchor(b) - 1 : prefix + (g - 1) * plan.B + (b - 1);
    logits.row(b - 1) = all.row(row);
  }
  return logits;
}

/// Samples one length-G continuation from every anchor using exactly G
/// masked forward passes. Per call, branches consume randomness in branch
/// order, so a B=1 plan replays sample_completions token for token.
inline ParallelSampleResult parallel_sample(const PolicyModel& model, const StridedPlan& plan,
                                            const Tokens& source, double temperature,
                                            uint64_t seed) {
  if (plan.empty()) throw std::invalid_argument("parallel_sample: empty plan");
  if (static_cast<int>(source.size()) < plan.T)
    throw std::invalid_argument("parallel_sample: source shorter than plan T");
  if (model.kind == PolicyKind::kTransformer) {
    const int capacity = plan.max_prefix() + plan.B * plan.G;
    const int max_pos = plan.max_prefix() + plan.G - 1;
    if (capacity > model.transformer.max_len || max_pos >= model.transformer.max_len)
      throw std::length_error("parallel_sample: plan exceeds model capacity");
  }

  Rng rng(seed);
  ParallelSampleResult res;
  res.buffer.B = plan.B;
  res.buffer.G = plan.G;
  for (int g = 0; g < plan.G; ++g) {
    const MatrixXd logits = strided_branch_logits(model, plan, source, res.buffer.tokens, g);
    for (int b = 1; b <= plan.B; ++b) {
      VectorXd dist;
      if (temperature == 0.0) {
        Eigen::Index arg = 0;
        logits.row(b - 1).maxCoeff(&arg);
        dist = VectorXd::Zero(model.vocab.size);
        dist[arg] = 1.0;
      } else {
        dist = detail::softmax(logits.row(b - 1).transpose() / temperature);
      }
      res.buffer.tokens.push_back(static_cast<Token>(rng.categorical(dist)));
    }
  }
  for (int b = 1; b <= plan.B; ++b) {
    res.log_probs.push_back(
        log_prob(model, plan_context(plan, source, b), deinterleave(res.buffer, b)));
  }
  return res;
}

struct RolloutTriple {
  Tokens context;
  Tokens ground_truth;
  Tokens sampled;
};

inline std::vector<RolloutTriple> gather_pairs(const StridedPlan& plan, const Tokens& source,
                                               const InterleavedBuffer& buffer) {
  if (!buffer.complete() || buffer.B != plan.B || buffer.G != plan.G)
    throw std::invalid_argument("gather_pairs: incomplete or mismatched buffer");
  std::vector<RolloutTriple> out;
  out.reserve(static_cast<size_t>(plan.B));
  for (int b = 1; b <= plan.B; ++b)
    out.push_back({plan_context(plan, source, b), plan_ground_truth(plan, source, b),
                   deinterleave(buffer, b)});
  return out;
}

}  // namespace ebft
