#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebft/autodiff.hpp"
#include "ebft/common.hpp"

namespace ebft {

// Minimal decoder-only transformer: learned token + position embeddings,
// pre-LN blocks (attention, GELU MLP), final LN, untied unembedding.
// Parameters live in one flat vector; the layout below is the only place
// that knows the order.

struct TransformerConfig {
  int depth = 4;
  int width = 64;
  int heads = 4;
  int max_len = 256;
  int mlp_mult = 4;

  int head_dim() const { return width / heads; }
  void validate() const {
    if (depth < 1 || width < 1 || heads < 1 || max_len < 1 || mlp_mult < 1)
      throw std::invalid_argument("transformer config: nonpositive field");
    if (width % heads != 0) throw std::invalid_argument("transformer config: width % heads != 0");
  }
};

struct ParamSegment {
  std::string name;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index offset = 0;
  Eigen::Index size() const { return rows * cols; }
};

inline std::vector<ParamSegment> transformer_layout(const TransformerConfig& cfg, int vocab_size) {
  cfg.validate();
  std::vector<ParamSegment> segs;
  Eigen::Index at = 0;
  auto push = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    segs.push_back({name, r, c, at});
    at += r * c;
  };
  const Eigen::Index w = cfg.width;
  const Eigen::Index f = static_cast<Eigen::Index>(cfg.mlp_mult) * w;
  push("tok_emb", vocab_size, w);
  push("pos_emb", cfg.max_len, w);
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = "blk" + std::to_string(l) + ".";
    push(p + "ln1.g", 1, w);
    push(p + "ln1.b", 1, w);
    push(p + "wq", w, w);
    push(p + "bq", 1, w);
    push(p + "wk", w, w);
    push(p + "bk", 1, w);
    push(p + "wv", w, w);
    push(p + "bv", 1, w);
    push(p + "wo", w, w);
    push(p + "bo", 1, w);
    push(p + "ln2.g", 1, w);
    push(p + "ln2.b", 1, w);
    push(p + "w1", w, f);
    push(p + "b1", 1, f);
    push(p + "w2", f, w);
    push(p + "b2", 1, w);
  }
  push("ln_f.g", 1, w);
  push("ln_f.b", 1, w);
  push("w_un", w, vocab_size);
  push("b_un", 1, vocab_size);
  return segs;
}

inline Eigen::Index transformer_param_count(const TransformerConfig& cfg, int vocab_size) {
  const auto segs = transformer_layout(cfg, vocab_size);
  return segs.back().offset + segs.back().size();
}

/// Weights are stored row-major inside the flat vector.
inline MatrixXd segment_matrix(const VectorXd& params, const ParamSegment& s) {
  return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      params.data() + s.offset, s.rows, s.cols);
}

inline void set_segment(VectorXd& params, const ParamSegment& s, const MatrixXd& m) {
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      params.data() + s.offset, s.rows, s.cols) = m;
}

/// GPT-style init: N(0, 0.02^2) weights and embeddings, zero biases, unit LN gains.
inline VectorXd transformer_init(const TransformerConfig& cfg, int vocab_size, uint64_t seed) {
  const auto segs = transformer_layout(cfg, vocab_size);
  VectorXd params(segs.back().offset + segs.back().size());
  Rng rng(mix_seed(seed, 0x7f4a7c15));
  for (const auto& s : segs) {
    const bool is_bias = s.name.ends_with(".b") || s.name.ends_with("b_un") ||
                         s.name.ends_with("bq") || s.name.ends_with("bk") ||
                         s.name.ends_with("bv") || s.name.ends_with("bo") ||
                         s.name.ends_with("b1") || s.name.ends_with("b2");
    const bool is_gain = s.name.ends_with(".g");
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      double v = 0.0;
      if (is_gain)
        v = 1.0;
      else if (!is_bias)
        v = 0.02 * rng.gaussian();
      params[s.offset + i] = v;
    }
  }
  return params;
}

inline MatrixXd causal_mask(Eigen::Index n) {
  const double ninf = -std::numeric_limits<double>::infinity();
  MatrixXd m = MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) m(i, j) = ninf;
  return m;
}

namespace detail {

inline void softmax_rows_inplace(MatrixXd& x) {
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    x.row(r) = (x.row(r).array() - m).exp();
    x.row(r) /= x.row(r).sum();
  }
}

inline void layernorm_rows_inplace(MatrixXd& x, const MatrixXd& g, const MatrixXd& b,
                                   double eps = 1e-5) {
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().sum() / static_cast<double>(x.cols());
    x.row(r) = ((x.row(r).array() - mu) / std::sqrt(var + eps)) * g.row(0).array() +
               b.row(0).array();
  }
}

inline MatrixXd gelu(const MatrixXd& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); });
}

}  // namespace detail

/// Forward pass with an explicit additive attention mask and position ids.
/// Returns logits (seq_len x vocab). When `taps` is non-null it receives the
/// residual-stream state after every block (depth matrices, seq_len x width).
inline MatrixXd transformer_forward(const TransformerConfig& cfg, int vocab_size,
                                    const VectorXd& params, const std::vector<int>& tokens,
                                    const std::vector<int>& positions, const MatrixXd& mask,
                                    std::vector<MatrixXd>* taps = nullptr) {
  const auto segs = transformer_layout(cfg, vocab_size);
  auto seg = [&](const std::string& name) -> const ParamSegment& {
    for (const auto& s : segs)
      if (s.name == name) return s;
    throw std::logic_error("no segment " + name);
  };
  const Eigen::Index n = static_cast<Eigen::Index>(tokens.size());
  if (positions.size() != tokens.size()) throw std::invalid_argument("positions/token mismatch");
  if (mask.rows() != n || mask.cols() != n) throw std::invalid_argument("mask shape mismatch");

  const MatrixXd tok_emb = segment_matrix(params, seg("tok_emb"));
  const MatrixXd pos_emb = segment_matrix(params, seg("pos_emb"));
  MatrixXd x(n, cfg.width);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = tokens[static_cast<size_t>(i)];
    const int p = positions[static_cast<size_t>(i)];
    if (t < 0 || t >= vocab_size) throw std::domain_error("token id out of vocab");
    if (p < 0 || p >= cfg.max_len) throw std::length_error("position exceeds max_len");
    x.row(i) = tok_emb.row(t) + pos_emb.row(p);
  }

  const int dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  if (taps) taps->clear();
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = "blk" + std::to_string(l) + ".";
    MatrixXd a = x;
    detail::layernorm_rows_inplace(a, segment_matrix(params, seg(p + "ln1.g")),
                                   segment_matrix(params, seg(p + "ln1.b")));
    MatrixXd q = (a * segment_matrix(params, seg(p + "wq"))).rowwise() +
                 segment_matrix(params, seg(p + "bq")).row(0);
    MatrixXd k = (a * segment_matrix(params, seg(p + "wk"))).rowwise() +
                 segment_matrix(params, seg(p + "bk")).row(0);
    MatrixXd v = (a * segment_matrix(params, seg(p + "wv"))).rowwise() +
                 segment_matrix(params, seg(p + "bv")).row(0);
    MatrixXd attn_out(n, cfg.width);
    for (int h = 0; h < cfg.heads; ++h) {
      MatrixXd scores =
          q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() * inv_sqrt_dh + mask;
      detail::softmax_rows_inplace(scores);
      attn_out.middleCols(h * dh, dh) = scores * v.middleCols(h * dh, dh);
    }
    x += (attn_out * segment_matrix(params, seg(p + "wo"))).rowwise() +
         segment_matrix(params, seg(p + "bo")).row(0);
    MatrixXd m = x;
    detail::layernorm_rows_inplace(m, segment_matrix(params, seg(p + "ln2.g")),
                                   segment_matrix(params, seg(p + "ln2.b")));
    MatrixXd hmid = detail::gelu(((m * segment_matrix(params, seg(p + "w1"))).rowwise() +
                                  segment_matrix(params, seg(p + "b1")).row(0))
                                     .eval());
    x += (hmid * segment_matrix(params, seg(p + "w2"))).rowwise() +
         segment_matrix(params, seg(p + "b2")).row(0);
    if (taps) taps->push_back(x);
  }
  detail::layernorm_rows_inplace(x, segment_matrix(params, seg("ln_f.g")),
                                 segment_matrix(params, seg("ln_f.b")));
  return (x * segment_matrix(params, seg("w_un"))).rowwise() +
         segment_matrix(params, seg("b_un")).row(0);
}

/// Taped forward; mirrors transformer_forward. Returns the logits node plus
/// one leaf node per parameter segment so gradients can be collected.
struct TapedForward {
  ad::Tape tape;
  std::vector<int> param_nodes;  // aligned with transformer_layout order
  int logits = -1;
};

inline void transformer_forward_tape(const TransformerConfig& cfg, int vocab_size,
                                     const VectorXd& params, const std::vector<int>& tokens,
                                     const std::vector<int>& positions, const MatrixXd& mask,
                                     TapedForward& out) {
  const auto segs = transformer_layout(cfg, vocab_size);
  ad::Tape& t = out.tape;
  out.param_nodes.clear();
  out.param_nodes.reserve(segs.size());
  for (const auto& s : segs) out.param_nodes.push_back(t.leaf(segment_matrix(params, s)));
  auto node = [&](const std::string& name) {
    for (size_t i = 0; i < segs.size(); ++i)
      if (segs[i].name == name) return out.param_nodes[i];
    throw std::logic_error("no segment " + name);
  };

  std::vector<int> tok_idx(tokens.begin(), tokens.end());
  std::vector<int> pos_idx(positions.begin(), positions.end());
  int x = t.add(t.gather_rows(node("tok_emb"), tok_idx), t.gather_rows(node("pos_emb"), pos_idx));

  const int dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string p = "blk" + std::to_string(l) + ".";
    int a = t.layernorm_rows(x, node(p + "ln1.g"), node(p + "ln1.b"));
    int q = t.add_rowvec(t.matmul(a, node(p + "wq")), node(p + "bq"));
    int k = t.add_rowvec(t.matmul(a, node(p + "wk")), node(p + "bk"));
    int v = t.add_rowvec(t.matmul(a, node(p + "wv")), node(p + "bv"));
    std::vector<int> heads;
    for (int h = 0; h < cfg.heads; ++h) {
      int s = t.add_const(
          t.scale(t.matmul_nt(t.slice_cols(q, h * dh, dh), t.slice_cols(k, h * dh, dh)),
                  inv_sqrt_dh),
          mask);
      heads.push_back(t.matmul(t.softmax_rows(s), t.slice_cols(v, h * dh, dh)));
    }
    int attn = t.add_rowvec(t.matmul(t.concat_cols(heads), node(p + "wo")), node(p + "bo"));
    x = t.add(x, attn);
    int m = t.layernorm_rows(x, node(p + "ln2.g"), node(p + "ln2.b"));
    int hmid = t.gelu(t.add_rowvec(t.matmul(m, node(p + "w1")), node(p + "b1")));
    x = t.add(x, t.add_rowvec(t.matmul(hmid, node(p + "w2")), node(p + "b2")));
  }
  int xf = t.layernorm_rows(x, node("ln_f.g"), node("ln_f.b"));
  out.logits = t.add_rowvec(t.matmul(xf, node("w_un")), node("b_un"));
}

/// Flattens per-segment gradients (after Tape::backward) into a vector
/// aligned with the flat parameter layout.
inline VectorXd collect_param_grads(const TransformerConfig& cfg, int vocab_size,
                                    TapedForward& fw) {
  const auto segs = transformer_layout(cfg, vocab_size);
  VectorXd g = VectorXd::Zero(segs.back().offset + segs.back().size());
  for (size_t i = 0; i < segs.size(); ++i) {
    const MatrixXd& gm = fw.tape.grad(fw.param_nodes[i]);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        g.data() + segs[i].offset, segs[i].rows, segs[i].cols) = gm;
  }
  return g;
}

}  // namespace ebft
