#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ebft/common.hpp"
#include "ebft/transformer.hpp"

namespace ebft {

using Token = int;
using Tokens = std::vector<Token>;

constexpr const char* kModelMagic = "EBFT-MODEL-v1";

struct Vocab {
  int size = 0;
  std::vector<std::string> symbols;  // optional printable table, empty or size `size`

  void validate() const {
    if (size < 2) throw std::invalid_argument("vocab size must be >= 2");
    if (!symbols.empty() && static_cast<int>(symbols.size()) != size)
      throw std::invalid_argument("symbol table size mismatch");
  }
  bool contains(Token t) const { return t >= 0 && t < size; }
  void check(const Tokens& toks) const {
    for (Token t : toks)
      if (!contains(t)) throw std::domain_error("token id out of vocab: " + std::to_string(t));
  }
};

enum class SeqRole { kContext, kCompletion, kConcatenated };

struct TokenSequence {
  Tokens tokens;
  SeqRole role = SeqRole::kContext;
  int context_len = -1;  // boundary |c| within a concatenated sequence

  int completion_len() const {
    if (role != SeqRole::kConcatenated || context_len < 0)
      throw std::logic_error("completion_len: not a concatenated sequence");
    return static_cast<int>(tokens.size()) - context_len;
  }
};

inline TokenSequence concat(const Tokens& context, const Tokens& completion) {
  TokenSequence s;
  s.tokens = context;
  s.tokens.insert(s.tokens.end(), completion.begin(), completion.end());
  s.role = SeqRole::kConcatenated;
  s.context_len = static_cast<int>(context.size());
  return s;
}

struct LogProbRecord {
  VectorXd per_token;  // length G, entries <= 0
  double total = 0.0;  // sum of per_token
};

// ---------------------------------------------------------------------------
// PolicyModel: tabular order-k softmax or minimal decoder-only transformer,
// with one flat parameter vector either way.
// ---------------------------------------------------------------------------

enum class PolicyKind { kTabular, kTransformer };

struct PolicyModel {
  PolicyKind kind = PolicyKind::kTabular;
  Vocab vocab;
  int order = 0;                 // tabular: conditioning window
  TransformerConfig transformer; // transformer: architecture
  VectorXd params;

  // Contexts shorter than `order` are padded with a reserved symbol, so the
  // tabular table is indexed over an alphabet of size vocab.size + 1.
  int tabular_base() const { return vocab.size + 1; }
  Eigen::Index tabular_rows() const {
    Eigen::Index rows = 1;
    for (int i = 0; i < order; ++i) rows *= tabular_base();
    return rows;
  }

  Eigen::Index param_count() const {
    return kind == PolicyKind::kTabular
               ? tabular_rows() * vocab.size
               : transformer_param_count(transformer, vocab.size);
  }

  int max_len() const {
    return kind == PolicyKind::kTabular ? std::numeric_limits<int>::max() / 4
                                        : transformer.max_len;
  }

  Eigen::Index tabular_row_index(const Tokens& context) const {
    const int pad = vocab.size;
    Eigen::Index idx = 0;
    for (int i = order; i >= 1; --i) {
      const int j = static_cast<int>(context.size()) - i;
      const int tok = j >= 0 ? context[static_cast<size_t>(j)] : pad;
      idx = idx * tabular_base() + tok;
    }
    return idx;
  }

  static PolicyModel make_tabular(Vocab vocab, int order, uint64_t seed = 0,
                                  double init_scale = 0.0) {
    vocab.validate();
    if (order < 0) throw std::invalid_argument("tabular order must be >= 0");
    PolicyModel m;
    m.kind = PolicyKind::kTabular;
    m.vocab = std::move(vocab);
    m.order = order;
    m.params = VectorXd::Zero(m.param_count());
    if (init_scale != 0.0) {
      Rng rng(mix_seed(seed, 0x7ab));
      for (Eigen::Index i = 0; i < m.params.size(); ++i)
        m.params[i] = init_scale * rng.gaussian();
    }
    return m;
  }

  static PolicyModel make_transformer(Vocab vocab, TransformerConfig cfg, uint64_t seed) {
    vocab.validate();
    cfg.validate();
    PolicyModel m;
    m.kind = PolicyKind::kTransformer;
    m.vocab = std::move(vocab);
    m.transformer = cfg;
    m.params = transformer_init(cfg, m.vocab.size, seed);
    return m;
  }
};

inline uint64_t model_hash(const PolicyModel& m) {
  uint64_t h = fnv1a64(kModelMagic);
  h = fnv1a64(&m.kind, sizeof(m.kind), h);
  h = fnv1a64(&m.vocab.size, sizeof(m.vocab.size), h);
  h = fnv1a64(&m.order, sizeof(m.order), h);
  h = fnv1a64(&m.transformer, sizeof(m.transformer), h);
  h = fnv1a64(m.params.data(), static_cast<size_t>(m.params.size()) * sizeof(double), h);
  return h;
}

// ---------------------------------------------------------------------------
// Core operations.
// ---------------------------------------------------------------------------

namespace detail {

inline VectorXd softmax(const VectorXd& logits) {
  const double m = logits.maxCoeff();
  VectorXd p = (logits.array() - m).exp();
  return p / p.sum();
}

inline VectorXd next_token_logits(const PolicyModel& model, const Tokens& context) {
  model.vocab.check(context);
  if (static_cast<int>(context.size()) > model.max_len())
    throw std::length_error("context longer than model max_len");
  if (model.kind == PolicyKind::kTabular) {
    const Eigen::Index row = model.tabular_row_index(context);
    return model.params.segment(row * model.vocab.size, model.vocab.size);
  }
  if (context.empty()) throw std::invalid_argument("transformer needs a nonempty context");
  std::vector<int> pos(context.size());
  for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  const MatrixXd logits =
      transformer_forward(model.transformer, model.vocab.size, model.params, context, pos,
                          causal_mask(static_cast<Eigen::Index>(context.size())));
  return logits.row(logits.rows() - 1).transpose();
}

}  // namespace detail

/// Distribution over the next token. temperature == 0 is the argmax limit
/// (ties resolved to the lowest index); temperature 1 is the native softmax.
inline VectorXd next_token_dist(const PolicyModel& model, const Tokens& context,
                                double temperature = 1.0) {
  if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
  VectorXd logits = detail::next_token_logits(model, context);
  if (temperature == 0.0) {
    Eigen::Index arg = 0;
    logits.maxCoeff(&arg);
    VectorXd p = VectorXd::Zero(logits.size());
    p[arg] = 1.0;
    return p;
  }
  return detail::softmax(logits / temperature);
}

/// Exact log-probability of `completion` given `context` at temperature 1.
inline LogProbRecord log_prob(const PolicyModel& model, const Tokens& context,
                              const Tokens& completion) {
  if (completion.empty()) throw std::invalid_argument("log_prob: empty completion");
  if (model.kind == PolicyKind::kTransformer && context.empty())
    throw std::invalid_argument("transformer needs a nonempty context");
  model.vocab.check(context);
  model.vocab.check(completion);
  const int g = static_cast<int>(completion.size());
  LogProbRecord rec;
  rec.per_token.resize(g);

  if (model.kind == PolicyKind::kTabular) {
    Tokens ctx = context;
    for (int t = 0; t < g; ++t) {
      const VectorXd p = next_token_dist(model, ctx, 1.0);
      rec.per_token[t] = std::log(p[completion[static_cast<size_t>(t)]]);
      ctx.push_back(completion[static_cast<size_t>(t)]);
    }
  } else {
    // One causal forward over c:y gives the same per-position values as the
    // step-by-step chain (rows only see earlier rows), bit-for-bit.
    TokenSequence cat = concat(context, completion);
    if (static_cast<int>(cat.tokens.size()) > model.max_len())
      throw std::length_error("sequence longer than model max_len");
    std::vector<int> pos(cat.tokens.size());
    for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    const MatrixXd logits =
        transformer_forward(model.transformer, model.vocab.size, model.params, cat.tokens, pos,
                            causal_mask(static_cast<Eigen::Index>(cat.tokens.size())));
    for (int t = 0; t < g; ++t) {
      const Eigen::Index row = static_cast<Eigen::Index>(context.size()) + t - 1;
      const VectorXd p = detail::softmax(logits.row(row).transpose());
      rec.per_token[t] = std::log(p[completion[static_cast<size_t>(t)]]);
    }
  }
  rec.total = rec.per_token.sum();
  return rec;
}

/// Exact reverse-mode gradient of log_prob(...).total w.r.t. all parameters.
inline VectorXd grad_log_prob(const PolicyModel& model, const Tokens& context,
                              const Tokens& completion) {
  if (completion.empty()) throw std::invalid_argument("grad_log_prob: empty completion");
  if (model.kind == PolicyKind::kTransformer && context.empty())
    throw std::invalid_argument("transformer needs a nonempty context");
  model.vocab.check(context);
  model.vocab.check(completion);

  if (model.kind == PolicyKind::kTabular) {
    VectorXd grad = VectorXd::Zero(model.param_count());
    Tokens ctx = context;
    for (Token y : completion) {
      const Eigen::Index row = model.tabular_row_index(ctx);
      const VectorXd p =
          detail::softmax(model.params.segment(row * model.vocab.size, model.vocab.size));
      grad.segment(row * model.vocab.size, model.vocab.size) -= p;
      grad[row * model.vocab.size + y] += 1.0;
      ctx.push_back(y);
    }
    return grad;
  }

  TokenSequence cat = concat(context, completion);
  if (static_cast<int>(cat.tokens.size()) > model.max_len())
    throw std::length_error("sequence longer than model max_len");
  std::vector<int> pos(cat.tokens.size());
  for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  TapedForward fw;
  transformer_forward_tape(model.transformer, model.vocab.size, model.params, cat.tokens, pos,
                           causal_mask(static_cast<Eigen::Index>(cat.tokens.size())), fw);
  int logp = fw.tape.log_softmax_rows(fw.logits);
  std::vector<std::pair<int, int>> cells;
  for (size_t t = 0; t < completion.size(); ++t)
    cells.emplace_back(static_cast<int>(context.size() + t) - 1, completion[t]);
  fw.tape.backward(fw.tape.select_sum(logp, std::move(cells)));
  return collect_param_grads(model.transformer, model.vocab.size, fw);
}

struct SampledCompletions {
  std::vector<Tokens> completions;
  std::vector<LogProbRecord> log_probs;  // recorded at temperature 1
};

/// Samples n completions of length G. Consumes exactly one uniform per
/// sampled token (branchless w.r.t. outcome), so seeded runs reproduce.
inline SampledCompletions sample_completions(const PolicyModel& model, const Tokens& context,
                                             int g, int n, double temperature, uint64_t seed) {
  if (g <= 0) throw std::invalid_argument("sample_completions: G must be >= 1");
  if (n < 1) throw std::invalid_argument("sample_completions: n must be >= 1");
  Rng rng(seed);
  SampledCompletions out;
  out.completions.reserve(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    Tokens ctx = context;
    Tokens comp;
    comp.reserve(static_cast<size_t>(g));
    for (int t = 0; t < g; ++t) {
      const VectorXd p = next_token_dist(model, ctx, temperature);
      const Token y = static_cast<Token>(rng.categorical(p));
      comp.push_back(y);
      ctx.push_back(y);
    }
    out.log_probs.push_back(log_prob(model, context, comp));
    out.completions.push_back(std::move(comp));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer. Parameters change only through apply_update.
// ---------------------------------------------------------------------------

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;  // paper's Adam betas
  double eps = 1e-8;
};

struct AdamState {
  VectorXd m;
  VectorXd v;
  long long step = 0;
};

/// One Adam step along `grad` (a loss gradient: descent direction is -grad).
inline void apply_update(PolicyModel& model, const VectorXd& grad, AdamState& state,
                         const OptimConfig& opt) {
  if (grad.size() != model.params.size())
    throw std::invalid_argument("apply_update: gradient/parameter shape mismatch");
  if (state.m.size() == 0) {
    state.m = VectorXd::Zero(grad.size());
    state.v = VectorXd::Zero(grad.size());
  }
  if (state.m.size() != grad.size())
    throw std::invalid_argument("apply_update: optimizer state shape mismatch");
  state.step += 1;
  state.m = opt.beta1 * state.m + (1.0 - opt.beta1) * grad;
  state.v = (opt.beta2 * state.v.array() + (1.0 - opt.beta2) * grad.array().square()).matrix();
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  model.params.array() -=
      opt.lr * (state.m.array() / bc1) / ((state.v.array() / bc2).sqrt() + opt.eps);
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned JSON blob, magic "EBFT-MODEL-v1".
// ---------------------------------------------------------------------------

inline nlohmann::json model_to_json(const PolicyModel& m) {
  nlohmann::json j;
  j["magic"] = kModelMagic;
  j["kind"] = m.kind == PolicyKind::kTabular ? "tabular" : "transformer";
  j["vocab"] = {{"size", m.vocab.size}};
  if (!m.vocab.symbols.empty()) j["vocab"]["symbols"] = m.vocab.symbols;
  if (m.kind == PolicyKind::kTabular) {
    j["order"] = m.order;
  } else {
    j["transformer"] = {{"depth", m.transformer.depth},
                        {"width", m.transformer.width},
                        {"heads", m.transformer.heads},
                        {"max_len", m.transformer.max_len},
                        {"mlp_mult", m.transformer.mlp_mult}};
  }
  j["params"] = std::vector<double>(m.params.data(), m.params.data() + m.params.size());
  return j;
}

inline PolicyModel model_from_json(const nlohmann::json& j) {
  if (!j.contains("magic") || j.at("magic") != kModelMagic)
    throw std::runtime_error("not an EBFT-MODEL-v1 checkpoint");
  PolicyModel m;
  m.vocab.size = j.at("vocab").at("size").get<int>();
  if (j.at("vocab").contains("symbols"))
    m.vocab.symbols = j.at("vocab").at("symbols").get<std::vector<std::string>>();
  m.vocab.validate();
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "tabular") {
    m.kind = PolicyKind::kTabular;
    m.order = j.at("order").get<int>();
  } else if (kind == "transformer") {
    m.kind = PolicyKind::kTransformer;
    const auto& t = j.at("transformer");
    m.transformer = {t.at("depth").get<int>(), t.at("width").get<int>(),
                     t.at("heads").get<int>(), t.at("max_len").get<int>(),
                     t.at("mlp_mult").get<int>()};
  } else {
    throw std::runtime_error("unknown model kind: " + kind);
  }
  const auto p = j.at("params").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(p.size()) != m.param_count())
    throw std::runtime_error("checkpoint parameter count mismatch");
  m.params = Eigen::Map<const VectorXd>(p.data(), static_cast<Eigen::Index>(p.size()));
  return m;
}

inline void save_model(const PolicyModel& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << model_to_json(m).dump() << "\n";
}

inline PolicyModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  nlohmann::json j;
  in >> j;
  return model_from_json(j);
}

}  // namespace ebft
