#pragma once

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ebft/policy.hpp"

namespace ebft {

struct Corpus {
  std::vector<Tokens> sequences;
  Vocab vocab;
  std::string provenance;  // "file" or "synthetic"

  void validate() const {
    vocab.validate();
    for (const auto& s : sequences) vocab.check(s);
  }
};

// ---------------------------------------------------------------------------
// Synthetic ground-truth sources. Each source carries its exact conditional
// distribution so oracle tests never have to re-derive it.
// ---------------------------------------------------------------------------

class SyntheticSource {
 public:
  enum class Kind { kMarkov, kHmm };

  /// Order-k Markov chain over tokens. `transition` has V^order rows (state =
  /// mixed-radix index of the last k tokens, first the oldest) and V columns;
  /// `initial` is the distribution of the first token. The first k tokens are
  /// drawn by padding the state with token 0.
  static SyntheticSource markov(int vocab_size, int order, MatrixXd transition,
                                VectorXd initial) {
    SyntheticSource s;
    s.kind_ = Kind::kMarkov;
    s.vocab_ = vocab_size;
    s.order_ = order;
    s.transition_ = std::move(transition);
    s.initial_ = std::move(initial);
    s.check_markov();
    return s;
  }

  /// Random row-stochastic Markov source; rows are softmax of N(0, scale^2).
  static SyntheticSource random_markov(int vocab_size, int order, uint64_t seed,
                                       double scale = 1.0) {
    Eigen::Index states = 1;
    for (int i = 0; i < order; ++i) states *= vocab_size;
    Rng rng(mix_seed(seed, 0x3a8f));
    MatrixXd t(states, vocab_size);
    for (Eigen::Index r = 0; r < states; ++r) {
      VectorXd logits(vocab_size);
      for (int v = 0; v < vocab_size; ++v) logits[v] = scale * rng.gaussian();
      logits.array() -= logits.maxCoeff();
      VectorXd row = logits.array().exp();
      t.row(r) = row.transpose() / row.sum();
    }
    VectorXd init(vocab_size);
    for (int v = 0; v < vocab_size; ++v) init[v] = 1.0 / vocab_size;
    return markov(vocab_size, order, std::move(t), std::move(init));
  }

  /// Hidden Markov model: s_0 ~ init, x_t ~ emit(s_t, .), s_{t+1} ~ trans(s_t, .).
  static SyntheticSource hmm(int states, int vocab_size, MatrixXd trans, MatrixXd emit,
                             VectorXd init) {
    SyntheticSource s;
    s.kind_ = Kind::kHmm;
    s.vocab_ = vocab_size;
    s.states_ = states;
    s.transition_ = std::move(trans);
    s.emission_ = std::move(emit);
    s.initial_ = std::move(init);
    s.check_hmm();
    return s;
  }

  int vocab_size() const { return vocab_; }
  Kind kind() const { return kind_; }

  /// Exact next-token distribution given a context (may be empty).
  VectorXd next_dist(const Tokens& context) const {
    if (kind_ == Kind::kMarkov) {
      if (order_ >= 1 && context.empty()) return initial_;
      return transition_.row(markov_state(context)).transpose();
    }
    return (belief_after(context).transpose() * emission_).transpose();
  }

  /// Exact p(y | c), the product of next_dist along the completion.
  double conditional_prob(const Tokens& context, const Tokens& completion) const {
    double p = 1.0;
    Tokens ctx = context;
    for (Token t : completion) {
      p *= next_dist(ctx)[t];
      ctx.push_back(t);
    }
    return p;
  }

  Tokens sample_sequence(int length, Rng& rng) const {
    Tokens seq;
    seq.reserve(static_cast<size_t>(length));
    if (kind_ == Kind::kMarkov) {
      for (int i = 0; i < length; ++i)
        seq.push_back(static_cast<Token>(rng.categorical(next_dist(seq))));
      return seq;
    }
    int state = rng.categorical(initial_);
    for (int i = 0; i < length; ++i) {
      seq.push_back(static_cast<Token>(rng.categorical(emission_.row(state).transpose())));
      state = rng.categorical(transition_.row(state).transpose());
    }
    return seq;
  }

 private:
  void check_markov() const {
    if (vocab_ < 2 || order_ < 0) throw std::invalid_argument("markov: bad dimensions");
    Eigen::Index states = 1;
    for (int i = 0; i < order_; ++i) states *= vocab_;
    if (transition_.rows() != states || transition_.cols() != vocab_)
      throw std::invalid_argument("markov: transition shape mismatch");
    for (Eigen::Index r = 0; r < transition_.rows(); ++r)
      if (std::abs(transition_.row(r).sum() - 1.0) > 1e-9)
        throw std::invalid_argument("markov: transition row does not sum to 1");
    if (initial_.size() != vocab_ || std::abs(initial_.sum() - 1.0) > 1e-9)
      throw std::invalid_argument("markov: bad initial distribution");
  }

  void check_hmm() const {
    if (vocab_ < 2 || states_ < 1) throw std::invalid_argument("hmm: bad dimensions");
    if (transition_.rows() != states_ || transition_.cols() != states_ ||
        emission_.rows() != states_ || emission_.cols() != vocab_ || initial_.size() != states_)
      throw std::invalid_argument("hmm: shape mismatch");
    for (Eigen::Index r = 0; r < states_; ++r) {
      if (std::abs(transition_.row(r).sum() - 1.0) > 1e-9 ||
          std::abs(emission_.row(r).sum() - 1.0) > 1e-9)
        throw std::invalid_argument("hmm: row does not sum to 1");
    }
    if (std::abs(initial_.sum() - 1.0) > 1e-9)
      throw std::invalid_argument("hmm: bad initial distribution");
  }

  /// State index from the last `order` tokens. Contexts shorter than `order`
  /// pad with token 0 (only matters for the first order-1 draws).
  Eigen::Index markov_state(const Tokens& context) const {
    if (order_ == 0) return 0;
    Eigen::Index idx = 0;
    for (int i = order_; i >= 1; --i) {
      const int j = static_cast<int>(context.size()) - i;
      const Token tok = j >= 0 ? context[static_cast<size_t>(j)] : 0;
      idx = idx * vocab_ + tok;
    }
    return idx;
  }

  Kind kind_ = Kind::kMarkov;
  int vocab_ = 0;
  int order_ = 0;
  int states_ = 0;
  MatrixXd transition_;
  MatrixXd emission_;
  VectorXd initial_;

  VectorXd belief_after(const Tokens& context) const {
    VectorXd alpha = initial_;
    for (Token t : context) {
      VectorXd post = (alpha.array() * emission_.col(t).array()).matrix();
      const double z = post.sum();
      if (!(z > 0.0)) throw std::domain_error("hmm: context has probability zero");
      post /= z;
      alpha = transition_.transpose() * post;
    }
    return alpha;
  }
};

inline Corpus generate_synthetic(const SyntheticSource& source, int count, int length,
                                 uint64_t seed) {
  if (count < 1 || length < 1) throw std::invalid_argument("generate_synthetic: bad sizes");
  Corpus c;
  c.vocab.size = source.vocab_size();
  c.provenance = "synthetic";
  Rng rng(mix_seed(seed, 0x51e));
  for (int i = 0; i < count; ++i) c.sequences.push_back(source.sample_sequence(length, rng));
  return c;
}

// ---------------------------------------------------------------------------
// File ingestion: JSON-lines with {"text": "..."} or {"tokens": [...]}.
// ---------------------------------------------------------------------------

enum class Tokenizer { kCharLevel, kIdList };

/// Char-level tokenization maps the distinct bytes of the corpus to dense ids
/// in byte order; the vocab records the bytes as printable symbols.
inline Corpus load_corpus(const std::string& path, Tokenizer tokenizer, int vocab_size = 0) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read corpus " + path);

  std::vector<std::string> texts;
  std::vector<Tokens> token_rows;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      if (tokenizer == Tokenizer::kCharLevel) {
        texts.push_back(j.at("text").get<std::string>());
      } else {
        token_rows.push_back(j.at("tokens").get<Tokens>());
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("corpus line " + std::to_string(line_no) + ": " + e.what());
    }
  }

  Corpus c;
  c.provenance = "file";
  if (tokenizer == Tokenizer::kCharLevel) {
    if (texts.empty()) throw std::runtime_error("empty corpus: " + path);
    std::map<char, Token> ids;
    for (const auto& t : texts)
      for (char ch : t) ids.emplace(ch, 0);
    Token next = 0;
    for (auto& [ch, id] : ids) id = next++;
    c.vocab.size = static_cast<int>(ids.size());
    if (c.vocab.size < 2)
      throw std::runtime_error("corpus needs at least two distinct characters");
    c.vocab.symbols.resize(static_cast<size_t>(c.vocab.size));
    for (const auto& [ch, id] : ids) c.vocab.symbols[static_cast<size_t>(id)] = std::string(1, ch);
    for (const auto& t : texts) {
      Tokens seq;
      seq.reserve(t.size());
      for (char ch : t) seq.push_back(ids.at(ch));
      c.sequences.push_back(std::move(seq));
    }
  } else {
    if (token_rows.empty()) throw std::runtime_error("empty corpus: " + path);
    Token max_tok = 0;
    for (const auto& row : token_rows)
      for (Token t : row) max_tok = std::max(max_tok, t);
    c.vocab.size = vocab_size > 0 ? vocab_size : std::max(2, max_tok + 1);
    c.sequences = std::move(token_rows);
  }
  c.validate();
  return c;
}

inline void export_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& seq : corpus.sequences) {
    nlohmann::json j;
    j["tokens"] = seq;
    out << j.dump() << "\n";
  }
}

/// Disjoint, exhaustive, seed-deterministic split; the held-out part gets
/// round(fraction * N) sequences.
inline std::pair<Corpus, Corpus> split(const Corpus& corpus, double heldout_fraction,
                                       uint64_t seed) {
  if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0))
    throw std::invalid_argument("split: fraction must be in (0,1)");
  const size_t n = corpus.sequences.size();
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  Rng rng(mix_seed(seed, 0x5717));
  for (size_t i = n; i > 1; --i) {
    const size_t j = static_cast<size_t>(rng.next_u64() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  const size_t heldout = std::min(
      n, static_cast<size_t>(std::llround(heldout_fraction * static_cast<double>(n))));

  Corpus train = corpus, held = corpus;
  train.sequences.clear();
  held.sequences.clear();
  for (size_t i = 0; i < n; ++i) {
    (i < heldout ? held : train).sequences.push_back(corpus.sequences[idx[i]]);
  }
  return {train, held};
}

}  // namespace ebft
