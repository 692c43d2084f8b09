#pragma once

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ebft/policy.hpp"

namespace ebft {

// Feature maps phi: concatenated context:completion -> R^d. Two kinds:
//  - one-hot over V^G completions (exact; used by enumeration oracles),
//  - frozen network: residual-stream activations of a frozen transformer
//    snapshot at fractional depths, pooled and block-normalized.

enum class FeatureKind { kOneHot, kFrozenNetwork };
enum class Pooling { kLastToken, kMean };

constexpr std::int64_t kOneHotDimCap = 4096;

struct FeatureMapSpec {
  FeatureKind kind = FeatureKind::kOneHot;

  // one-hot
  int vocab_size = 0;
  int gen_len = 1;

  // frozen network
  std::vector<double> layer_fractions{0.25, 0.50, 0.75};
  Pooling pooling = Pooling::kLastToken;
  bool block_normalize = true;
  std::shared_ptr<const PolicyModel> source;  // deep-copied snapshot, never trained

  static FeatureMapSpec one_hot(int vocab_size, int gen_len) {
    if (vocab_size < 2 || gen_len < 1) throw std::invalid_argument("one_hot: bad dimensions");
    double d = 1.0;
    for (int i = 0; i < gen_len; ++i) d *= vocab_size;
    if (d > static_cast<double>(kOneHotDimCap))
      throw std::invalid_argument("one_hot: |V|^G exceeds cap of " +
                                  std::to_string(kOneHotDimCap));
    FeatureMapSpec s;
    s.kind = FeatureKind::kOneHot;
    s.vocab_size = vocab_size;
    s.gen_len = gen_len;
    return s;
  }

  void validate() const {
    if (kind == FeatureKind::kFrozenNetwork) {
      if (!source) throw std::invalid_argument("frozen-network spec without source snapshot");
      if (source->kind != PolicyKind::kTransformer)
        throw std::invalid_argument("frozen-network features need a transformer source");
      if (layer_fractions.empty()) throw std::invalid_argument("no layer fractions");
      double prev = 0.0;
      for (double f : layer_fractions) {
        if (!(f > 0.0 && f < 1.0)) throw std::invalid_argument("layer fraction outside (0,1)");
        if (!(f > prev)) throw std::invalid_argument("layer fractions must be strictly increasing");
        prev = f;
      }
    }
  }

  /// Fraction f taps the residual stream after block ceil(f * depth), 1-indexed.
  std::vector<int> tap_layers() const {
    std::vector<int> taps;
    const int depth = source->transformer.depth;
    for (double f : layer_fractions)
      taps.push_back(static_cast<int>(std::ceil(f * depth)));
    return taps;
  }

  int dim() const {
    if (kind == FeatureKind::kOneHot) {
      std::int64_t d = 1;
      for (int i = 0; i < gen_len; ++i) d *= vocab_size;
      return static_cast<int>(d);
    }
    return static_cast<int>(layer_fractions.size()) * source->transformer.width;
  }

  std::vector<int> block_offsets() const {
    std::vector<int> offs;
    if (kind == FeatureKind::kOneHot) {
      offs.push_back(0);
      return offs;
    }
    for (size_t i = 0; i < layer_fractions.size(); ++i)
      offs.push_back(static_cast<int>(i) * source->transformer.width);
    return offs;
  }
};

struct FeatureVector {
  VectorXd values;
  std::vector<int> block_offsets;
};

/// Mixed-radix index of a completion within V^G (first token most significant).
inline std::int64_t sequence_index(const Tokens& completion, int vocab_size) {
  std::int64_t idx = 0;
  for (Token t : completion) {
    if (t < 0 || t >= vocab_size) throw std::domain_error("token id out of vocab");
    idx = idx * vocab_size + t;
  }
  return idx;
}

inline FeatureVector embed(const FeatureMapSpec& spec, const TokenSequence& seq) {
  spec.validate();
  if (seq.tokens.empty()) throw std::domain_error("embed: empty sequence");
  if (seq.role != SeqRole::kConcatenated || seq.context_len < 0)
    throw std::invalid_argument("embed: expected a concatenated sequence with context length");

  if (spec.kind == FeatureKind::kOneHot) {
    const int g = seq.completion_len();
    if (g != spec.gen_len) throw std::invalid_argument("embed: completion length != spec G");
    Tokens completion(seq.tokens.begin() + seq.context_len, seq.tokens.end());
    FeatureVector out;
    out.values = VectorXd::Zero(spec.dim());
    out.values[static_cast<Eigen::Index>(sequence_index(completion, spec.vocab_size))] = 1.0;
    out.block_offsets = spec.block_offsets();
    return out;
  }

  const PolicyModel& src = *spec.source;
  if (static_cast<int>(seq.tokens.size()) > src.transformer.max_len)
    throw std::length_error("embed: sequence longer than feature network max_len");
  src.vocab.check(seq.tokens);
  std::vector<int> pos(seq.tokens.size());
  for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  std::vector<MatrixXd> taps;
  transformer_forward(src.transformer, src.vocab.size, src.params, seq.tokens, pos,
                      causal_mask(static_cast<Eigen::Index>(seq.tokens.size())), &taps);

  const int w = src.transformer.width;
  FeatureVector out;
  out.values.resize(spec.dim());
  out.block_offsets = spec.block_offsets();
  const auto layers = spec.tap_layers();
  for (size_t i = 0; i < layers.size(); ++i) {
    const MatrixXd& h = taps[static_cast<size_t>(layers[i] - 1)];
    VectorXd block;
    if (spec.pooling == Pooling::kLastToken) {
      block = h.row(h.rows() - 1).transpose();
    } else {
      // mean over completion positions only
      if (seq.completion_len() < 1) throw std::invalid_argument("embed: empty completion");
      block = h.middleRows(seq.context_len, seq.completion_len()).colwise().mean().transpose();
    }
    if (spec.block_normalize) {
      const double nrm = block.norm();
      if (nrm > 0.0) block /= nrm;  // zero blocks stay zero
    }
    out.values.segment(static_cast<Eigen::Index>(i) * w, w) = block;
  }
  return out;
}

inline std::vector<FeatureVector> embed_batch(const FeatureMapSpec& spec,
                                              const std::vector<TokenSequence>& seqs) {
  std::vector<FeatureVector> out;
  out.reserve(seqs.size());
  for (size_t i = 0; i < seqs.size(); ++i) {
    try {
      out.push_back(embed(spec, seqs[i]));
    } catch (const std::exception& e) {
      throw std::runtime_error("embed_batch element " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

/// Deep-copies `model` as a frozen feature network; later generator updates
/// cannot reach the snapshot.
inline FeatureMapSpec snapshot_feature_network(const PolicyModel& model,
                                               std::vector<double> fractions = {0.25, 0.50, 0.75},
                                               Pooling pooling = Pooling::kLastToken,
                                               bool block_normalize = true) {
  FeatureMapSpec spec;
  spec.kind = FeatureKind::kFrozenNetwork;
  spec.layer_fractions = std::move(fractions);
  spec.pooling = pooling;
  spec.block_normalize = block_normalize;
  spec.source = std::make_shared<PolicyModel>(model);
  spec.validate();
  return spec;
}

inline uint64_t feature_network_hash(const FeatureMapSpec& spec) {
  if (spec.kind != FeatureKind::kFrozenNetwork) return fnv1a64("one-hot");
  return model_hash(*spec.source);
}

/// JSON-lines dump: a header record with dimension and block offsets,
/// then one record per vector.
inline void dump_features(const std::string& path, const std::vector<FeatureVector>& vecs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  nlohmann::json header;
  header["dim"] = vecs.empty() ? 0 : static_cast<int>(vecs.front().values.size());
  header["block_offsets"] = vecs.empty() ? std::vector<int>{} : vecs.front().block_offsets;
  out << header.dump() << "\n";
  for (const auto& v : vecs) {
    nlohmann::json row;
    row["values"] = std::vector<double>(v.values.data(), v.values.data() + v.values.size());
    out << row.dump() << "\n";
  }
}

}  // namespace ebft
