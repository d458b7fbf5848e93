// SPDX-License-Identifier: Apache-2.0
#pragma once

// Small autoregressive softmax policy.
//
//   context  = embeddings of the last `context` tokens of [BOS, o_1 .. o_{t-1}],
//              left padded with PAD
//   hidden   = tanh(W_ctx * context + b_hidden + W_prompt * features)
//   logits   = W_out * hidden + b_out
//   log pi   = log_softmax(logits / temperature)

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "aspo/diffcore.hpp"
#include "aspo/error.hpp"
#include "aspo/rng.hpp"

namespace aspo {

/// Token ids: digits 0-9 map to themselves, then two operator symbols and
/// the three specials.
struct Vocabulary {
  static constexpr int size = 16;
  static constexpr int plus = 10;
  static constexpr int equals = 11;
  static constexpr int separator = 12;
  static constexpr int bos = 13;
  static constexpr int eos = 14;
  static constexpr int pad = 15;

  static constexpr bool is_digit(int id) { return id >= 0 && id <= 9; }
  static constexpr bool valid(int id) { return id >= 0 && id < size; }
};

struct PolicyShape {
  std::size_t vocab = Vocabulary::size;
  std::size_t embed_dim = 8;
  std::size_t context = 4;
  std::size_t hidden = 32;
  std::size_t features = 40;

  std::size_t context_width() const { return context * embed_dim; }
  friend bool operator==(const PolicyShape&, const PolicyShape&) = default;
};

/// All parameters in one flat buffer; tensors are contiguous row-major blocks
/// in declaration order (token_embedding, hidden_weight, prompt_weight,
/// hidden_bias, output_weight, output_bias).
class PolicyParams {
 public:
  enum Tensor : std::size_t { token_embedding, hidden_weight, prompt_weight, hidden_bias, output_weight, output_bias, count };

  PolicyParams() : PolicyParams(PolicyShape{}) {}
  explicit PolicyParams(const PolicyShape& shape) : shape_(shape) {
    std::size_t off = 0;
    for (std::size_t t = 0; t < count; ++t) {
      offsets_[t] = off;
      off += tensor_shape(static_cast<Tensor>(t)).size();
    }
    data_.assign(off, 0.0);
  }

  /// Uniform in [-0.1, 0.1] from `seed`.
  static PolicyParams init(const PolicyShape& shape, std::uint64_t seed) {
    PolicyParams p(shape);
    Rng rng(derive_seed({seed, 0x706f6c696379ULL}));
    for (auto& v : p.data_) v = rng.uniform(-0.1, 0.1);
    return p;
  }

  const PolicyShape& shape() const { return shape_; }

  diff::Shape tensor_shape(Tensor t) const {
    const auto& s = shape_;
    switch (t) {
      case token_embedding: return diff::Shape::matrix(s.vocab, s.embed_dim);
      case hidden_weight: return diff::Shape::matrix(s.hidden, s.context_width());
      case prompt_weight: return diff::Shape::matrix(s.hidden, s.features);
      case hidden_bias: return diff::Shape::vector(s.hidden);
      case output_weight: return diff::Shape::matrix(s.vocab, s.hidden);
      case output_bias: return diff::Shape::vector(s.vocab);
      default: return {};
    }
  }

  std::span<double> tensor(Tensor t) { return {data_.data() + offsets_[t], tensor_shape(t).size()}; }
  std::span<const double> tensor(Tensor t) const { return {data_.data() + offsets_[t], tensor_shape(t).size()}; }
  std::size_t offset(Tensor t) const { return offsets_[t]; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  std::size_t size() const { return data_.size(); }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const PolicyParams& a, const PolicyParams& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  PolicyShape shape_;
  std::array<std::size_t, count> offsets_{};
  std::vector<double> data_;
};

struct SampledResponse {
  std::uint64_t prompt_id = 0;
  std::vector<int> tokens;
  std::vector<double> log_probs;
  bool truncated = false;
};

/// Ids of the context window for predicting position `t` of `generated`.
inline std::vector<int> context_window(std::span<const int> generated, std::size_t t, std::size_t k) {
  std::vector<int> ctx(k, Vocabulary::pad);
  // Sequence seen so far is [BOS, generated[0], ..., generated[t-1]].
  for (std::size_t j = 0; j < k; ++j) {
    const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(k) + static_cast<std::ptrdiff_t>(j);
    if (pos == -1) ctx[j] = Vocabulary::bos;
    else if (pos >= 0) ctx[j] = generated[static_cast<std::size_t>(pos)];
  }
  return ctx;
}

/// Exact Shannon entropy (nats) of a distribution given as log-probabilities.
inline double entropy_of(std::span<const double> log_probs) {
  double h = 0.0;
  for (double lp : log_probs) {
    const double p = std::exp(lp);
    if (p > 0.0) h -= p * lp;
  }
  return h;
}

/// Graph-free forward evaluation. Uses the same kernels as the differentiable
/// path, so both produce bit-identical log-probabilities.
class PolicyEvaluator {
 public:
  PolicyEvaluator(const PolicyParams& params, std::span<const double> features)
      : params_(params), shape_(params.shape()), prompt_term_(shape_.hidden), ctx_(shape_.context_width()),
        pre_(shape_.hidden), hidden_(shape_.hidden), logits_(shape_.vocab) {
    if (features.size() != shape_.features) {
      throw Error(ErrorCode::shape_mismatch, "prompt features of width " + std::to_string(features.size()));
    }
    diff::kernels::affine(params.tensor(PolicyParams::prompt_weight), shape_.hidden, shape_.features, features, {},
                          prompt_term_);
  }

  /// log pi(. | prefix) at `temperature` into `out` (size vocab).
  void next_log_probs(std::span<const int> generated, std::size_t t, double temperature, std::span<double> out) {
    const auto ids = context_window(generated, t, shape_.context);
    const auto emb = params_.tensor(PolicyParams::token_embedding);
    for (std::size_t j = 0; j < ids.size(); ++j) {
      const auto id = static_cast<std::size_t>(ids[j]);
      if (id >= shape_.vocab) throw Error(ErrorCode::out_of_range, "token id " + std::to_string(ids[j]));
      std::memcpy(ctx_.data() + j * shape_.embed_dim, emb.data() + id * shape_.embed_dim,
                  shape_.embed_dim * sizeof(double));
    }
    diff::kernels::affine(params_.tensor(PolicyParams::hidden_weight), shape_.hidden, shape_.context_width(), ctx_,
                          params_.tensor(PolicyParams::hidden_bias), pre_);
    for (std::size_t i = 0; i < shape_.hidden; ++i) pre_[i] = pre_[i] + prompt_term_[i];
    diff::kernels::tanh(pre_, hidden_);
    diff::kernels::affine(params_.tensor(PolicyParams::output_weight), shape_.vocab, shape_.hidden, hidden_,
                          params_.tensor(PolicyParams::output_bias), logits_);
    for (auto& z : logits_) z = z / temperature;
    diff::kernels::log_softmax(logits_, out);
  }

 private:
  const PolicyParams& params_;
  PolicyShape shape_;
  std::vector<double> prompt_term_, ctx_, pre_, hidden_, logits_;
};

/// Parameter leaves of one graph.
struct PolicyVars {
  std::array<diff::Var, PolicyParams::count> tensors;

  const diff::Var& operator[](PolicyParams::Tensor t) const { return tensors[t]; }
};

/// Copies `params` into `tape` as trainable leaves.
inline PolicyVars bind(diff::Tape& tape, const PolicyParams& params) {
  PolicyVars v;
  for (std::size_t t = 0; t < PolicyParams::count; ++t) {
    const auto tensor = static_cast<PolicyParams::Tensor>(t);
    const auto span = params.tensor(tensor);
    v.tensors[t] = tape.leaf(std::vector<double>(span.begin(), span.end()), params.tensor_shape(tensor));
  }
  return v;
}

/// Per-position differentiable outputs for one response.
struct ResponseLogProbs {
  std::vector<diff::Var> token;         // log pi(o_t | q, o_<t), scalar
  std::vector<diff::Var> distribution;  // full log pi(. | q, o_<t), vector
};

/// Differentiable log pi(o_t | q, o_<t) for every position of `tokens`.
inline ResponseLogProbs log_probs(diff::Tape& tape, const PolicyVars& vars, const PolicyShape& shape,
                                  std::span<const double> features, std::span<const int> tokens,
                                  double temperature = 1.0) {
  if (tokens.empty()) throw Error(ErrorCode::invalid_argument, "log_probs of an empty response");
  if (features.size() != shape.features) throw Error(ErrorCode::shape_mismatch, "prompt feature width");
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= shape.vocab) {
      throw Error(ErrorCode::out_of_range, "token id " + std::to_string(id));
    }
  }
  const diff::Var feat = tape.constant(std::vector<double>(features.begin(), features.end()));
  const diff::Var prompt_term = diff::affine(vars[PolicyParams::prompt_weight], feat);
  const diff::Var temp = tape.constant(temperature);

  ResponseLogProbs out;
  out.token.reserve(tokens.size());
  out.distribution.reserve(tokens.size());
  std::vector<diff::Var> parts(shape.context);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const auto ids = context_window(tokens, t, shape.context);
    for (std::size_t j = 0; j < ids.size(); ++j) {
      parts[j] = diff::row(vars[PolicyParams::token_embedding], static_cast<std::size_t>(ids[j]));
    }
    const diff::Var ctx = diff::concat(parts);
    const diff::Var pre =
        diff::affine(vars[PolicyParams::hidden_weight], ctx, vars[PolicyParams::hidden_bias]) + prompt_term;
    const diff::Var hidden = diff::tanh(pre);
    const diff::Var logits =
        diff::affine(vars[PolicyParams::output_weight], hidden, vars[PolicyParams::output_bias]) / temp;
    const diff::Var dist = diff::log_softmax(logits);
    out.distribution.push_back(dist);
    out.token.push_back(diff::pick(dist, static_cast<std::size_t>(tokens[t])));
  }
  return out;
}

/// Value-only log-probabilities of `tokens`.
inline std::vector<double> token_log_probs(const PolicyParams& params, std::span<const double> features,
                                           std::span<const int> tokens, double temperature = 1.0) {
  PolicyEvaluator eval(params, features);
  std::vector<double> dist(params.shape().vocab), out;
  out.reserve(tokens.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    eval.next_log_probs(tokens, t, temperature, dist);
    out.push_back(dist.at(static_cast<std::size_t>(tokens[t])));
  }
  return out;
}

/// Autoregressive categorical sampling at `temperature`. Recorded log-probs
/// belong to the tempered distribution actually sampled from.
inline SampledResponse sample(const PolicyParams& params, std::span<const double> features, std::size_t max_len,
                              double temperature, std::uint64_t seed, std::uint64_t prompt_id = 0) {
  if (max_len < 1) throw Error(ErrorCode::invalid_argument, "max_len must be >= 1");
  if (!(temperature > 0.0)) throw Error(ErrorCode::invalid_argument, "temperature must be positive");
  PolicyEvaluator eval(params, features);
  Rng rng(seed);
  SampledResponse r;
  r.prompt_id = prompt_id;
  std::vector<double> dist(params.shape().vocab);
  r.truncated = true;
  for (std::size_t t = 0; t < max_len; ++t) {
    eval.next_log_probs(r.tokens, t, temperature, dist);
    double total = 0.0;
    for (double lp : dist) total += std::exp(lp);
    const double u = rng.uniform() * total;
    double cum = 0.0;
    std::size_t chosen = dist.size() - 1;
    for (std::size_t v = 0; v < dist.size(); ++v) {
      cum += std::exp(dist[v]);
      if (u < cum) {
        chosen = v;
        break;
      }
    }
    // Never select a zero-probability token through rounding at the tail.
    while (chosen > 0 && std::exp(dist[chosen]) == 0.0) --chosen;
    r.tokens.push_back(static_cast<int>(chosen));
    r.log_probs.push_back(dist[chosen]);
    if (static_cast<int>(chosen) == Vocabulary::eos) {
      r.truncated = false;
      break;
    }
  }
  return r;
}

/// Entropy (nats) of the next-token distribution after `prefix`.
inline double step_entropy(const PolicyParams& params, std::span<const double> features, std::span<const int> prefix,
                           double temperature = 1.0) {
  PolicyEvaluator eval(params, features);
  std::vector<double> dist(params.shape().vocab);
  eval.next_log_probs(prefix, prefix.size(), temperature, dist);
  return entropy_of(dist);
}

// ---------------------------------------------------------------------------
// Persistence
//
// Little-endian binary layout:
//   8 bytes  magic "ASPOPRM\0"
//   u32      format version (1)
//   u32 x 5  vocab, embed_dim, context, hidden, features
//   u64      parameter count
//   f64 x n  flat parameters in tensor order

namespace detail {

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error(ErrorCode::io_error, "unexpected end of file");
  return v;
}

inline constexpr char params_magic[8] = {'A', 'S', 'P', 'O', 'P', 'R', 'M', '\0'};

}  // namespace detail

inline constexpr std::uint32_t params_format_version = 1;

inline void write_params(std::ostream& os, const PolicyParams& p) {
  os.write(detail::params_magic, 8);
  detail::write_pod(os, params_format_version);
  const auto& s = p.shape();
  for (auto d : {s.vocab, s.embed_dim, s.context, s.hidden, s.features}) {
    detail::write_pod(os, static_cast<std::uint32_t>(d));
  }
  detail::write_pod(os, static_cast<std::uint64_t>(p.size()));
  os.write(reinterpret_cast<const char*>(p.flat().data()), static_cast<std::streamsize>(p.size() * sizeof(double)));
}

inline PolicyParams read_params(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, detail::params_magic, 8) != 0) throw Error(ErrorCode::io_error, "not a parameter file");
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != params_format_version) {
    throw Error(ErrorCode::io_error, "unsupported parameter format version " + std::to_string(version));
  }
  PolicyShape s;
  s.vocab = detail::read_pod<std::uint32_t>(is);
  s.embed_dim = detail::read_pod<std::uint32_t>(is);
  s.context = detail::read_pod<std::uint32_t>(is);
  s.hidden = detail::read_pod<std::uint32_t>(is);
  s.features = detail::read_pod<std::uint32_t>(is);
  PolicyParams p(s);
  const auto n = detail::read_pod<std::uint64_t>(is);
  if (n != p.size()) throw Error(ErrorCode::io_error, "parameter count does not match shape");
  is.read(reinterpret_cast<char*>(p.flat().data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw Error(ErrorCode::io_error, "truncated parameter file");
  return p;
}

inline void save_params(const std::string& path, const PolicyParams& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error(ErrorCode::io_error, "cannot open " + path + " for writing");
  write_params(os, p);
  if (!os) throw Error(ErrorCode::io_error, "failed writing " + path);
}

inline PolicyParams load_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorCode::io_error, "cannot open " + path);
  return read_params(is);
}

}  // namespace aspo
