#pragma once

// Softmax sequence policies over a small vocabulary.
//
// A context is (prompt id, generated prefix). Tabular policies keep one logit
// row per context, with unseen contexts reading as all-zero logits (uniform).
// Linear policies map a context to a few hashed binary features and compute
// logits = W^T x with W of shape features x vocab.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "uecrl/error.hpp"
#include "uecrl/random.hpp"

namespace uecrl {

using Token = std::uint16_t;
using TokenSeq = std::vector<Token>;
using PromptId = std::uint32_t;

inline constexpr int kMaxVocab = 16;
inline constexpr int kMaxLength = 8;

struct ContextKey {
  PromptId prompt_id = 0;
  TokenSeq prefix;

  friend bool operator==(const ContextKey&, const ContextKey&) = default;
  friend auto operator<=>(const ContextKey&, const ContextKey&) = default;
};

struct ContextKeyHash {
  std::size_t operator()(const ContextKey& key) const noexcept {
    std::uint64_t h = mix64(key.prompt_id) ^ (0x51ed27ULL + key.prefix.size());
    for (Token t : key.prefix) h = mix64(h ^ (static_cast<std::uint64_t>(t) + 0x9e37ULL));
    return static_cast<std::size_t>(h);
  }
};

enum class PolicyKind { tabular, linear };

inline const char* to_string(PolicyKind kind) {
  return kind == PolicyKind::tabular ? "tabular" : "linear";
}

/// Hashes prompt id, last token and last two tokens into a fixed number of
/// binary features. Identified by strings of the form "hash2x<N>".
class HashedFeaturizer {
 public:
  static constexpr std::size_t kActive = 3;

  explicit HashedFeaturizer(std::string id = "hash2x256") : id_(std::move(id)) {
    constexpr std::string_view prefix = "hash2x";
    if (id_.rfind(prefix, 0) != 0) throw InvalidArgument("unknown featurizer id '" + id_ + "'");
    const char* first = id_.data() + prefix.size();
    const char* last = id_.data() + id_.size();
    auto [ptr, ec] = std::from_chars(first, last, n_features_);
    if (ec != std::errc{} || ptr != last || n_features_ < 1 || n_features_ > (1u << 20)) {
      throw InvalidArgument("unknown featurizer id '" + id_ + "'");
    }
  }

  const std::string& id() const noexcept { return id_; }
  std::size_t n_features() const noexcept { return n_features_; }

  std::array<std::size_t, kActive> active(const ContextKey& ctx) const noexcept {
    constexpr std::uint64_t kNone = 0xffffULL;
    const std::size_t n = ctx.prefix.size();
    const std::uint64_t last1 = n >= 1 ? ctx.prefix[n - 1] : kNone;
    const std::uint64_t last2 = n >= 2 ? ctx.prefix[n - 2] : kNone;
    return {
        static_cast<std::size_t>(derive_seed(ctx.prompt_id, {0}) % n_features_),
        static_cast<std::size_t>(derive_seed(ctx.prompt_id, {1, last1}) % n_features_),
        static_cast<std::size_t>(derive_seed(ctx.prompt_id, {2, last1, last2}) % n_features_),
    };
  }

 private:
  std::string id_;
  std::size_t n_features_ = 0;
};

using LogitTable = std::unordered_map<ContextKey, std::vector<double>, ContextKeyHash>;

/// A direction in parameter space with the same layout as PolicyParams.
struct PolicyGradient {
  PolicyKind kind = PolicyKind::tabular;
  int vocab_size = 0;
  LogitTable rows;              // tabular
  std::vector<double> weights;  // linear, row-major features x vocab

  double dot(const PolicyGradient& other) const {
    double s = 0.0;
    if (kind == PolicyKind::tabular) {
      for (const auto& [ctx, row] : rows) {
        auto it = other.rows.find(ctx);
        if (it == other.rows.end()) continue;
        for (std::size_t a = 0; a < row.size(); ++a) s += row[a] * it->second[a];
      }
    } else {
      for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * other.weights[i];
    }
    return s;
  }

  double squared_norm() const { return dot(*this); }

  /// Entry lookup; missing tabular rows read as zero.
  double entry(const ContextKey& ctx, Token token) const {
    auto it = rows.find(ctx);
    return it == rows.end() ? 0.0 : it->second[token];
  }

  void add_scaled(const PolicyGradient& other, double scale) {
    if (kind == PolicyKind::tabular) {
      for (const auto& [ctx, row] : other.rows) {
        auto& dst = rows.try_emplace(ctx, std::vector<double>(vocab_size, 0.0)).first->second;
        for (std::size_t a = 0; a < row.size(); ++a) dst[a] += scale * row[a];
      }
    } else {
      for (std::size_t i = 0; i < weights.size(); ++i) weights[i] += scale * other.weights[i];
    }
  }
};

class PolicyParams {
 public:
  static PolicyParams tabular(int vocab_size) {
    PolicyParams p(PolicyKind::tabular, vocab_size);
    return p;
  }

  static PolicyParams linear(int vocab_size, const std::string& featurizer_id = "hash2x256") {
    PolicyParams p(PolicyKind::linear, vocab_size);
    p.featurizer_ = HashedFeaturizer(featurizer_id);
    p.weights_.assign(p.featurizer_->n_features() * static_cast<std::size_t>(vocab_size), 0.0);
    return p;
  }

  PolicyKind kind() const noexcept { return kind_; }
  int vocab_size() const noexcept { return vocab_; }
  std::string featurizer_id() const { return featurizer_ ? featurizer_->id() : std::string("none"); }
  const HashedFeaturizer& featurizer() const {
    if (!featurizer_) throw InvalidArgument("tabular policy has no featurizer");
    return *featurizer_;
  }

  std::vector<double> logits(const ContextKey& ctx) const {
    if (kind_ == PolicyKind::tabular) {
      auto it = table_.find(ctx);
      if (it == table_.end()) return std::vector<double>(vocab_, 0.0);
      return it->second;
    }
    std::vector<double> out(vocab_, 0.0);
    for (std::size_t f : featurizer_->active(ctx)) {
      const double* w = &weights_[f * vocab_];
      for (int a = 0; a < vocab_; ++a) out[a] += w[a];
    }
    return out;
  }

  // Tabular access.
  const LogitTable& table() const noexcept { return table_; }
  std::vector<double>& mutable_row(const ContextKey& ctx) {
    require(PolicyKind::tabular, "mutable_row");
    return table_.try_emplace(ctx, std::vector<double>(vocab_, 0.0)).first->second;
  }
  void set_row(const ContextKey& ctx, std::vector<double> row) {
    require(PolicyKind::tabular, "set_row");
    if (static_cast<int>(row.size()) != vocab_) throw InvalidArgument("set_row: wrong row length");
    table_[ctx] = std::move(row);
  }

  // Linear access.
  const std::vector<double>& weights() const noexcept { return weights_; }
  std::vector<double>& mutable_weights() {
    require(PolicyKind::linear, "mutable_weights");
    return weights_;
  }

  PolicyGradient zero_gradient() const {
    PolicyGradient g;
    g.kind = kind_;
    g.vocab_size = vocab_;
    if (kind_ == PolicyKind::linear) g.weights.assign(weights_.size(), 0.0);
    return g;
  }

  /// grad += scale * d(logits at ctx) chain-ruled into parameter space.
  void accumulate(PolicyGradient& grad, const ContextKey& ctx, std::span<const double> dlogits,
                  double scale) const {
    if (kind_ == PolicyKind::tabular) {
      auto& row = grad.rows.try_emplace(ctx, std::vector<double>(vocab_, 0.0)).first->second;
      for (int a = 0; a < vocab_; ++a) row[a] += scale * dlogits[a];
      return;
    }
    for (std::size_t f : featurizer_->active(ctx)) {
      double* w = &grad.weights[f * vocab_];
      for (int a = 0; a < vocab_; ++a) w[a] += scale * dlogits[a];
    }
  }

  /// params += step * grad
  void apply(const PolicyGradient& grad, double step) {
    if (grad.kind != kind_ || grad.vocab_size != vocab_) {
      throw InvalidArgument("gradient layout does not match parameters");
    }
    if (kind_ == PolicyKind::tabular) {
      for (const auto& [ctx, row] : grad.rows) {
        auto& dst = mutable_row(ctx);
        for (int a = 0; a < vocab_; ++a) dst[a] += step * row[a];
      }
    } else {
      for (std::size_t i = 0; i < weights_.size(); ++i) weights_[i] += step * grad.weights[i];
    }
  }

  bool all_finite() const {
    auto finite = [](const std::vector<double>& v) {
      return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
    };
    if (!finite(weights_)) return false;
    return std::all_of(table_.begin(), table_.end(), [&](const auto& kv) { return finite(kv.second); });
  }

  friend bool operator==(const PolicyParams& a, const PolicyParams& b) {
    return a.kind_ == b.kind_ && a.vocab_ == b.vocab_ && a.featurizer_id() == b.featurizer_id() &&
           a.table_ == b.table_ && a.weights_ == b.weights_;
  }

 private:
  PolicyParams(PolicyKind kind, int vocab_size) : kind_(kind), vocab_(vocab_size) {
    if (vocab_size < 2 || vocab_size > kMaxVocab) {
      throw InvalidArgument("vocab_size must be in [2, " + std::to_string(kMaxVocab) + "]");
    }
  }

  void require(PolicyKind k, const char* what) const {
    if (kind_ != k) throw InvalidArgument(std::string(what) + ": wrong policy kind");
  }

  PolicyKind kind_;
  int vocab_;
  std::optional<HashedFeaturizer> featurizer_;
  LogitTable table_;
  std::vector<double> weights_;
};

/// softmax(logits / temperature), computed with max subtraction.
inline std::vector<double> softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidArgument("temperature must be positive and finite");
  }
  double mx = -INFINITY;
  for (double z : logits) {
    if (!std::isfinite(z)) throw CorruptState("non-finite logit");
    mx = std::max(mx, z);
  }
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t a = 0; a < logits.size(); ++a) {
    p[a] = std::exp((logits[a] - mx) / temperature);
    sum += p[a];
  }
  for (double& x : p) x /= sum;
  return p;
}

/// log softmax(logits / temperature).
inline std::vector<double> log_softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidArgument("temperature must be positive and finite");
  }
  double mx = -INFINITY;
  for (double z : logits) {
    if (!std::isfinite(z)) throw CorruptState("non-finite logit");
    mx = std::max(mx, z);
  }
  double sum = 0.0;
  for (double z : logits) sum += std::exp((z - mx) / temperature);
  const double lse = std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t a = 0; a < logits.size(); ++a) out[a] = (logits[a] - mx) / temperature - lse;
  return out;
}

inline std::vector<double> action_distribution(const PolicyParams& params, const ContextKey& ctx,
                                               double temperature) {
  const auto z = params.logits(ctx);
  return softmax(z, temperature);
}

/// Shannon entropy in nats with 0 log 0 = 0.
inline double token_entropy(std::span<const double> dist) {
  double total = 0.0;
  for (double p : dist) {
    if (p < 0.0 || !std::isfinite(p)) throw InvalidArgument("token_entropy: negative or non-finite entry");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("token_entropy: distribution does not sum to 1");
  double h = 0.0;
  for (double p : dist) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::max(h, 0.0);
}

struct SamplingOptions {
  double temperature = 1.0;
  double top_p = 1.0;
};

struct SampledSequence {
  TokenSeq tokens;
  std::vector<double> logprobs;     // under the sampling distribution
  std::vector<double> logprobs_t1;  // plain softmax, temperature 1
  std::vector<double> entropy_t1;   // entropy of the temperature-1 distribution per step
};

namespace detail {

/// Keeps the smallest prefix of tokens (by descending probability, ties by
/// index) whose mass reaches top_p, renormalized.
inline std::vector<double> nucleus(std::vector<double> p, double top_p) {
  if (top_p >= 1.0) return p;
  if (!(top_p > 0.0)) throw InvalidArgument("top_p must be in (0, 1]");
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size() && mass < top_p) mass += p[order[keep++]];
  for (std::size_t i = keep; i < order.size(); ++i) p[order[i]] = 0.0;
  for (double& x : p) x /= mass;
  return p;
}

inline Token draw(std::span<const double> p, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t a = 0; a < p.size(); ++a) {
    acc += p[a];
    if (u < acc) return static_cast<Token>(a);
  }
  for (std::size_t a = p.size(); a-- > 0;) {
    if (p[a] > 0.0) return static_cast<Token>(a);
  }
  throw InternalError("draw: empty distribution");
}

}  // namespace detail

/// Samples until the terminal token is emitted or max_len tokens exist.
inline SampledSequence sample_sequence(const PolicyParams& params, PromptId prompt_id,
                                       const SamplingOptions& opts, int max_len,
                                       std::optional<Token> terminal, Rng& rng) {
  if (max_len < 1) throw InvalidArgument("max_len must be >= 1");
  SampledSequence out;
  ContextKey ctx{prompt_id, {}};
  for (int step = 0; step < max_len; ++step) {
    const auto z = params.logits(ctx);
    const auto p1 = softmax(z, 1.0);
    std::vector<double> pb = opts.temperature == 1.0 ? p1 : softmax(z, opts.temperature);
    pb = detail::nucleus(std::move(pb), opts.top_p);
    const Token tok = detail::draw(pb, rng);
    out.tokens.push_back(tok);
    out.logprobs.push_back(std::log(pb[tok]));
    out.logprobs_t1.push_back(std::log(p1[tok]));
    out.entropy_t1.push_back(token_entropy(p1));
    if (terminal && tok == *terminal) break;
    ctx.prefix.push_back(tok);
  }
  return out;
}

/// Sum over steps of log softmax(logits / temperature)[token].
inline double sequence_logprob(const PolicyParams& params, PromptId prompt_id,
                               std::span<const Token> tokens, double temperature) {
  if (tokens.empty()) throw InvalidArgument("sequence_logprob: empty token sequence");
  ContextKey ctx{prompt_id, {}};
  double total = 0.0;
  for (Token t : tokens) {
    if (t >= params.vocab_size()) throw InvalidArgument("sequence_logprob: token out of vocabulary");
    const auto z = params.logits(ctx);
    total += log_softmax(z, temperature)[t];
    ctx.prefix.push_back(t);
  }
  return total;
}

/// Gradient of log pi(token | ctx) at temperature 1.
inline PolicyGradient grad_logprob(const PolicyParams& params, const ContextKey& ctx, Token token) {
  if (token >= params.vocab_size()) throw InvalidArgument("grad_logprob: token out of vocabulary");
  auto d = action_distribution(params, ctx, 1.0);
  for (double& x : d) x = -x;
  d[token] += 1.0;
  PolicyGradient g = params.zero_gradient();
  params.accumulate(g, ctx, d, 1.0);
  return g;
}

}  // namespace uecrl
