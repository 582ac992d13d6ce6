#pragma once

// Synthetic training corpus: byte sequences from a fixed-seed sparse Markov
// chain. Token 0 is a beginning-of-sequence marker; the chain runs over
// tokens 1..vocab-1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "bitnet_a48/model.hpp"

namespace ba48 {

struct Batch {
  TokenBatch inputs;
  std::vector<std::int32_t> targets;  // next token for every input position
};

class MarkovSource {
 public:
  static constexpr std::int32_t kBos = 0;

  MarkovSource(std::size_t vocab, std::size_t successors, std::uint64_t seed)
      : vocab_(vocab), successors_(successors) {
    require(vocab >= 3, "markov source: vocabulary too small");
    require(successors >= 1 && successors < vocab - 1, "markov source: bad successor count");
    std::mt19937_64 rng(seed);
    std::vector<std::int32_t> states(vocab - 1);
    for (std::size_t i = 0; i < states.size(); ++i) states[i] = static_cast<std::int32_t>(i + 1);
    std::exponential_distribution<double> expo(1.0);
    next_.resize(vocab);
    cdf_.resize(vocab);
    for (std::size_t s = 1; s < vocab; ++s) {
      std::shuffle(states.begin(), states.end(), rng);
      next_[s].assign(states.begin(), states.begin() + static_cast<std::ptrdiff_t>(successors));
      std::vector<double> w(successors);
      double total = 0.0;
      for (double& x : w) total += (x = expo(rng));
      double acc = 0.0;
      for (double x : w) cdf_[s].push_back(acc += x / total);
      cdf_[s].back() = 1.0;
    }
  }

  std::size_t vocab() const { return vocab_; }

  std::int32_t step(std::int32_t state, std::mt19937_64& rng) const {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const auto& c = cdf_[static_cast<std::size_t>(state)];
    const auto it = std::lower_bound(c.begin(), c.end(), u);
    return next_[static_cast<std::size_t>(state)][static_cast<std::size_t>(it - c.begin())];
  }

  /// Per-token entropy (nats) of the chain under its stationary distribution.
  double entropy_rate() const {
    std::vector<double> pi(vocab_, 1.0 / static_cast<double>(vocab_ - 1));
    pi[0] = 0.0;
    for (int it = 0; it < 500; ++it) {
      std::vector<double> nxt(vocab_, 0.0);
      for (std::size_t s = 1; s < vocab_; ++s)
        for (std::size_t k = 0; k < successors_; ++k)
          nxt[static_cast<std::size_t>(next_[s][k])] += pi[s] * prob(s, k);
      pi.swap(nxt);
    }
    double h = 0.0;
    for (std::size_t s = 1; s < vocab_; ++s)
      for (std::size_t k = 0; k < successors_; ++k) {
        const double p = prob(s, k);
        if (p > 0) h -= pi[s] * p * std::log(p);
      }
    return h;
  }

 private:
  double prob(std::size_t s, std::size_t k) const {
    return cdf_[s][k] - (k == 0 ? 0.0 : cdf_[s][k - 1]);
  }

  std::size_t vocab_, successors_;
  std::vector<std::vector<std::int32_t>> next_;
  std::vector<std::vector<double>> cdf_;
};

/// Deterministic stream of batches drawn from a MarkovSource.
class DataStream {
 public:
  DataStream(MarkovSource source, std::size_t batch, std::size_t seq, std::uint64_t seed)
      : source_(std::move(source)), batch_(batch), seq_(seq), rng_(seed) {
    require(batch > 0 && seq > 0, "data stream: batch and seq must be positive");
  }

  Batch next() {
    Batch b;
    b.inputs.batch = batch_;
    b.inputs.seq = seq_;
    b.inputs.ids.resize(batch_ * seq_);
    b.targets.resize(batch_ * seq_);
    std::uniform_int_distribution<std::int32_t> first(1, static_cast<std::int32_t>(source_.vocab()) - 1);
    for (std::size_t i = 0; i < batch_; ++i) {
      std::int32_t tok = MarkovSource::kBos;
      for (std::size_t s = 0; s < seq_; ++s) {
        b.inputs.ids[i * seq_ + s] = tok;
        const std::int32_t nxt = tok == MarkovSource::kBos ? first(rng_) : source_.step(tok, rng_);
        b.targets[i * seq_ + s] = nxt;
        tok = nxt;
      }
    }
    return b;
  }

  const MarkovSource& source() const { return source_; }
  std::size_t batch() const { return batch_; }
  std::size_t seq() const { return seq_; }

 private:
  MarkovSource source_;
  std::size_t batch_, seq_;
  std::mt19937_64 rng_;
};

}  // namespace ba48
