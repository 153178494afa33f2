#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "adaptime/autodiff.hpp"
#include "adaptime/sequence.hpp"

namespace adaptime {

// Diagonal-Gaussian posterior per token: w ~ N(mu, diag(sigma^2)) with
// sigma = softplus(rho) stored as a standard deviation.
class VariationalEmbedding {
 public:
  VariationalEmbedding() = default;
  VariationalEmbedding(std::size_t vocab_size, std::size_t dim, double prior_sigma,
                       std::uint64_t seed);

  std::size_t vocab_size() const { return mu_.value.rows(); }
  std::size_t dim() const { return mu_.value.cols(); }
  double prior_sigma() const { return prior_sigma_; }

  Parameter& mu() { return mu_; }
  Parameter& rho() { return rho_; }
  const Parameter& mu() const { return mu_; }
  const Parameter& rho() const { return rho_; }

  double sigma(Token token, std::size_t j) const;

  // det of the diagonal precision matrix, prod_j sigma_j^-2, via the log domain.
  double token_log_precision(Token token) const;
  double token_precision(Token token) const;

  // w_i = mu[token_i] + sigma[token_i] * noise_i; noise is len(tokens) x dim.
  Var sample(Tape& tape, std::span<const Token> tokens, const Tensor& noise);
  Var sample(Tape& tape, std::span<const Token> tokens, const Tensor& noise) const;

  // Untaped convenience: draws noise from `noise_seed`.
  Tensor sample_embeddings(std::span<const Token> tokens, std::uint64_t noise_seed) const;

  // Sum over tokens and coordinates of KL(N(mu, sigma^2) || N(0, prior^2)).
  Var kl_to_prior(Tape& tape);
  double kl_to_prior() const;

 private:
  template <typename Self>
  static Var sample_impl(Self& self, Tape& tape, std::span<const Token> tokens,
                         const Tensor& noise);

  void check_token(Token token) const;

  Parameter mu_;
  Parameter rho_;
  double prior_sigma_ = 1.0;
};

class DeterministicEmbedding {
 public:
  DeterministicEmbedding() = default;
  DeterministicEmbedding(std::size_t vocab_size, std::size_t dim, std::uint64_t seed);
  explicit DeterministicEmbedding(Tensor weights);

  std::size_t vocab_size() const { return weights_.value.rows(); }
  std::size_t dim() const { return weights_.value.cols(); }

  Parameter& weights() { return weights_; }
  const Parameter& weights() const { return weights_; }

  Var lookup(Tape& tape, std::span<const Token> tokens) { return gather_rows(bind(tape, weights_), tokens); }
  Var lookup(Tape& tape, std::span<const Token> tokens) const {
    return gather_rows(bind(tape, weights_), tokens);
  }

 private:
  Parameter weights_;
};

// rho such that softplus(rho) == sigma.
double inverse_softplus(double sigma);

}  // namespace adaptime
