#include "adaptime/embedding.hpp"

#include <cmath>
#include <string>

#include "adaptime/error.hpp"
#include "adaptime/random.hpp"

namespace adaptime {

namespace {

constexpr double kInitMeanStd = 0.1;

// log(softplus(x)); softplus(x) ~ exp(x) far in the negative tail.
double log_softplus(double x) { return x < -30.0 ? x : std::log(stable_softplus(x)); }

Tensor gaussian_matrix(std::size_t rows, std::size_t cols, double stddev, std::uint64_t seed) {
  Tensor t = standard_normal(rows, cols, seed);
  for (double& v : t.data()) v *= stddev;
  return t;
}

}  // namespace

double inverse_softplus(double sigma) {
  if (!(sigma > 0.0)) fail(ErrorKind::kRange, "inverse_softplus: sigma must be positive");
  return sigma > 30.0 ? sigma + std::log(-std::expm1(-sigma)) : std::log(std::expm1(sigma));
}

VariationalEmbedding::VariationalEmbedding(std::size_t vocab_size, std::size_t dim,
                                           double prior_sigma, std::uint64_t seed)
    : prior_sigma_(prior_sigma) {
  if (!(prior_sigma > 0.0)) {
    fail(ErrorKind::kConfig, "variational embedding: prior_sigma must be positive, got " +
                                 std::to_string(prior_sigma));
  }
  mu_ = Parameter("embedding.mu", gaussian_matrix(vocab_size, dim, kInitMeanStd, seed));
  rho_ = Parameter("embedding.rho",
                   Tensor(Shape{vocab_size, dim}, inverse_softplus(0.5 * prior_sigma)));
}

void VariationalEmbedding::check_token(Token token) const {
  if (token >= vocab_size()) {
    fail(ErrorKind::kRange, "embedding: token " + std::to_string(token) +
                                " out of range for vocabulary of " + std::to_string(vocab_size()));
  }
}

double VariationalEmbedding::sigma(Token token, std::size_t j) const {
  check_token(token);
  return stable_softplus(rho_.value(token, j));
}

double VariationalEmbedding::token_log_precision(Token token) const {
  check_token(token);
  double log_sigma_sum = 0.0;
  for (std::size_t j = 0; j < dim(); ++j) log_sigma_sum += log_softplus(rho_.value(token, j));
  return -2.0 * log_sigma_sum;
}

double VariationalEmbedding::token_precision(Token token) const {
  return std::exp(token_log_precision(token));
}

template <typename Self>
Var VariationalEmbedding::sample_impl(Self& self, Tape& tape, std::span<const Token> tokens,
                                      const Tensor& noise) {
  if (noise.rank() != 2 || noise.rows() != tokens.size() || noise.cols() != self.dim()) {
    fail(ErrorKind::kShape, "sample_embeddings: noise shape " + shape_string(noise.shape()) +
                                " does not match " + std::to_string(tokens.size()) + "x" +
                                std::to_string(self.dim()));
  }
  const Var means = gather_rows(bind(tape, self.mu_), tokens);
  const Var sigmas = softplus(gather_rows(bind(tape, self.rho_), tokens));
  return means + sigmas * tape.constant(noise);
}

Var VariationalEmbedding::sample(Tape& tape, std::span<const Token> tokens, const Tensor& noise) {
  return sample_impl(*this, tape, tokens, noise);
}

Var VariationalEmbedding::sample(Tape& tape, std::span<const Token> tokens,
                                 const Tensor& noise) const {
  return sample_impl(*this, tape, tokens, noise);
}

Tensor VariationalEmbedding::sample_embeddings(std::span<const Token> tokens,
                                               std::uint64_t noise_seed) const {
  Tape tape;
  return sample(tape, tokens, standard_normal(tokens.size(), dim(), noise_seed)).value();
}

Var VariationalEmbedding::kl_to_prior(Tape& tape) {
  const double p2 = prior_sigma_ * prior_sigma_;
  const Var mu = tape.parameter(mu_);
  const Var sigma = softplus(tape.parameter(rho_));
  const Var per_entry = (sigma * sigma + mu * mu) * (0.5 / p2) - log(sigma);
  const double n = static_cast<double>(mu_.value.size());
  return sum(per_entry) + n * (std::log(prior_sigma_) - 0.5);
}

double VariationalEmbedding::kl_to_prior() const {
  const double p2 = prior_sigma_ * prior_sigma_;
  const auto mu = mu_.value.data();
  const auto rho = rho_.value.data();
  double total = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double s = stable_softplus(rho[i]);
    total += std::log(prior_sigma_) - log_softplus(rho[i]) + (s * s + mu[i] * mu[i]) / (2.0 * p2) - 0.5;
  }
  return total;
}

DeterministicEmbedding::DeterministicEmbedding(std::size_t vocab_size, std::size_t dim,
                                               std::uint64_t seed)
    : weights_("embedding.weights", gaussian_matrix(vocab_size, dim, kInitMeanStd, seed)) {}

DeterministicEmbedding::DeterministicEmbedding(Tensor weights)
    : weights_("embedding.weights", std::move(weights)) {}

}  // namespace adaptime
