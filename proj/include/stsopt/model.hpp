#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stsopt/prompt.hpp"
#include "stsopt/tokenizer.hpp"

namespace stsopt {

/// L x V; row i holds d(target loss)/d(one-hot indicator at STS position i).
using GradientMatrix = Eigen::MatrixXd;

struct SamplingParams {
  double temperature = 0.0;  // 0 selects greedy decoding
  std::size_t max_new_tokens = 256;
  std::uint64_t seed = 0;
};

/// Additive perturbation of one input-embedding row; lets callers evaluate the model on the
/// continuous relaxation of the one-hot input.
struct EmbeddingDelta {
  std::size_t position = 0;
  Eigen::VectorXd delta;
};

/// Incremental decoding state over a growing token sequence.
class DecodeSession {
 public:
  virtual ~DecodeSession() = default;
  /// Logits for the token following everything appended so far.
  virtual Eigen::VectorXd next_logits() = 0;
  virtual void append(TokenId token) = 0;
};

/// Causal language model contract shared by all backends.
///
/// A handle serves one in-flight call at a time: backends keep scratch buffers, so concurrent
/// callers need separate handles or their own serialization. No call mutates model
/// parameters.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual const Tokenizer& tokenizer() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t context_length() const = 0;
  virtual std::string backend_id() const = 0;
  virtual std::size_t embedding_dim() const = 0;

  std::vector<TokenId> special_ids() const;

  /// Logit rows for positions [begin, end); row r predicts tokens[begin + r + 1].
  virtual Eigen::MatrixXd logits(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                 std::span<const EmbeddingDelta> deltas = {}) const = 0;

  /// Mean cross-entropy of the target tokens given everything before them.
  double target_loss(const AssembledPrompt& prompt) const;
  /// Same loss with perturbed input embeddings (finite-difference probes).
  double target_loss(const AssembledPrompt& prompt, std::span<const EmbeddingDelta> deltas) const;

  /// Gradient of target_loss with respect to the one-hot rows of the STS slice.
  GradientMatrix token_gradients(const AssembledPrompt& prompt) const;

  /// target_loss with the STS replaced by each candidate, in order.
  std::vector<double> loss_batch(const AssembledPrompt& prompt,
                                 std::span<const std::vector<TokenId>> candidates) const;

  std::vector<TokenId> generate_ids(std::span<const TokenId> prompt, const SamplingParams& params) const;
  std::string generate(std::span<const TokenId> prompt, const SamplingParams& params) const;

  virtual std::unique_ptr<DecodeSession> start_session(std::span<const TokenId> prompt) const = 0;

 protected:
  using LogitsGradFn = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& logits)>;

  /// Runs the forward pass for logit rows [begin, end), asks `head` for d(loss)/d(logits), and
  /// returns d(loss)/d(input embedding) for positions in `wrt` (wrt.size() x embedding_dim()).
  virtual Eigen::MatrixXd input_gradient(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                         const LogitsGradFn& head, TokenSlice wrt) const = 0;
  /// rows * E^T, mapping embedding-space gradients onto the vocabulary.
  virtual Eigen::MatrixXd project_to_vocab(const Eigen::MatrixXd& embedding_rows) const = 0;
  /// Losses of candidates that differ from `prompt` only in the STS slice. The default runs
  /// target_loss per candidate.
  virtual std::vector<double> candidate_losses(const AssembledPrompt& prompt,
                                               std::span<const std::vector<TokenId>> candidates) const;

  void check_fits(std::size_t n_tokens) const;
};

/// Mean over rows of -log softmax(logits.row(r))[targets[r]].
double mean_cross_entropy(const Eigen::MatrixXd& logits, std::span<const TokenId> targets);
/// Gradient of mean_cross_entropy with respect to the logits.
Eigen::MatrixXd mean_cross_entropy_grad(const Eigen::MatrixXd& logits, std::span<const TokenId> targets);

}  // namespace stsopt
