#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "stsopt/model.hpp"

namespace stsopt {

struct MockModelOptions {
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t context_length = 4096;
  std::uint64_t seed = 7;
  /// Zero output layer: every next-token distribution is uniform.
  bool uniform_output = false;
  /// Rigging: after the last occurrence of `script_trigger`, position j additionally gets
  /// `script_strength` on the logit of script[j]. Lets tests force an exact continuation.
  std::vector<TokenId> script;
  TokenId script_trigger = -1;
  double script_strength = 60.0;
};

/// Small differentiable causal model with seed-derived parameters: token embedding plus
/// sinusoidal position, one causal softmax-attention mixing layer with residual, a tanh
/// hidden layer, and a vocabulary projection. Computes in double precision.
class MockModel final : public LanguageModel {
 public:
  MockModel(std::shared_ptr<const Tokenizer> tokenizer, MockModelOptions options = {});

  const Tokenizer& tokenizer() const override { return *tokenizer_; }
  std::size_t vocab_size() const override { return tokenizer_->vocab_size(); }
  std::size_t context_length() const override { return options_.context_length; }
  std::string backend_id() const override { return "mock"; }
  std::size_t embedding_dim() const override { return options_.embed_dim; }

  Eigen::MatrixXd logits(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                         std::span<const EmbeddingDelta> deltas = {}) const override;
  std::unique_ptr<DecodeSession> start_session(std::span<const TokenId> prompt) const override;

  const Eigen::MatrixXd& embeddings() const { return embed_; }

 protected:
  Eigen::MatrixXd input_gradient(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                 const LogitsGradFn& head, TokenSlice wrt) const override;
  Eigen::MatrixXd project_to_vocab(const Eigen::MatrixXd& embedding_rows) const override;
  std::vector<double> candidate_losses(const AssembledPrompt& prompt,
                                       std::span<const std::vector<TokenId>> candidates) const override;

 private:
  friend class MockDecodeSession;

  Eigen::RowVectorXd position_row(std::size_t t) const;
  Eigen::RowVectorXd input_row(TokenId token, std::size_t t) const;
  void check_tokens(std::span<const TokenId> tokens) const;
  /// Head from the mixed vector z: tanh(z W1 + b1) U + c, plus rigging.
  Eigen::RowVectorXd head(const Eigen::RowVectorXd& z, std::span<const TokenId> tokens, std::size_t t,
                          Eigen::RowVectorXd* hidden = nullptr) const;

  std::shared_ptr<const Tokenizer> tokenizer_;
  MockModelOptions options_;
  Eigen::MatrixXd embed_;  // V x d
  Eigen::MatrixXd wq_, wk_, wv_;  // d x d
  Eigen::MatrixXd w1_;  // d x m
  Eigen::RowVectorXd b1_;
  Eigen::MatrixXd out_;  // m x V
  Eigen::RowVectorXd out_bias_;
};

}  // namespace stsopt
