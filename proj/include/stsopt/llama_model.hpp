#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "stsopt/llama_transformer.hpp"
#include "stsopt/model.hpp"

namespace stsopt {

enum class Precision { kFloat32, kFloat64 };

Precision parse_precision(const std::string& name);  // "f32"/"float32"/"f64"/"float64"
std::string to_string(Precision p);

/// Reads config.json. Rejects architectures the transformer does not implement (biases,
/// non-SiLU activations, rope scaling).
LlamaConfig parse_llama_config(const nlohmann::json& config);

/// Open-weights backend: a Hugging Face style model directory holding config.json,
/// tokenizer.json and model.safetensors (or a sharded index).
class LlamaModel final : public LanguageModel {
 public:
  static std::unique_ptr<LlamaModel> load(const std::filesystem::path& dir, Precision precision = Precision::kFloat32);
  ~LlamaModel() override;

  const Tokenizer& tokenizer() const override { return *tokenizer_; }
  std::size_t vocab_size() const override;
  std::size_t context_length() const override;
  std::string backend_id() const override;
  std::size_t embedding_dim() const override;

  Eigen::MatrixXd logits(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                         std::span<const EmbeddingDelta> deltas = {}) const override;
  std::unique_ptr<DecodeSession> start_session(std::span<const TokenId> prompt) const override;

  const LlamaConfig& config() const;

 protected:
  Eigen::MatrixXd input_gradient(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                 const LogitsGradFn& head, TokenSlice wrt) const override;
  Eigen::MatrixXd project_to_vocab(const Eigen::MatrixXd& embedding_rows) const override;
  std::vector<double> candidate_losses(const AssembledPrompt& prompt,
                                       std::span<const std::vector<TokenId>> candidates) const override;

 private:
  struct Impl;
  template <typename Scalar>
  struct ImplT;

  LlamaModel() = default;
  void check_tokens(std::span<const TokenId> tokens) const;

  std::shared_ptr<const Tokenizer> tokenizer_;
  std::unique_ptr<Impl> impl_;
  Precision precision_ = Precision::kFloat32;
};

}  // namespace stsopt
