#include "stsopt/model.hpp"

#include <cmath>
#include <random>

#include "stsopt/error.hpp"

namespace stsopt {

namespace {

Eigen::VectorXd log_softmax(const Eigen::VectorXd& row) {
  double m = row.maxCoeff();
  double lse = m + std::log((row.array() - m).exp().sum());
  return row.array() - lse;
}

TokenId argmax(const Eigen::VectorXd& v) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

}  // namespace

double mean_cross_entropy(const Eigen::MatrixXd& logits, std::span<const TokenId> targets) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::VectorXd lp = log_softmax(logits.row(r).transpose());
    total -= lp[targets[static_cast<std::size_t>(r)]];
  }
  return total / static_cast<double>(logits.rows());
}

Eigen::MatrixXd mean_cross_entropy_grad(const Eigen::MatrixXd& logits, std::span<const TokenId> targets) {
  Eigen::MatrixXd grad(logits.rows(), logits.cols());
  const double scale = 1.0 / static_cast<double>(logits.rows());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::VectorXd p = log_softmax(logits.row(r).transpose()).array().exp();
    p[targets[static_cast<std::size_t>(r)]] -= 1.0;
    grad.row(r) = scale * p.transpose();
  }
  return grad;
}

std::vector<TokenId> LanguageModel::special_ids() const {
  std::vector<TokenId> out;
  const auto& tok = tokenizer();
  for (std::size_t i = 0; i < tok.vocab_size(); ++i) {
    if (tok.is_special(static_cast<TokenId>(i))) out.push_back(static_cast<TokenId>(i));
  }
  return out;
}

void LanguageModel::check_fits(std::size_t n_tokens) const {
  if (n_tokens > context_length()) {
    throw Error(ErrorCode::kContextOverflow, std::to_string(n_tokens) + " tokens exceed context length " +
                                                 std::to_string(context_length()));
  }
}

double LanguageModel::target_loss(const AssembledPrompt& prompt) const { return target_loss(prompt, {}); }

double LanguageModel::target_loss(const AssembledPrompt& prompt, std::span<const EmbeddingDelta> deltas) const {
  check_fits(prompt.tokens.size());
  const TokenSlice t = prompt.target_slice;
  if (t.empty() || t.begin == 0) throw Error(ErrorCode::kInvalidLength, "target slice must be non-empty and preceded by context");
  Eigen::MatrixXd rows = logits(prompt.tokens, t.begin - 1, t.end - 1, deltas);
  return mean_cross_entropy(rows, prompt.target());
}

GradientMatrix LanguageModel::token_gradients(const AssembledPrompt& prompt) const {
  check_fits(prompt.tokens.size());
  const TokenSlice t = prompt.target_slice;
  if (t.empty() || t.begin == 0) throw Error(ErrorCode::kInvalidLength, "target slice must be non-empty and preceded by context");
  auto targets = prompt.target();
  Eigen::MatrixXd embedding_grad = input_gradient(
      prompt.tokens, t.begin - 1, t.end - 1,
      [targets](const Eigen::MatrixXd& rows) { return mean_cross_entropy_grad(rows, targets); }, prompt.sts_slice);
  return project_to_vocab(embedding_grad);
}

std::vector<double> LanguageModel::loss_batch(const AssembledPrompt& prompt,
                                              std::span<const std::vector<TokenId>> candidates) const {
  check_fits(prompt.tokens.size());
  for (const auto& c : candidates) {
    if (c.size() != prompt.sts_slice.size()) {
      throw Error(ErrorCode::kLengthMismatch, "candidate of length " + std::to_string(c.size()) +
                                                  " for STS of length " + std::to_string(prompt.sts_slice.size()));
    }
  }
  return candidate_losses(prompt, candidates);
}

std::vector<double> LanguageModel::candidate_losses(const AssembledPrompt& prompt,
                                                    std::span<const std::vector<TokenId>> candidates) const {
  std::vector<double> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) out.push_back(target_loss(prompt.with_sts(c)));
  return out;
}

std::vector<TokenId> LanguageModel::generate_ids(std::span<const TokenId> prompt, const SamplingParams& params) const {
  if (params.max_new_tokens < 1) throw Error(ErrorCode::kInvalidLength, "max_new_tokens must be >= 1");
  if (params.temperature < 0.0) throw Error(ErrorCode::kInvalidConfig, "temperature must be non-negative");
  check_fits(prompt.size() + params.max_new_tokens);

  auto session = start_session(prompt);
  std::mt19937_64 rng(params.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto eos = tokenizer().eos_id();
  std::vector<TokenId> out;
  for (std::size_t step = 0; step < params.max_new_tokens; ++step) {
    Eigen::VectorXd l = session->next_logits();
    TokenId next;
    if (params.temperature == 0.0) {
      next = argmax(l);
    } else {
      Eigen::VectorXd p = log_softmax(l / params.temperature).array().exp();
      double u = unit(rng);
      double acc = 0.0;
      next = static_cast<TokenId>(p.size() - 1);
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        acc += p[i];
        if (u < acc) {
          next = static_cast<TokenId>(i);
          break;
        }
      }
    }
    if (eos && next == *eos) break;
    out.push_back(next);
    if (step + 1 < params.max_new_tokens) session->append(next);
  }
  return out;
}

std::string LanguageModel::generate(std::span<const TokenId> prompt, const SamplingParams& params) const {
  auto ids = generate_ids(prompt, params);
  return tokenizer().decode(ids);
}

}  // namespace stsopt
