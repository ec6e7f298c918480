#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stsopt/model.hpp"
#include "stsopt/prompt.hpp"

namespace stsopt {

enum class PermutationMode { kFixed, kRandom };
PermutationMode parse_permutation_mode(const std::string& text);
std::string to_string(PermutationMode mode);

/// Which vocabulary entries may enter the STS. Special tokens are always excluded.
///   none      - everything else
///   printable - no byte-fallback tokens, no control characters, no '"' or '\'
///   ascii     - printable and 7-bit only
enum class TokenFilter { kNone, kPrintable, kAscii };
TokenFilter parse_token_filter(const std::string& text);
std::string to_string(TokenFilter filter);

struct GcgConfig {
  std::size_t sts_length = 20;
  std::size_t top_k = 256;
  std::size_t batch_size = 256;
  std::size_t iterations = 2000;
  PermutationMode permutation_mode = PermutationMode::kFixed;
  std::uint64_t seed = 0;
  std::size_t rank_eval_cadence = 50;
  std::optional<bool> retain_current;  // unset: true in fixed mode, false in random mode
  TokenFilter token_filter = TokenFilter::kAscii;
  std::size_t probe_max_new_tokens = 128;

  bool effective_retain_current() const {
    return retain_current.value_or(permutation_mode == PermutationMode::kFixed);
  }
  /// Throws InvalidConfig naming the offending field.
  void validate(std::size_t vocab_size) const;
  nlohmann::ordered_json to_json() const;
};

struct IterationRecord {
  std::size_t iteration = 0;
  double loss = 0.0;
  std::vector<TokenId> sts_token_ids;
  std::string sts_text;
  std::uint64_t permutation_seed = 0;
  std::optional<std::size_t> rank;

  nlohmann::ordered_json to_json() const;
  static IterationRecord from_json(const nlohmann::json& j);  // throws MalformedLine
  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

struct OptTrajectory {
  std::vector<IterationRecord> records;
  double initial_loss = 0.0;  // loss of the dummy initialization
  std::vector<TokenId> final_sts;
  std::vector<TokenId> best_sts;
  double best_loss = 0.0;
  GcgConfig config;
};

/// L copies of the "*" token.
std::vector<TokenId> init_sts(std::size_t length, const Tokenizer& tokenizer);

/// allowed[id] for every vocabulary id.
std::vector<bool> allowed_tokens(const Tokenizer& tokenizer, TokenFilter filter);

/// Single-token substitutions of `current`. At each position the k allowed tokens with the
/// most negative gradient form the pool (the current token itself is skipped). Pools of at
/// most B substitutions are returned whole in position-major order; larger pools are sampled
/// without replacement. With retain_current the unchanged sequence is appended last.
std::vector<std::vector<TokenId>> sample_candidates(const GradientMatrix& grad, std::span<const TokenId> current,
                                                    const GcgConfig& config, const std::vector<bool>& allowed,
                                                    std::mt19937_64& rng);

struct GcgState {
  std::vector<TokenId> sts;
  std::size_t iteration = 0;
  /// Loss of `sts` on the fixed-order prompt, once known; lets fixed-mode steps skip
  /// re-evaluating the retained sequence.
  std::optional<double> loss;
};

struct StepResult {
  IterationRecord record;
  AssembledPrompt prompt;  // prompt the step was scored on, carrying the adopted STS
};

class GcgOptimizer {
 public:
  GcgOptimizer(const LanguageModel& model, PromptSpec spec, GcgConfig config);

  GcgState initial_state() const;
  Permutation permutation_for(std::size_t iteration, std::uint64_t* seed_out = nullptr) const;
  AssembledPrompt assemble(std::span<const TokenId> sts, const Permutation& perm) const;

  /// One iteration: build the prompt, take gradients, sample candidates, adopt the argmin
  /// (lowest index wins ties). Advances `state`.
  StepResult step(GcgState& state) const;
  /// Greedy generation on `prompt` and the target's parsed rank.
  std::size_t probe_rank(const AssembledPrompt& prompt) const;

  using RecordCallback = std::function<void(const IterationRecord&)>;
  OptTrajectory run(const RecordCallback& on_record = {}) const;

  const GcgConfig& config() const { return config_; }
  const PromptSpec& spec() const { return spec_; }

 private:
  const LanguageModel& model_;
  PromptSpec spec_;
  GcgConfig config_;
  std::vector<bool> allowed_;
};

/// Writes each record as one JSON line and flushes.
class IterationLogWriter {
 public:
  explicit IterationLogWriter(std::ostream& out) : out_(out) {}
  void operator()(const IterationRecord& record);

 private:
  std::ostream& out_;
};

}  // namespace stsopt
