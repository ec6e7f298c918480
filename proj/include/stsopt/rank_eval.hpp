#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "stsopt/model.hpp"
#include "stsopt/prompt.hpp"

namespace stsopt {

struct RankOutcome {
  std::map<std::string, std::size_t> ranks;
  std::string response_text;
  std::uint64_t permutation_seed = 0;
  bool sts_present = false;

  std::size_t rank_of(const std::string& name) const;  // throws UnknownProduct
};

/// Orders products by the first case-insensitive occurrence of their name; products never
/// mentioned get catalog_size + 1.
RankOutcome parse_ranks(std::string_view response, std::span<const std::string> product_names,
                        std::size_t catalog_size);

struct EvalConfig {
  std::size_t n_trials = 200;
  bool randomize_order = true;
  SamplingParams sampling{0.7, 256, 0};  // sampling.seed is unused; trial seeds derive from `seed`
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrialPair {
  RankOutcome without_sts;
  RankOutcome with_sts;
};

/// Called after each finished trial with (trials_done, n_trials).
using TrialProgress = std::function<void(std::size_t, std::size_t)>;

/// Paired inferences: within trial i both prompts share one catalog order and one sampling
/// seed, and differ only by the STS appended to the target's field.
std::vector<TrialPair> run_paired_trials(const PromptSpec& spec, std::string_view sts_text,
                                         const LanguageModel& model, const EvalConfig& config,
                                         const TrialProgress& progress = {});

enum class Outcome { kAdvantage, kNoAdvantage, kDisadvantage };

Outcome classify(std::size_t rank_without, std::size_t rank_with);
std::string to_string(Outcome outcome);
Outcome parse_outcome(std::string_view text);

struct TrialRow {
  std::size_t trial = 0;
  std::uint64_t permutation_seed = 0;
  std::size_t rank_without = 0;
  std::size_t rank_with = 0;
  Outcome outcome = Outcome::kNoAdvantage;

  friend bool operator==(const TrialRow&, const TrialRow&) = default;
};

std::vector<TrialRow> trial_rows(std::span<const TrialPair> pairs, const std::string& target_name);

struct AdvantageSummary {
  std::size_t n_trials = 0;
  double advantage_pct = 0.0;
  double no_advantage_pct = 0.0;
  double disadvantage_pct = 0.0;
  std::map<std::size_t, std::size_t> rank_histogram_with;
  std::map<std::size_t, std::size_t> rank_histogram_without;

  nlohmann::ordered_json to_json() const;
};

AdvantageSummary summarize(std::span<const TrialRow> rows);  // throws EmptyInput

void write_trials_csv(const std::filesystem::path& path, std::span<const TrialRow> rows);
std::string trials_csv(std::span<const TrialRow> rows);
/// Throws MalformedLine (with line number) on a bad header or row.
std::vector<TrialRow> parse_trials_csv(std::string_view text);
std::vector<TrialRow> read_trials_csv(const std::filesystem::path& path);

}  // namespace stsopt
