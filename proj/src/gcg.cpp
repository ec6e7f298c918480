#include "stsopt/gcg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stsopt/error.hpp"
#include "stsopt/random.hpp"
#include "stsopt/rank_eval.hpp"

namespace stsopt {

namespace {

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) return false;
    for (std::size_t j = 1; j < len; ++j) {
      if ((static_cast<unsigned char>(s[i + j]) & 0xC0) != 0x80) return false;
    }
    i += len;
  }
  return true;
}

}  // namespace

PermutationMode parse_permutation_mode(const std::string& text) {
  if (text == "fixed") return PermutationMode::kFixed;
  if (text == "random") return PermutationMode::kRandom;
  throw Error(ErrorCode::kInvalidConfig, "permutation_mode must be fixed or random, got \"" + text + "\"");
}

std::string to_string(PermutationMode mode) { return mode == PermutationMode::kFixed ? "fixed" : "random"; }

TokenFilter parse_token_filter(const std::string& text) {
  if (text == "none") return TokenFilter::kNone;
  if (text == "printable") return TokenFilter::kPrintable;
  if (text == "ascii") return TokenFilter::kAscii;
  throw Error(ErrorCode::kInvalidConfig, "token_filter must be none, printable or ascii, got \"" + text + "\"");
}

std::string to_string(TokenFilter filter) {
  switch (filter) {
    case TokenFilter::kNone:
      return "none";
    case TokenFilter::kPrintable:
      return "printable";
    case TokenFilter::kAscii:
      break;
  }
  return "ascii";
}

void GcgConfig::validate(std::size_t vocab_size) const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, "gcg." + what); };
  if (sts_length < 1) fail("sts_length must be >= 1");
  if (top_k < 1 || top_k > vocab_size) fail("top_k must lie in [1, " + std::to_string(vocab_size) + "]");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (iterations < 1) fail("iterations must be >= 1");
  if (rank_eval_cadence < 1) fail("rank_eval_cadence must be >= 1");
  if (probe_max_new_tokens < 1) fail("probe_max_new_tokens must be >= 1");
}

nlohmann::ordered_json GcgConfig::to_json() const {
  nlohmann::ordered_json j;
  j["sts_length"] = sts_length;
  j["top_k"] = top_k;
  j["batch_size"] = batch_size;
  j["iterations"] = iterations;
  j["permutation_mode"] = to_string(permutation_mode);
  j["seed"] = seed;
  j["rank_eval_cadence"] = rank_eval_cadence;
  j["retain_current"] = effective_retain_current();
  j["token_filter"] = to_string(token_filter);
  j["probe_max_new_tokens"] = probe_max_new_tokens;
  return j;
}

nlohmann::ordered_json IterationRecord::to_json() const {
  nlohmann::ordered_json j;
  j["iteration"] = iteration;
  j["loss"] = loss;
  j["sts_token_ids"] = sts_token_ids;
  j["sts_text"] = sts_text;
  j["permutation_seed"] = permutation_seed;
  j["rank"] = rank ? nlohmann::ordered_json(*rank) : nlohmann::ordered_json(nullptr);
  return j;
}

IterationRecord IterationRecord::from_json(const nlohmann::json& j) {
  IterationRecord r;
  try {
    r.iteration = j.at("iteration").get<std::size_t>();
    r.loss = j.at("loss").get<double>();
    r.sts_token_ids = j.at("sts_token_ids").get<std::vector<TokenId>>();
    r.sts_text = j.at("sts_text").get<std::string>();
    r.permutation_seed = j.at("permutation_seed").get<std::uint64_t>();
    if (j.contains("rank") && !j.at("rank").is_null()) r.rank = j.at("rank").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kMalformedLine, e.what());
  }
  if (!std::isfinite(r.loss)) throw Error(ErrorCode::kMalformedLine, "non-finite loss");
  return r;
}

std::vector<TokenId> init_sts(std::size_t length, const Tokenizer& tokenizer) {
  if (length < 1) throw Error(ErrorCode::kInvalidLength, "STS length must be >= 1");
  std::optional<TokenId> star = tokenizer.piece_to_id("*");
  if (!star) {
    const auto ids = tokenizer.encode("*");
    if (ids.empty()) throw Error(ErrorCode::kInvalidLength, "tokenizer cannot encode \"*\"");
    star = ids.back();
  }
  return std::vector<TokenId>(length, *star);
}

std::vector<bool> allowed_tokens(const Tokenizer& tokenizer, TokenFilter filter) {
  const std::size_t v = tokenizer.vocab_size();
  std::vector<bool> allowed(v, false);
  for (std::size_t i = 0; i < v; ++i) {
    const auto id = static_cast<TokenId>(i);
    if (tokenizer.is_special(id)) continue;
    if (filter == TokenFilter::kNone) {
      allowed[i] = true;
      continue;
    }
    if (tokenizer.is_byte_fallback(id)) continue;
    const std::string text = tokenizer.token_text(id);
    if (text.empty() || !valid_utf8(text)) continue;
    bool ok = true;
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (c < 0x20 || c == 0x7F || c == '"' || c == '\\') ok = false;
      if (filter == TokenFilter::kAscii && c >= 0x80) ok = false;
    }
    allowed[i] = ok;
  }
  return allowed;
}

std::vector<std::vector<TokenId>> sample_candidates(const GradientMatrix& grad, std::span<const TokenId> current,
                                                    const GcgConfig& config, const std::vector<bool>& allowed,
                                                    std::mt19937_64& rng) {
  const auto L = static_cast<std::size_t>(grad.rows());
  const auto V = static_cast<std::size_t>(grad.cols());
  if (current.size() != L) {
    throw Error(ErrorCode::kLengthMismatch, "gradient has " + std::to_string(L) + " rows for an STS of " +
                                                std::to_string(current.size()) + " tokens");
  }
  if (allowed.size() != V) throw Error(ErrorCode::kLengthMismatch, "token filter does not match the vocabulary");

  std::vector<TokenId> ids;
  std::vector<std::pair<std::size_t, TokenId>> pool;
  for (std::size_t pos = 0; pos < L; ++pos) {
    ids.clear();
    for (std::size_t t = 0; t < V; ++t) {
      if (allowed[t]) ids.push_back(static_cast<TokenId>(t));
    }
    const auto row = grad.row(static_cast<Eigen::Index>(pos));
    const std::size_t k = std::min(config.top_k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                      [&row](TokenId a, TokenId b) { return row[a] != row[b] ? row[a] < row[b] : a < b; });
    for (std::size_t i = 0; i < k; ++i) {
      if (ids[i] != current[pos]) pool.emplace_back(pos, ids[i]);
    }
  }
  if (pool.empty()) throw Error(ErrorCode::kEmptyCandidatePool, "no allowed substitution tokens");

  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t take = pool.size();
  if (pool.size() > config.batch_size) {
    take = config.batch_size;
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, order.size() - 1);
      std::swap(order[i], order[pick(rng)]);
    }
  }

  std::vector<std::vector<TokenId>> out;
  out.reserve(take + 1);
  for (std::size_t i = 0; i < take; ++i) {
    const auto& [pos, tok] = pool[order[i]];
    std::vector<TokenId> cand(current.begin(), current.end());
    cand[pos] = tok;
    out.push_back(std::move(cand));
  }
  if (config.effective_retain_current()) out.emplace_back(current.begin(), current.end());
  return out;
}

GcgOptimizer::GcgOptimizer(const LanguageModel& model, PromptSpec spec, GcgConfig config)
    : model_(model), spec_(std::move(spec)), config_(std::move(config)) {
  config_.validate(model_.vocab_size());
  spec_.catalog.product(spec_.target_name);
  allowed_ = allowed_tokens(model_.tokenizer(), config_.token_filter);
}

Permutation GcgOptimizer::permutation_for(std::size_t iteration, std::uint64_t* seed_out) const {
  const std::size_t n = spec_.catalog.size();
  std::uint64_t seed = 0;
  Permutation perm = Permutation::identity(n);
  if (config_.permutation_mode == PermutationMode::kRandom) {
    seed = derive_seed(config_.seed, kPermutationStream, iteration);
    perm = Permutation::random(n, seed);
  }
  if (seed_out) *seed_out = seed;
  return perm;
}

AssembledPrompt GcgOptimizer::assemble(std::span<const TokenId> sts, const Permutation& perm) const {
  return build_prompt(spec_, sts, perm, model_.tokenizer(), model_.context_length());
}

GcgState GcgOptimizer::initial_state() const {
  GcgState state;
  state.sts = init_sts(config_.sts_length, model_.tokenizer());
  if (config_.permutation_mode == PermutationMode::kFixed) {
    state.loss = model_.target_loss(assemble(state.sts, permutation_for(0)));
  }
  return state;
}

StepResult GcgOptimizer::step(GcgState& state) const {
  const bool fixed = config_.permutation_mode == PermutationMode::kFixed;
  std::uint64_t perm_seed = 0;
  const Permutation perm = permutation_for(state.iteration, &perm_seed);
  AssembledPrompt prompt = assemble(state.sts, perm);

  const GradientMatrix grad = model_.token_gradients(prompt);
  std::mt19937_64 rng(derive_seed(config_.seed, kCandidateStream, state.iteration));
  std::vector<std::vector<TokenId>> candidates = sample_candidates(grad, state.sts, config_, allowed_, rng);

  std::vector<double> losses;
  const bool reuse_current_loss = config_.effective_retain_current() && fixed && state.loss.has_value();
  if (reuse_current_loss) {
    losses = model_.loss_batch(prompt, std::span(candidates).first(candidates.size() - 1));
    losses.push_back(*state.loss);
  } else {
    losses = model_.loss_batch(prompt, candidates);
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) {
    if (losses[i] < losses[best]) best = i;
  }

  state.sts = std::move(candidates[best]);
  state.loss = fixed ? std::optional<double>(losses[best]) : std::nullopt;

  StepResult result;
  result.record.iteration = state.iteration;
  result.record.loss = losses[best];
  result.record.sts_token_ids = state.sts;
  result.record.sts_text = model_.tokenizer().decode(state.sts);
  result.record.permutation_seed = perm_seed;
  result.prompt = prompt.with_sts(state.sts);
  ++state.iteration;
  return result;
}

std::size_t GcgOptimizer::probe_rank(const AssembledPrompt& prompt) const {
  SamplingParams greedy;
  greedy.temperature = 0.0;
  greedy.max_new_tokens = config_.probe_max_new_tokens;
  const std::string response = model_.generate(render_inference_prompt(prompt), greedy);
  const auto names = spec_.catalog.names();
  return parse_ranks(response, names, spec_.catalog.size()).rank_of(spec_.target_name);
}

OptTrajectory GcgOptimizer::run(const RecordCallback& on_record) const {
  OptTrajectory traj;
  traj.config = config_;
  GcgState state = initial_state();
  traj.initial_loss = state.loss ? *state.loss : model_.target_loss(assemble(state.sts, permutation_for(0)));
  traj.records.reserve(config_.iterations);
  for (std::size_t t = 0; t < config_.iterations; ++t) {
    StepResult res = step(state);
    if (t % config_.rank_eval_cadence == 0) res.record.rank = probe_rank(res.prompt);
    if (traj.records.empty() || res.record.loss < traj.best_loss) {
      traj.best_loss = res.record.loss;
      traj.best_sts = res.record.sts_token_ids;
    }
    traj.records.push_back(res.record);
    if (on_record) on_record(traj.records.back());
  }
  traj.final_sts = state.sts;
  return traj;
}

void IterationLogWriter::operator()(const IterationRecord& record) {
  out_ << record.to_json().dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << '\n';
  out_.flush();
}

}  // namespace stsopt
