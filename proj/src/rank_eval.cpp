#include "stsopt/rank_eval.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "stsopt/error.hpp"
#include "stsopt/random.hpp"

namespace stsopt {

namespace {

std::string lower_ascii(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(c >= 'A' && c <= 'Z' ? c - 'A' + 'a' : c);
  });
  return out;
}

constexpr std::string_view kCsvHeader = "trial,permutation_seed,rank_without,rank_with,outcome";

}  // namespace

std::size_t RankOutcome::rank_of(const std::string& name) const {
  auto it = ranks.find(name);
  if (it == ranks.end()) throw Error(ErrorCode::kUnknownProduct, "no rank for \"" + name + "\"");
  return it->second;
}

RankOutcome parse_ranks(std::string_view response, std::span<const std::string> product_names,
                        std::size_t catalog_size) {
  const std::string haystack = lower_ascii(response);
  struct Hit {
    std::size_t pos;
    std::size_t order;
  };
  std::vector<Hit> hits;
  std::set<std::string> seen;
  RankOutcome out;
  out.response_text = std::string(response);
  for (std::size_t i = 0; i < product_names.size(); ++i) {
    const std::string& name = product_names[i];
    if (name.empty()) throw Error(ErrorCode::kInvalidConfig, "empty product name");
    if (!seen.insert(lower_ascii(name)).second) throw Error(ErrorCode::kDuplicateName, name);
    const std::size_t pos = haystack.find(lower_ascii(name));
    if (pos == std::string::npos) {
      out.ranks[name] = catalog_size + 1;
    } else {
      hits.push_back({pos, i});
    }
  }
  // Equal positions only arise when one name is a prefix of another; list order decides then.
  std::sort(hits.begin(), hits.end(),
            [](const Hit& a, const Hit& b) { return a.pos != b.pos ? a.pos < b.pos : a.order < b.order; });
  for (std::size_t r = 0; r < hits.size(); ++r) out.ranks[product_names[hits[r].order]] = r + 1;
  return out;
}

void EvalConfig::validate() const {
  if (n_trials < 1) throw Error(ErrorCode::kInvalidConfig, "eval.n_trials must be >= 1");
  if (sampling.temperature < 0.0) throw Error(ErrorCode::kInvalidConfig, "eval.temperature must be >= 0");
  if (sampling.max_new_tokens < 1) throw Error(ErrorCode::kInvalidConfig, "eval.max_new_tokens must be >= 1");
}

std::vector<TrialPair> run_paired_trials(const PromptSpec& spec, std::string_view sts_text,
                                         const LanguageModel& model, const EvalConfig& config,
                                         const TrialProgress& progress) {
  config.validate();
  spec.catalog.product(spec.target_name);
  const Catalog injected = inject_sts(spec.catalog, spec.target_name, spec.field, sts_text);
  const std::vector<std::string> names = spec.catalog.names();
  const std::size_t n = spec.catalog.size();

  std::vector<TrialPair> pairs;
  pairs.reserve(config.n_trials);
  for (std::size_t trial = 0; trial < config.n_trials; ++trial) {
    const std::uint64_t perm_seed = config.randomize_order ? derive_seed(config.seed, kPermutationStream, trial) : 0;
    const Permutation perm = config.randomize_order ? Permutation::random(n, perm_seed) : Permutation::identity(n);
    SamplingParams sampling = config.sampling;
    sampling.seed = derive_seed(config.seed, kSamplingStream, trial);

    auto infer = [&](const Catalog& catalog, bool sts_present) {
      const std::string text = render_prompt_text(spec.chat, permute(catalog, perm));
      const std::vector<TokenId> tokens = model.tokenizer().encode(text);
      RankOutcome outcome = parse_ranks(model.generate(tokens, sampling), names, n);
      outcome.permutation_seed = perm_seed;
      outcome.sts_present = sts_present;
      return outcome;
    };
    TrialPair pair;
    pair.without_sts = infer(spec.catalog, false);
    pair.with_sts = infer(injected, true);
    pairs.push_back(std::move(pair));
    if (progress) progress(trial + 1, config.n_trials);
  }
  return pairs;
}

Outcome classify(std::size_t rank_without, std::size_t rank_with) {
  if (rank_with < rank_without) return Outcome::kAdvantage;
  if (rank_with > rank_without) return Outcome::kDisadvantage;
  return Outcome::kNoAdvantage;
}

std::string to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::kAdvantage:
      return "advantage";
    case Outcome::kDisadvantage:
      return "disadvantage";
    case Outcome::kNoAdvantage:
      break;
  }
  return "none";
}

Outcome parse_outcome(std::string_view text) {
  if (text == "advantage") return Outcome::kAdvantage;
  if (text == "none") return Outcome::kNoAdvantage;
  if (text == "disadvantage") return Outcome::kDisadvantage;
  throw Error(ErrorCode::kMalformedLine, "unknown outcome \"" + std::string(text) + "\"");
}

std::vector<TrialRow> trial_rows(std::span<const TrialPair> pairs, const std::string& target_name) {
  std::vector<TrialRow> rows;
  rows.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    TrialRow row;
    row.trial = i;
    row.permutation_seed = pairs[i].without_sts.permutation_seed;
    row.rank_without = pairs[i].without_sts.rank_of(target_name);
    row.rank_with = pairs[i].with_sts.rank_of(target_name);
    row.outcome = classify(row.rank_without, row.rank_with);
    rows.push_back(row);
  }
  return rows;
}

AdvantageSummary summarize(std::span<const TrialRow> rows) {
  if (rows.empty()) throw Error(ErrorCode::kEmptyInput, "no trials to summarize");
  AdvantageSummary s;
  s.n_trials = rows.size();
  std::size_t adv = 0, none = 0, dis = 0;
  for (const TrialRow& row : rows) {
    switch (classify(row.rank_without, row.rank_with)) {
      case Outcome::kAdvantage:
        ++adv;
        break;
      case Outcome::kNoAdvantage:
        ++none;
        break;
      case Outcome::kDisadvantage:
        ++dis;
        break;
    }
    ++s.rank_histogram_with[row.rank_with];
    ++s.rank_histogram_without[row.rank_without];
  }
  const auto n = static_cast<double>(s.n_trials);
  s.advantage_pct = 100.0 * static_cast<double>(adv) / n;
  s.no_advantage_pct = 100.0 * static_cast<double>(none) / n;
  s.disadvantage_pct = 100.0 * static_cast<double>(dis) / n;
  return s;
}

nlohmann::ordered_json AdvantageSummary::to_json() const {
  auto histogram = [](const std::map<std::size_t, std::size_t>& h) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [rank, count] : h) j[std::to_string(rank)] = count;
    return j;
  };
  nlohmann::ordered_json j;
  j["n_trials"] = n_trials;
  j["advantage_pct"] = advantage_pct;
  j["no_advantage_pct"] = no_advantage_pct;
  j["disadvantage_pct"] = disadvantage_pct;
  j["rank_histogram_with"] = histogram(rank_histogram_with);
  j["rank_histogram_without"] = histogram(rank_histogram_without);
  return j;
}

std::string trials_csv(std::span<const TrialRow> rows) {
  std::ostringstream out;
  out << kCsvHeader << '\n';
  for (const TrialRow& r : rows) {
    out << r.trial << ',' << r.permutation_seed << ',' << r.rank_without << ',' << r.rank_with << ','
        << to_string(r.outcome) << '\n';
  }
  return out.str();
}

void write_trials_csv(const std::filesystem::path& path, std::span<const TrialRow> rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << trials_csv(rows);
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

std::vector<TrialRow> parse_trials_csv(std::string_view text) {
  std::vector<TrialRow> rows;
  std::size_t line_number = 0;
  bool header_seen = false;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    auto fail = [&](const std::string& what) {
      throw Error(ErrorCode::kMalformedLine, "line " + std::to_string(line_number) + ": " + what);
    };
    if (!header_seen) {
      if (line != kCsvHeader) fail("expected header \"" + std::string(kCsvHeader) + "\"");
      header_seen = true;
      continue;
    }
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    while (true) {
      std::size_t comma = line.find(',', start);
      cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (cells.size() != 5) fail("expected 5 columns, found " + std::to_string(cells.size()));
    auto number = [&](std::string_view cell, const char* column) {
      std::uint64_t v = 0;
      auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) {
        fail(std::string("bad ") + column + " \"" + std::string(cell) + "\"");
      }
      return v;
    };
    TrialRow row;
    row.trial = number(cells[0], "trial");
    row.permutation_seed = number(cells[1], "permutation_seed");
    row.rank_without = number(cells[2], "rank_without");
    row.rank_with = number(cells[3], "rank_with");
    try {
      row.outcome = parse_outcome(cells[4]);
    } catch (const Error& e) {
      fail(e.what());
    }
    if (row.rank_without < 1 || row.rank_with < 1) fail("ranks start at 1");
    if (row.outcome != classify(row.rank_without, row.rank_with)) fail("outcome disagrees with the ranks");
    rows.push_back(row);
  }
  if (!header_seen) throw Error(ErrorCode::kMalformedLine, "line 1: empty trials file");
  return rows;
}

std::vector<TrialRow> read_trials_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_trials_csv(buf.str());
}

}  // namespace stsopt
