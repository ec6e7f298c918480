#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "stsopt/error.hpp"
#include "stsopt/gcg.hpp"
#include "stsopt/random.hpp"
#include "stsopt/tokenizer.hpp"
#include "test_support.hpp"

namespace stsopt {
namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kIo;
}

GradientMatrix random_grad(std::size_t L, std::size_t V, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  GradientMatrix g(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(V));
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n(rng);
  return g;
}

GcgConfig small_config() {
  GcgConfig c;
  c.sts_length = 6;
  c.top_k = 8;
  c.batch_size = 16;
  c.iterations = 5;
  c.rank_eval_cadence = 2;
  c.probe_max_new_tokens = 24;
  return c;
}

TEST(InitSts, RepeatsTheStarToken) {
  auto ascii = CharTokenizer::printable_ascii();
  const auto sts = init_sts(20, *ascii);
  EXPECT_EQ(sts.size(), 20u);
  EXPECT_EQ(ascii->decode(sts), std::string(20, '*'));
  EXPECT_EQ(init_sts(1, *ascii).size(), 1u);
  EXPECT_EQ(code_of([&] { init_sts(0, *ascii); }), ErrorCode::kInvalidLength);

  auto bpe = SentencePieceBpeTokenizer::from_file(testing::tiny_llama_dir() / "tokenizer.json");
  const auto b = init_sts(20, *bpe);
  EXPECT_EQ(std::set<TokenId>(b.begin(), b.end()).size(), 1u);
  EXPECT_EQ(bpe->decode(b), std::string(20, '*'));
}

TEST(AllowedTokens, FiltersSpecialsControlAndQuotes) {
  auto ascii = CharTokenizer::printable_ascii();
  for (TokenFilter f : {TokenFilter::kNone, TokenFilter::kPrintable, TokenFilter::kAscii}) {
    const auto allowed = allowed_tokens(*ascii, f);
    for (TokenId s = 0; s < 4; ++s) EXPECT_FALSE(allowed[static_cast<std::size_t>(s)]);
  }
  const auto allowed = allowed_tokens(*ascii, TokenFilter::kAscii);
  EXPECT_FALSE(allowed[static_cast<std::size_t>(*ascii->piece_to_id("\""))]);
  EXPECT_FALSE(allowed[static_cast<std::size_t>(*ascii->piece_to_id("\\"))]);
  EXPECT_FALSE(allowed[static_cast<std::size_t>(*ascii->piece_to_id("\n"))]);
  EXPECT_TRUE(allowed[static_cast<std::size_t>(*ascii->piece_to_id("x"))]);

  auto bpe = SentencePieceBpeTokenizer::from_file(testing::tiny_llama_dir() / "tokenizer.json");
  const auto strict = allowed_tokens(*bpe, TokenFilter::kAscii);
  const auto loose = allowed_tokens(*bpe, TokenFilter::kNone);
  EXPECT_FALSE(strict[3 + 0x41]);
  EXPECT_TRUE(loose[3 + 0x41]);
  EXPECT_FALSE(loose[1]);
  EXPECT_TRUE(strict[599]);
}

TEST(SampleCandidates, SingleSubstitutionsFromFilteredTopK) {
  const std::size_t L = 6, V = 40;
  GcgConfig c;
  c.top_k = 5;
  c.batch_size = 12;
  c.retain_current = false;
  std::vector<bool> allowed(V, true);
  for (std::size_t i = 0; i < V; i += 3) allowed[i] = false;
  const std::vector<TokenId> current = {1, 2, 4, 5, 7, 8};
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const GradientMatrix g = random_grad(L, V, seed);
    std::mt19937_64 rng(seed);
    const auto cands = sample_candidates(g, current, c, allowed, rng);
    ASSERT_EQ(cands.size(), 12u);
    std::set<std::vector<TokenId>> distinct(cands.begin(), cands.end());
    EXPECT_EQ(distinct.size(), cands.size());
    for (const auto& cand : cands) {
      std::size_t diff = 0, pos = 0;
      for (std::size_t i = 0; i < L; ++i) {
        if (cand[i] != current[i]) {
          ++diff;
          pos = i;
        }
      }
      ASSERT_EQ(diff, 1u);
      const TokenId t = cand[pos];
      EXPECT_TRUE(allowed[static_cast<std::size_t>(t)]);
      // Oracle: fewer than k allowed tokens have a strictly smaller gradient entry.
      std::size_t better = 0;
      for (std::size_t v = 0; v < V; ++v) {
        if (allowed[v] && g(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(v)) <
                              g(static_cast<Eigen::Index>(pos), t)) {
          ++better;
        }
      }
      EXPECT_LT(better, c.top_k);
    }
  }
}

TEST(SampleCandidates, ExhaustivePoolCoversEverySubstitution) {
  const std::size_t L = 4, V = 12;
  GcgConfig c;
  c.top_k = V;
  c.batch_size = L * V;
  c.retain_current = false;
  std::vector<bool> allowed(V, true);
  const std::vector<TokenId> current = {0, 3, 3, 11};
  std::mt19937_64 rng(1);
  const auto cands = sample_candidates(random_grad(L, V, 9), current, c, allowed, rng);
  std::set<std::vector<TokenId>> got(cands.begin(), cands.end()), want;
  for (std::size_t p = 0; p < L; ++p) {
    for (std::size_t v = 0; v < V; ++v) {
      if (static_cast<TokenId>(v) == current[p]) continue;
      auto s = current;
      s[p] = static_cast<TokenId>(v);
      want.insert(s);
    }
  }
  EXPECT_EQ(cands.size(), L * (V - 1));
  EXPECT_EQ(got, want);
}

TEST(SampleCandidates, RetainCurrentAppendsUnchangedSequence) {
  GcgConfig c;
  c.top_k = 3;
  c.batch_size = 4;
  c.retain_current = true;
  std::vector<bool> allowed(10, true);
  const std::vector<TokenId> current = {1, 2, 3};
  std::mt19937_64 rng(1);
  const auto cands = sample_candidates(random_grad(3, 10, 2), current, c, allowed, rng);
  ASSERT_EQ(cands.size(), 5u);
  EXPECT_EQ(cands.back(), current);
}

TEST(SampleCandidates, SeededDeterminismAndErrors) {
  GcgConfig c;
  c.top_k = 4;
  c.batch_size = 5;
  std::vector<bool> allowed(10, true);
  const std::vector<TokenId> current = {1, 2, 3};
  const auto g = random_grad(3, 10, 4);
  std::mt19937_64 a(7), b(7);
  EXPECT_EQ(sample_candidates(g, current, c, allowed, a), sample_candidates(g, current, c, allowed, b));

  std::vector<bool> none(10, false);
  EXPECT_EQ(code_of([&] { sample_candidates(g, current, c, none, a); }), ErrorCode::kEmptyCandidatePool);
  c.top_k = 1;
  const std::vector<TokenId> same = {1, 1, 1};
  std::vector<bool> only_one(10, false);
  only_one[1] = true;
  EXPECT_EQ(code_of([&] { sample_candidates(g, same, c, only_one, a); }), ErrorCode::kEmptyCandidatePool);
  const std::vector<TokenId> short_sts = {1, 2};
  EXPECT_EQ(code_of([&] { sample_candidates(g, short_sts, c, allowed, a); }), ErrorCode::kLengthMismatch);
}

TEST(GcgConfig, ValidationAndDefaults) {
  GcgConfig c;
  EXPECT_EQ(c.sts_length, 20u);
  EXPECT_EQ(c.top_k, 256u);
  EXPECT_EQ(c.batch_size, 256u);
  EXPECT_EQ(c.iterations, 2000u);
  EXPECT_TRUE(c.effective_retain_current());
  c.permutation_mode = PermutationMode::kRandom;
  EXPECT_FALSE(c.effective_retain_current());
  c.retain_current = true;
  EXPECT_TRUE(c.effective_retain_current());
  EXPECT_NO_THROW(c.validate(32000));
  EXPECT_EQ(code_of([&] { c.validate(100); }), ErrorCode::kInvalidConfig);
  for (auto field : {&GcgConfig::sts_length, &GcgConfig::batch_size, &GcgConfig::iterations,
                     &GcgConfig::rank_eval_cadence}) {
    GcgConfig bad;
    bad.*field = 0;
    EXPECT_EQ(code_of([&] { bad.validate(32000); }), ErrorCode::kInvalidConfig);
  }
  EXPECT_EQ(parse_permutation_mode("random"), PermutationMode::kRandom);
  EXPECT_EQ(parse_token_filter("printable"), TokenFilter::kPrintable);
  EXPECT_THROW(parse_token_filter("emoji"), Error);
}

class GcgMock : public ::testing::Test {
 protected:
  std::shared_ptr<CharTokenizer> tok = CharTokenizer::printable_ascii();
  MockModel model{tok};
  PromptSpec spec = testing::coffee_spec(testing::coffee_subset(3));
};

TEST_F(GcgMock, FixedModeStepsNeverIncreaseLoss) {
  GcgConfig c = small_config();
  GcgOptimizer opt(model, spec, c);
  GcgState state = opt.initial_state();
  double prev = *state.loss;
  for (int i = 0; i < 6; ++i) {
    const auto res = opt.step(state);
    EXPECT_LE(res.record.loss, prev);
    EXPECT_NEAR(res.record.loss, model.target_loss(opt.assemble(state.sts, Permutation::identity(3))), 1e-9);
    prev = res.record.loss;
  }
}

TEST_F(GcgMock, StepMatchesBruteForceWithExhaustivePool) {
  GcgConfig c = small_config();
  c.top_k = tok->vocab_size();
  c.batch_size = c.sts_length * tok->vocab_size();
  c.token_filter = TokenFilter::kNone;
  c.retain_current = false;
  GcgOptimizer opt(model, spec, c);
  GcgState state = opt.initial_state();
  const auto allowed = allowed_tokens(*tok, TokenFilter::kNone);
  for (int i = 0; i < 2; ++i) {
    const auto before = state.sts;
    const AssembledPrompt p = opt.assemble(before, Permutation::identity(3));
    double best = std::numeric_limits<double>::infinity();
    std::vector<TokenId> argmin;
    for (std::size_t pos = 0; pos < before.size(); ++pos) {
      for (std::size_t v = 0; v < allowed.size(); ++v) {
        if (!allowed[v] || static_cast<TokenId>(v) == before[pos]) continue;
        auto s = before;
        s[pos] = static_cast<TokenId>(v);
        const double l = model.target_loss(p.with_sts(s));
        if (l < best) {
          best = l;
          argmin = s;
        }
      }
    }
    const auto res = opt.step(state);
    EXPECT_EQ(state.sts, argmin);
    EXPECT_NEAR(res.record.loss, best, 1e-9);
  }
}

TEST_F(GcgMock, RandomModeDrawsSeededPermutations) {
  GcgConfig c = small_config();
  c.permutation_mode = PermutationMode::kRandom;
  GcgOptimizer a(model, spec, c), b(model, spec, c);
  std::set<std::vector<std::size_t>> seen;
  for (std::size_t t = 0; t < 12; ++t) {
    std::uint64_t sa = 0, sb = 0;
    const auto pa = a.permutation_for(t, &sa);
    EXPECT_EQ(pa, b.permutation_for(t, &sb));
    EXPECT_EQ(sa, sb);
    EXPECT_EQ(sa, derive_seed(c.seed, kPermutationStream, t));
    seen.insert(pa.indices());
  }
  EXPECT_GT(seen.size(), 1u);
  const auto ta = a.run();
  const auto tb = b.run();
  EXPECT_EQ(ta.records, tb.records);
}

TEST_F(GcgMock, RunProducesRecordsAndProbes) {
  GcgConfig c = small_config();
  c.iterations = 7;
  c.rank_eval_cadence = 3;
  std::ostringstream log;
  IterationLogWriter writer(log);
  GcgOptimizer opt(model, spec, c);
  const OptTrajectory traj = opt.run([&](const IterationRecord& r) { writer(r); });
  ASSERT_EQ(traj.records.size(), 7u);
  for (std::size_t t = 0; t < traj.records.size(); ++t) {
    const auto& r = traj.records[t];
    EXPECT_EQ(r.iteration, t);
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_EQ(r.rank.has_value(), t % 3 == 0);
    if (r.rank) EXPECT_TRUE(*r.rank >= 1 && *r.rank <= 4);
    EXPECT_EQ(r.sts_text, tok->decode(r.sts_token_ids));
    EXPECT_EQ(r.permutation_seed, 0u);
    if (t > 0) EXPECT_LE(r.loss, traj.records[t - 1].loss);
    EXPECT_LE(traj.best_loss, r.loss);
  }
  EXPECT_EQ(traj.final_sts, traj.records.back().sts_token_ids);
  EXPECT_LT(traj.records.back().loss, traj.initial_loss);

  std::istringstream in(log.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(IterationRecord::from_json(nlohmann::json::parse(line)), traj.records[n]);
    ++n;
  }
  EXPECT_EQ(n, 7u);
}

TEST_F(GcgMock, SingleIterationRun) {
  GcgConfig c = small_config();
  c.iterations = 1;
  const auto traj = GcgOptimizer(model, spec, c).run();
  ASSERT_EQ(traj.records.size(), 1u);
  EXPECT_EQ(traj.best_sts, traj.final_sts);
}

TEST_F(GcgMock, RunsAreBitIdentical) {
  GcgConfig c = small_config();
  c.seed = 42;
  const auto a = GcgOptimizer(model, spec, c).run();
  const auto b = GcgOptimizer(model, spec, c).run();
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.best_sts, b.best_sts);
}

TEST_F(GcgMock, CandidatesNeverContainSpecialTokens) {
  GcgConfig c = small_config();
  c.iterations = 4;
  c.token_filter = TokenFilter::kNone;
  const auto traj = GcgOptimizer(model, spec, c).run();
  for (const auto& r : traj.records) {
    for (TokenId t : r.sts_token_ids) EXPECT_FALSE(tok->is_special(t));
  }
}

TEST_F(GcgMock, RejectsUnknownTarget) {
  PromptSpec bad = spec;
  bad.target_name = "Nonexistent";
  EXPECT_EQ(code_of([&] { GcgOptimizer(model, bad, small_config()); }), ErrorCode::kUnknownProduct);
}

TEST(IterationRecord, MalformedJson) {
  EXPECT_EQ(code_of([] { IterationRecord::from_json(nlohmann::json::parse("{\"iteration\": 1}")); }),
            ErrorCode::kMalformedLine);
}

}  // namespace
}  // namespace stsopt
