#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "stsopt/error.hpp"
#include "stsopt/mock_model.hpp"
#include "test_support.hpp"

namespace stsopt {
namespace {

std::shared_ptr<CharTokenizer> ascii() { return CharTokenizer::printable_ascii(); }

AssembledPrompt small_prompt(const Tokenizer& tok, const std::string& sts = "abcdefgh", std::size_t products = 3) {
  PromptSpec spec = testing::coffee_spec(testing::coffee_subset(products));
  return build_prompt(spec, tok.encode(sts), Permutation::identity(products), tok, 4096);
}

double reference_loss(const Eigen::MatrixXd& rows, std::span<const TokenId> targets) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    double z = 0.0;
    for (Eigen::Index c = 0; c < rows.cols(); ++c) z += std::exp(rows(r, c));
    total += std::log(z) - rows(r, targets[static_cast<std::size_t>(r)]);
  }
  return total / static_cast<double>(rows.rows());
}

TEST(MockModel, UniformOutputGivesLogV) {
  auto tok = ascii();
  MockModelOptions opt;
  opt.uniform_output = true;
  MockModel model(tok, opt);
  EXPECT_NEAR(model.target_loss(small_prompt(*tok)), std::log(100.0), 1e-6);
}

TEST(MockModel, RiggedTargetSaturatesLoss) {
  auto tok = ascii();
  MockModelOptions opt;
  opt.script_trigger = *tok->piece_to_id("]");
  opt.script = tok->encode("1. ColdBrew Master");
  MockModel model(tok, opt);
  EXPECT_LT(model.target_loss(small_prompt(*tok)), 1e-3);
}

TEST(MockModel, LossMatchesDirectCrossEntropy) {
  auto tok = ascii();
  MockModel model(tok);
  AssembledPrompt p = small_prompt(*tok);
  Eigen::MatrixXd rows = model.logits(p.tokens, p.target_slice.begin - 1, p.target_slice.end - 1);
  EXPECT_NEAR(model.target_loss(p), reference_loss(rows, p.target()), 1e-10);
  EXPECT_GT(model.target_loss(p), 0.0);
}

TEST(MockModel, PartialLogitRowsMatchFullPass) {
  auto tok = ascii();
  MockModel model(tok);
  AssembledPrompt p = small_prompt(*tok);
  Eigen::MatrixXd full = model.logits(p.tokens, 0, p.tokens.size());
  Eigen::MatrixXd part = model.logits(p.tokens, 100, 140);
  EXPECT_LT((full.middleRows(100, 40) - part).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(MockModel, GradientShapeAndFiniteDifferences) {
  auto tok = ascii();
  MockModel model(tok);
  AssembledPrompt p = small_prompt(*tok, "********************");
  GradientMatrix g = model.token_gradients(p);
  ASSERT_EQ(g.rows(), 20);
  ASSERT_EQ(g.cols(), 100);
  EXPECT_TRUE(g.allFinite());
  const double eps = 1e-5;
  for (std::size_t pos : {0u, 7u, 19u}) {
    for (TokenId tok_id : {4, 37, 99}) {
      Eigen::VectorXd dir = model.embeddings().row(tok_id).transpose();
      EmbeddingDelta plus{p.sts_slice.begin + pos, eps * dir}, minus{p.sts_slice.begin + pos, -eps * dir};
      const double fd = (model.target_loss(p, std::span(&plus, 1)) - model.target_loss(p, std::span(&minus, 1))) / (2 * eps);
      EXPECT_NEAR(g(static_cast<Eigen::Index>(pos), tok_id), fd, 1e-7 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(MockModel, LossBatchMatchesSequentialLosses) {
  auto tok = ascii();
  MockModel model(tok);
  AssembledPrompt p = small_prompt(*tok);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<TokenId> any(4, 99);
  std::uniform_int_distribution<std::size_t> where(0, 7);
  std::vector<std::vector<TokenId>> cands;
  for (int i = 0; i < 64; ++i) {
    std::vector<TokenId> c(p.sts().begin(), p.sts().end());
    const int changes = i % 3 + 1;
    for (int j = 0; j < changes; ++j) c[where(rng)] = any(rng);
    cands.push_back(c);
  }
  cands.emplace_back(p.sts().begin(), p.sts().end());
  cands.push_back(cands[5]);
  const auto batch = model.loss_batch(p, cands);
  ASSERT_EQ(batch.size(), cands.size());
  for (std::size_t i = 0; i < cands.size(); ++i) {
    EXPECT_NEAR(batch[i], model.target_loss(p.with_sts(cands[i])), 1e-10) << i;
  }
  EXPECT_NEAR(batch[64], model.target_loss(p), 1e-6);
  EXPECT_EQ(batch[65], batch[5]);
  EXPECT_TRUE(model.loss_batch(p, {}).empty());
}

TEST(MockModel, LossBatchRejectsWrongLength) {
  auto tok = ascii();
  MockModel model(tok);
  AssembledPrompt p = small_prompt(*tok);
  std::vector<std::vector<TokenId>> cands = {std::vector<TokenId>(3, 10)};
  try {
    model.loss_batch(p, cands);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kLengthMismatch);
  }
}

TEST(MockModel, GenerationIsDeterministic) {
  auto tok = ascii();
  MockModel model(tok);
  const auto prompt = render_inference_prompt(small_prompt(*tok));
  SamplingParams greedy{0.0, 40, 0};
  EXPECT_EQ(model.generate(prompt, greedy), model.generate(prompt, greedy));
  SamplingParams sampled{0.7, 40, 11};
  EXPECT_EQ(model.generate(prompt, sampled), model.generate(prompt, sampled));
  sampled.seed = 12;
  const auto a = model.generate_ids(prompt, sampled);
  sampled.seed = 13;
  EXPECT_NE(a, model.generate_ids(prompt, sampled));
}

TEST(MockModel, RiggedBackendEmitsScriptExactly) {
  auto tok = ascii();
  const std::string list = "1. ColdBrew Master\n2. SingleServe Wonder\n3. Grind&Brew Plus";
  MockModelOptions opt;
  opt.script_trigger = *tok->piece_to_id("]");
  opt.script = tok->encode(list);
  opt.script.push_back(CharTokenizer::kEos);
  MockModel model(tok, opt);
  const auto prompt = render_inference_prompt(small_prompt(*tok));
  EXPECT_EQ(model.generate(prompt, SamplingParams{0.0, 200, 0}), list);
  EXPECT_EQ(model.generate(prompt, SamplingParams{0.7, 200, 5}), list);
}

TEST(MockModel, DecodeSessionMatchesFullForward) {
  auto tok = ascii();
  MockModel model(tok);
  std::vector<TokenId> seq = tok->encode("<s>[INST] hello there [/INST]");
  auto session = model.start_session(seq);
  for (TokenId next : tok->encode("1. Cold")) {
    Eigen::MatrixXd full = model.logits(seq, seq.size() - 1, seq.size());
    EXPECT_LT((session->next_logits().transpose() - full.row(0)).cwiseAbs().maxCoeff(), 1e-10);
    session->append(next);
    seq.push_back(next);
  }
}

TEST(MockModel, ContextOverflow) {
  auto tok = ascii();
  MockModelOptions opt;
  opt.context_length = 64;
  MockModel model(tok, opt);
  std::vector<TokenId> prompt(60, 10);
  try {
    model.generate(prompt, SamplingParams{0.0, 10, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kContextOverflow);
  }
  std::vector<TokenId> too_long(65, 10);
  EXPECT_THROW(model.logits(too_long, 0, 1), Error);
}

TEST(MockModel, TokenizerContract) {
  auto tok = ascii();
  MockModel model(tok);
  EXPECT_TRUE(model.tokenizer().encode("").empty());
  const auto ids = model.tokenizer().encode("1. ColdBrew Master");
  EXPECT_FALSE(ids.empty());
  EXPECT_EQ(model.tokenizer().decode(ids), "1. ColdBrew Master");
  const std::vector<TokenId> special = {CharTokenizer::kBos, *tok->piece_to_id("x"), CharTokenizer::kEos};
  EXPECT_EQ(model.tokenizer().decode(special), "<s>x</s>");
  EXPECT_EQ(model.special_ids().size(), 4u);
}

}  // namespace
}  // namespace stsopt
