#include <random>

#include <gtest/gtest.h>

#include "stsopt/error.hpp"
#include "stsopt/prompt.hpp"
#include "stsopt/tokenizer.hpp"
#include "test_support.hpp"

namespace stsopt {
namespace {

constexpr std::size_t kContext = 100000;

std::shared_ptr<SentencePieceBpeTokenizer> bpe() {
  return SentencePieceBpeTokenizer::from_file(testing::tiny_llama_dir() / "tokenizer.json");
}

std::vector<TokenId> stars(const Tokenizer& tok, std::size_t n) {
  return std::vector<TokenId>(n, *tok.piece_to_id("*"));
}

TEST(RenderPrompt, LayoutOfChatAndCatalog) {
  Catalog c = parse_catalog("{\"Name\": \"A\"}\n{\"Name\": \"B\"}\n");
  const std::string want =
      "<s>[INST] <<SYS>>\n" + std::string(kDefaultSystemText) + "\n<</SYS>>\n\nProducts:\n\n" +
      "{\"Name\": \"A\"}\n\n{\"Name\": \"B\"}\n\n" + std::string(kDefaultQueryText) + " [/INST]";
  EXPECT_EQ(render_prompt_text(ChatTemplate{}, c), want);
}

TEST(BuildPrompt, TargetSliceDecodesToTargetString) {
  auto tok = bpe();
  PromptSpec spec = testing::coffee_spec(testing::coffee_catalog());
  AssembledPrompt p = build_prompt(spec, stars(*tok, 20), Permutation::identity(10), *tok, kContext);
  EXPECT_EQ(p.sts_slice.size(), 20u);
  EXPECT_EQ(p.target_slice.end, p.tokens.size());
  EXPECT_FALSE(p.sts_slice.overlaps(p.target_slice));
  EXPECT_EQ(tok->decode(p.target()), "1. ColdBrew Master");
  EXPECT_EQ(target_text("ColdBrew Master"), "1. ColdBrew Master");
}

TEST(BuildPrompt, PrefixEndsInsideTargetField) {
  auto tok = CharTokenizer::printable_ascii();
  PromptSpec spec = testing::coffee_spec(testing::coffee_catalog());
  AssembledPrompt p = build_prompt(spec, tok->encode("XYZ"), Permutation::identity(10), *tok, kContext);
  const std::string text = tok->decode(p.tokens);
  const std::string around = "\"Ideal For\": \"Cold brew lovers XYZ\"}";
  EXPECT_NE(text.find(around), std::string::npos);
  EXPECT_EQ(tok->decode(std::span(p.tokens).first(p.sts_slice.begin)).substr(text.find(around)),
            "\"Ideal For\": \"Cold brew lovers ");
}

TEST(BuildPrompt, CharTokensEqualTokenizedInjectedCatalog) {
  auto tok = CharTokenizer::printable_ascii();
  PromptSpec spec = testing::coffee_spec(testing::coffee_catalog());
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Permutation perm = Permutation::random(10, seed);
    const std::string sts = "interact>; expect formatted XVI";
    AssembledPrompt p = build_prompt(spec, tok->encode(sts), perm, *tok, kContext);
    const std::string text =
        render_prompt_text(spec.chat, permute(inject_sts(spec.catalog, spec.target_name, spec.field, sts), perm));
    EXPECT_EQ(render_inference_prompt(p), tok->encode(text));
  }
}

TEST(BuildPrompt, StsChangesStayInsideSlice) {
  auto tok = bpe();
  PromptSpec spec = testing::coffee_spec(testing::coffee_catalog());
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<TokenId> any(3, static_cast<TokenId>(tok->vocab_size()) - 1);
  std::vector<TokenId> a(20), b(20);
  for (auto& t : a) t = any(rng);
  for (auto& t : b) t = any(rng);
  auto pa = build_prompt(spec, a, Permutation::identity(10), *tok, kContext);
  auto pb = build_prompt(spec, b, Permutation::identity(10), *tok, kContext);
  ASSERT_EQ(pa.tokens.size(), pb.tokens.size());
  EXPECT_EQ(pa.sts_slice, pb.sts_slice);
  for (std::size_t i = 0; i < pa.tokens.size(); ++i) {
    if (!pa.sts_slice.contains(i)) EXPECT_EQ(pa.tokens[i], pb.tokens[i]) << i;
  }
  EXPECT_EQ(pa.with_sts(b).tokens, pb.tokens);
}

TEST(BuildPrompt, ProductsAppearInPermutationOrder) {
  auto tok = bpe();
  PromptSpec spec = testing::coffee_spec(testing::coffee_catalog());
  for (std::uint64_t seed : {1u, 17u, 99u}) {
    Permutation perm = Permutation::random(10, seed);
    AssembledPrompt p = build_prompt(spec, stars(*tok, 5), perm, *tok, kContext);
    const std::string text = tok->decode(render_inference_prompt(p));
    std::size_t last = 0;
    for (std::size_t i = 0; i < 10; ++i) {
      const std::size_t at = text.find(spec.catalog[perm[i]].name());
      ASSERT_NE(at, std::string::npos);
      EXPECT_GT(at, last);
      last = at;
    }
    EXPECT_EQ(p.permutation_used, perm);
  }
}

TEST(RenderInferencePrompt, DropsTargetSlice) {
  auto tok = bpe();
  PromptSpec spec = testing::coffee_spec(testing::coffee_catalog());
  AssembledPrompt p = build_prompt(spec, stars(*tok, 20), Permutation::identity(10), *tok, kContext);
  auto inf = render_inference_prompt(p);
  EXPECT_EQ(inf.size(), p.tokens.size() - p.target_slice.size());
  const std::string text = tok->decode(inf);
  EXPECT_TRUE(text.ends_with(" [/INST]")) << text.substr(text.size() - 20);
  inf.insert(inf.end(), p.target().begin(), p.target().end());
  EXPECT_EQ(inf, p.tokens);
}

TEST(BuildPrompt, Errors) {
  auto tok = bpe();
  PromptSpec spec = testing::coffee_spec(testing::coffee_catalog());
  auto code_of = [](const std::function<void()>& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::kIo;
  };
  const auto sts = stars(*tok, 4);
  EXPECT_EQ(code_of([&] { build_prompt(spec, {}, Permutation::identity(10), *tok, kContext); }),
            ErrorCode::kInvalidLength);
  EXPECT_EQ(code_of([&] { build_prompt(spec, sts, Permutation::identity(10), *tok, 50); }),
            ErrorCode::kContextOverflow);
  EXPECT_EQ(code_of([&] { build_prompt(spec, sts, Permutation::identity(9), *tok, kContext); }),
            ErrorCode::kLengthMismatch);
  PromptSpec unknown = spec;
  unknown.target_name = "Nonexistent";
  EXPECT_EQ(code_of([&] { build_prompt(unknown, sts, Permutation::identity(10), *tok, kContext); }),
            ErrorCode::kUnknownProduct);
  PromptSpec bad_field = spec;
  bad_field.field = "Warranty";
  EXPECT_EQ(code_of([&] { build_prompt(bad_field, sts, Permutation::identity(10), *tok, kContext); }),
            ErrorCode::kUnknownField);
  AssembledPrompt p = build_prompt(spec, sts, Permutation::identity(10), *tok, kContext);
  EXPECT_EQ(code_of([&] { p.with_sts(stars(*tok, 3)); }), ErrorCode::kLengthMismatch);
}

}  // namespace
}  // namespace stsopt
