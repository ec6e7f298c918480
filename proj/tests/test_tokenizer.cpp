#include <fstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "stsopt/error.hpp"
#include "stsopt/tokenizer.hpp"
#include "test_support.hpp"

namespace stsopt {
namespace {

TEST(SentencePieceBpe, EncodingsMatchReferenceTokenizer) {
  auto tok = SentencePieceBpeTokenizer::from_file(testing::tiny_llama_dir() / "tokenizer.json");
  std::ifstream in(testing::tiny_llama_dir() / "reference.json");
  const auto ref = nlohmann::json::parse(in);
  EXPECT_EQ(tok->vocab_size(), ref["vocab_size"].get<std::size_t>());
  for (const auto& c : ref["encodings"]) {
    const auto text = c["text"].get<std::string>();
    const auto want = c["ids"].get<std::vector<TokenId>>();
    EXPECT_EQ(tok->encode(text), want) << text;
    EXPECT_EQ(tok->decode(want), c["decoded"].get<std::string>()) << text;
  }
}

TEST(SentencePieceBpe, SpecialsAndByteFallback) {
  auto tok = SentencePieceBpeTokenizer::from_file(testing::tiny_llama_dir() / "tokenizer.json");
  EXPECT_EQ(tok->piece_to_id("<s>"), 1);
  EXPECT_EQ(tok->eos_id(), 2);
  EXPECT_TRUE(tok->is_special(1));
  EXPECT_FALSE(tok->is_special(100));
  EXPECT_TRUE(tok->is_byte_fallback(3 + 0x41));
  EXPECT_EQ(tok->token_text(3 + 0x41), "A");
  EXPECT_FALSE(tok->is_byte_fallback(599));
  const std::vector<TokenId> bad_utf8 = {3 + 0xE2, 3 + 0x98};
  EXPECT_EQ(tok->decode(bad_utf8), "\xEF\xBF\xBD\xEF\xBF\xBD");
}

TEST(SentencePieceBpe, RejectsByteLevelTokenizers) {
  const char* json = R"({"model": {"type": "BPE", "vocab": {"a": 0}, "merges": []},
                         "pre_tokenizer": {"type": "ByteLevel"}, "added_tokens": []})";
  EXPECT_THROW(SentencePieceBpeTokenizer::from_json_text(json), Error);
  EXPECT_THROW(SentencePieceBpeTokenizer::from_json_text("{\"model\": {\"type\": \"WordPiece\"}}"), Error);
  EXPECT_THROW(SentencePieceBpeTokenizer::from_json_text("not json"), Error);
}

TEST(CharTokenizer, RoundTripsAlphabetText) {
  auto tok = CharTokenizer::printable_ascii();
  EXPECT_EQ(tok->vocab_size(), 100u);
  const std::string text = "{\"Name\": \"ColdBrew Master\"}\n[INST]";
  EXPECT_EQ(tok->decode(tok->encode(text)), text);
  EXPECT_EQ(tok->encode(text).size(), text.size());
}

TEST(CharTokenizer, SpecialStringsAndUnknownCodePoints) {
  auto tok = CharTokenizer::printable_ascii();
  EXPECT_EQ(tok->encode("<s>a</s>"), (std::vector<TokenId>{CharTokenizer::kBos, *tok->piece_to_id("a"), CharTokenizer::kEos}));
  const auto ids = tok->encode("caf\xC3\xA9!");
  ASSERT_EQ(ids.size(), 5u);
  EXPECT_EQ(ids[3], CharTokenizer::kUnk);
  EXPECT_EQ(tok->piece_to_id("\t"), std::nullopt);
}

TEST(CharTokenizer, CustomAlphabet) {
  CharTokenizer tok("ab");
  EXPECT_EQ(tok.vocab_size(), 6u);
  EXPECT_EQ(tok.encode("ba"), (std::vector<TokenId>{5, 4}));
  EXPECT_EQ(tok.token_text(4), "a");
}

}  // namespace
}  // namespace stsopt
