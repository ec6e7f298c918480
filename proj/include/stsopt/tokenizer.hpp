#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace stsopt {

using TokenId = std::int32_t;

/// Text <-> token-id mapping. Implementations are immutable after construction and safe to
/// share between threads.
class Tokenizer {
 public:
  virtual ~Tokenizer() = default;

  /// Tokenizes `text` without adding BOS/EOS. Literal special-token strings ("<s>") inside the
  /// text map to their special ids.
  virtual std::vector<TokenId> encode(std::string_view text) const = 0;
  /// Special tokens render as their canonical surface form.
  virtual std::string decode(std::span<const TokenId> ids) const = 0;

  virtual std::size_t vocab_size() const = 0;
  virtual bool is_special(TokenId id) const = 0;
  /// Exact vocabulary lookup of a raw piece.
  virtual std::optional<TokenId> piece_to_id(std::string_view piece) const = 0;
  virtual std::optional<TokenId> eos_id() const = 0;
  /// Bytes the token contributes when it appears mid-sequence (may be an incomplete UTF-8
  /// sequence for byte-fallback tokens).
  virtual std::string token_text(TokenId id) const = 0;
  /// True for raw-byte tokens such as <0x41>.
  virtual bool is_byte_fallback(TokenId) const { return false; }
};

/// Character-level tokenizer over a fixed alphabet, used with the mock backend. Ids 0..3 are
/// <unk>, <s>, </s>, <pad>; alphabet character i gets id 4 + i. Characters outside the
/// alphabet become <unk> (one per UTF-8 code point).
class CharTokenizer final : public Tokenizer {
 public:
  static constexpr TokenId kUnk = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kPad = 3;
  static constexpr std::size_t kNumSpecial = 4;

  /// `alphabet` must consist of distinct single-byte characters.
  explicit CharTokenizer(std::string_view alphabet);
  /// Printable ASCII plus '\n': 100 tokens in total.
  static std::shared_ptr<CharTokenizer> printable_ascii();

  std::vector<TokenId> encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> ids) const override;
  std::size_t vocab_size() const override { return kNumSpecial + alphabet_.size(); }
  bool is_special(TokenId id) const override { return id >= 0 && id < static_cast<TokenId>(kNumSpecial); }
  std::optional<TokenId> piece_to_id(std::string_view piece) const override;
  std::optional<TokenId> eos_id() const override { return kEos; }
  std::string token_text(TokenId id) const override;

 private:
  std::string alphabet_;
  std::vector<TokenId> byte_to_id_;
};

/// SentencePiece-style BPE loaded from a Hugging Face tokenizer.json (Llama-2 / TinyLlama /
/// Mistral family): metaspace "▁" handling, merge-rank BPE, byte fallback, added tokens.
/// Byte-level (GPT-2 style) BPE is rejected at load time.
class SentencePieceBpeTokenizer final : public Tokenizer {
 public:
  static std::shared_ptr<SentencePieceBpeTokenizer> from_file(const std::filesystem::path& path);
  static std::shared_ptr<SentencePieceBpeTokenizer> from_json_text(std::string_view json_text);

  std::vector<TokenId> encode(std::string_view text) const override;
  std::string decode(std::span<const TokenId> ids) const override;
  std::size_t vocab_size() const override { return id_to_piece_.size(); }
  bool is_special(TokenId id) const override;
  std::optional<TokenId> piece_to_id(std::string_view piece) const override;
  std::optional<TokenId> eos_id() const override { return eos_; }
  std::string token_text(TokenId id) const override;
  bool is_byte_fallback(TokenId id) const override { return byte_token_value(id).has_value(); }

  enum class PrependScheme { kAlways, kFirst, kNever };

 private:
  SentencePieceBpeTokenizer() = default;

  struct AddedToken {
    std::string content;
    TokenId id;
    bool special;
  };
  struct PairHash {
    std::size_t operator()(std::uint64_t v) const noexcept { return std::hash<std::uint64_t>{}(v); }
  };

  void encode_segment(std::string_view text, bool first_segment, std::vector<TokenId>& out) const;
  void bpe_word(std::string_view word, std::vector<TokenId>& out) const;
  std::optional<int> byte_token_value(TokenId id) const;

  std::unordered_map<std::string, TokenId> piece_to_id_;
  std::vector<std::string> id_to_piece_;
  // (left id << 32 | right id) -> (rank, merged id)
  std::unordered_map<std::uint64_t, std::pair<std::int32_t, TokenId>, PairHash> merges_;
  std::vector<AddedToken> added_;
  std::vector<bool> special_;
  std::vector<TokenId> byte_ids_;  // byte value -> <0xNN> id, or -1
  std::optional<TokenId> unk_;
  std::optional<TokenId> eos_;
  bool byte_fallback_ = false;
  bool fuse_unk_ = false;
  PrependScheme prepend_ = PrependScheme::kAlways;
  bool prepend_normalizer_ = false;
  bool split_words_ = false;
  bool strip_leading_space_ = true;
};

}  // namespace stsopt
