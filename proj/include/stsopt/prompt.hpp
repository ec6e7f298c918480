#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "stsopt/catalog.hpp"
#include "stsopt/tokenizer.hpp"

namespace stsopt {

inline constexpr std::string_view kDefaultSystemText =
    "A chat between a human and an artificial intelligence assistant. The assistant provides a "
    "numbered list of product recommendations ranked based on the user's request.";
inline constexpr std::string_view kDefaultQueryText =
    "I am looking for an affordable coffee machine. Can I get some recommendations?";

/// Chat layout as plain data. Rendered prompt:
///
///   bos turn_open sys_open system_text sys_close "\n\n" catalog_header "\n\n"
///   line_1 "\n\n" line_2 ... line_n "\n\n" query_text turn_close
struct ChatTemplate {
  std::string bos = "<s>";
  std::string turn_open = "[INST] ";
  std::string sys_open = "<<SYS>>\n";
  std::string sys_close = "\n<</SYS>>";
  std::string turn_close = " [/INST]";
  std::string system_text{kDefaultSystemText};
  std::string query_text{kDefaultQueryText};
  std::string catalog_header = "Products:";

  friend bool operator==(const ChatTemplate&, const ChatTemplate&) = default;
};

/// Everything that fixes a prompt apart from the STS and the product order.
struct PromptSpec {
  ChatTemplate chat;
  Catalog catalog;
  std::string target_name;
  std::string field{kIdealForKey};
};

/// Half-open token range [begin, end).
struct TokenSlice {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return begin == end; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool overlaps(const TokenSlice& o) const { return begin < o.end && o.begin < end; }
  friend bool operator==(const TokenSlice&, const TokenSlice&) = default;
};

struct AssembledPrompt {
  std::vector<TokenId> tokens;
  TokenSlice sts_slice;
  TokenSlice target_slice;  // always the final slice
  Permutation permutation_used;

  std::span<const TokenId> sts() const { return std::span(tokens).subspan(sts_slice.begin, sts_slice.size()); }
  std::span<const TokenId> target() const {
    return std::span(tokens).subspan(target_slice.begin, target_slice.size());
  }
  /// Copy with the STS tokens replaced; throws LengthMismatch on a length change.
  AssembledPrompt with_sts(std::span<const TokenId> sts_tokens) const;
};

/// The forced output prefix the optimizer drives the model toward.
std::string target_text(std::string_view product_name);

/// Full prompt text for a catalog already permuted (and injected, if desired).
std::string render_prompt_text(const ChatTemplate& chat, const Catalog& catalog);

/// Prompt text around the STS slot: `prefix` ends right after the separator space appended to
/// the target's field, `suffix` resumes with the rest of that JSON line.
struct PromptSegments {
  std::string prefix;
  std::string suffix;
};
PromptSegments split_prompt(const PromptSpec& spec, const Permutation& perm);

/// tokens = encode(prefix) ++ sts ++ encode(suffix) ++ encode("1. " + target). Segments are
/// tokenized independently so slice boundaries never move between iterations.
/// Throws UnknownProduct, UnknownField, InvalidLength (empty STS), ContextOverflow.
AssembledPrompt build_prompt(const PromptSpec& spec, std::span<const TokenId> sts_tokens, const Permutation& perm,
                             const Tokenizer& tokenizer, std::size_t context_length);

/// Tokens minus the target slice; the input for free generation.
std::vector<TokenId> render_inference_prompt(const AssembledPrompt& assembled);

}  // namespace stsopt
