#include "stsopt/prompt.hpp"

#include "stsopt/error.hpp"

namespace stsopt {

namespace {

// Placeholder for the STS inside a serialized line; contains nothing JSON escaping would touch.
constexpr std::string_view kSlotMarker = "STSSLOTMARKER7f3a9c";

std::string render_with_lines(const ChatTemplate& chat, const std::vector<std::string>& lines) {
  std::string out = chat.bos + chat.turn_open + chat.sys_open + chat.system_text + chat.sys_close;
  out += "\n\n";
  out += chat.catalog_header;
  out += "\n\n";
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (i > 0) out += "\n\n";
    out += lines[i];
  }
  out += "\n\n";
  out += chat.query_text;
  out += chat.turn_close;
  return out;
}

}  // namespace

AssembledPrompt AssembledPrompt::with_sts(std::span<const TokenId> sts_tokens) const {
  if (sts_tokens.size() != sts_slice.size()) {
    throw Error(ErrorCode::kLengthMismatch, "STS of length " + std::to_string(sts_tokens.size()) +
                                                " for slot of length " + std::to_string(sts_slice.size()));
  }
  AssembledPrompt out = *this;
  std::copy(sts_tokens.begin(), sts_tokens.end(), out.tokens.begin() + static_cast<std::ptrdiff_t>(sts_slice.begin));
  return out;
}

std::string target_text(std::string_view product_name) { return "1. " + std::string(product_name); }

std::string render_prompt_text(const ChatTemplate& chat, const Catalog& catalog) {
  std::vector<std::string> lines;
  lines.reserve(catalog.size());
  for (const auto& p : catalog.products()) lines.push_back(p.to_json_line());
  return render_with_lines(chat, lines);
}

PromptSegments split_prompt(const PromptSpec& spec, const Permutation& perm) {
  for (const auto& p : spec.catalog.products()) {
    for (const auto& [key, value] : p.fields().items()) {
      if (value.is_string() && value.get<std::string>().find(kSlotMarker) != std::string::npos) {
        throw Error(ErrorCode::kMalformedLine, "catalog text contains the reserved STS slot marker");
      }
    }
  }
  Catalog marked = permute(inject_sts(spec.catalog, spec.target_name, spec.field, kSlotMarker), perm);
  std::string text = render_prompt_text(spec.chat, marked);
  std::size_t at = text.find(kSlotMarker);
  return {text.substr(0, at), text.substr(at + kSlotMarker.size())};
}

AssembledPrompt build_prompt(const PromptSpec& spec, std::span<const TokenId> sts_tokens, const Permutation& perm,
                             const Tokenizer& tokenizer, std::size_t context_length) {
  if (sts_tokens.empty()) throw Error(ErrorCode::kInvalidLength, "STS must contain at least one token");
  PromptSegments segments = split_prompt(spec, perm);

  AssembledPrompt out;
  out.permutation_used = perm;
  out.tokens = tokenizer.encode(segments.prefix);
  out.sts_slice.begin = out.tokens.size();
  out.tokens.insert(out.tokens.end(), sts_tokens.begin(), sts_tokens.end());
  out.sts_slice.end = out.tokens.size();
  auto suffix = tokenizer.encode(segments.suffix);
  out.tokens.insert(out.tokens.end(), suffix.begin(), suffix.end());
  auto target = tokenizer.encode(target_text(spec.target_name));
  out.target_slice.begin = out.tokens.size();
  out.tokens.insert(out.tokens.end(), target.begin(), target.end());
  out.target_slice.end = out.tokens.size();

  if (out.tokens.size() > context_length) {
    throw Error(ErrorCode::kContextOverflow, "prompt has " + std::to_string(out.tokens.size()) +
                                                 " tokens, context length is " + std::to_string(context_length));
  }
  return out;
}

std::vector<TokenId> render_inference_prompt(const AssembledPrompt& assembled) {
  return {assembled.tokens.begin(), assembled.tokens.begin() + static_cast<std::ptrdiff_t>(assembled.target_slice.begin)};
}

}  // namespace stsopt
