#include "stsopt/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <queue>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stsopt/error.hpp"

namespace stsopt {

namespace {

constexpr std::array<std::string_view, CharTokenizer::kNumSpecial> kCharSpecials = {"<unk>", "<s>", "</s>",
                                                                                    "<pad>"};
constexpr std::string_view kMetaspace = "\xE2\x96\x81";  // U+2581 "▁"

std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    auto lead = static_cast<unsigned char>(s[i]);
    std::size_t n = utf8_length(lead);
    if (lead >= 0x80 && n == 1) return false;
    if (i + n > s.size()) return false;
    for (std::size_t k = 1; k < n; ++k) {
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return false;
    }
    i += n;
  }
  return true;
}

std::string replace_all(std::string_view s, std::string_view from, std::string_view to) {
  std::string out;
  std::size_t pos = 0;
  while (true) {
    std::size_t hit = s.find(from, pos);
    if (hit == std::string_view::npos) break;
    out.append(s.substr(pos, hit - pos));
    out.append(to);
    pos = hit + from.size();
  }
  out.append(s.substr(pos));
  return out;
}

std::uint64_t pair_key(TokenId a, TokenId b) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) | static_cast<std::uint32_t>(b);
}

}  // namespace

// ---------------------------------------------------------------------------------------------
// CharTokenizer

CharTokenizer::CharTokenizer(std::string_view alphabet) : alphabet_(alphabet), byte_to_id_(256, kUnk) {
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    auto b = static_cast<unsigned char>(alphabet_[i]);
    if (byte_to_id_[b] != kUnk) throw Error(ErrorCode::kInvalidConfig, "duplicate alphabet character");
    byte_to_id_[b] = static_cast<TokenId>(kNumSpecial + i);
  }
}

std::shared_ptr<CharTokenizer> CharTokenizer::printable_ascii() {
  std::string alphabet;
  for (char c = 32; c < 127; ++c) alphabet.push_back(c);
  alphabet.push_back('\n');
  return std::make_shared<CharTokenizer>(alphabet);
}

std::vector<TokenId> CharTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    if (text[i] == '<') {
      for (std::size_t s = 0; s < kCharSpecials.size(); ++s) {
        if (text.substr(i).starts_with(kCharSpecials[s])) {
          out.push_back(static_cast<TokenId>(s));
          i += kCharSpecials[s].size();
          matched = true;
          break;
        }
      }
    }
    if (matched) continue;
    auto b = static_cast<unsigned char>(text[i]);
    if (b < 0x80) {
      out.push_back(byte_to_id_[b]);
      ++i;
    } else {
      out.push_back(kUnk);
      i += std::min(utf8_length(b), text.size() - i);
    }
  }
  return out;
}

std::string CharTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_text(id);
  return out;
}

std::optional<TokenId> CharTokenizer::piece_to_id(std::string_view piece) const {
  for (std::size_t s = 0; s < kCharSpecials.size(); ++s) {
    if (piece == kCharSpecials[s]) return static_cast<TokenId>(s);
  }
  if (piece.size() == 1) {
    TokenId id = byte_to_id_[static_cast<unsigned char>(piece[0])];
    if (id != kUnk) return id;
  }
  return std::nullopt;
}

std::string CharTokenizer::token_text(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) return std::string(kCharSpecials[kUnk]);
  if (is_special(id)) return std::string(kCharSpecials[static_cast<std::size_t>(id)]);
  return std::string(1, alphabet_[static_cast<std::size_t>(id) - kNumSpecial]);
}

// ---------------------------------------------------------------------------------------------
// SentencePieceBpeTokenizer

std::shared_ptr<SentencePieceBpeTokenizer> SentencePieceBpeTokenizer::from_file(
    const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kModelLoad, "cannot open tokenizer " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str());
}

std::shared_ptr<SentencePieceBpeTokenizer> SentencePieceBpeTokenizer::from_json_text(std::string_view json_text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kModelLoad, std::string("tokenizer.json: ") + e.what());
  }
  std::shared_ptr<SentencePieceBpeTokenizer> tok(new SentencePieceBpeTokenizer());

  const auto& model = doc.at("model");
  if (model.value("type", std::string("BPE")) != "BPE") {
    throw Error(ErrorCode::kModelLoad, "only BPE tokenizer models are supported");
  }
  auto mentions_byte_level = [](const nlohmann::json& j) { return j.dump().find("\"ByteLevel\"") != std::string::npos; };
  if (mentions_byte_level(doc.value("pre_tokenizer", nlohmann::json())) ||
      mentions_byte_level(doc.value("decoder", nlohmann::json()))) {
    throw Error(ErrorCode::kModelLoad, "byte-level BPE tokenizers are not supported");
  }

  std::size_t max_id = 0;
  for (const auto& [piece, id] : model.at("vocab").items()) max_id = std::max(max_id, id.get<std::size_t>());
  for (const auto& added : doc.value("added_tokens", nlohmann::json::array())) {
    max_id = std::max(max_id, added.at("id").get<std::size_t>());
  }
  tok->id_to_piece_.assign(max_id + 1, std::string{});
  tok->special_.assign(max_id + 1, false);
  for (const auto& [piece, id] : model.at("vocab").items()) {
    auto i = id.get<TokenId>();
    tok->id_to_piece_[static_cast<std::size_t>(i)] = piece;
    tok->piece_to_id_.emplace(piece, i);
  }
  for (const auto& added : doc.value("added_tokens", nlohmann::json::array())) {
    AddedToken t{added.at("content").get<std::string>(), added.at("id").get<TokenId>(),
                 added.value("special", false)};
    tok->id_to_piece_[static_cast<std::size_t>(t.id)] = t.content;
    tok->piece_to_id_.emplace(t.content, t.id);
    if (t.special) tok->special_[static_cast<std::size_t>(t.id)] = true;
    tok->added_.push_back(std::move(t));
  }
  // Longest match first when splitting on added tokens.
  std::sort(tok->added_.begin(), tok->added_.end(),
            [](const AddedToken& a, const AddedToken& b) { return a.content.size() > b.content.size(); });

  std::int32_t rank = 0;
  for (const auto& m : model.value("merges", nlohmann::json::array())) {
    std::string left, right;
    if (m.is_string()) {
      auto s = m.get<std::string>();
      auto space = s.find(' ');
      if (space == std::string::npos) throw Error(ErrorCode::kModelLoad, "malformed merge \"" + s + "\"");
      left = s.substr(0, space);
      right = s.substr(space + 1);
    } else {
      left = m.at(0).get<std::string>();
      right = m.at(1).get<std::string>();
    }
    auto l = tok->piece_to_id_.find(left);
    auto r = tok->piece_to_id_.find(right);
    auto merged = tok->piece_to_id_.find(left + right);
    if (l == tok->piece_to_id_.end() || r == tok->piece_to_id_.end() || merged == tok->piece_to_id_.end()) {
      throw Error(ErrorCode::kModelLoad, "merge references unknown piece: " + left + " " + right);
    }
    tok->merges_.emplace(pair_key(l->second, r->second), std::make_pair(rank++, merged->second));
  }

  tok->byte_fallback_ = model.value("byte_fallback", false);
  tok->fuse_unk_ = model.value("fuse_unk", false);
  if (model.contains("unk_token") && model["unk_token"].is_string()) {
    auto it = tok->piece_to_id_.find(model["unk_token"].get<std::string>());
    if (it != tok->piece_to_id_.end()) tok->unk_ = it->second;
  }
  tok->byte_ids_.assign(256, -1);
  for (int b = 0; b < 256; ++b) {
    char name[8];
    std::snprintf(name, sizeof(name), "<0x%02X>", b);
    auto it = tok->piece_to_id_.find(name);
    if (it != tok->piece_to_id_.end()) tok->byte_ids_[static_cast<std::size_t>(b)] = it->second;
  }
  if (auto it = tok->piece_to_id_.find("</s>"); it != tok->piece_to_id_.end()) tok->eos_ = it->second;

  // Where the "▁" prefix comes from: a Prepend normalizer (legacy Llama files) or a Metaspace
  // pre-tokenizer (newer files).
  bool prepend_normalizer = false;
  auto visit_normalizer = [&](const nlohmann::json& n) {
    if (n.is_object() && n.value("type", "") == "Prepend") prepend_normalizer = true;
  };
  const auto normalizer = doc.value("normalizer", nlohmann::json());
  if (normalizer.is_object() && normalizer.value("type", "") == "Sequence") {
    for (const auto& n : normalizer.at("normalizers")) visit_normalizer(n);
  } else {
    visit_normalizer(normalizer);
  }
  tok->prepend_ = prepend_normalizer ? PrependScheme::kAlways : PrependScheme::kNever;
  tok->prepend_normalizer_ = prepend_normalizer;

  auto visit_pre = [&](const nlohmann::json& p) {
    if (!p.is_object() || p.value("type", "") != "Metaspace") return;
    tok->split_words_ = p.value("split", true);
    if (p.contains("prepend_scheme")) {
      auto scheme = p["prepend_scheme"].get<std::string>();
      tok->prepend_ = scheme == "first"   ? PrependScheme::kFirst
                      : scheme == "never" ? PrependScheme::kNever
                                          : PrependScheme::kAlways;
    } else {
      tok->prepend_ = p.value("add_prefix_space", true) ? PrependScheme::kAlways : PrependScheme::kNever;
    }
  };
  const auto pre = doc.value("pre_tokenizer", nlohmann::json());
  if (pre.is_object() && pre.value("type", "") == "Sequence") {
    for (const auto& p : pre.at("pretokenizers")) visit_pre(p);
  } else {
    visit_pre(pre);
  }
  tok->strip_leading_space_ = tok->prepend_ != PrependScheme::kNever;
  return tok;
}

bool SentencePieceBpeTokenizer::is_special(TokenId id) const {
  return id >= 0 && static_cast<std::size_t>(id) < special_.size() && special_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> SentencePieceBpeTokenizer::piece_to_id(std::string_view piece) const {
  auto it = piece_to_id_.find(std::string(piece));
  if (it == piece_to_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<int> SentencePieceBpeTokenizer::byte_token_value(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_piece_.size()) return std::nullopt;
  const std::string& p = id_to_piece_[static_cast<std::size_t>(id)];
  if (p.size() != 6 || !p.starts_with("<0x") || p.back() != '>') return std::nullopt;
  unsigned value = 0;
  if (std::sscanf(p.c_str() + 3, "%2X", &value) != 1) return std::nullopt;
  return static_cast<int>(value);
}

std::vector<TokenId> SentencePieceBpeTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t pos = 0;
  std::size_t segment_start = 0;
  auto flush = [&](std::size_t end) {
    if (end > segment_start) encode_segment(text.substr(segment_start, end - segment_start), segment_start == 0, out);
  };
  while (pos < text.size()) {
    const AddedToken* hit = nullptr;
    for (const auto& a : added_) {
      if (!a.content.empty() && text.substr(pos).starts_with(a.content)) {
        hit = &a;
        break;
      }
    }
    if (hit) {
      flush(pos);
      out.push_back(hit->id);
      pos += hit->content.size();
      segment_start = pos;
    } else {
      ++pos;
    }
  }
  flush(text.size());
  return out;
}

void SentencePieceBpeTokenizer::encode_segment(std::string_view text, bool first_segment,
                                               std::vector<TokenId>& out) const {
  std::string normalized = replace_all(text, " ", kMetaspace);
  bool prepend = prepend_ == PrependScheme::kAlways || (prepend_ == PrependScheme::kFirst && first_segment);
  // The Prepend normalizer always adds the marker; Metaspace only when it is not already there.
  if (prepend && !normalized.empty() && (prepend_normalizer_ || !normalized.starts_with(kMetaspace))) {
    normalized.insert(0, kMetaspace);
  }
  if (!split_words_) {
    bpe_word(normalized, out);
    return;
  }
  // Split before every "▁", keeping it attached to the following text.
  std::size_t start = 0;
  std::size_t pos = 0;
  while (pos < normalized.size()) {
    if (pos > start && std::string_view(normalized).substr(pos).starts_with(kMetaspace)) {
      bpe_word(std::string_view(normalized).substr(start, pos - start), out);
      start = pos;
    }
    pos += utf8_length(static_cast<unsigned char>(normalized[pos]));
  }
  if (start < normalized.size()) bpe_word(std::string_view(normalized).substr(start), out);
}

void SentencePieceBpeTokenizer::bpe_word(std::string_view word, std::vector<TokenId>& out) const {
  // Initial symbols: vocabulary characters, else byte-fallback tokens, else <unk>.
  std::vector<TokenId> symbols;
  std::size_t i = 0;
  bool last_was_unk = false;
  while (i < word.size()) {
    std::size_t n = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    std::string ch(word.substr(i, n));
    i += n;
    if (auto it = piece_to_id_.find(ch); it != piece_to_id_.end()) {
      symbols.push_back(it->second);
      last_was_unk = false;
      continue;
    }
    bool have_bytes = byte_fallback_ && std::all_of(ch.begin(), ch.end(), [&](char c) {
                        return byte_ids_[static_cast<unsigned char>(c)] >= 0;
                      });
    if (have_bytes) {
      for (char c : ch) symbols.push_back(byte_ids_[static_cast<unsigned char>(c)]);
      last_was_unk = false;
    } else if (unk_) {
      if (!(fuse_unk_ && last_was_unk)) symbols.push_back(*unk_);
      last_was_unk = true;
    }
  }

  // Lowest rank first, leftmost on ties; stale heap entries are skipped.
  struct Node {
    TokenId id;
    int prev;
    int next;
    bool alive;
  };
  std::vector<Node> nodes(symbols.size());
  for (std::size_t k = 0; k < symbols.size(); ++k) {
    nodes[k] = {symbols[k], static_cast<int>(k) - 1, k + 1 < symbols.size() ? static_cast<int>(k + 1) : -1, true};
  }
  struct Candidate {
    std::int32_t rank;
    int pos;
    TokenId left;
    TokenId right;
    TokenId merged;
    bool operator>(const Candidate& o) const { return rank != o.rank ? rank > o.rank : pos > o.pos; }
  };
  std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> heap;
  auto push_pair = [&](int left) {
    if (left < 0) return;
    int right = nodes[static_cast<std::size_t>(left)].next;
    if (right < 0) return;
    TokenId a = nodes[static_cast<std::size_t>(left)].id;
    TokenId b = nodes[static_cast<std::size_t>(right)].id;
    auto it = merges_.find(pair_key(a, b));
    if (it != merges_.end()) heap.push({it->second.first, left, a, b, it->second.second});
  };
  for (std::size_t k = 0; k + 1 < nodes.size(); ++k) push_pair(static_cast<int>(k));

  while (!heap.empty()) {
    Candidate c = heap.top();
    heap.pop();
    Node& left = nodes[static_cast<std::size_t>(c.pos)];
    if (!left.alive || left.id != c.left || left.next < 0) continue;
    Node& right = nodes[static_cast<std::size_t>(left.next)];
    if (!right.alive || right.id != c.right) continue;
    left.id = c.merged;
    right.alive = false;
    left.next = right.next;
    if (right.next >= 0) nodes[static_cast<std::size_t>(right.next)].prev = c.pos;
    push_pair(left.prev);
    push_pair(c.pos);
  }
  for (const auto& n : nodes) {
    if (n.alive) out.push_back(n.id);
  }
}

std::string SentencePieceBpeTokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  std::string pending_bytes;
  auto flush_bytes = [&] {
    if (pending_bytes.empty()) return;
    if (valid_utf8(pending_bytes)) {
      out += pending_bytes;
    } else {
      for (std::size_t k = 0; k < pending_bytes.size(); ++k) out += "\xEF\xBF\xBD";
    }
    pending_bytes.clear();
  };
  for (TokenId id : ids) {
    if (auto b = byte_token_value(id)) {
      pending_bytes.push_back(static_cast<char>(*b));
      continue;
    }
    flush_bytes();
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_piece_.size()) continue;
    out += replace_all(id_to_piece_[static_cast<std::size_t>(id)], kMetaspace, " ");
  }
  flush_bytes();
  if (strip_leading_space_ && !out.empty() && out.front() == ' ') out.erase(0, 1);
  return out;
}

std::string SentencePieceBpeTokenizer::token_text(TokenId id) const {
  if (auto b = byte_token_value(id)) return std::string(1, static_cast<char>(*b));
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_piece_.size()) return {};
  return replace_all(id_to_piece_[static_cast<std::size_t>(id)], kMetaspace, " ");
}

}  // namespace stsopt
