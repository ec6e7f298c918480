#include "stsopt/catalog.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include "stsopt/error.hpp"

namespace stsopt {

namespace {

std::string line_prefix(std::size_t line_number) {
  return line_number == 0 ? std::string{} : "line " + std::to_string(line_number) + ": ";
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool is_conventional_key(std::string_view key) {
  static constexpr std::array kKeys = {kNameKey,     kDescriptionKey, kPriceKey,
                                       kRatingKey,   kCapacityKey,    kIdealForKey};
  return std::find(kKeys.begin(), kKeys.end(), key) != kKeys.end();
}

}  // namespace

Product Product::from_json_line(std::string_view line, std::size_t line_number) {
  nlohmann::ordered_json parsed;
  try {
    parsed = nlohmann::ordered_json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kMalformedLine, line_prefix(line_number) + e.what());
  }
  return from_json(std::move(parsed), line_number);
}

Product Product::from_json(nlohmann::ordered_json object, std::size_t line_number) {
  if (!object.is_object()) {
    throw Error(ErrorCode::kMalformedLine, line_prefix(line_number) + "expected a JSON object");
  }
  auto name = object.find(kNameKey);
  if (name == object.end() || !name->is_string() || name->get<std::string>().empty()) {
    throw Error(ErrorCode::kMalformedLine,
                line_prefix(line_number) + "missing or empty string field \"Name\"");
  }
  auto rating = object.find(kRatingKey);
  if (rating != object.end()) {
    if (!rating->is_number()) {
      throw Error(ErrorCode::kMalformedLine, line_prefix(line_number) + "\"Rating\" must be a number");
    }
    double r = rating->get<double>();
    if (!(r >= 0.0 && r <= 5.0)) {
      throw Error(ErrorCode::kMalformedLine, line_prefix(line_number) + "\"Rating\" outside [0, 5]");
    }
  }
  return Product(std::move(object));
}

std::string Product::name() const { return fields_.at(std::string(kNameKey)).get<std::string>(); }

std::optional<double> Product::rating() const {
  auto it = fields_.find(kRatingKey);
  if (it == fields_.end()) return std::nullopt;
  return it->get<double>();
}

std::vector<std::pair<std::string, nlohmann::ordered_json>> Product::extra() const {
  std::vector<std::pair<std::string, nlohmann::ordered_json>> out;
  for (const auto& [key, value] : fields_.items()) {
    if (!is_conventional_key(key)) out.emplace_back(key, value);
  }
  return out;
}

bool Product::has_field(std::string_view key) const { return fields_.contains(key); }

bool Product::has_string_field(std::string_view key) const {
  auto it = fields_.find(key);
  return it != fields_.end() && it->is_string();
}

std::string Product::string_field(std::string_view key) const {
  auto it = fields_.find(key);
  if (it == fields_.end() || !it->is_string()) return {};
  return it->get<std::string>();
}

void Product::set_string_field(std::string_view key, std::string value) {
  fields_[std::string(key)] = std::move(value);
}

namespace {

// Python-style separators (", " and ": ") at every nesting level.
void render_json(const nlohmann::ordered_json& value, std::string& out) {
  if (value.is_object() || value.is_array()) {
    const bool object = value.is_object();
    out += object ? '{' : '[';
    bool first = true;
    for (const auto& [key, item] : value.items()) {
      if (!first) out += ", ";
      first = false;
      if (object) {
        out += nlohmann::json(key).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
        out += ": ";
      }
      render_json(item, out);
    }
    out += object ? '}' : ']';
    return;
  }
  out += value.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
}

}  // namespace

std::string Product::to_json_line() const {
  std::string out;
  render_json(fields_, out);
  return out;
}

Permutation::Permutation(std::vector<std::size_t> indices) : indices_(std::move(indices)) {
  std::vector<bool> seen(indices_.size(), false);
  for (std::size_t i : indices_) {
    if (i >= indices_.size() || seen[i]) {
      throw Error(ErrorCode::kNotABijection,
                  "index " + std::to_string(i) + " invalid for permutation of size " +
                      std::to_string(indices_.size()));
    }
    seen[i] = true;
  }
}

Permutation Permutation::identity(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return Permutation(std::move(idx));
}

Permutation Permutation::reversed(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.rbegin(), idx.rend(), std::size_t{0});
  return Permutation(std::move(idx));
}

Permutation Permutation::random(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // Explicit Fisher-Yates so the result does not depend on the standard library's shuffle.
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return Permutation(std::move(idx));
}

Permutation Permutation::inverse() const {
  std::vector<std::size_t> inv(indices_.size());
  for (std::size_t i = 0; i < indices_.size(); ++i) inv[indices_[i]] = i;
  return Permutation(std::move(inv));
}

Permutation Permutation::then(const Permutation& next) const {
  if (next.size() != size()) {
    throw Error(ErrorCode::kLengthMismatch, "cannot compose permutations of different sizes");
  }
  // apply(then(a, b), x)[i] = apply(a, x)[b[i]] = x[a[b[i]]]
  std::vector<std::size_t> out(size());
  for (std::size_t i = 0; i < size(); ++i) out[i] = indices_[next[i]];
  return Permutation(std::move(out));
}

bool Permutation::is_identity() const {
  for (std::size_t i = 0; i < indices_.size(); ++i) {
    if (indices_[i] != i) return false;
  }
  return true;
}

Catalog::Catalog(std::vector<Product> products, std::string source_path)
    : products_(std::move(products)), source_path_(std::move(source_path)) {
  if (products_.empty()) throw Error(ErrorCode::kEmptyCatalog, "catalog has no products");
  std::unordered_set<std::string> seen;
  for (const auto& p : products_) {
    if (!seen.insert(p.name()).second) {
      throw Error(ErrorCode::kDuplicateName, "product name \"" + p.name() + "\" appears twice");
    }
  }
}

std::optional<std::size_t> Catalog::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < products_.size(); ++i) {
    if (products_[i].name() == name) return i;
  }
  return std::nullopt;
}

const Product& Catalog::product(std::string_view name) const {
  auto idx = index_of(name);
  if (!idx) throw Error(ErrorCode::kUnknownProduct, "no product named \"" + std::string(name) + "\"");
  return products_[*idx];
}

std::vector<std::string> Catalog::names() const {
  std::vector<std::string> out;
  out.reserve(products_.size());
  for (const auto& p : products_) out.push_back(p.name());
  return out;
}

std::string Catalog::serialize() const {
  std::string out;
  for (const auto& p : products_) {
    out += p.to_json_line();
    out += '\n';
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> Catalog::name_overlaps() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& a : products_) {
    for (const auto& b : products_) {
      if (&a == &b) continue;
      if (lower(b.name()).find(lower(a.name())) != std::string::npos) {
        out.emplace_back(a.name(), b.name());
      }
    }
  }
  return out;
}

Catalog parse_catalog(std::string_view text, std::string source_path) {
  std::vector<Product> products;
  std::size_t line_number = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    ++line_number;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") != std::string_view::npos) {
      products.push_back(Product::from_json_line(line, line_number));
    }
    pos = end + 1;
  }
  if (products.empty()) {
    throw Error(ErrorCode::kEmptyCatalog, "no product lines in " +
                                              (source_path.empty() ? std::string("input") : source_path));
  }
  return Catalog(std::move(products), std::move(source_path));
}

Catalog load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open catalog " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  Catalog catalog = parse_catalog(buf.str(), path.string());
  for (const auto& [inner, outer] : catalog.name_overlaps()) {
    std::cerr << "warning: product name \"" << inner << "\" occurs inside \"" << outer
              << "\"; rank parsing may be ambiguous\n";
  }
  return catalog;
}

Catalog inject_sts(const Catalog& catalog, std::string_view target_name, std::string_view field,
                   std::string_view sts_text) {
  auto idx = catalog.index_of(target_name);
  if (!idx) {
    throw Error(ErrorCode::kUnknownProduct, "no product named \"" + std::string(target_name) + "\"");
  }
  const Product& target = catalog[*idx];
  if (!target.has_string_field(field)) {
    throw Error(ErrorCode::kUnknownField, "product \"" + std::string(target_name) +
                                              "\" has no string field \"" + std::string(field) + "\"");
  }
  if (sts_text.empty()) return catalog;

  std::vector<Product> products = catalog.products();
  products[*idx].set_string_field(field, target.string_field(field) + " " + std::string(sts_text));
  return Catalog(std::move(products), catalog.source_path());
}

Catalog permute(const Catalog& catalog, const Permutation& perm) {
  if (perm.size() != catalog.size()) {
    throw Error(ErrorCode::kLengthMismatch, "permutation of size " + std::to_string(perm.size()) +
                                                " for catalog of size " + std::to_string(catalog.size()));
  }
  std::vector<Product> products;
  products.reserve(catalog.size());
  for (std::size_t i = 0; i < perm.size(); ++i) products.push_back(catalog[perm[i]]);
  return Catalog(std::move(products), catalog.source_path());
}

}  // namespace stsopt
