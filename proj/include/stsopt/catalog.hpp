#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace stsopt {

// Conventional keys of a catalog line.
inline constexpr std::string_view kNameKey = "Name";
inline constexpr std::string_view kDescriptionKey = "Description";
inline constexpr std::string_view kPriceKey = "Price";
inline constexpr std::string_view kRatingKey = "Rating";
inline constexpr std::string_view kCapacityKey = "Capacity";
inline constexpr std::string_view kIdealForKey = "Ideal For";

/// One product record. Fields keep their file order so that a load/serialize round trip is
/// exact; unknown keys are carried along untouched.
class Product {
 public:
  /// Parses one catalog line. Requires a JSON object with a non-empty string "Name"; a
  /// "Rating", when present, must be a number in [0, 5].
  static Product from_json_line(std::string_view line, std::size_t line_number = 0);
  static Product from_json(nlohmann::ordered_json object, std::size_t line_number = 0);

  std::string name() const;
  std::string description() const { return string_field(kDescriptionKey); }
  std::string price() const { return string_field(kPriceKey); }
  std::optional<double> rating() const;
  std::string capacity() const { return string_field(kCapacityKey); }
  std::string ideal_for() const { return string_field(kIdealForKey); }
  /// Fields other than the six conventional ones, in file order.
  std::vector<std::pair<std::string, nlohmann::ordered_json>> extra() const;

  bool has_field(std::string_view key) const;
  bool has_string_field(std::string_view key) const;
  /// Value of a string field, or "" when absent / not a string.
  std::string string_field(std::string_view key) const;
  void set_string_field(std::string_view key, std::string value);

  const nlohmann::ordered_json& fields() const { return fields_; }

  /// `{"Key": value, "Key2": value2}` on a single line, standard JSON string escaping.
  std::string to_json_line() const;

  friend bool operator==(const Product& a, const Product& b) { return a.fields_ == b.fields_; }

 private:
  explicit Product(nlohmann::ordered_json fields) : fields_(std::move(fields)) {}
  nlohmann::ordered_json fields_;
};

/// Bijection on {0..n-1}. Applying it to a catalog puts old product `indices[i]` at slot i.
class Permutation {
 public:
  Permutation() = default;
  /// Throws NotABijection if `indices` is not a permutation of 0..n-1.
  explicit Permutation(std::vector<std::size_t> indices);

  static Permutation identity(std::size_t n);
  static Permutation reversed(std::size_t n);
  /// Uniformly random permutation drawn from a generator seeded with `seed`.
  static Permutation random(std::size_t n, std::uint64_t seed);

  Permutation inverse() const;
  /// (a.then(b)) applied to x equals b applied to (a applied to x).
  Permutation then(const Permutation& next) const;

  std::size_t size() const { return indices_.size(); }
  std::size_t operator[](std::size_t i) const { return indices_[i]; }
  const std::vector<std::size_t>& indices() const { return indices_; }
  bool is_identity() const;

  friend bool operator==(const Permutation&, const Permutation&) = default;

 private:
  std::vector<std::size_t> indices_;
};

class Catalog {
 public:
  /// Throws EmptyCatalog or DuplicateName.
  explicit Catalog(std::vector<Product> products, std::string source_path = {});

  const std::vector<Product>& products() const { return products_; }
  const Product& operator[](std::size_t i) const { return products_[i]; }
  std::size_t size() const { return products_.size(); }
  const std::string& source_path() const { return source_path_; }

  std::optional<std::size_t> index_of(std::string_view name) const;
  const Product& product(std::string_view name) const;  // throws UnknownProduct
  std::vector<std::string> names() const;

  /// One JSON line per product, each terminated by '\n'.
  std::string serialize() const;

  /// Pairs (a, b) where a's name occurs inside b's name, ignoring case. Such pairs make
  /// first-occurrence rank parsing ambiguous.
  std::vector<std::pair<std::string, std::string>> name_overlaps() const;

  /// Equality ignores source_path.
  friend bool operator==(const Catalog& a, const Catalog& b) { return a.products_ == b.products_; }

 private:
  std::vector<Product> products_;
  std::string source_path_;
};

/// Parses JSON-lines text (blank lines skipped). Errors carry 1-based line numbers.
Catalog parse_catalog(std::string_view text, std::string source_path = {});
/// Reads and parses a catalog file; warns on stderr when product names overlap.
Catalog load_catalog(const std::filesystem::path& path);

/// Appends " " + sts_text to the target product's string field. Empty sts_text is the identity.
/// Throws UnknownProduct / UnknownField (the field must already exist and hold a string).
Catalog inject_sts(const Catalog& catalog, std::string_view target_name, std::string_view field,
                   std::string_view sts_text);

/// Throws LengthMismatch when the sizes differ.
Catalog permute(const Catalog& catalog, const Permutation& perm);

}  // namespace stsopt
