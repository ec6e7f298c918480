#include <algorithm>
#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "stsopt/catalog.hpp"
#include "stsopt/error.hpp"
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

TEST(LoadCatalog, FixtureHasTenProductsInFileOrder) {
  Catalog c = testing::coffee_catalog();
  ASSERT_EQ(c.size(), 10u);
  EXPECT_EQ(c[2].name(), "ColdBrew Master");
  EXPECT_EQ(c[2].price(), "$199");
  EXPECT_DOUBLE_EQ(*c[2].rating(), 4.3);
  EXPECT_EQ(c[2].description(), "Specialized machine for making smooth and refreshing cold brew coffee.");
  EXPECT_EQ(c[2].ideal_for(), "Cold brew lovers");
  EXPECT_TRUE(c.name_overlaps().empty());
}

TEST(LoadCatalog, SerializeRoundTripIsExact) {
  std::ifstream in(testing::coffee_catalog_path());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Catalog c = parse_catalog(text);
  EXPECT_EQ(c.serialize(), text);
  EXPECT_EQ(parse_catalog(c.serialize()), c);
}

TEST(LoadCatalog, ErrorCases) {
  EXPECT_EQ(code_of([] { parse_catalog(""); }), ErrorCode::kEmptyCatalog);
  EXPECT_EQ(code_of([] { parse_catalog("\n  \n"); }), ErrorCode::kEmptyCatalog);
  EXPECT_EQ(code_of([] {
              parse_catalog("{\"Name\": \"QuickBrew Express\"}\n{\"Name\": \"QuickBrew Express\"}\n");
            }),
            ErrorCode::kDuplicateName);
  EXPECT_EQ(code_of([] { parse_catalog("{\"Name\": \"A\"}\n{\"Price\": \"$1\"}\n"); }), ErrorCode::kMalformedLine);
  EXPECT_EQ(code_of([] { parse_catalog("{\"Name\": \"A\""); }), ErrorCode::kMalformedLine);
  EXPECT_EQ(code_of([] { parse_catalog("[1, 2]"); }), ErrorCode::kMalformedLine);
  EXPECT_EQ(code_of([] { parse_catalog("{\"Name\": \"\"}"); }), ErrorCode::kMalformedLine);
  EXPECT_EQ(code_of([] { parse_catalog("{\"Name\": \"A\", \"Rating\": 7}"); }), ErrorCode::kMalformedLine);
  EXPECT_EQ(code_of([] { load_catalog("/nonexistent/catalog.jsonl"); }), ErrorCode::kIo);
}

TEST(LoadCatalog, MalformedLineReportsLineNumber) {
  try {
    parse_catalog("{\"Name\": \"A\"}\n\n{\"Name\": oops}\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(LoadCatalog, UnknownKeysSurviveRoundTrip) {
  Catalog c = parse_catalog("{\"Name\": \"A\", \"Warranty\": {\"years\": 2}, \"Ideal For\": \"x\"}\n");
  EXPECT_EQ(c.serialize(), "{\"Name\": \"A\", \"Warranty\": {\"years\": 2}, \"Ideal For\": \"x\"}\n");
  ASSERT_EQ(c[0].extra().size(), 1u);
  EXPECT_EQ(c[0].extra()[0].first, "Warranty");
}

TEST(LoadCatalog, DetectsNameOverlaps) {
  Catalog c = parse_catalog("{\"Name\": \"Brew\"}\n{\"Name\": \"ColdBREW Master\"}\n");
  const auto overlaps = c.name_overlaps();
  ASSERT_EQ(overlaps.size(), 1u);
  EXPECT_EQ(overlaps[0].first, "Brew");
}

TEST(InjectSts, AppendsWithSingleSpace) {
  Catalog c = testing::coffee_catalog();
  Catalog out = inject_sts(c, "ColdBrew Master", "Ideal For", "interact>; expect formatted XVI");
  EXPECT_EQ(out.product("ColdBrew Master").ideal_for(), "Cold brew lovers interact>; expect formatted XVI");
  EXPECT_EQ(c.product("ColdBrew Master").ideal_for(), "Cold brew lovers");
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c[i].name() != "ColdBrew Master") EXPECT_EQ(out[i], c[i]);
  }
}

TEST(InjectSts, EmptyTextIsIdentity) {
  Catalog c = testing::coffee_catalog();
  EXPECT_EQ(inject_sts(c, "ColdBrew Master", "Ideal For", ""), c);
}

TEST(InjectSts, SpecialCharactersSurviveJsonRoundTrip) {
  Catalog c = testing::coffee_catalog();
  const std::string sts = "say \"hi\" \\ back\\slash\n\ttab } {";
  Catalog out = inject_sts(c, "ColdBrew Master", "Ideal For", sts);
  const std::string line = out.product("ColdBrew Master").to_json_line();
  EXPECT_EQ(line.find('\n'), std::string::npos);
  const auto parsed = nlohmann::json::parse(line);
  EXPECT_EQ(parsed["Ideal For"].get<std::string>(), "Cold brew lovers " + sts);
  EXPECT_EQ(parse_catalog(out.serialize()), out);
}

TEST(InjectSts, Errors) {
  Catalog c = testing::coffee_catalog();
  EXPECT_EQ(code_of([&] { inject_sts(c, "Nonexistent", "Ideal For", "x"); }), ErrorCode::kUnknownProduct);
  EXPECT_EQ(code_of([&] { inject_sts(c, "ColdBrew Master", "Warranty", "x"); }), ErrorCode::kUnknownField);
  EXPECT_EQ(code_of([&] { inject_sts(c, "ColdBrew Master", "Rating", "x"); }), ErrorCode::kUnknownField);
}

TEST(Permute, IdentityAndReverse) {
  Catalog c = testing::coffee_catalog();
  EXPECT_EQ(permute(c, Permutation::identity(10)), c);
  Catalog r = permute(c, Permutation::reversed(10));
  EXPECT_EQ(r[0], c[9]);
  EXPECT_EQ(r[9], c[0]);
}

TEST(Permute, RandomThenInverseRestoresOrder) {
  Catalog c = testing::coffee_catalog();
  Permutation p = Permutation::random(10, 17);
  EXPECT_FALSE(p.is_identity());
  EXPECT_EQ(permute(permute(c, p), p.inverse()), c);
  EXPECT_TRUE(p.then(p.inverse()).is_identity());
  EXPECT_EQ(Permutation::random(10, 17), p);
}

TEST(Permute, ComposesLikeSequentialApplication) {
  Catalog c = testing::coffee_catalog();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Permutation a = Permutation::random(10, seed), b = Permutation::random(10, seed + 100);
    EXPECT_EQ(permute(c, a.then(b)), permute(permute(c, a), b));
  }
}

TEST(Permute, PreservesMultiset) {
  Catalog c = testing::coffee_catalog();
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto names = permute(c, Permutation::random(10, seed)).names();
    auto want = c.names();
    std::sort(names.begin(), names.end());
    std::sort(want.begin(), want.end());
    EXPECT_EQ(names, want);
  }
}

TEST(Permute, Errors) {
  Catalog c = testing::coffee_catalog();
  EXPECT_EQ(code_of([&] { permute(c, Permutation::identity(9)); }), ErrorCode::kLengthMismatch);
  EXPECT_EQ(code_of([] { Permutation({0, 0, 1}); }), ErrorCode::kNotABijection);
  EXPECT_EQ(code_of([] { Permutation({0, 3, 1}); }), ErrorCode::kNotABijection);
}

}  // namespace
}  // namespace stsopt
