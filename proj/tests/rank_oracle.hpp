#pragma once

#include <algorithm>
#include <cctype>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace stsopt::testing {

/// Scan every character offset for every name; rank by first hit.
inline std::map<std::string, std::size_t> brute_force_ranks(const std::string& response,
                                                            const std::vector<std::string>& names,
                                                            std::size_t catalog_size) {
  auto eq = [](char a, char b) {
    return std::tolower(static_cast<unsigned char>(a)) == std::tolower(static_cast<unsigned char>(b));
  };
  std::vector<std::pair<std::size_t, std::size_t>> first;  // (offset, name index)
  std::map<std::string, std::size_t> ranks;
  for (std::size_t n = 0; n < names.size(); ++n) {
    std::size_t hit = std::string::npos;
    for (std::size_t i = 0; i + names[n].size() <= response.size() && hit == std::string::npos; ++i) {
      bool match = true;
      for (std::size_t j = 0; j < names[n].size() && match; ++j) match = eq(response[i + j], names[n][j]);
      if (match) hit = i;
    }
    if (hit == std::string::npos) {
      ranks[names[n]] = catalog_size + 1;
    } else {
      first.emplace_back(hit, n);
    }
  }
  std::sort(first.begin(), first.end());
  for (std::size_t r = 0; r < first.size(); ++r) ranks[names[first[r].second]] = r + 1;
  return ranks;
}

/// Filler words, product names in random case, and partial names, in random order.
inline std::string synthetic_response(const std::vector<std::string>& names, std::mt19937_64& rng) {
  static const std::vector<std::string> filler = {"Sure!", "Here are", "options:", "\n", "1.", "2.", "Price:",
                                                  "Brew", "Master", "Classic", "coffee", "-", "Rating 4.1", "Wonder"};
  std::uniform_int_distribution<int> pieces(0, 40);
  std::uniform_int_distribution<std::size_t> pick_name(0, names.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_filler(0, filler.size() - 1);
  std::uniform_int_distribution<int> coin(0, 3);
  std::string out;
  const int n = pieces(rng);
  for (int i = 0; i < n; ++i) {
    std::string piece;
    if (coin(rng) == 0) {
      piece = names[pick_name(rng)];
      if (coin(rng) == 0) {
        for (char& c : piece) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      } else if (coin(rng) == 0) {
        piece = piece.substr(0, piece.size() / 2);
      }
    } else {
      piece = filler[pick_filler(rng)];
    }
    out += piece;
    out += coin(rng) == 0 ? "" : " ";
  }
  return out;
}

}  // namespace stsopt::testing
