#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "stsopt/gcg.hpp"
#include "stsopt/rank_eval.hpp"

namespace stsopt {

/// One IterationRecord per non-blank line. Throws MalformedLine with the 1-based line number.
std::vector<IterationRecord> parse_iteration_log(std::string_view text);
std::vector<IterationRecord> read_iteration_log(const std::filesystem::path& path);

/// Target rank at every probed iteration, above the loss curve. Depends on the records only.
std::string rank_trajectory_svg(std::span<const IterationRecord> records);
/// Per-rank trial counts without and with the STS, drawn as dot columns.
std::string rank_distribution_svg(std::span<const TrialRow> rows);
/// Advantage / no advantage / disadvantage percentages as bars.
std::string advantage_svg(const AdvantageSummary& summary);

std::string read_file(const std::filesystem::path& path);  // throws Io
void write_file(const std::filesystem::path& path, std::string_view content);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// Reproduction record: command, configuration snapshot, seeds, and SHA-256 of every input and
/// artifact (keyed by file name). Contains no timestamps so reruns reproduce it byte for byte.
struct Manifest {
  std::string command;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;     // label -> path
  std::vector<std::filesystem::path> artifacts;  // files inside the output directory

  nlohmann::ordered_json to_json() const;
  void write(const std::filesystem::path& path) const;
};

}  // namespace stsopt
