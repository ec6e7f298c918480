#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "stsopt/gcg.hpp"
#include "stsopt/model.hpp"
#include "stsopt/prompt.hpp"
#include "stsopt/rank_eval.hpp"

namespace stsopt {

/// Environment variable naming a directory searched for model identifiers that are neither
/// absolute nor relative to the config file.
inline constexpr const char* kModelCacheEnv = "STSOPT_MODEL_CACHE";

struct ModelSection {
  std::string backend = "mock";  // mock | llama
  std::string identifier;        // llama: model directory
  std::string device = "cpu";
  std::string precision = "f32";
  std::uint64_t mock_seed = 7;
};

struct RunConfig {
  ModelSection model;
  std::string catalog;  // path to the JSON-lines catalog
  std::string target;
  std::string field{kIdealForKey};
  ChatTemplate chat;
  GcgConfig gcg;
  EvalConfig eval;
  std::string output_dir = "runs/default";
  /// Directory relative paths are resolved against (the config file's directory).
  std::filesystem::path base_dir = ".";

  std::filesystem::path resolve(const std::string& path) const;
  /// Snapshot with every section filled in, for manifests.
  nlohmann::ordered_json to_json() const;
};

/// Parses YAML. Unknown keys and ill-typed values throw InvalidConfig naming the key.
RunConfig parse_run_config(const std::string& yaml_text, const std::filesystem::path& base_dir = ".");
RunConfig load_run_config(const std::filesystem::path& path);
/// The defaults as an annotated YAML document.
std::string default_config_yaml();

/// Checks cross-field invariants and that referenced paths exist. Throws InvalidConfig.
void validate_paths(const RunConfig& config);

/// Locates the llama model directory: absolute, relative to base_dir, then under
/// $STSOPT_MODEL_CACHE. Throws ModelLoad when none exists.
std::filesystem::path resolve_model_dir(const RunConfig& config);

/// Throws ModelLoad for backend failures and InvalidConfig for unknown backends/devices.
std::unique_ptr<LanguageModel> make_model(const RunConfig& config);

PromptSpec make_prompt_spec(const RunConfig& config);

}  // namespace stsopt
