#include "stsopt/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "stsopt/error.hpp"
#include "stsopt/llama_model.hpp"
#include "stsopt/mock_model.hpp"

namespace stsopt {

namespace {

[[noreturn]] void bad(const std::string& key, const std::string& what) {
  throw Error(ErrorCode::kInvalidConfig, key + ": " + what);
}

void check_keys(const YAML::Node& node, const std::string& section, const std::set<std::string>& known) {
  if (!node.IsMap()) bad(section.empty() ? "<root>" : section, "expected a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!known.count(key)) bad(section.empty() ? key : section + "." + key, "unknown key");
  }
}

template <typename T>
void read(const YAML::Node& node, const char* key, const std::string& path, T& out) {
  const YAML::Node v = node[key];
  if (!v || v.IsNull()) return;
  try {
    out = v.as<T>();
  } catch (const YAML::Exception&) {
    bad(path + key, "invalid value \"" + YAML::Dump(v) + "\"");
  }
}

void read_size(const YAML::Node& node, const char* key, const std::string& path, std::size_t& out) {
  long long v = static_cast<long long>(out);
  read(node, key, path, v);
  if (v < 0) bad(path + key, "must be non-negative");
  out = static_cast<std::size_t>(v);
}

}  // namespace

std::filesystem::path RunConfig::resolve(const std::string& path) const {
  std::filesystem::path p(path);
  return p.is_absolute() ? p : base_dir / p;
}

RunConfig parse_run_config(const std::string& yaml_text, const std::filesystem::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("YAML syntax: ") + e.what());
  }
  if (!root || root.IsNull()) throw Error(ErrorCode::kInvalidConfig, "config is empty");
  check_keys(root, "", {"model", "catalog", "target", "field", "template", "gcg", "eval", "output_dir"});

  RunConfig c;
  c.base_dir = base_dir;
  if (const auto m = root["model"]) {
    check_keys(m, "model", {"backend", "identifier", "device", "precision", "mock_seed"});
    read(m, "backend", "model.", c.model.backend);
    read(m, "identifier", "model.", c.model.identifier);
    read(m, "device", "model.", c.model.device);
    read(m, "precision", "model.", c.model.precision);
    read(m, "mock_seed", "model.", c.model.mock_seed);
  }
  read(root, "catalog", "", c.catalog);
  read(root, "target", "", c.target);
  read(root, "field", "", c.field);
  read(root, "output_dir", "", c.output_dir);
  if (const auto t = root["template"]) {
    check_keys(t, "template", {"bos", "turn_open", "sys_open", "sys_close", "turn_close", "system_text", "query_text",
                               "catalog_header"});
    read(t, "bos", "template.", c.chat.bos);
    read(t, "turn_open", "template.", c.chat.turn_open);
    read(t, "sys_open", "template.", c.chat.sys_open);
    read(t, "sys_close", "template.", c.chat.sys_close);
    read(t, "turn_close", "template.", c.chat.turn_close);
    read(t, "system_text", "template.", c.chat.system_text);
    read(t, "query_text", "template.", c.chat.query_text);
    read(t, "catalog_header", "template.", c.chat.catalog_header);
  }
  if (const auto g = root["gcg"]) {
    check_keys(g, "gcg", {"sts_length", "top_k", "batch_size", "iterations", "permutation_mode", "seed",
                          "rank_eval_cadence", "retain_current", "token_filter", "probe_max_new_tokens"});
    read_size(g, "sts_length", "gcg.", c.gcg.sts_length);
    read_size(g, "top_k", "gcg.", c.gcg.top_k);
    read_size(g, "batch_size", "gcg.", c.gcg.batch_size);
    read_size(g, "iterations", "gcg.", c.gcg.iterations);
    read_size(g, "rank_eval_cadence", "gcg.", c.gcg.rank_eval_cadence);
    read_size(g, "probe_max_new_tokens", "gcg.", c.gcg.probe_max_new_tokens);
    read(g, "seed", "gcg.", c.gcg.seed);
    std::string mode = to_string(c.gcg.permutation_mode), filter = to_string(c.gcg.token_filter);
    read(g, "permutation_mode", "gcg.", mode);
    read(g, "token_filter", "gcg.", filter);
    c.gcg.permutation_mode = parse_permutation_mode(mode);
    c.gcg.token_filter = parse_token_filter(filter);
    if (g["retain_current"] && !g["retain_current"].IsNull()) {
      bool retain = false;
      read(g, "retain_current", "gcg.", retain);
      c.gcg.retain_current = retain;
    }
  }
  if (const auto e = root["eval"]) {
    check_keys(e, "eval", {"n_trials", "randomize_order", "temperature", "max_new_tokens", "seed"});
    read_size(e, "n_trials", "eval.", c.eval.n_trials);
    read(e, "randomize_order", "eval.", c.eval.randomize_order);
    read(e, "temperature", "eval.", c.eval.sampling.temperature);
    read_size(e, "max_new_tokens", "eval.", c.eval.sampling.max_new_tokens);
    read(e, "seed", "eval.", c.eval.seed);
  }

  if (c.catalog.empty()) bad("catalog", "missing required key");
  if (c.target.empty()) bad("target", "missing required key");
  if (c.field.empty()) bad("field", "must not be empty");
  if (c.output_dir.empty()) bad("output_dir", "must not be empty");
  if (c.model.backend != "mock" && c.model.backend != "llama") bad("model.backend", "expected mock or llama");
  if (c.model.device != "cpu") bad("model.device", "only cpu is supported");
  parse_precision(c.model.precision);
  if (c.model.backend == "llama" && c.model.identifier.empty()) bad("model.identifier", "required for llama");
  c.eval.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kInvalidConfig, "cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

std::string default_config_yaml() {
  const RunConfig d;
  const ChatTemplate& t = d.chat;
  auto q = [](const std::string& s) {
    YAML::Emitter e;
    e << YAML::DoubleQuoted << s;
    return std::string(e.c_str());
  };
  std::ostringstream out;
  out << "# Relative paths resolve against this file's directory.\n"
      << "model:\n"
      << "  backend: " << d.model.backend << "        # mock | llama\n"
      << "  identifier: \"\"      # llama: model directory; also searched under $" << kModelCacheEnv << "\n"
      << "  device: " << d.model.device << "\n"
      << "  precision: " << d.model.precision << "        # f32 | f64\n"
      << "  mock_seed: " << d.model.mock_seed << "\n"
      << "catalog: data/coffee_machines.jsonl   # required\n"
      << "target: ColdBrew Master               # required\n"
      << "field: " << q(d.field) << "\n"
      << "template:\n"
      << "  bos: " << q(t.bos) << "\n"
      << "  turn_open: " << q(t.turn_open) << "\n"
      << "  sys_open: " << q(t.sys_open) << "\n"
      << "  sys_close: " << q(t.sys_close) << "\n"
      << "  turn_close: " << q(t.turn_close) << "\n"
      << "  system_text: " << q(t.system_text) << "\n"
      << "  query_text: " << q(t.query_text) << "\n"
      << "  catalog_header: " << q(t.catalog_header) << "\n"
      << "gcg:\n"
      << "  sts_length: " << d.gcg.sts_length << "\n"
      << "  top_k: " << d.gcg.top_k << "               # must not exceed the vocabulary (mock: 100)\n"
      << "  batch_size: " << d.gcg.batch_size << "\n"
      << "  iterations: " << d.gcg.iterations << "\n"
      << "  permutation_mode: " << to_string(d.gcg.permutation_mode) << "   # fixed | random\n"
      << "  seed: " << d.gcg.seed << "\n"
      << "  rank_eval_cadence: " << d.gcg.rank_eval_cadence << "\n"
      << "  retain_current: null      # null: true for fixed, false for random\n"
      << "  token_filter: " << to_string(d.gcg.token_filter) << "       # none | printable | ascii\n"
      << "  probe_max_new_tokens: " << d.gcg.probe_max_new_tokens << "\n"
      << "eval:\n"
      << "  n_trials: " << d.eval.n_trials << "\n"
      << "  randomize_order: " << (d.eval.randomize_order ? "true" : "false") << "\n"
      << "  temperature: " << d.eval.sampling.temperature << "\n"
      << "  max_new_tokens: " << d.eval.sampling.max_new_tokens << "\n"
      << "  seed: " << d.eval.seed << "\n"
      << "output_dir: " << d.output_dir << "\n";
  return out.str();
}

void validate_paths(const RunConfig& config) {
  const auto catalog = config.resolve(config.catalog);
  if (!std::filesystem::is_regular_file(catalog)) bad("catalog", "no such file " + catalog.string());
}

std::filesystem::path resolve_model_dir(const RunConfig& config) {
  const std::filesystem::path id(config.model.identifier);
  std::vector<std::filesystem::path> tried;
  if (id.is_absolute()) {
    tried.push_back(id);
  } else {
    tried.push_back(config.base_dir / id);
    if (const char* cache = std::getenv(kModelCacheEnv); cache && *cache) tried.push_back(std::filesystem::path(cache) / id);
  }
  for (const auto& p : tried) {
    if (std::filesystem::is_regular_file(p / "config.json")) return p;
  }
  std::string msg = "model \"" + config.model.identifier + "\" not found (tried";
  for (const auto& p : tried) msg += " " + p.string();
  throw Error(ErrorCode::kModelLoad, msg + ")");
}

std::unique_ptr<LanguageModel> make_model(const RunConfig& config) {
  if (config.model.backend == "mock") {
    MockModelOptions opt;
    opt.seed = config.model.mock_seed;
    return std::make_unique<MockModel>(CharTokenizer::printable_ascii(), opt);
  }
  if (config.model.backend == "llama") {
    return LlamaModel::load(resolve_model_dir(config), parse_precision(config.model.precision));
  }
  bad("model.backend", "unknown backend \"" + config.model.backend + "\"");
}

PromptSpec make_prompt_spec(const RunConfig& config) {
  return PromptSpec{config.chat, load_catalog(config.resolve(config.catalog)), config.target, config.field};
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = {{"backend", model.backend},
                {"identifier", model.identifier},
                {"device", model.device},
                {"precision", model.precision},
                {"mock_seed", model.mock_seed}};
  j["catalog"] = catalog;
  j["target"] = target;
  j["field"] = field;
  j["template"] = {{"bos", chat.bos},
                   {"turn_open", chat.turn_open},
                   {"sys_open", chat.sys_open},
                   {"sys_close", chat.sys_close},
                   {"turn_close", chat.turn_close},
                   {"system_text", chat.system_text},
                   {"query_text", chat.query_text},
                   {"catalog_header", chat.catalog_header}};
  j["gcg"] = gcg.to_json();
  j["eval"] = {{"n_trials", eval.n_trials},
               {"randomize_order", eval.randomize_order},
               {"temperature", eval.sampling.temperature},
               {"max_new_tokens", eval.sampling.max_new_tokens},
               {"seed", eval.seed}};
  j["output_dir"] = output_dir;
  return j;
}

}  // namespace stsopt
