#include "stsopt/llama_model.hpp"

#include <fstream>

#include "stsopt/error.hpp"
#include "stsopt/safetensors.hpp"

namespace stsopt {

Precision parse_precision(const std::string& name) {
  if (name == "f32" || name == "float32" || name == "fp32") return Precision::kFloat32;
  if (name == "f64" || name == "float64" || name == "fp64") return Precision::kFloat64;
  throw Error(ErrorCode::kInvalidConfig, "unknown precision \"" + name + "\" (expected f32 or f64)");
}

std::string to_string(Precision p) { return p == Precision::kFloat32 ? "f32" : "f64"; }

LlamaConfig parse_llama_config(const nlohmann::json& j) {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kModelLoad, "config.json: " + what); };
  const std::string type = j.value("model_type", std::string("llama"));
  if (type != "llama" && type != "mistral") fail("unsupported model_type \"" + type + "\"");
  if (j.value("hidden_act", std::string("silu")) != "silu") fail("only silu activations are supported");
  if (j.value("attention_bias", false) || j.value("mlp_bias", false)) fail("projection biases are not supported");
  auto scaling_type = [](const nlohmann::json& s) -> std::string {
    if (!s.is_object()) return "default";
    return s.value("rope_type", s.value("type", std::string("default")));
  };
  if (j.contains("rope_scaling") && scaling_type(j["rope_scaling"]) != "default") fail("rope scaling is not supported");

  LlamaConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.intermediate_size = j.at("intermediate_size").get<std::size_t>();
    c.num_layers = j.at("num_hidden_layers").get<std::size_t>();
    c.num_heads = j.at("num_attention_heads").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(e.what());
  }
  c.num_kv_heads = j.contains("num_key_value_heads") && !j["num_key_value_heads"].is_null()
                       ? j["num_key_value_heads"].get<std::size_t>()
                       : c.num_heads;
  c.head_dim = j.contains("head_dim") && !j["head_dim"].is_null() ? j["head_dim"].get<std::size_t>()
                                                                   : c.hidden_size / c.num_heads;
  c.max_position_embeddings = j.value("max_position_embeddings", std::size_t{2048});
  c.rms_norm_eps = j.value("rms_norm_eps", 1e-6);
  if (j.contains("rope_theta")) {
    c.rope_theta = j["rope_theta"].get<double>();
  } else if (j.contains("rope_parameters") && j["rope_parameters"].is_object()) {
    if (scaling_type(j["rope_parameters"]) != "default") fail("rope scaling is not supported");
    c.rope_theta = j["rope_parameters"].value("rope_theta", 10000.0);
  }
  c.tie_word_embeddings = j.value("tie_word_embeddings", false);
  if (j.contains("eos_token_id")) {
    const auto& e = j["eos_token_id"];
    if (e.is_number_integer()) c.eos_token_id = e.get<TokenId>();
    if (e.is_array() && !e.empty()) c.eos_token_id = e[0].get<TokenId>();
  }
  if (c.num_kv_heads == 0 || c.num_heads % c.num_kv_heads != 0) fail("num_attention_heads must be a multiple of num_key_value_heads");
  if (c.head_dim % 2 != 0) fail("head_dim must be even");
  return c;
}

struct LlamaModel::Impl {
  virtual ~Impl() = default;
  virtual Eigen::MatrixXd logits(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                 std::span<const EmbeddingDelta> deltas) const = 0;
  virtual Eigen::MatrixXd input_gradient(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                         const LogitsGradFn& head, TokenSlice wrt) const = 0;
  virtual Eigen::MatrixXd project_to_vocab(const Eigen::MatrixXd& rows) const = 0;
  virtual std::vector<double> candidate_losses(const AssembledPrompt& prompt,
                                               std::span<const std::vector<TokenId>> candidates) const = 0;
  virtual std::unique_ptr<DecodeSession> start_session(std::span<const TokenId> prompt) const = 0;
  virtual const LlamaConfig& config() const = 0;
};

template <typename Scalar>
struct LlamaModel::ImplT final : LlamaModel::Impl {
  using Net = LlamaTransformer<Scalar>;
  using Matrix = typename Net::Matrix;

  ImplT(LlamaConfig config, const typename Net::TensorSource& source) : net(std::move(config), source) {}

  static Eigen::MatrixXd to_double(const Matrix& m) { return m.template cast<double>(); }

  Eigen::MatrixXd logits(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                         std::span<const EmbeddingDelta> deltas) const override {
    Matrix x = net.embed(tokens.first(end));
    for (const auto& d : deltas) {
      if (d.position < end) x.row(static_cast<Eigen::Index>(d.position)) += d.delta.transpose().template cast<Scalar>();
    }
    return to_double(net.forward(std::move(x), begin, nullptr));
  }

  Eigen::MatrixXd input_gradient(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                 const LogitsGradFn& head, TokenSlice wrt) const override {
    typename Net::Tape tape;
    Matrix logits = net.forward(net.embed(tokens.first(end)), begin, &tape);
    Matrix dlogits = head(to_double(logits)).template cast<Scalar>();
    Matrix dx = net.backward(tape, dlogits);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(wrt.size()), dx.cols());
    for (std::size_t i = wrt.begin; i < wrt.end && i < end; ++i) {
      out.row(static_cast<Eigen::Index>(i - wrt.begin)) = dx.row(static_cast<Eigen::Index>(i)).template cast<double>();
    }
    return out;
  }

  Eigen::MatrixXd project_to_vocab(const Eigen::MatrixXd& rows) const override {
    return to_double(Matrix(rows.template cast<Scalar>()) * net.embeddings().transpose());
  }

  std::vector<double> candidate_losses(const AssembledPrompt& prompt,
                                       std::span<const std::vector<TokenId>> candidates) const override {
    const TokenSlice sts = prompt.sts_slice;
    const TokenSlice target = prompt.target_slice;
    const std::size_t end = target.end - 1;
    std::span<const TokenId> tokens(prompt.tokens);
    auto cache = net.make_cache(end);
    if (sts.begin > 0) net.extend(cache, net.embed(tokens.first(sts.begin)));
    const std::size_t prefix = cache.length;
    const auto targets = prompt.target();

    std::vector<double> out;
    out.reserve(candidates.size());
    std::vector<TokenId> tail;
    for (const auto& cand : candidates) {
      tail.assign(cand.begin(), cand.end());
      tail.insert(tail.end(), tokens.begin() + static_cast<std::ptrdiff_t>(sts.end),
                  tokens.begin() + static_cast<std::ptrdiff_t>(end));
      cache.length = prefix;
      Matrix hidden = net.extend(cache, net.embed(tail));
      Matrix rows = net.project_logits(hidden.bottomRows(static_cast<Eigen::Index>(target.size())));
      out.push_back(mean_cross_entropy(to_double(rows), targets));
    }
    return out;
  }

  class Session final : public DecodeSession {
   public:
    Session(const Net& net, std::span<const TokenId> prompt, std::size_t capacity)
        : net_(net), cache_(net.make_cache(capacity)) {
      Matrix hidden = net_.extend(cache_, net_.embed(prompt));
      last_ = hidden.bottomRows(1);
    }
    Eigen::VectorXd next_logits() override {
      return net_.project_logits(last_).template cast<double>().row(0).transpose();
    }
    void append(TokenId token) override {
      const TokenId one[] = {token};
      last_ = net_.extend(cache_, net_.embed(one));
    }

   private:
    const Net& net_;
    typename Net::KvCache cache_;
    Matrix last_;
  };

  std::unique_ptr<DecodeSession> start_session(std::span<const TokenId> prompt) const override {
    if (prompt.empty()) throw Error(ErrorCode::kInvalidLength, "cannot decode from an empty prompt");
    return std::make_unique<Session>(net, prompt, net.config().max_position_embeddings);
  }

  const LlamaConfig& config() const override { return net.config(); }

  Net net;
};

LlamaModel::~LlamaModel() = default;

std::unique_ptr<LlamaModel> LlamaModel::load(const std::filesystem::path& dir, Precision precision) {
  std::ifstream cfg_in(dir / "config.json");
  if (!cfg_in) throw Error(ErrorCode::kModelLoad, "no config.json in " + dir.string());
  nlohmann::json cfg_json = nlohmann::json::parse(cfg_in, nullptr, false);
  if (cfg_json.is_discarded()) throw Error(ErrorCode::kModelLoad, "config.json is not valid JSON");
  LlamaConfig config = parse_llama_config(cfg_json);

  std::unique_ptr<LlamaModel> model(new LlamaModel());
  model->precision_ = precision;
  model->tokenizer_ = SentencePieceBpeTokenizer::from_file(dir / "tokenizer.json");
  if (model->tokenizer_->vocab_size() > config.vocab_size) {
    throw Error(ErrorCode::kModelLoad, "tokenizer vocabulary exceeds the model's embedding rows");
  }

  std::filesystem::path weights = dir / "model.safetensors";
  if (!std::filesystem::exists(weights)) weights = dir / "model.safetensors.index.json";
  const SafetensorsArchive archive = SafetensorsArchive::open(weights);
  auto source = [&archive](const std::string& name, std::size_t rows, std::size_t cols) {
    auto shape = archive.shape(name);
    std::size_t count = 1;
    for (auto s : shape) count *= static_cast<std::size_t>(s);
    if (count != rows * cols) {
      throw Error(ErrorCode::kModelLoad, "tensor " + name + " has " + std::to_string(count) + " elements, expected " +
                                             std::to_string(rows * cols));
    }
    return archive.values(name);
  };
  if (precision == Precision::kFloat32) {
    model->impl_ = std::make_unique<ImplT<float>>(config, source);
  } else {
    model->impl_ = std::make_unique<ImplT<double>>(config, source);
  }
  return model;
}

std::size_t LlamaModel::vocab_size() const { return impl_->config().vocab_size; }
std::size_t LlamaModel::context_length() const { return impl_->config().max_position_embeddings; }
std::string LlamaModel::backend_id() const { return "llama-" + to_string(precision_); }
std::size_t LlamaModel::embedding_dim() const { return impl_->config().hidden_size; }
const LlamaConfig& LlamaModel::config() const { return impl_->config(); }

void LlamaModel::check_tokens(std::span<const TokenId> tokens) const {
  check_fits(tokens.size());
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size()) {
      throw Error(ErrorCode::kInvalidLength, "token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

Eigen::MatrixXd LlamaModel::logits(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                   std::span<const EmbeddingDelta> deltas) const {
  check_tokens(tokens);
  if (begin > end || end > tokens.size()) throw Error(ErrorCode::kInvalidLength, "logit rows out of range");
  return impl_->logits(tokens, begin, end, deltas);
}

Eigen::MatrixXd LlamaModel::input_gradient(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                           const LogitsGradFn& head, TokenSlice wrt) const {
  check_tokens(tokens);
  return impl_->input_gradient(tokens, begin, end, head, wrt);
}

Eigen::MatrixXd LlamaModel::project_to_vocab(const Eigen::MatrixXd& embedding_rows) const {
  return impl_->project_to_vocab(embedding_rows);
}

std::vector<double> LlamaModel::candidate_losses(const AssembledPrompt& prompt,
                                                 std::span<const std::vector<TokenId>> candidates) const {
  check_tokens(prompt.tokens);
  if (prompt.target_slice.begin < prompt.sts_slice.end) return LanguageModel::candidate_losses(prompt, candidates);
  return impl_->candidate_losses(prompt, candidates);
}

std::unique_ptr<DecodeSession> LlamaModel::start_session(std::span<const TokenId> prompt) const {
  check_tokens(prompt);
  return impl_->start_session(prompt);
}

}  // namespace stsopt
