#include "stsopt/mock_model.hpp"

#include <cmath>
#include <random>

#include "stsopt/error.hpp"

namespace stsopt {

namespace {

Eigen::MatrixXd gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = dist(rng);
  }
  return m;
}

// Causal attention of one query over keys/values [0, t]. Fills `weights` with the softmax.
Eigen::RowVectorXd attend(const Eigen::RowVectorXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                          std::size_t t, double scale, Eigen::VectorXd& weights) {
  const auto n = static_cast<Eigen::Index>(t + 1);
  weights = (k.topRows(n) * q.transpose()) * scale;
  double m = weights.maxCoeff();
  weights = (weights.array() - m).exp();
  weights /= weights.sum();
  return weights.transpose() * v.topRows(n);
}

}  // namespace

MockModel::MockModel(std::shared_ptr<const Tokenizer> tokenizer, MockModelOptions options)
    : tokenizer_(std::move(tokenizer)), options_(std::move(options)) {
  if (!tokenizer_) throw Error(ErrorCode::kModelLoad, "mock model needs a tokenizer");
  const auto V = static_cast<Eigen::Index>(tokenizer_->vocab_size());
  const auto d = static_cast<Eigen::Index>(options_.embed_dim);
  const auto m = static_cast<Eigen::Index>(options_.hidden_dim);
  if (V == 0 || d == 0 || m == 0) throw Error(ErrorCode::kInvalidConfig, "mock model dimensions must be positive");

  std::mt19937_64 rng(options_.seed);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  embed_ = gaussian(rng, V, d, 1.0);
  wq_ = gaussian(rng, d, d, inv_sqrt_d);
  wk_ = gaussian(rng, d, d, inv_sqrt_d);
  wv_ = gaussian(rng, d, d, inv_sqrt_d);
  w1_ = gaussian(rng, d, m, inv_sqrt_d / std::sqrt(2.0));
  b1_ = gaussian(rng, 1, m, 0.1);
  out_ = gaussian(rng, m, V, 0.5);
  out_bias_ = gaussian(rng, 1, V, 0.5);
  if (options_.uniform_output) {
    out_.setZero();
    out_bias_.setZero();
  }
}

void MockModel::check_tokens(std::span<const TokenId> tokens) const {
  check_fits(tokens.size());
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size()) {
      throw Error(ErrorCode::kInvalidLength, "token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

Eigen::RowVectorXd MockModel::position_row(std::size_t t) const {
  const auto d = static_cast<Eigen::Index>(options_.embed_dim);
  Eigen::RowVectorXd p(d);
  for (Eigen::Index i = 0; i < d; ++i) {
    double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
    double angle = static_cast<double>(t) * freq;
    p[i] = 0.5 * ((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
  }
  return p;
}

Eigen::RowVectorXd MockModel::input_row(TokenId token, std::size_t t) const {
  return embed_.row(token) + position_row(t);
}

Eigen::RowVectorXd MockModel::head(const Eigen::RowVectorXd& z, std::span<const TokenId> tokens, std::size_t t,
                                   Eigen::RowVectorXd* hidden) const {
  Eigen::RowVectorXd h = ((z * w1_) + b1_).array().tanh();
  Eigen::RowVectorXd out = h * out_ + out_bias_;
  if (!options_.script.empty()) {
    for (std::size_t a = t + 1; a-- > 0;) {
      if (tokens[a] == options_.script_trigger) {
        std::size_t j = t - a;
        if (j < options_.script.size()) out[options_.script[j]] += options_.script_strength;
        break;
      }
    }
  }
  if (hidden) *hidden = std::move(h);
  return out;
}

Eigen::MatrixXd MockModel::logits(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                  std::span<const EmbeddingDelta> deltas) const {
  check_tokens(tokens);
  if (begin > end || end > tokens.size()) throw Error(ErrorCode::kInvalidLength, "logit rows out of range");
  const auto d = static_cast<Eigen::Index>(options_.embed_dim);
  Eigen::MatrixXd u(static_cast<Eigen::Index>(end), d);
  for (std::size_t t = 0; t < end; ++t) u.row(static_cast<Eigen::Index>(t)) = input_row(tokens[t], t);
  for (const auto& delta : deltas) {
    if (delta.position < end) u.row(static_cast<Eigen::Index>(delta.position)) += delta.delta.transpose();
  }
  const Eigen::MatrixXd k = u * wk_;
  const Eigen::MatrixXd v = u * wv_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  Eigen::MatrixXd out(static_cast<Eigen::Index>(end - begin), static_cast<Eigen::Index>(vocab_size()));
  Eigen::VectorXd weights;
  for (std::size_t t = begin; t < end; ++t) {
    const Eigen::RowVectorXd ut = u.row(static_cast<Eigen::Index>(t));
    Eigen::RowVectorXd z = ut + attend(ut * wq_, k, v, t, scale, weights);
    out.row(static_cast<Eigen::Index>(t - begin)) = head(z, tokens, t);
  }
  return out;
}

Eigen::MatrixXd MockModel::input_gradient(std::span<const TokenId> tokens, std::size_t begin, std::size_t end,
                                          const LogitsGradFn& head_grad, TokenSlice wrt) const {
  check_tokens(tokens);
  const auto d = static_cast<Eigen::Index>(options_.embed_dim);
  const auto n = static_cast<Eigen::Index>(end);
  Eigen::MatrixXd u(n, d);
  for (std::size_t t = 0; t < end; ++t) u.row(static_cast<Eigen::Index>(t)) = input_row(tokens[t], t);
  const Eigen::MatrixXd k = u * wk_;
  const Eigen::MatrixXd v = u * wv_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  const auto rows = static_cast<Eigen::Index>(end - begin);
  Eigen::MatrixXd logits_rows(rows, static_cast<Eigen::Index>(vocab_size()));
  Eigen::MatrixXd hidden(rows, static_cast<Eigen::Index>(options_.hidden_dim));
  std::vector<Eigen::VectorXd> attn(static_cast<std::size_t>(rows));
  Eigen::MatrixXd queries(rows, d);
  for (std::size_t t = begin; t < end; ++t) {
    const auto r = static_cast<Eigen::Index>(t - begin);
    const Eigen::RowVectorXd ut = u.row(static_cast<Eigen::Index>(t));
    queries.row(r) = ut * wq_;
    Eigen::RowVectorXd z = ut + attend(queries.row(r), k, v, t, scale, attn[static_cast<std::size_t>(r)]);
    Eigen::RowVectorXd h;
    logits_rows.row(r) = head(z, tokens, t, &h);
    hidden.row(r) = h;
  }

  const Eigen::MatrixXd dlogits = head_grad(logits_rows);
  Eigen::MatrixXd dpre = (dlogits * out_.transpose()).array() * (1.0 - hidden.array().square());
  Eigen::MatrixXd dz = dpre * w1_.transpose();

  Eigen::MatrixXd du = Eigen::MatrixXd::Zero(n, d);
  Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(n, d);
  Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(n, d);
  for (std::size_t t = begin; t < end; ++t) {
    const auto r = static_cast<Eigen::Index>(t - begin);
    const auto span_len = static_cast<Eigen::Index>(t + 1);
    const Eigen::VectorXd& a = attn[static_cast<std::size_t>(r)];
    const Eigen::RowVectorXd dout = dz.row(r);
    du.row(static_cast<Eigen::Index>(t)) += dout;
    dv.topRows(span_len) += a * dout;
    Eigen::VectorXd da = v.topRows(span_len) * dout.transpose();
    Eigen::VectorXd ds = a.array() * (da.array() - a.dot(da));
    Eigen::RowVectorXd dq = scale * (ds.transpose() * k.topRows(span_len));
    dk.topRows(span_len) += scale * ds * queries.row(r);
    du.row(static_cast<Eigen::Index>(t)) += dq * wq_.transpose();
  }
  du += dk * wk_.transpose() + dv * wv_.transpose();

  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(wrt.size()), d);
  for (std::size_t i = wrt.begin; i < wrt.end; ++i) {
    if (i < end) out.row(static_cast<Eigen::Index>(i - wrt.begin)) = du.row(static_cast<Eigen::Index>(i));
  }
  return out;
}

Eigen::MatrixXd MockModel::project_to_vocab(const Eigen::MatrixXd& embedding_rows) const {
  return embedding_rows * embed_.transpose();
}

std::vector<double> MockModel::candidate_losses(const AssembledPrompt& prompt,
                                                std::span<const std::vector<TokenId>> candidates) const {
  // Candidates only touch the STS slice, so the attention sums of every target row are cached
  // once and corrected for the handful of changed keys/values per candidate.
  check_tokens(prompt.tokens);
  const TokenSlice target = prompt.target_slice;
  const TokenSlice sts = prompt.sts_slice;
  if (target.empty() || target.begin == 0 || target.begin - 1 < sts.end) {
    return LanguageModel::candidate_losses(prompt, candidates);
  }
  const auto d = static_cast<Eigen::Index>(options_.embed_dim);
  const std::size_t first_row = target.begin - 1;
  const std::size_t end = target.end - 1;
  const auto n = static_cast<Eigen::Index>(end);
  Eigen::MatrixXd u(n, d);
  for (std::size_t t = 0; t < end; ++t) u.row(static_cast<Eigen::Index>(t)) = input_row(prompt.tokens[t], t);
  const Eigen::MatrixXd k = u * wk_;
  const Eigen::MatrixXd v = u * wv_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  struct RowCache {
    Eigen::RowVectorXd query;
    double max_score;
    double weight_sum;
    Eigen::RowVectorXd weighted_values;
    Eigen::VectorXd scores;
  };
  std::vector<RowCache> rows;
  for (std::size_t t = first_row; t < end; ++t) {
    RowCache c;
    c.query = u.row(static_cast<Eigen::Index>(t)) * wq_;
    const auto span_len = static_cast<Eigen::Index>(t + 1);
    c.scores = (k.topRows(span_len) * c.query.transpose()) * scale;
    c.max_score = c.scores.maxCoeff();
    Eigen::VectorXd w = (c.scores.array() - c.max_score).exp();
    c.weight_sum = w.sum();
    c.weighted_values = w.transpose() * v.topRows(span_len);
    rows.push_back(std::move(c));
  }

  std::vector<double> losses;
  losses.reserve(candidates.size());
  std::vector<TokenId> tokens = prompt.tokens;
  const auto targets = prompt.target();
  std::vector<std::size_t> changed;
  for (const auto& cand : candidates) {
    changed.clear();
    for (std::size_t i = 0; i < cand.size(); ++i) {
      tokens[sts.begin + i] = cand[i];
      if (cand[i] != prompt.tokens[sts.begin + i]) changed.push_back(sts.begin + i);
    }
    std::vector<Eigen::RowVectorXd> new_k, new_v;
    for (std::size_t j : changed) {
      Eigen::RowVectorXd uj = input_row(tokens[j], j);
      new_k.push_back(uj * wk_);
      new_v.push_back(uj * wv_);
    }
    double total = 0.0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const RowCache& c = rows[r];
      const std::size_t t = first_row + r;
      std::vector<double> new_scores(changed.size());
      double m = c.max_score;
      for (std::size_t q = 0; q < changed.size(); ++q) {
        new_scores[q] = scale * new_k[q].dot(c.query);
        m = std::max(m, new_scores[q]);
      }
      const double rescale = std::exp(c.max_score - m);
      double sum = c.weight_sum * rescale;
      Eigen::RowVectorXd values = c.weighted_values * rescale;
      for (std::size_t q = 0; q < changed.size(); ++q) {
        const std::size_t j = changed[q];
        const double old_w = std::exp(c.scores[static_cast<Eigen::Index>(j)] - m);
        const double new_w = std::exp(new_scores[q] - m);
        sum += new_w - old_w;
        values += new_w * new_v[q] - old_w * v.row(static_cast<Eigen::Index>(j));
      }
      Eigen::RowVectorXd z = u.row(static_cast<Eigen::Index>(t)) + values / sum;
      Eigen::RowVectorXd l = head(z, tokens, t);
      double mx = l.maxCoeff();
      double lse = mx + std::log((l.array() - mx).exp().sum());
      total += lse - l[targets[r]];
    }
    losses.push_back(total / static_cast<double>(rows.size()));
  }
  return losses;
}

class MockDecodeSession final : public DecodeSession {
 public:
  MockDecodeSession(const MockModel& model, std::span<const TokenId> prompt)
      : model_(model), tokens_(prompt.begin(), prompt.end()) {
    const auto cap = static_cast<Eigen::Index>(model.context_length());
    const auto d = static_cast<Eigen::Index>(model.embedding_dim());
    u_.resize(cap, d);
    k_.resize(cap, d);
    v_.resize(cap, d);
    for (std::size_t t = 0; t < tokens_.size(); ++t) fill(t);
  }

  Eigen::VectorXd next_logits() override {
    if (tokens_.empty()) throw Error(ErrorCode::kInvalidLength, "cannot decode from an empty prompt");
    const std::size_t t = tokens_.size() - 1;
    const double scale = 1.0 / std::sqrt(static_cast<double>(model_.embedding_dim()));
    const Eigen::RowVectorXd ut = u_.row(static_cast<Eigen::Index>(t));
    Eigen::VectorXd weights;
    Eigen::RowVectorXd z = ut + attend(ut * model_.wq_, k_, v_, t, scale, weights);
    return model_.head(z, tokens_, t).transpose();
  }

  void append(TokenId token) override {
    model_.check_fits(tokens_.size() + 1);
    tokens_.push_back(token);
    fill(tokens_.size() - 1);
  }

 private:
  void fill(std::size_t t) {
    const auto i = static_cast<Eigen::Index>(t);
    u_.row(i) = model_.input_row(tokens_[t], t);
    k_.row(i) = u_.row(i) * model_.wk_;
    v_.row(i) = u_.row(i) * model_.wv_;
  }

  const MockModel& model_;
  std::vector<TokenId> tokens_;
  Eigen::MatrixXd u_, k_, v_;
};

std::unique_ptr<DecodeSession> MockModel::start_session(std::span<const TokenId> prompt) const {
  check_tokens(prompt);
  return std::make_unique<MockDecodeSession>(*this, prompt);
}

}  // namespace stsopt
