#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "stsopt/tokenizer.hpp"

namespace stsopt {

/// Architecture hyperparameters of a Llama-family decoder (config.json).
struct LlamaConfig {
  std::size_t vocab_size = 0;
  std::size_t hidden_size = 0;
  std::size_t intermediate_size = 0;
  std::size_t num_layers = 0;
  std::size_t num_heads = 0;
  std::size_t num_kv_heads = 0;
  std::size_t head_dim = 0;
  std::size_t max_position_embeddings = 2048;
  double rms_norm_eps = 1e-6;
  double rope_theta = 10000.0;
  bool tie_word_embeddings = false;
  std::optional<TokenId> eos_token_id;

  std::size_t q_dim() const { return num_heads * head_dim; }
  std::size_t kv_dim() const { return num_kv_heads * head_dim; }
};

/// Decoder-only transformer with RMSNorm, rotary position embedding (rotate-half layout), grouped
/// query attention and a SiLU-gated MLP. Parameters are read-only after construction; the
/// backward pass only produces gradients with respect to the input embeddings.
template <typename Scalar>
class LlamaTransformer {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

  struct Layer {
    RowVector attn_norm, mlp_norm;
    Matrix wq, wk, wv, wo;  // [out, in]
    Matrix gate, up, down;  // [out, in]
  };

  /// Parameter source: tensor name -> row-major values with the expected element count.
  using TensorSource = std::function<std::vector<double>(const std::string& name, std::size_t rows, std::size_t cols)>;

  LlamaTransformer(LlamaConfig config, const TensorSource& source) : config_(std::move(config)) {
    const auto& c = config_;
    auto load = [&](const std::string& name, std::size_t rows, std::size_t cols) {
      std::vector<double> v = source(name, rows, cols);
      Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      for (std::size_t i = 0; i < v.size(); ++i) m.data()[i] = static_cast<Scalar>(v[i]);
      return m;
    };
    auto load_vec = [&](const std::string& name, std::size_t n) -> RowVector { return load(name, 1, n).row(0); };

    embed_ = load("model.embed_tokens.weight", c.vocab_size, c.hidden_size);
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      const std::string p = "model.layers." + std::to_string(l) + ".";
      Layer layer;
      layer.attn_norm = load_vec(p + "input_layernorm.weight", c.hidden_size);
      layer.mlp_norm = load_vec(p + "post_attention_layernorm.weight", c.hidden_size);
      layer.wq = load(p + "self_attn.q_proj.weight", c.q_dim(), c.hidden_size);
      layer.wk = load(p + "self_attn.k_proj.weight", c.kv_dim(), c.hidden_size);
      layer.wv = load(p + "self_attn.v_proj.weight", c.kv_dim(), c.hidden_size);
      layer.wo = load(p + "self_attn.o_proj.weight", c.hidden_size, c.q_dim());
      layer.gate = load(p + "mlp.gate_proj.weight", c.intermediate_size, c.hidden_size);
      layer.up = load(p + "mlp.up_proj.weight", c.intermediate_size, c.hidden_size);
      layer.down = load(p + "mlp.down_proj.weight", c.hidden_size, c.intermediate_size);
      layers_.push_back(std::move(layer));
    }
    final_norm_ = load_vec("model.norm.weight", c.hidden_size);
    if (c.tie_word_embeddings) {
      lm_head_ = embed_;
    } else {
      lm_head_ = load("lm_head.weight", c.vocab_size, c.hidden_size);
    }

    // Rotary tables follow the reference implementation, which evaluates frequencies and
    // angles in single precision regardless of the model dtype.
    const std::size_t half = c.head_dim / 2;
    inv_freq_.resize(half);
    for (std::size_t i = 0; i < half; ++i) {
      float exponent = static_cast<float>(2 * i) / static_cast<float>(c.head_dim);
      inv_freq_[i] = 1.0f / std::pow(static_cast<float>(c.rope_theta), exponent);
    }
  }

  const LlamaConfig& config() const { return config_; }
  const Matrix& embeddings() const { return embed_; }

  Matrix embed(std::span<const TokenId> tokens) const {
    Matrix x(static_cast<Eigen::Index>(tokens.size()), static_cast<Eigen::Index>(config_.hidden_size));
    for (std::size_t t = 0; t < tokens.size(); ++t) x.row(static_cast<Eigen::Index>(t)) = embed_.row(tokens[t]);
    return x;
  }

  Matrix project_logits(const Matrix& normed) const { return normed * lm_head_.transpose(); }

  // ------------------------------------------------------------------------------------------
  // Incremental inference (no gradients)

  struct KvCache {
    std::vector<Matrix> k, v;
    std::size_t length = 0;
  };

  KvCache make_cache(std::size_t capacity) const {
    KvCache cache;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      cache.k.emplace_back(static_cast<Eigen::Index>(capacity), static_cast<Eigen::Index>(config_.kv_dim()));
      cache.v.emplace_back(static_cast<Eigen::Index>(capacity), static_cast<Eigen::Index>(config_.kv_dim()));
    }
    return cache;
  }

  /// Runs the rows of `x` as positions cache.length.. through every layer, appends their keys
  /// and values to the cache, and returns the final-normalized hidden rows.
  Matrix extend(KvCache& cache, Matrix x) const {
    const auto n = x.rows();
    const std::size_t start = cache.length;
    const std::size_t total = start + static_cast<std::size_t>(n);
    if (!layers_.empty() && static_cast<std::size_t>(cache.k[0].rows()) < total) {
      for (std::size_t l = 0; l < layers_.size(); ++l) {
        cache.k[l].conservativeResize(static_cast<Eigen::Index>(total), Eigen::NoChange);
        cache.v[l].conservativeResize(static_cast<Eigen::Index>(total), Eigen::NoChange);
      }
    }
    const auto hd = static_cast<Eigen::Index>(config_.head_dim);
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(config_.head_dim));
    const std::size_t group = config_.num_heads / config_.num_kv_heads;
    Vector inv;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& L = layers_[l];
      Matrix n1 = rmsnorm(x, L.attn_norm, inv);
      Matrix q = n1 * L.wq.transpose();
      Matrix k = n1 * L.wk.transpose();
      apply_rope(q, start, config_.num_heads, false);
      apply_rope(k, start, config_.num_kv_heads, false);
      cache.k[l].middleRows(static_cast<Eigen::Index>(start), n) = k;
      cache.v[l].middleRows(static_cast<Eigen::Index>(start), n) = n1 * L.wv.transpose();

      Matrix attn(n, static_cast<Eigen::Index>(config_.q_dim()));
      for (std::size_t h = 0; h < config_.num_heads; ++h) {
        const auto g = static_cast<Eigen::Index>(h / group);
        const auto col = static_cast<Eigen::Index>(h) * hd;
        auto keys = cache.k[l].block(0, g * hd, static_cast<Eigen::Index>(total), hd);
        auto values = cache.v[l].block(0, g * hd, static_cast<Eigen::Index>(total), hd);
        Matrix probs = (q.block(0, col, n, hd) * keys.transpose()) * scale;
        causal_softmax(probs, start);
        attn.block(0, col, n, hd) = probs * values;
      }
      x += attn * L.wo.transpose();

      Matrix n2 = rmsnorm(x, L.mlp_norm, inv);
      Matrix gate = n2 * L.gate.transpose();
      Matrix up = n2 * L.up.transpose();
      x += silu(gate).cwiseProduct(up) * L.down.transpose();
    }
    cache.length = total;
    return rmsnorm(x, final_norm_, inv);
  }

  // ------------------------------------------------------------------------------------------
  // Forward with stored activations, and the input-gradient backward pass

  struct LayerTape {
    Matrix x, n1, q, k, v, h, n2, gate, up;
    Vector inv1, inv2;
  };
  struct Tape {
    std::vector<LayerTape> layers;
    Matrix x_final;
    Vector inv_final;
    std::size_t begin = 0;
  };

  /// Logit rows for positions [begin, end) of the input embeddings `x` (positions >= end are
  /// irrelevant under the causal mask and must already be dropped by the caller).
  Matrix forward(Matrix x, std::size_t begin, Tape* tape) const {
    const auto n = x.rows();
    const auto hd = static_cast<Eigen::Index>(config_.head_dim);
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(config_.head_dim));
    const std::size_t group = config_.num_heads / config_.num_kv_heads;
    if (tape) {
      tape->layers.clear();
      tape->begin = begin;
    }
    for (const Layer& L : layers_) {
      LayerTape lt;
      lt.x = x;
      lt.n1 = rmsnorm(x, L.attn_norm, lt.inv1);
      lt.q = lt.n1 * L.wq.transpose();
      lt.k = lt.n1 * L.wk.transpose();
      lt.v = lt.n1 * L.wv.transpose();
      apply_rope(lt.q, 0, config_.num_heads, false);
      apply_rope(lt.k, 0, config_.num_kv_heads, false);

      Matrix attn(n, static_cast<Eigen::Index>(config_.q_dim()));
      for (std::size_t h = 0; h < config_.num_heads; ++h) {
        const auto g = static_cast<Eigen::Index>(h / group);
        const auto col = static_cast<Eigen::Index>(h) * hd;
        Matrix probs = (lt.q.block(0, col, n, hd) * lt.k.block(0, g * hd, n, hd).transpose()) * scale;
        causal_softmax(probs, 0);
        attn.block(0, col, n, hd) = probs * lt.v.block(0, g * hd, n, hd);
      }
      x += attn * L.wo.transpose();
      lt.h = x;
      lt.n2 = rmsnorm(x, L.mlp_norm, lt.inv2);
      lt.gate = lt.n2 * L.gate.transpose();
      lt.up = lt.n2 * L.up.transpose();
      x += silu(lt.gate).cwiseProduct(lt.up) * L.down.transpose();
      if (tape) tape->layers.push_back(std::move(lt));
    }
    const auto rows = n - static_cast<Eigen::Index>(begin);
    Matrix tail = x.bottomRows(rows);
    Vector inv;
    Matrix normed = rmsnorm(tail, final_norm_, inv);
    if (tape) {
      tape->x_final = std::move(tail);
      tape->inv_final = std::move(inv);
    }
    return project_logits(normed);
  }

  /// d(loss)/d(input embeddings) for every position, given d(loss)/d(logits) of the rows
  /// produced by forward().
  Matrix backward(const Tape& tape, const Matrix& dlogits) const {
    const auto n = tape.layers.empty() ? tape.x_final.rows() : tape.layers.front().x.rows();
    const auto H = static_cast<Eigen::Index>(config_.hidden_size);
    const auto hd = static_cast<Eigen::Index>(config_.head_dim);
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(config_.head_dim));
    const std::size_t group = config_.num_heads / config_.num_kv_heads;

    Matrix dx = Matrix::Zero(n, H);
    Matrix dnormed = dlogits * lm_head_;
    dx.bottomRows(dlogits.rows()) = rmsnorm_backward(dnormed, tape.x_final, tape.inv_final, final_norm_);

    for (std::size_t li = layers_.size(); li-- > 0;) {
      const Layer& L = layers_[li];
      const LayerTape& lt = tape.layers[li];

      // MLP block: x_out = h + down(silu(gate) * up)
      Matrix dact = dx * L.down;
      Matrix sig = sigmoid(lt.gate);
      Matrix silu_gate = lt.gate.cwiseProduct(sig);
      Matrix dgate = dact.cwiseProduct(lt.up).cwiseProduct(
          (sig.array() * (Scalar(1) + lt.gate.array() * (Scalar(1) - sig.array()))).matrix());
      Matrix dup = dact.cwiseProduct(silu_gate);
      Matrix dn2 = dgate * L.gate + dup * L.up;
      Matrix dh = dx + rmsnorm_backward(dn2, lt.h, lt.inv2, L.mlp_norm);

      // Attention block: h = x + o(attn(norm(x)))
      Matrix dattn = dh * L.wo;
      Matrix dq = Matrix::Zero(n, static_cast<Eigen::Index>(config_.q_dim()));
      Matrix dk = Matrix::Zero(n, static_cast<Eigen::Index>(config_.kv_dim()));
      Matrix dv = Matrix::Zero(n, static_cast<Eigen::Index>(config_.kv_dim()));
      for (std::size_t h = 0; h < config_.num_heads; ++h) {
        const auto g = static_cast<Eigen::Index>(h / group);
        const auto col = static_cast<Eigen::Index>(h) * hd;
        auto qh = lt.q.block(0, col, n, hd);
        auto kg = lt.k.block(0, g * hd, n, hd);
        auto vg = lt.v.block(0, g * hd, n, hd);
        Matrix probs = (qh * kg.transpose()) * scale;
        causal_softmax(probs, 0);
        Matrix dout = dattn.block(0, col, n, hd);
        Matrix dprobs = dout * vg.transpose();
        dv.block(0, g * hd, n, hd) += probs.transpose() * dout;
        Vector row_dot = probs.cwiseProduct(dprobs).rowwise().sum();
        Matrix dscores = probs.cwiseProduct(dprobs - row_dot.replicate(1, n)) * scale;
        dq.block(0, col, n, hd) = dscores * kg;
        dk.block(0, g * hd, n, hd) += dscores.transpose() * qh;
      }
      apply_rope(dq, 0, config_.num_heads, true);
      apply_rope(dk, 0, config_.num_kv_heads, true);
      Matrix dn1 = dq * L.wq + dk * L.wk + dv * L.wv;
      dx = dh + rmsnorm_backward(dn1, lt.x, lt.inv1, L.attn_norm);
    }
    return dx;
  }

 private:
  Matrix rmsnorm(const Matrix& x, const RowVector& weight, Vector& inv) const {
    const auto n = x.rows();
    inv.resize(n);
    Matrix y(n, x.cols());
    for (Eigen::Index r = 0; r < n; ++r) {
      Scalar ms = x.row(r).squaredNorm() / static_cast<Scalar>(x.cols());
      inv[r] = Scalar(1) / std::sqrt(ms + static_cast<Scalar>(config_.rms_norm_eps));
      y.row(r) = (x.row(r) * inv[r]).cwiseProduct(weight);
    }
    return y;
  }

  static Matrix rmsnorm_backward(const Matrix& dy, const Matrix& x, const Vector& inv, const RowVector& weight) {
    Matrix dx(x.rows(), x.cols());
    const auto H = static_cast<Scalar>(x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      RowVector g = dy.row(r).cwiseProduct(weight);
      Scalar dot = g.dot(x.row(r));
      Scalar i = inv[r];
      dx.row(r) = g * i - x.row(r) * (i * i * i * dot / H);
    }
    return dx;
  }

  static Matrix sigmoid(const Matrix& x) { return (Scalar(1) / (Scalar(1) + (-x.array()).exp())).matrix(); }
  static Matrix silu(const Matrix& x) { return x.cwiseProduct(sigmoid(x)); }

  // Row i of `scores` is absolute position offset + i; it may attend to columns <= offset + i.
  static void causal_softmax(Matrix& scores, std::size_t offset) {
    for (Eigen::Index r = 0; r < scores.rows(); ++r) {
      const Eigen::Index visible = static_cast<Eigen::Index>(offset) + r + 1;
      auto row = scores.row(r);
      Scalar m = row.head(visible).maxCoeff();
      row.head(visible) = (row.head(visible).array() - m).exp();
      row.head(visible) /= row.head(visible).sum();
      if (visible < row.size()) row.tail(row.size() - visible).setZero();
    }
  }

  // In-place rotary embedding of each head's [x1 | x2] halves: (x1 c - x2 s, x2 c + x1 s).
  // With transpose=true applies the inverse rotation (the backward pass of the forward one).
  void apply_rope(Matrix& m, std::size_t start, std::size_t heads, bool transpose) const {
    const std::size_t hd = config_.head_dim;
    const std::size_t half = hd / 2;
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      const float pos = static_cast<float>(start + static_cast<std::size_t>(r));
      for (std::size_t i = 0; i < half; ++i) {
        const float angle = pos * inv_freq_[i];
        const auto c = static_cast<Scalar>(std::cos(angle));
        const auto s = static_cast<Scalar>(transpose ? -std::sin(angle) : std::sin(angle));
        for (std::size_t h = 0; h < heads; ++h) {
          Scalar& a = m(r, static_cast<Eigen::Index>(h * hd + i));
          Scalar& b = m(r, static_cast<Eigen::Index>(h * hd + i + half));
          const Scalar x1 = a;
          const Scalar x2 = b;
          a = x1 * c - x2 * s;
          b = x2 * c + x1 * s;
        }
      }
    }
  }

  LlamaConfig config_;
  Matrix embed_;
  std::vector<Layer> layers_;
  RowVector final_norm_;
  Matrix lm_head_;
  std::vector<float> inv_freq_;
};

}  // namespace stsopt
