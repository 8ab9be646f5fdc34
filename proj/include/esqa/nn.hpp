#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "esqa/ops.hpp"
#include "esqa/optim.hpp"
#include "esqa/rng.hpp"

namespace esqa {

// Training-time switches threaded through forward passes.
struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;
  double dropout = 0.0;
};

// Low-rank additive update x·A·B·scaling on top of a frozen base matrix.
struct LoraAdapter {
  Tensor a;  // (in, rank)
  Tensor b;  // (rank, out)
  double scaling = 1.0;
  double dropout = 0.0;
};

// y = x·W + b with W stored (in, out).
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool bias, Rng& rng);

  Tensor forward(const Tensor& x, const ForwardContext& ctx = {}) const;
  void collect(ParamList& out, const std::string& prefix) const;

  // A ~ N(0, 1/in), B = 0 so the adapted map starts equal to the base map.
  void attach_lora(std::size_t rank, double alpha, double dropout, Rng& rng);

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  Tensor weight;
  Tensor bias;
  std::optional<LoraAdapter> lora;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }
  void collect(ParamList& out, const std::string& prefix) const;

  Tensor gain;
  Tensor bias;
};

// Bias-free projections; query and key/value inputs may differ in width.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t query_width, std::size_t kv_width, std::size_t width,
                     std::size_t heads, Rng& rng);

  Tensor forward(const Tensor& query_in, const Tensor& kv_in, AttentionLayout layout,
                 const ForwardContext& ctx = {}) const;
  void collect(ParamList& out, const std::string& prefix) const;

  std::size_t heads = 1;
  Linear wq, wk, wv, wo;
};

class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(std::size_t width, std::size_t hidden, Rng& rng);
  Tensor forward(const Tensor& x, const ForwardContext& ctx = {}) const;
  void collect(ParamList& out, const std::string& prefix) const;

  Linear up, down;
};

// Pre-norm residual block: self-attention, optional cross-attention, FFN.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t width, std::size_t heads, std::size_t ffn_width,
                   std::optional<std::size_t> cross_kv_width, Rng& rng);

  Tensor forward(const Tensor& x, const AttentionLayout& self_layout, const ForwardContext& ctx,
                 const Tensor* memory = nullptr, const AttentionLayout* cross_layout = nullptr) const;
  void collect(ParamList& out, const std::string& prefix) const;

  bool has_cross() const { return cross.has_value(); }

  LayerNorm ln_self;
  MultiHeadAttention self_attn;
  std::optional<LayerNorm> ln_cross;
  std::optional<MultiHeadAttention> cross;
  LayerNorm ln_ffn;
  FeedForward ffn;
};

Tensor random_normal(Shape shape, double sd, Rng& rng, bool requires_grad = true);

std::vector<Tensor> tensors_of(const ParamList& params);
std::vector<Tensor> trainable_tensors(const ParamList& params);
std::size_t count_values(const ParamList& params, bool trainable_only);

}  // namespace esqa
