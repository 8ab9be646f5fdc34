#include "esqa/nn.hpp"

#include <cmath>

#include "esqa/error.hpp"

namespace esqa {

Tensor random_normal(Shape shape, double sd, Rng& rng, bool requires_grad) {
  std::vector<double> data(shape_size(shape));
  for (auto& x : data) x = rng.normal() * sd;
  return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

Linear::Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
  weight = random_normal({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  if (with_bias) bias = Tensor::zeros({out}, true);
}

Tensor Linear::forward(const Tensor& x, const ForwardContext& ctx) const {
  if (x.cols() != in_features()) {
    throw ShapeError("linear: input width " + std::to_string(x.cols()) + ", expected " +
                     std::to_string(in_features()));
  }
  Tensor y = matmul(x, weight);
  if (lora) {
    Tensor xin = ctx.training ? dropout(x, lora->dropout, ctx.rng) : x;
    y = add(y, scale(matmul(matmul(xin, lora->a), lora->b), lora->scaling));
  }
  if (bias.defined()) y = add_row(y, bias);
  return y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
  if (lora) {
    out.push_back({prefix + ".lora_a", lora->a});
    out.push_back({prefix + ".lora_b", lora->b});
  }
}

void Linear::attach_lora(std::size_t rank, double alpha, double dropout_p, Rng& rng) {
  const std::size_t in = in_features(), out = out_features();
  if (rank == 0 || rank >= std::min(in, out)) {
    throw ConfigError("lora rank " + std::to_string(rank) + " must be in [1, " +
                      std::to_string(std::min(in, out)) + ")");
  }
  LoraAdapter adapter;
  adapter.a = random_normal({in, rank}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  adapter.b = Tensor::zeros({rank, out}, true);
  adapter.scaling = alpha / static_cast<double>(rank);
  adapter.dropout = dropout_p;
  lora = std::move(adapter);
}

LayerNorm::LayerNorm(std::size_t width)
    : gain(Tensor::full({width}, 1.0, true)), bias(Tensor::zeros({width}, true)) {}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

MultiHeadAttention::MultiHeadAttention(std::size_t query_width, std::size_t kv_width,
                                       std::size_t width, std::size_t heads_, Rng& rng)
    : heads(heads_),
      wq(query_width, width, false, rng),
      wk(kv_width, width, false, rng),
      wv(kv_width, width, false, rng),
      wo(width, query_width, false, rng) {
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

Tensor MultiHeadAttention::forward(const Tensor& query_in, const Tensor& kv_in,
                                   AttentionLayout layout, const ForwardContext& ctx) const {
  if (kv_in.cols() != wk.in_features()) {
    throw ShapeError("attention: key/value width " + std::to_string(kv_in.cols()) + ", expected " +
                     std::to_string(wk.in_features()));
  }
  layout.heads = heads;
  Tensor q = wq.forward(query_in, ctx);
  Tensor k = wk.forward(kv_in, ctx);
  Tensor v = wv.forward(kv_in, ctx);
  return wo.forward(attention(q, k, v, layout), ctx);
}

void MultiHeadAttention::collect(ParamList& out, const std::string& prefix) const {
  wq.collect(out, prefix + ".wq");
  wk.collect(out, prefix + ".wk");
  wv.collect(out, prefix + ".wv");
  wo.collect(out, prefix + ".wo");
}

FeedForward::FeedForward(std::size_t width, std::size_t hidden, Rng& rng)
    : up(width, hidden, true, rng), down(hidden, width, true, rng) {}

Tensor FeedForward::forward(const Tensor& x, const ForwardContext& ctx) const {
  Tensor h = gelu(up.forward(x, ctx));
  if (ctx.training) h = dropout(h, ctx.dropout, ctx.rng);
  return down.forward(h, ctx);
}

void FeedForward::collect(ParamList& out, const std::string& prefix) const {
  up.collect(out, prefix + ".up");
  down.collect(out, prefix + ".down");
}

TransformerBlock::TransformerBlock(std::size_t width, std::size_t heads, std::size_t ffn_width,
                                   std::optional<std::size_t> cross_kv_width, Rng& rng)
    : ln_self(width), self_attn(width, width, width, heads, rng), ln_ffn(width), ffn(width, ffn_width, rng) {
  if (cross_kv_width) {
    ln_cross.emplace(width);
    cross.emplace(width, *cross_kv_width, width, heads, rng);
  }
}

Tensor TransformerBlock::forward(const Tensor& x, const AttentionLayout& self_layout,
                                 const ForwardContext& ctx, const Tensor* memory,
                                 const AttentionLayout* cross_layout) const {
  Tensor h = ln_self.forward(x);
  Tensor y = add(x, self_attn.forward(h, h, self_layout, ctx));
  if (cross && memory != nullptr) {
    Tensor hc = ln_cross->forward(y);
    y = add(y, cross->forward(hc, *memory, *cross_layout, ctx));
  }
  return add(y, ffn.forward(ln_ffn.forward(y), ctx));
}

void TransformerBlock::collect(ParamList& out, const std::string& prefix) const {
  ln_self.collect(out, prefix + ".ln_self");
  self_attn.collect(out, prefix + ".self_attn");
  if (cross) {
    ln_cross->collect(out, prefix + ".ln_cross");
    cross->collect(out, prefix + ".cross_attn");
  }
  ln_ffn.collect(out, prefix + ".ln_ffn");
  ffn.collect(out, prefix + ".ffn");
}

std::vector<Tensor> tensors_of(const ParamList& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

std::vector<Tensor> trainable_tensors(const ParamList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params)
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  return out;
}

std::size_t count_values(const ParamList& params, bool trainable_only) {
  std::size_t n = 0;
  for (const auto& p : params)
    if (!trainable_only || p.tensor.requires_grad()) n += p.tensor.size();
  return n;
}

}  // namespace esqa
