#include "esqa/event_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "esqa/error.hpp"

namespace esqa {

std::string to_string(EncoderArchitecture arch) {
  switch (arch) {
    case EncoderArchitecture::causal_transformer: return "causal-transformer";
    case EncoderArchitecture::gru: return "gru";
    case EncoderArchitecture::lstm: return "lstm";
  }
  return "?";
}

EncoderArchitecture encoder_architecture_from_string(const std::string& s) {
  if (s == "causal-transformer") return EncoderArchitecture::causal_transformer;
  if (s == "gru") return EncoderArchitecture::gru;
  if (s == "lstm") return EncoderArchitecture::lstm;
  throw ConfigError("encoder.architecture: unknown value '" + s + "'");
}

void EncoderConfig::validate() const {
  if (width == 0 || layers == 0) throw ConfigError("encoder: width and layers must be >= 1");
  if (architecture == EncoderArchitecture::causal_transformer) {
    if (heads == 0 || width % heads != 0) {
      throw ConfigError("encoder: width " + std::to_string(width) + " not divisible by heads " +
                        std::to_string(heads));
    }
    if (ffn_width == 0) throw ConfigError("encoder: ffn_width must be >= 1");
  }
  if (max_positions == 0) throw ConfigError("encoder: max_positions must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder: dropout must be in [0, 1)");
}

nlohmann::ordered_json EncoderConfig::to_json() const {
  return {{"architecture", to_string(architecture)},
          {"layers", layers},
          {"width", width},
          {"heads", heads},
          {"ffn_width", ffn_width},
          {"dropout", dropout},
          {"max_positions", max_positions}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& doc) {
  EncoderConfig c;
  try {
    c.architecture = encoder_architecture_from_string(doc.value("architecture", to_string(c.architecture)));
    c.layers = doc.value("layers", c.layers);
    c.width = doc.value("width", c.width);
    c.heads = doc.value("heads", c.heads);
    c.ffn_width = doc.value("ffn_width", c.ffn_width);
    c.dropout = doc.value("dropout", c.dropout);
    c.max_positions = doc.value("max_positions", c.max_positions);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

RecurrentLayer::RecurrentLayer(EncoderArchitecture arch, std::size_t width, Rng& rng)
    : arch_(arch), width_(width) {
  const std::size_t gates = arch == EncoderArchitecture::lstm ? 4 : 3;
  input_ = Linear(width, gates * width, true, rng);
  hidden_ = Linear(width, gates * width, true, rng);
}

Tensor RecurrentLayer::forward(const Tensor& x, std::size_t batch, std::size_t steps) const {
  const std::size_t w = width_;
  Tensor xg = input_.forward(x);
  Tensor h = Tensor::zeros({batch, w});
  Tensor c = Tensor::zeros({batch, w});
  const Tensor ones = Tensor::full({batch, w}, 1.0);
  std::vector<Tensor> outputs;
  outputs.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    std::vector<long> idx(batch);
    for (std::size_t b = 0; b < batch; ++b) idx[b] = static_cast<long>(b * steps + t);
    Tensor gx = gather_rows(xg, idx);
    Tensor gh = hidden_.forward(h);
    if (arch_ == EncoderArchitecture::gru) {
      Tensor z = sigmoid(add(slice_cols(gx, 0, w), slice_cols(gh, 0, w)));
      Tensor r = sigmoid(add(slice_cols(gx, w, w), slice_cols(gh, w, w)));
      Tensor n = tanh(add(slice_cols(gx, 2 * w, w), mul(r, slice_cols(gh, 2 * w, w))));
      h = add(mul(sub(ones, z), n), mul(z, h));
    } else {
      Tensor g = add(gx, gh);
      Tensor i = sigmoid(slice_cols(g, 0, w));
      Tensor f = sigmoid(slice_cols(g, w, w));
      Tensor u = tanh(slice_cols(g, 2 * w, w));
      Tensor o = sigmoid(slice_cols(g, 3 * w, w));
      c = add(mul(f, c), mul(i, u));
      h = mul(o, tanh(c));
    }
    outputs.push_back(h);
  }
  // Step-major back to item-major.
  Tensor stacked = concat_rows(outputs);
  std::vector<long> back(batch * steps);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < steps; ++t) back[b * steps + t] = static_cast<long>(t * batch + b);
  return gather_rows(stacked, back);
}

void RecurrentLayer::collect(ParamList& out, const std::string& prefix) const {
  input_.collect(out, prefix + ".input");
  hidden_.collect(out, prefix + ".hidden");
}

EventEncoder::EventEncoder(const FeatureCodec& codec, const EncoderConfig& config, Rng& rng)
    : config_(config), embedder_(codec, rng) {
  config_.validate();
  projection_ = Linear(embedder_.width(), config_.width, true, rng);
  if (config_.architecture == EncoderArchitecture::causal_transformer) {
    positions_ = random_normal({config_.max_positions, config_.width}, 0.1, rng);
    for (std::size_t l = 0; l < config_.layers; ++l) {
      blocks_.emplace_back(config_.width, config_.heads, config_.ffn_width, std::nullopt, rng);
    }
  } else {
    for (std::size_t l = 0; l < config_.layers; ++l) {
      recurrent_.emplace_back(config_.architecture, config_.width, rng);
    }
  }
  final_ln_ = LayerNorm(config_.width);
}

Tensor EventEncoder::project_inputs(const Tensor& embeddings, const ForwardContext& ctx) const {
  if (embeddings.cols() != projection_.in_features()) {
    throw ShapeError("encoder input width " + std::to_string(embeddings.cols()) + ", expected " +
                     std::to_string(projection_.in_features()));
  }
  return projection_.forward(embeddings, ctx);
}

Tensor EventEncoder::encode(const Tensor& embeddings, const ForwardContext& ctx) const {
  const std::size_t n = embeddings.rows();
  return encode_batch(embeddings, {n}, n, ctx);
}

Tensor EventEncoder::encode_batch(const Tensor& embeddings, const std::vector<std::size_t>& lengths,
                                  std::size_t max_len, const ForwardContext& ctx) const {
  const std::size_t batch = lengths.size();
  if (batch == 0 || max_len == 0) throw DataError("encoder: empty batch");
  if (embeddings.rows() != batch * max_len) throw ShapeError("encoder: row count does not match layout");
  for (auto len : lengths) {
    if (len == 0) throw DataError("encoder: empty sequence");
    if (len > max_len) throw ShapeError("encoder: length exceeds padded length");
  }
  if (max_len > config_.max_positions) {
    throw DataError("encoder: sequence length " + std::to_string(max_len) + " exceeds max positions " +
                    std::to_string(config_.max_positions));
  }
  Tensor x = project_inputs(embeddings, ctx);
  if (config_.architecture == EncoderArchitecture::causal_transformer) {
    std::vector<long> pos(batch * max_len);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < max_len; ++i) pos[b * max_len + i] = static_cast<long>(i);
    x = add(x, gather_rows(positions_, pos));
    if (ctx.training) x = dropout(x, ctx.dropout, ctx.rng);
    AttentionLayout layout;
    layout.batch = batch;
    layout.query_len = layout.key_len = max_len;
    layout.causal = true;
    layout.key_lengths = lengths;
    for (const auto& block : blocks_) x = block.forward(x, layout, ctx);
  } else {
    for (const auto& layer : recurrent_) x = layer.forward(x, batch, max_len);
  }
  return final_ln_.forward(x);
}

EncodedBatch EventEncoder::encode_sequences(const std::vector<const EncodedSequence*>& batch,
                                            const ForwardContext& ctx) const {
  EncodedBatch out;
  for (const auto* s : batch) {
    out.lengths.push_back(s->size());
    out.max_len = std::max(out.max_len, s->size());
  }
  Tensor emb = embedder_.embed_batch(batch, out.max_len);
  out.rows = encode_batch(emb, out.lengths, out.max_len, ctx);
  return out;
}

void EventEncoder::collect(ParamList& out, const std::string& prefix) const {
  embedder_.collect(out, prefix + ".embed");
  projection_.collect(out, prefix + ".proj");
  if (positions_.defined()) out.push_back({prefix + ".positions", positions_});
  for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect(out, prefix + ".block" + std::to_string(l));
  for (std::size_t l = 0; l < recurrent_.size(); ++l) {
    recurrent_[l].collect(out, prefix + ".rnn" + std::to_string(l));
  }
  final_ln_.collect(out, prefix + ".ln_final");
}

NextEventHeads::NextEventHeads(const FeatureCodec& codec, std::size_t width, Rng& rng) {
  for (const auto& f : codec.features()) {
    heads_.emplace_back(width, f.cardinality() + 1, true, rng);
    names_.push_back(f.name);
  }
}

std::vector<Tensor> NextEventHeads::forward(const Tensor& rows) const {
  std::vector<Tensor> out;
  for (const auto& h : heads_) out.push_back(h.forward(rows));
  return out;
}

void NextEventHeads::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t j = 0; j < heads_.size(); ++j) heads_[j].collect(out, prefix + "." + names_[j]);
}

Tensor next_event_loss(const EventEncoder& encoder, const NextEventHeads& heads,
                       const std::vector<const EncodedSequence*>& batch, const ForwardContext& ctx) {
  bool any = false;
  for (const auto* s : batch) any = any || s->size() >= 2;
  if (!any) return Tensor::scalar(0.0);
  EncodedBatch enc = encoder.encode_sequences(batch, ctx);
  const auto logits = heads.forward(enc.rows);
  Tensor loss;
  for (std::size_t j = 0; j < heads.size(); ++j) {
    std::vector<long> targets(batch.size() * enc.max_len, -1);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = *batch[b];
      for (std::size_t i = 0; i + 1 < s.size(); ++i) targets[b * enc.max_len + i] = s[i + 1][j];
    }
    Tensor term = cross_entropy(logits[j], targets);
    loss = loss.defined() ? add(loss, term) : term;
  }
  return loss;
}

PretrainResult pretrain_next_event(EventEncoder& encoder, NextEventHeads& heads,
                                   const std::vector<EncodedSequence>& train, const PretrainConfig& config) {
  PretrainResult result;
  std::vector<const EncodedSequence*> usable;
  for (const auto& s : train) {
    if (s.size() >= 2) usable.push_back(&s);
    else ++result.skipped_sequences;
  }
  if (usable.empty()) throw DataError("pretrain: no sequence has two or more events");
  if (config.batch_size == 0) throw ConfigError("pretrain: batch_size must be >= 1");

  ParamList params;
  encoder.collect(params, "encoder");
  heads.collect(params, "heads");
  const auto tensors = trainable_tensors(params);
  AdamW opt(tensors);
  Rng rng(config.seed);
  ForwardContext ctx{true, &rng, encoder.config().dropout};

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(usable);
    for (std::size_t start = 0; start < usable.size(); start += config.batch_size) {
      const std::size_t end = std::min(usable.size(), start + config.batch_size);
      std::vector<const EncodedSequence*> batch(usable.begin() + static_cast<long>(start),
                                                usable.begin() + static_cast<long>(end));
      opt.zero_grad();
      Tensor loss = next_event_loss(encoder, heads, batch, ctx);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw DivergenceError("pretrain: non-finite loss at step " + std::to_string(result.steps), result.steps);
      }
      backward(loss);
      if (config.clip_norm > 0) clip_grad_norm(tensors, config.clip_norm);
      opt.step(lr_at(config.schedule, result.steps));
      result.losses.push_back(value);
      ++result.steps;
    }
  }
  return result;
}

double next_event_accuracy(const EventEncoder& encoder, const NextEventHeads& heads,
                           const std::vector<EncodedSequence>& data, std::size_t feature) {
  NoGradGuard guard;
  std::size_t correct = 0, total = 0;
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<const EncodedSequence*> batch;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) {
      if (data[i].size() >= 2) batch.push_back(&data[i]);
    }
    if (batch.empty()) continue;
    EncodedBatch enc = encoder.encode_sequences(batch);
    const Tensor logits = heads.forward(enc.rows)[feature];
    const std::size_t c = logits.cols();
    const auto v = logits.data();
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = *batch[b];
      for (std::size_t i = 0; i + 1 < s.size(); ++i) {
        const double* row = v.data() + (b * enc.max_len + i) * c;
        const long pred = static_cast<long>(std::max_element(row, row + c) - row);
        correct += pred == s[i + 1][feature];
        ++total;
      }
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace esqa
