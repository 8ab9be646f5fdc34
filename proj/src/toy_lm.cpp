#include "esqa/toy_lm.hpp"

#include <algorithm>
#include <cmath>

#include "esqa/error.hpp"

namespace esqa {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

void ToyLmConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw ConfigError("lm: d_model must be a positive multiple of heads");
  }
  if (encoder_layers == 0 || decoder_layers == 0) throw ConfigError("lm: need encoder and decoder layers");
  if (ffn_width == 0) throw ConfigError("lm: ffn_width must be >= 1");
  if (max_input < 3 || max_output < 2) throw ConfigError("lm: max lengths too small");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("lm: dropout must be in [0, 1)");
}

nlohmann::ordered_json ToyLmConfig::to_json() const {
  return {{"d_model", d_model},       {"encoder_layers", encoder_layers},
          {"decoder_layers", decoder_layers}, {"heads", heads},
          {"ffn_width", ffn_width},   {"max_input", max_input},
          {"max_output", max_output}, {"dropout", dropout}};
}

ToyLmConfig ToyLmConfig::from_json(const nlohmann::json& doc) {
  ToyLmConfig c;
  try {
    c.d_model = doc.value("d_model", c.d_model);
    c.encoder_layers = doc.value("encoder_layers", c.encoder_layers);
    c.decoder_layers = doc.value("decoder_layers", c.decoder_layers);
    c.heads = doc.value("heads", c.heads);
    c.ffn_width = doc.value("ffn_width", c.ffn_width);
    c.max_input = doc.value("max_input", c.max_input);
    c.max_output = doc.value("max_output", c.max_output);
    c.dropout = doc.value("dropout", c.dropout);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("lm config: ") + e.what());
  }
  c.validate();
  return c;
}

void LoraConfig::validate() const {
  if (rank == 0) throw ConfigError("lora: rank must be >= 1");
  if (!(alpha > 0.0)) throw ConfigError("lora: alpha must be > 0");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("lora: dropout must be in [0, 1)");
}

nlohmann::ordered_json LoraConfig::to_json() const {
  return {{"rank", rank}, {"alpha", alpha}, {"dropout", dropout}};
}

LoraConfig LoraConfig::from_json(const nlohmann::json& doc) {
  LoraConfig c;
  try {
    c.rank = doc.value("rank", c.rank);
    c.alpha = doc.value("alpha", c.alpha);
    c.dropout = doc.value("dropout", c.dropout);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("lora config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json LoraReport::to_json() const {
  return {{"adapted_matrices", adapted_matrices},
          {"trainable_values", trainable_values},
          {"formula_values", formula_values},
          {"layers", layers},
          {"frozen_values", frozen_values}};
}

ToyLm::ToyLm(std::size_t vocab_size, const ToyLmConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  token_embedding_ = random_normal({vocab_size, d}, 1.0, rng);
  encoder_positions_ = random_normal({config_.max_input, d}, 0.1, rng);
  decoder_positions_ = random_normal({config_.max_output, d}, 0.1, rng);
  for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
    encoder_.emplace_back(d, config_.heads, config_.ffn_width, std::nullopt, rng);
  }
  for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
    decoder_.emplace_back(d, config_.heads, config_.ffn_width, d, rng);
  }
  encoder_ln_ = LayerNorm(d);
  decoder_ln_ = LayerNorm(d);
}

MultimodalInput ToyLm::inject(const Tokenizer& tokenizer, const std::string& prefix, const std::string& body,
                              const Tensor& events) const {
  MultimodalInput in;
  in.prefix = tokenizer.encode(prefix);
  in.body = tokenizer.encode(body);
  if (events.defined() && events.rows() > 0) {
    if (events.cols() != config_.d_model) {
      throw ShapeError("inject: event width " + std::to_string(events.cols()) + ", expected " +
                       std::to_string(config_.d_model));
    }
    in.events = events;
  }
  if (in.length() > config_.max_input) {
    throw DataError("inject: stream length " + std::to_string(in.length()) + " (prefix " +
                    std::to_string(in.prefix.size()) + ", events " + std::to_string(in.event_rows()) +
                    ", body " + std::to_string(in.body.size()) + ") exceeds " +
                    std::to_string(config_.max_input));
  }
  return in;
}

std::vector<long> ToyLm::stream_layout(const MultimodalInput& input) const {
  // Token ids for text rows; event rows are encoded as -(1 + row).
  std::vector<long> out;
  for (int t : input.prefix) out.push_back(t);
  out.push_back(Tokenizer::kSeqPrefix);
  for (int t : input.event_tokens) out.push_back(t);
  for (std::size_t r = 0; r < input.event_rows(); ++r) out.push_back(-1 - static_cast<long>(r));
  out.push_back(Tokenizer::kSeqSuffix);
  for (int t : input.body) out.push_back(t);
  return out;
}

Tensor ToyLm::encode(const std::vector<MultimodalInput>& batch, std::vector<std::size_t>& lengths,
                     std::size_t& max_len, const ForwardContext& ctx) const {
  if (batch.empty()) throw DataError("lm: empty batch");
  const long vocab = static_cast<long>(vocab_size());
  lengths.clear();
  max_len = 0;
  for (const auto& in : batch) {
    if (in.length() > config_.max_input) throw DataError("lm: input stream exceeds max_input");
    if (in.events.defined() && in.events.cols() != config_.d_model) throw ShapeError("lm: event width mismatch");
    lengths.push_back(in.length());
    max_len = std::max(max_len, in.length());
  }
  std::vector<Tensor> table{token_embedding_};
  std::vector<long> index(batch.size() * max_len, -1), pos(batch.size() * max_len, -1);
  long event_base = vocab;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto layout = stream_layout(batch[b]);
    for (std::size_t i = 0; i < layout.size(); ++i) {
      index[b * max_len + i] = layout[i] >= 0 ? layout[i] : event_base + (-1 - layout[i]);
      pos[b * max_len + i] = static_cast<long>(i);
    }
    if (batch[b].event_rows() > 0) {
      table.push_back(batch[b].events);
      event_base += static_cast<long>(batch[b].event_rows());
    }
  }
  Tensor source = table.size() == 1 ? token_embedding_ : concat_rows(table);
  Tensor x = add(gather_rows(source, index), gather_rows(encoder_positions_, pos));
  if (ctx.training) x = dropout(x, config_.dropout, ctx.rng);
  AttentionLayout layout;
  layout.batch = batch.size();
  layout.query_len = layout.key_len = max_len;
  layout.key_lengths = lengths;
  for (const auto& block : encoder_) x = block.forward(x, layout, ctx);
  return encoder_ln_.forward(x);
}

Tensor ToyLm::decode(const Tensor& memory, const std::vector<std::size_t>& memory_lengths, std::size_t memory_len,
                     const std::vector<std::vector<int>>& decoder_inputs, std::size_t dec_len,
                     const ForwardContext& ctx) const {
  const std::size_t batch = decoder_inputs.size();
  if (dec_len > config_.max_output) throw DataError("lm: decoder length exceeds max_output");
  std::vector<long> index(batch * dec_len, -1), pos(batch * dec_len, -1);
  std::vector<std::size_t> dec_lengths(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& ids = decoder_inputs[b];
    if (ids.empty() || ids.size() > dec_len) throw ShapeError("lm: bad decoder input length");
    dec_lengths[b] = ids.size();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      index[b * dec_len + i] = ids[i];
      pos[b * dec_len + i] = static_cast<long>(i);
    }
  }
  Tensor y = add(gather_rows(token_embedding_, index), gather_rows(decoder_positions_, pos));
  if (ctx.training) y = dropout(y, config_.dropout, ctx.rng);
  AttentionLayout self_layout;
  self_layout.batch = batch;
  self_layout.query_len = self_layout.key_len = dec_len;
  self_layout.causal = true;
  self_layout.key_lengths = dec_lengths;
  AttentionLayout cross_layout;
  cross_layout.batch = batch;
  cross_layout.query_len = dec_len;
  cross_layout.key_len = memory_len;
  cross_layout.key_lengths = memory_lengths;
  for (const auto& block : decoder_) y = block.forward(y, self_layout, ctx, &memory, &cross_layout);
  y = decoder_ln_.forward(y);
  // Tied output layer, scaled like the input side's unit-variance embeddings.
  return scale(matmul(y, transpose(token_embedding_)), 1.0 / std::sqrt(static_cast<double>(config_.d_model)));
}

Tensor ToyLm::loss(const std::vector<MultimodalInput>& batch, const std::vector<std::vector<int>>& targets,
                   const ForwardContext& ctx) const {
  if (targets.size() != batch.size()) throw ShapeError("lm: target count mismatch");
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;
  Tensor memory = encode(batch, lengths, max_len, ctx);
  std::size_t dec_len = 0;
  for (const auto& t : targets) dec_len = std::max(dec_len, t.size() + 1);
  std::vector<std::vector<int>> inputs(batch.size());
  std::vector<long> labels(batch.size() * dec_len, -1);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    inputs[b].push_back(Tokenizer::kBos);
    inputs[b].insert(inputs[b].end(), targets[b].begin(), targets[b].end());
    for (std::size_t i = 0; i < targets[b].size(); ++i) labels[b * dec_len + i] = targets[b][i];
    labels[b * dec_len + targets[b].size()] = Tokenizer::kEos;
  }
  Tensor logits = decode(memory, lengths, max_len, inputs, dec_len, ctx);
  return cross_entropy(logits, labels);
}

std::vector<Generation> ToyLm::generate(const std::vector<MultimodalInput>& batch, std::size_t max_new_tokens,
                                        const Tokenizer& tokenizer) const {
  NoGradGuard guard;
  std::vector<Generation> out(batch.size());
  if (batch.empty()) return out;
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;
  Tensor memory = encode(batch, lengths, max_len);
  const std::size_t vocab = vocab_size();
  max_new_tokens = std::min(max_new_tokens, config_.max_output - 1);

  std::vector<std::vector<int>> inputs(batch.size(), std::vector<int>{Tokenizer::kBos});
  std::vector<bool> done(batch.size(), false);
  for (std::size_t step = 0; step <= max_new_tokens; ++step) {
    const std::size_t dec_len = step + 1;
    Tensor logits = decode(memory, lengths, max_len, inputs, dec_len);
    const auto v = logits.data();
    bool all_done = true;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      if (done[b]) continue;
      const double* row = v.data() + (b * dec_len + step) * vocab;
      if (step == 0) {
        auto& dist = out[b].first_distribution;
        dist.assign(row, row + vocab);
        const double mx = *std::max_element(dist.begin(), dist.end());
        double z = 0.0;
        for (auto& p : dist) z += (p = std::exp(p - mx));
        for (auto& p : dist) p /= z;
      }
      const int next = static_cast<int>(std::max_element(row, row + vocab) - row);
      if (next == Tokenizer::kEos || step == max_new_tokens) {
        done[b] = true;
        continue;
      }
      out[b].ids.push_back(next);
      inputs[b].push_back(next);
      all_done = false;
    }
    if (all_done) break;
    // Finished items keep a fixed decoder input; pad them to the common length.
    for (std::size_t b = 0; b < batch.size(); ++b) {
      while (inputs[b].size() < step + 2) inputs[b].push_back(Tokenizer::kPad);
    }
  }
  for (auto& g : out) g.text = tokenizer.decode(g.ids);
  return out;
}

std::vector<double> ToyLm::binary_scores(const std::vector<MultimodalInput>& batch,
                                         const Tokenizer& tokenizer) const {
  NoGradGuard guard;
  std::vector<double> scores;
  if (batch.empty()) return scores;
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;
  Tensor memory = encode(batch, lengths, max_len);
  std::vector<std::vector<int>> inputs(batch.size(), std::vector<int>{Tokenizer::kBos});
  Tensor logits = decode(memory, lengths, max_len, inputs, 1);
  const std::size_t vocab = vocab_size();
  const auto v = logits.data();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const double* row = v.data() + b * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    scores.push_back((std::exp(row[tokenizer.yes_id()] - mx) - std::exp(row[tokenizer.no_id()] - mx)) / z);
  }
  return scores;
}

double ToyLm::binary_score(const MultimodalInput& input, const Tokenizer& tokenizer) const {
  return binary_scores({input}, tokenizer).at(0);
}

LoraReport ToyLm::apply_lora(const LoraConfig& config, Rng& rng) {
  config.validate();
  if (has_lora_) throw ConfigError("lm: adapters already attached");
  LoraReport report;
  ParamList base;
  collect(base, "lm");
  for (auto& p : base) {
    p.tensor.set_requires_grad(false);
    report.frozen_values += p.tensor.size();
  }
  auto adapt = [&](Linear& layer) {
    layer.attach_lora(config.rank, config.alpha, config.dropout, rng);
    report.trainable_values += layer.lora->a.size() + layer.lora->b.size();
    ++report.adapted_matrices;
  };
  for (auto* stack : {&encoder_, &decoder_}) {
    for (auto& block : *stack) {
      adapt(block.self_attn.wq);
      adapt(block.self_attn.wv);
      if (block.cross) {
        adapt(block.cross->wq);
        adapt(block.cross->wv);
      }
    }
  }
  report.layers = encoder_.size() + decoder_.size();
  report.formula_values = 2 * report.layers * config_.d_model * config.rank;
  has_lora_ = true;
  return report;
}

void ToyLm::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".token_embedding", token_embedding_});
  out.push_back({prefix + ".encoder_positions", encoder_positions_});
  out.push_back({prefix + ".decoder_positions", decoder_positions_});
  for (std::size_t l = 0; l < encoder_.size(); ++l) encoder_[l].collect(out, prefix + ".enc" + std::to_string(l));
  for (std::size_t l = 0; l < decoder_.size(); ++l) decoder_[l].collect(out, prefix + ".dec" + std::to_string(l));
  encoder_ln_.collect(out, prefix + ".enc_ln");
  decoder_ln_.collect(out, prefix + ".dec_ln");
}

ParamList ToyLm::base_parameters() const {
  ParamList all, out;
  collect(all, "lm");
  for (auto& p : all) {
    if (!ends_with(p.name, ".lora_a") && !ends_with(p.name, ".lora_b")) out.push_back(p);
  }
  return out;
}

}  // namespace esqa
