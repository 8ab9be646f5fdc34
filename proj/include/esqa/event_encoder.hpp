#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "esqa/feature_codec.hpp"
#include "esqa/nn.hpp"
#include "json.hpp"

namespace esqa {

enum class EncoderArchitecture { causal_transformer, gru, lstm };

std::string to_string(EncoderArchitecture arch);
EncoderArchitecture encoder_architecture_from_string(const std::string& s);

struct EncoderConfig {
  EncoderArchitecture architecture = EncoderArchitecture::causal_transformer;
  std::size_t layers = 2;
  std::size_t width = 32;  // d_enc
  std::size_t heads = 4;
  std::size_t ffn_width = 64;
  double dropout = 0.0;
  std::size_t max_positions = 64;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& doc);
};

// Encoder rows for a padded batch: item b owns rows [b*max_len, b*max_len + lengths[b]).
struct EncodedBatch {
  Tensor rows;
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;
};

// Recurrent cell over a batch of rows; LSTM carries a cell state as well.
class RecurrentLayer {
 public:
  RecurrentLayer() = default;
  RecurrentLayer(EncoderArchitecture arch, std::size_t width, Rng& rng);

  // x: (B*T, w) laid out item-major; returns the hidden state at every step.
  Tensor forward(const Tensor& x, std::size_t batch, std::size_t steps) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  EncoderArchitecture arch_ = EncoderArchitecture::gru;
  std::size_t width_ = 0;
  Linear input_;   // x -> gates
  Linear hidden_;  // h -> gates
};

// Input projection + learned positions + causal stack, or a recurrent stack.
// Both variants share encode_batch, so callers never branch on architecture.
class EventEncoder {
 public:
  EventEncoder() = default;
  EventEncoder(const FeatureCodec& codec, const EncoderConfig& config, Rng& rng);

  const EncoderConfig& config() const { return config_; }
  std::size_t input_width() const { return embedder_.width(); }

  // (rows, D) -> (rows, d_enc).
  Tensor project_inputs(const Tensor& embeddings, const ForwardContext& ctx = {}) const;

  // (I_n, D) -> (I_n, d_enc).
  Tensor encode(const Tensor& embeddings, const ForwardContext& ctx = {}) const;

  // Embedded and projected batch (B*max_len, D); pad rows at or past lengths[b].
  Tensor encode_batch(const Tensor& embeddings, const std::vector<std::size_t>& lengths,
                      std::size_t max_len, const ForwardContext& ctx = {}) const;

  EncodedBatch encode_sequences(const std::vector<const EncodedSequence*>& batch,
                                const ForwardContext& ctx = {}) const;

  const EventEmbedder& embedder() const { return embedder_; }
  EventEmbedder& embedder() { return embedder_; }
  Linear& projection() { return projection_; }

  void collect(ParamList& out, const std::string& prefix) const;

 private:
  EncoderConfig config_;
  EventEmbedder embedder_;
  Linear projection_;
  Tensor positions_;
  std::vector<TransformerBlock> blocks_;
  std::vector<RecurrentLayer> recurrent_;
  LayerNorm final_ln_;
};

// One linear head per feature over K_j + 1 classes (index 0 included).
class NextEventHeads {
 public:
  NextEventHeads() = default;
  NextEventHeads(const FeatureCodec& codec, std::size_t width, Rng& rng);

  std::vector<Tensor> forward(const Tensor& rows) const;
  std::size_t arity(std::size_t feature) const { return heads_.at(feature).out_features(); }
  std::size_t size() const { return heads_.size(); }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  std::vector<Linear> heads_;
  std::vector<std::string> names_;
};

// Sum over features of the mean cross-entropy predicting event i+1 from row i.
// Returns a scalar 0 tensor when no sequence has two events.
Tensor next_event_loss(const EventEncoder& encoder, const NextEventHeads& heads,
                       const std::vector<const EncodedSequence*>& batch, const ForwardContext& ctx = {});

struct PretrainConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 32;
  LrSchedule schedule{1e-3, 1e-5, 20, 1000, 1.0};
  double clip_norm = 1.0;
  std::uint64_t seed = 1;
};

struct PretrainResult {
  std::vector<double> losses;  // one per optimizer step
  std::size_t skipped_sequences = 0;
  long steps = 0;
};

PretrainResult pretrain_next_event(EventEncoder& encoder, NextEventHeads& heads,
                                   const std::vector<EncodedSequence>& train, const PretrainConfig& config);

// Accuracy of argmax(head(row i)) against event i+1 for one feature.
double next_event_accuracy(const EventEncoder& encoder, const NextEventHeads& heads,
                           const std::vector<EncodedSequence>& data, std::size_t feature);

}  // namespace esqa
