#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "esqa/nn.hpp"
#include "esqa/tokenizer.hpp"
#include "json.hpp"

namespace esqa {

struct ToyLmConfig {
  std::size_t d_model = 48;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_width = 96;
  std::size_t max_input = 128;
  std::size_t max_output = 24;
  double dropout = 0.0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ToyLmConfig from_json(const nlohmann::json& doc);
};

// Adapters go on the query and value projections of every attention sublayer.
struct LoraConfig {
  std::size_t rank = 16;
  double alpha = 32.0;
  double dropout = 0.05;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static LoraConfig from_json(const nlohmann::json& doc);
};

struct LoraReport {
  std::size_t adapted_matrices = 0;
  std::size_t trainable_values = 0;  // census over the adapter shapes
  std::size_t formula_values = 0;    // 2 * L * d_model * r with L = all layers
  std::size_t layers = 0;
  std::size_t frozen_values = 0;

  nlohmann::ordered_json to_json() const;
};

// [prefix][SEQ-PREFIX][events rows][SEQ-SUFFIX][body]; events may be empty.
// `event_tokens` puts the events in as text instead (text-only warm-up).
struct MultimodalInput {
  std::vector<int> prefix;
  std::vector<int> event_tokens;
  Tensor events;  // (q, d_model) or undefined
  std::vector<int> body;

  std::size_t event_rows() const { return events.defined() ? events.rows() : 0; }
  std::size_t length() const { return prefix.size() + event_tokens.size() + event_rows() + 2 + body.size(); }
};

struct Generation {
  std::vector<int> ids;  // without EOS
  std::string text;
  std::vector<double> first_distribution;
};

class ToyLm {
 public:
  ToyLm() = default;
  ToyLm(std::size_t vocab_size, const ToyLmConfig& config, Rng& rng);

  const ToyLmConfig& config() const { return config_; }
  std::size_t vocab_size() const { return token_embedding_.rows(); }

  MultimodalInput inject(const Tokenizer& tokenizer, const std::string& prefix, const std::string& body,
                         const Tensor& events) const;

  // Per stream row: a token id, or -(1 + r) for injected event row r.
  std::vector<long> stream_layout(const MultimodalInput& input) const;

  // Encoder memory for a batch, (B*max_len, d). Fills lengths/max_len.
  Tensor encode(const std::vector<MultimodalInput>& batch, std::vector<std::size_t>& lengths,
                std::size_t& max_len, const ForwardContext& ctx = {}) const;

  // Decoder logits for teacher-forced decoder inputs, (B*T_dec, V).
  Tensor decode(const Tensor& memory, const std::vector<std::size_t>& memory_lengths, std::size_t memory_len,
                const std::vector<std::vector<int>>& decoder_inputs, std::size_t dec_len,
                const ForwardContext& ctx = {}) const;

  // Mean token cross-entropy of target + EOS given the inputs.
  Tensor loss(const std::vector<MultimodalInput>& batch, const std::vector<std::vector<int>>& targets,
              const ForwardContext& ctx = {}) const;

  std::vector<Generation> generate(const std::vector<MultimodalInput>& batch, std::size_t max_new_tokens,
                                   const Tokenizer& tokenizer) const;

  // p(Yes) - p(No) at the first decoding step.
  std::vector<double> binary_scores(const std::vector<MultimodalInput>& batch, const Tokenizer& tokenizer) const;
  double binary_score(const MultimodalInput& input, const Tokenizer& tokenizer) const;

  // Freezes every existing tensor and adds adapters to each Wq and Wv.
  LoraReport apply_lora(const LoraConfig& config, Rng& rng);
  bool has_lora() const { return has_lora_; }

  Tensor& token_embedding() { return token_embedding_; }
  void collect(ParamList& out, const std::string& prefix) const;
  // Parameters that existed before adapters were attached.
  ParamList base_parameters() const;

 private:
  ToyLmConfig config_;
  Tensor token_embedding_;
  Tensor encoder_positions_;
  Tensor decoder_positions_;
  std::vector<TransformerBlock> encoder_;
  std::vector<TransformerBlock> decoder_;
  LayerNorm encoder_ln_;
  LayerNorm decoder_ln_;
  bool has_lora_ = false;
};

}  // namespace esqa
