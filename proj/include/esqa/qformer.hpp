#pragma once

#include <cstddef>
#include <vector>

#include "esqa/nn.hpp"
#include "json.hpp"

namespace esqa {

struct ConnectorConfig {
  std::size_t queries = 8;
  std::size_t width = 32;
  std::size_t blocks = 2;
  std::size_t heads = 4;
  std::size_t ffn_width = 64;
  // Cross-attention sits in blocks with index % period == phase.
  std::size_t cross_period = 2;
  std::size_t cross_phase = 1;
  std::size_t output_width = 48;  // d_llm
  bool cross_attention = true;    // false: output ignores the events (wiring check)
  double dropout = 0.0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static ConnectorConfig from_json(const nlohmann::json& doc);
};

// Trainable queries, self-attention blocks with periodic cross-attention to
// the encoder rows, final norm and an affine map to the text model width.
class QFormer {
 public:
  QFormer() = default;
  QFormer(const ConnectorConfig& config, std::size_t encoder_width, Rng& rng);

  const ConnectorConfig& config() const { return config_; }
  std::size_t encoder_width() const { return encoder_width_; }

  // (I_n, d_enc) -> (q, d_llm).
  Tensor connect(const Tensor& encoder_rows, const ForwardContext& ctx = {}) const;

  // Padded encoder batch (B*max_len, d_enc) -> (B*q, d_llm).
  Tensor connect_batch(const Tensor& encoder_rows, const std::vector<std::size_t>& lengths,
                       std::size_t max_len, const ForwardContext& ctx = {}) const;

  bool has_cross(std::size_t block) const;
  std::vector<TransformerBlock>& blocks() { return blocks_; }
  Tensor& queries() { return queries_; }
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  ConnectorConfig config_;
  std::size_t encoder_width_ = 0;
  Tensor queries_;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_ln_;
  Linear projection_;
};

// L2 norm of the change in connect() output when each encoder row is zeroed.
std::vector<double> sensitivity_probe(const QFormer& connector, const Tensor& encoder_rows);

}  // namespace esqa
