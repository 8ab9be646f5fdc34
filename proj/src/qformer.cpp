#include "esqa/qformer.hpp"

#include <cmath>

#include "esqa/error.hpp"

namespace esqa {

void ConnectorConfig::validate() const {
  if (queries == 0) throw ConfigError("connector: queries must be >= 1");
  if (blocks < 2) throw ConfigError("connector: need at least 2 blocks");
  if (heads == 0 || width % heads != 0) throw ConfigError("connector: width not divisible by heads");
  if (cross_period == 0 || cross_phase >= cross_period) throw ConfigError("connector: bad cross-attention period");
  if (cross_phase >= blocks) throw ConfigError("connector: no block carries cross-attention");
  if (output_width == 0 || ffn_width == 0) throw ConfigError("connector: widths must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("connector: dropout must be in [0, 1)");
}

nlohmann::ordered_json ConnectorConfig::to_json() const {
  return {{"queries", queries},         {"width", width},
          {"blocks", blocks},           {"heads", heads},
          {"ffn_width", ffn_width},     {"cross_period", cross_period},
          {"cross_phase", cross_phase}, {"output_width", output_width},
          {"cross_attention", cross_attention}, {"dropout", dropout}};
}

ConnectorConfig ConnectorConfig::from_json(const nlohmann::json& doc) {
  ConnectorConfig c;
  try {
    c.queries = doc.value("queries", c.queries);
    c.width = doc.value("width", c.width);
    c.blocks = doc.value("blocks", c.blocks);
    c.heads = doc.value("heads", c.heads);
    c.ffn_width = doc.value("ffn_width", c.ffn_width);
    c.cross_period = doc.value("cross_period", c.cross_period);
    c.cross_phase = doc.value("cross_phase", c.cross_phase);
    c.output_width = doc.value("output_width", c.output_width);
    c.cross_attention = doc.value("cross_attention", c.cross_attention);
    c.dropout = doc.value("dropout", c.dropout);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("connector config: ") + e.what());
  }
  c.validate();
  return c;
}

QFormer::QFormer(const ConnectorConfig& config, std::size_t encoder_width, Rng& rng)
    : config_(config), encoder_width_(encoder_width) {
  config_.validate();
  queries_ = random_normal({config_.queries, config_.width}, 1.0, rng);
  for (std::size_t b = 0; b < config_.blocks; ++b) {
    std::optional<std::size_t> kv;
    if (has_cross(b)) kv = encoder_width;
    blocks_.emplace_back(config_.width, config_.heads, config_.ffn_width, kv, rng);
  }
  final_ln_ = LayerNorm(config_.width);
  projection_ = Linear(config_.width, config_.output_width, true, rng);
}

bool QFormer::has_cross(std::size_t block) const {
  return block % config_.cross_period == config_.cross_phase;
}

Tensor QFormer::connect(const Tensor& encoder_rows, const ForwardContext& ctx) const {
  const std::size_t n = encoder_rows.rows();
  if (n == 0) throw DataError("connector: empty encoder output");
  return connect_batch(encoder_rows, {n}, n, ctx);
}

Tensor QFormer::connect_batch(const Tensor& encoder_rows, const std::vector<std::size_t>& lengths,
                              std::size_t max_len, const ForwardContext& ctx) const {
  if (encoder_rows.cols() != encoder_width_) {
    throw ShapeError("connector: encoder width " + std::to_string(encoder_rows.cols()) + ", expected " +
                     std::to_string(encoder_width_));
  }
  const std::size_t batch = lengths.size();
  if (encoder_rows.rows() != batch * max_len) throw ShapeError("connector: row count does not match layout");
  const std::size_t q = config_.queries;
  std::vector<long> idx(batch * q);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < q; ++i) idx[b * q + i] = static_cast<long>(i);
  Tensor x = gather_rows(queries_, idx);

  AttentionLayout self_layout;
  self_layout.batch = batch;
  self_layout.query_len = self_layout.key_len = q;
  AttentionLayout cross_layout;
  cross_layout.batch = batch;
  cross_layout.query_len = q;
  cross_layout.key_len = max_len;
  cross_layout.key_lengths = lengths;

  const Tensor* memory = config_.cross_attention ? &encoder_rows : nullptr;
  for (const auto& block : blocks_) x = block.forward(x, self_layout, ctx, memory, &cross_layout);
  return projection_.forward(final_ln_.forward(x), ctx);
}

void QFormer::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".queries", queries_});
  for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(out, prefix + ".block" + std::to_string(b));
  final_ln_.collect(out, prefix + ".ln_final");
  projection_.collect(out, prefix + ".proj");
}

std::vector<double> sensitivity_probe(const QFormer& connector, const Tensor& encoder_rows) {
  NoGradGuard guard;
  const Tensor base = connector.connect(encoder_rows);
  const std::size_t n = encoder_rows.rows(), m = encoder_rows.cols();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> masked(encoder_rows.data().begin(), encoder_rows.data().end());
    std::fill_n(masked.begin() + static_cast<long>(i * m), m, 0.0);
    const Tensor y = connector.connect(Tensor::from(encoder_rows.shape(), std::move(masked)));
    double s = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) {
      const double d = y.data()[k] - base.data()[k];
      s += d * d;
    }
    out[i] = std::sqrt(s);
  }
  return out;
}

}  // namespace esqa
