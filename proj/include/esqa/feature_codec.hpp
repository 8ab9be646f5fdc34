#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "esqa/event_schema.hpp"
#include "esqa/nn.hpp"
#include "json.hpp"

namespace esqa {

// Interval boundaries b^0 < ... < b^n for one numeric feature.
struct BinningSpec {
  std::string feature;
  std::vector<double> boundaries;
  std::size_t bins = 1;  // n, after duplicate boundaries are merged
  std::size_t requested_bins = 1;
  std::size_t sample_size = 0;
  double skewness = 0.0;
  double sigma_g1 = 0.0;
  // Set when N < 3 and the skewness term could not be evaluated.
  bool small_sample_fallback = false;

  // Number of distinct representative slots, n + 1.
  std::size_t slots() const { return boundaries.size(); }
};

struct Discretized {
  double value = 0.0;
  std::size_t index = 0;  // position of `value` among the boundaries
};

double sample_skewness(std::span<const double> samples);
double doane_sigma(std::size_t n);
std::size_t doane_bin_count(std::size_t n, double skewness);

// Doane bin count with equal-frequency boundaries taken from the sorted sample.
BinningSpec fit_doane_bins(std::span<const double> samples, const std::string& feature = {});

// Maps x to its representative boundary: b^0 below range, b^n at or above
// the top, otherwise the right edge b^i of [b^{i-1}, b^i).
Discretized discretize(double x, const BinningSpec& spec);

inline constexpr double kEmbeddingLambda = 1.6;
inline constexpr double kEmbeddingMu = 0.56;

// ceil(1.6 * K^0.56).
std::size_t embedding_dim(long cardinality);

// Ordered values with indices 1..K; index 0 is reserved for missing/unknown.
class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::string feature, std::vector<std::string> values);

  std::optional<std::size_t> index(const std::string& value) const;
  const std::string& value_at(std::size_t index) const;
  std::size_t size() const { return values_.size(); }
  const std::vector<std::string>& values() const { return values_; }
  const std::string& feature() const { return feature_; }

 private:
  std::string feature_;
  std::vector<std::string> values_;
  std::map<std::string, std::size_t> index_;
};

enum class Encoding { vocabulary, binning };

struct FeatureEncoder {
  std::string name;
  FeatureKind kind = FeatureKind::categorical;
  Encoding encoding = Encoding::vocabulary;
  Vocabulary vocabulary;
  BinningSpec binning;
  std::size_t dim = 0;

  // K: number of non-reserved indices.
  std::size_t cardinality() const {
    return encoding == Encoding::vocabulary ? vocabulary.size() : binning.slots();
  }
};

struct CodecOptions {
  // Integer features with at most this many observed values get a vocabulary.
  std::size_t integer_vocabulary_cap = 1000;
  bool strict = true;
};

// Per-event index rows: events x features, 0 = missing/unknown.
using EncodedSequence = std::vector<std::vector<long>>;

class FeatureCodec {
 public:
  static constexpr int kVersion = 1;

  static FeatureCodec fit(const Dataset& train, const CodecOptions& options = {});

  long encode_value(std::size_t feature, const Value& value) const;
  std::vector<long> encode_event(const Event& event) const;
  EncodedSequence encode_sequence(const EventSequence& sequence, std::size_t count) const;

  const std::vector<FeatureEncoder>& features() const { return features_; }
  const FeatureEncoder& feature(const std::string& name) const;
  std::size_t feature_index(const std::string& name) const;
  std::size_t total_dim() const;
  bool strict() const { return options_.strict; }

  nlohmann::ordered_json to_json() const;
  static FeatureCodec from_json(const nlohmann::json& doc);

 private:
  std::vector<FeatureEncoder> features_;
  CodecOptions options_;
};

// One trainable table per feature, (K_j + 1) x dim_j.
class EventEmbedder {
 public:
  EventEmbedder() = default;
  EventEmbedder(const FeatureCodec& codec, Rng& rng);

  std::size_t width() const { return width_; }

  // Concatenated feature embeddings for one encoded event, shape (1, D).
  Tensor embed_event(const std::vector<long>& indices) const;
  // Shape (I_n, D); rejects an empty sequence.
  Tensor embed_sequence(const EncodedSequence& sequence) const;
  // Left-aligned padded batch, shape (B * max_len, D); pad rows are zero.
  Tensor embed_batch(const std::vector<const EncodedSequence*>& batch, std::size_t max_len) const;

  void collect(ParamList& out, const std::string& prefix) const;
  std::vector<Tensor>& tables() { return tables_; }

 private:
  std::vector<Tensor> tables_;
  std::vector<std::string> names_;
  std::size_t width_ = 0;
};

}  // namespace esqa
