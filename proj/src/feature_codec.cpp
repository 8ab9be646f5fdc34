#include "esqa/feature_codec.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "esqa/error.hpp"

namespace esqa {

double sample_skewness(std::span<const double> samples) {
  const double n = static_cast<double>(samples.size());
  if (samples.empty()) return 0.0;
  double mu = 0.0;
  for (double x : samples) mu += x;
  mu /= n;
  double m2 = 0.0, m3 = 0.0;
  for (double x : samples) {
    const double d = x - mu;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= n;
  m3 /= n;
  if (m2 <= 0.0) return 0.0;
  return m3 / std::pow(m2, 1.5);
}

double doane_sigma(std::size_t n) {
  const double N = static_cast<double>(n);
  return std::sqrt(6.0 * (N - 2.0) / ((N + 1.0) * (N + 3.0)));
}

std::size_t doane_bin_count(std::size_t n, double skewness) {
  const double N = static_cast<double>(n);
  const double raw = 1.0 + std::log2(N) + std::log2(1.0 + std::abs(skewness) / doane_sigma(n));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(raw)));
}

BinningSpec fit_doane_bins(std::span<const double> samples, const std::string& feature) {
  if (samples.empty()) throw DataError("fit_doane_bins: no samples for '" + feature + "'");
  std::vector<double> sorted(samples.begin(), samples.end());
  for (double x : sorted)
    if (std::isnan(x)) throw DataError("fit_doane_bins: NaN sample for '" + feature + "'");
  std::sort(sorted.begin(), sorted.end());

  BinningSpec spec;
  spec.feature = feature;
  spec.sample_size = sorted.size();
  const std::size_t N = sorted.size();
  if (sorted.front() == sorted.back()) {
    spec.boundaries = {sorted.front(), sorted.front()};
    spec.bins = spec.requested_bins = 1;
    spec.small_sample_fallback = N < 3;
    return spec;
  }
  if (N < 3) {
    spec.small_sample_fallback = true;
    spec.requested_bins = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(1.0 + std::log2(static_cast<double>(N)))));
  } else {
    spec.skewness = sample_skewness(sorted);
    spec.sigma_g1 = doane_sigma(N);
    spec.requested_bins = doane_bin_count(N, spec.skewness);
  }

  const std::size_t n = spec.requested_bins;
  std::vector<double> bounds;
  bounds.reserve(n + 1);
  for (std::size_t i = 0; i <= n; ++i) {
    const double pos = static_cast<double>(i) * static_cast<double>(N - 1) / static_cast<double>(n);
    bounds.push_back(sorted[static_cast<std::size_t>(std::llround(pos))]);
  }
  bounds.erase(std::unique(bounds.begin(), bounds.end()), bounds.end());
  spec.boundaries = std::move(bounds);
  spec.bins = spec.boundaries.size() - 1;
  return spec;
}

Discretized discretize(double x, const BinningSpec& spec) {
  if (std::isnan(x)) throw DataError("discretize: NaN input for '" + spec.feature + "'");
  const auto& b = spec.boundaries;
  if (b.size() < 2) throw DataError("discretize: invalid binning for '" + spec.feature + "'");
  if (x < b.front()) return {b.front(), 0};
  if (x >= b.back()) return {b.back(), b.size() - 1};
  const auto it = std::upper_bound(b.begin(), b.end(), x);
  const auto i = static_cast<std::size_t>(it - b.begin());
  return {b[i], i};
}

std::size_t embedding_dim(long cardinality) {
  if (cardinality < 1) throw ConfigError("embedding_dim: cardinality must be >= 1");
  return static_cast<std::size_t>(
      std::ceil(kEmbeddingLambda * std::pow(static_cast<double>(cardinality), kEmbeddingMu)));
}

Vocabulary::Vocabulary(std::string feature, std::vector<std::string> values)
    : feature_(std::move(feature)), values_(std::move(values)) {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!index_.emplace(values_[i], i + 1).second) {
      throw DataError("vocabulary for '" + feature_ + "' has duplicate value '" + values_[i] + "'");
    }
  }
}

std::optional<std::size_t> Vocabulary::index(const std::string& value) const {
  auto it = index_.find(value);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::value_at(std::size_t index) const {
  if (index == 0 || index > values_.size()) throw DataError("vocabulary index out of range");
  return values_[index - 1];
}

FeatureCodec FeatureCodec::fit(const Dataset& train, const CodecOptions& options) {
  FeatureCodec codec;
  codec.options_ = options;
  const auto& schema = train.schema;
  for (std::size_t fi = 0; fi < schema.features.size(); ++fi) {
    const auto& f = schema.features[fi];
    FeatureEncoder enc;
    enc.name = f.name;
    enc.kind = f.kind;
    if (f.is_categorical()) {
      std::vector<std::string> values = f.categories;
      if (values.empty()) {
        std::set<std::string> seen;
        for (const auto& s : train.sequences)
          for (const auto& e : s.events)
            if (auto p = std::get_if<std::string>(&e.values[fi])) seen.insert(*p);
        values.assign(seen.begin(), seen.end());
      }
      if (values.empty()) throw DataError("feature '" + f.name + "' has no observed categories");
      enc.encoding = Encoding::vocabulary;
      enc.vocabulary = Vocabulary(f.name, std::move(values));
    } else {
      std::vector<double> samples;
      std::set<std::int64_t> ints;
      for (const auto& s : train.sequences) {
        for (const auto& e : s.events) {
          if (auto x = as_number(e.values[fi])) samples.push_back(*x);
          if (auto p = std::get_if<std::int64_t>(&e.values[fi])) ints.insert(*p);
        }
      }
      if (samples.empty()) throw DataError("feature '" + f.name + "' has no observed values");
      if (f.kind == FeatureKind::integer && ints.size() <= options.integer_vocabulary_cap) {
        std::vector<std::string> values;
        for (auto v : ints) values.push_back(std::to_string(v));
        enc.encoding = Encoding::vocabulary;
        enc.vocabulary = Vocabulary(f.name, std::move(values));
      } else {
        enc.encoding = Encoding::binning;
        enc.binning = fit_doane_bins(samples, f.name);
      }
    }
    enc.dim = embedding_dim(static_cast<long>(enc.cardinality()));
    codec.features_.push_back(std::move(enc));
  }
  return codec;
}

long FeatureCodec::encode_value(std::size_t feature, const Value& value) const {
  const auto& enc = features_.at(feature);
  if (is_missing(value)) return 0;
  if (enc.encoding == Encoding::binning) {
    auto x = as_number(value);
    if (!x) throw DataError("feature '" + enc.name + "' expects a number, got " + value_to_string(value));
    return static_cast<long>(discretize(*x, enc.binning).index) + 1;
  }
  std::string key;
  if (auto s = std::get_if<std::string>(&value)) key = *s;
  else if (auto i = std::get_if<std::int64_t>(&value)) key = std::to_string(*i);
  else throw DataError("feature '" + enc.name + "' got unsupported value " + value_to_string(value));
  if (auto idx = enc.vocabulary.index(key)) return static_cast<long>(*idx);
  if (options_.strict) {
    throw DataError("feature '" + enc.name + "': unknown value '" + key + "'");
  }
  return 0;
}

std::vector<long> FeatureCodec::encode_event(const Event& event) const {
  if (event.values.size() != features_.size()) throw DataError("event arity does not match codec");
  std::vector<long> out(features_.size());
  for (std::size_t i = 0; i < features_.size(); ++i) out[i] = encode_value(i, event.values[i]);
  return out;
}

EncodedSequence FeatureCodec::encode_sequence(const EventSequence& sequence, std::size_t count) const {
  count = std::min(count, sequence.events.size());
  EncodedSequence out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(encode_event(sequence.events[i]));
  return out;
}

const FeatureEncoder& FeatureCodec::feature(const std::string& name) const {
  return features_[feature_index(name)];
}

std::size_t FeatureCodec::feature_index(const std::string& name) const {
  for (std::size_t i = 0; i < features_.size(); ++i)
    if (features_[i].name == name) return i;
  throw ConfigError("codec has no feature '" + name + "'");
}

std::size_t FeatureCodec::total_dim() const {
  std::size_t d = 0;
  for (const auto& f : features_) d += f.dim;
  return d;
}

nlohmann::ordered_json FeatureCodec::to_json() const {
  nlohmann::ordered_json doc;
  doc["version"] = kVersion;
  doc["strict"] = options_.strict;
  doc["integer_vocabulary_cap"] = options_.integer_vocabulary_cap;
  auto& arr = doc["features"] = nlohmann::ordered_json::array();
  for (const auto& f : features_) {
    nlohmann::ordered_json j;
    j["name"] = f.name;
    j["kind"] = to_string(f.kind);
    j["dim"] = f.dim;
    if (f.encoding == Encoding::vocabulary) {
      j["encoding"] = "vocabulary";
      j["values"] = f.vocabulary.values();
    } else {
      j["encoding"] = "binning";
      j["boundaries"] = f.binning.boundaries;
      j["bins"] = f.binning.bins;
      j["requested_bins"] = f.binning.requested_bins;
      j["sample_size"] = f.binning.sample_size;
      j["skewness"] = f.binning.skewness;
      j["sigma_g1"] = f.binning.sigma_g1;
      j["small_sample_fallback"] = f.binning.small_sample_fallback;
    }
    arr.push_back(std::move(j));
  }
  return doc;
}

FeatureCodec FeatureCodec::from_json(const nlohmann::json& doc) {
  FeatureCodec codec;
  try {
    if (doc.at("version").get<int>() != kVersion) throw DataError("codec artifact version mismatch");
    codec.options_.strict = doc.at("strict").get<bool>();
    codec.options_.integer_vocabulary_cap = doc.at("integer_vocabulary_cap").get<std::size_t>();
    for (const auto& j : doc.at("features")) {
      FeatureEncoder f;
      f.name = j.at("name").get<std::string>();
      const auto kind = j.at("kind").get<std::string>();
      f.kind = kind == "categorical" ? FeatureKind::categorical
               : kind == "integer"   ? FeatureKind::integer
               : kind == "real"      ? FeatureKind::real
                                     : FeatureKind::time_derived;
      f.dim = j.at("dim").get<std::size_t>();
      if (j.at("encoding").get<std::string>() == "vocabulary") {
        f.encoding = Encoding::vocabulary;
        f.vocabulary = Vocabulary(f.name, j.at("values").get<std::vector<std::string>>());
      } else {
        f.encoding = Encoding::binning;
        f.binning.feature = f.name;
        f.binning.boundaries = j.at("boundaries").get<std::vector<double>>();
        f.binning.bins = j.at("bins").get<std::size_t>();
        f.binning.requested_bins = j.at("requested_bins").get<std::size_t>();
        f.binning.sample_size = j.at("sample_size").get<std::size_t>();
        f.binning.skewness = j.at("skewness").get<double>();
        f.binning.sigma_g1 = j.at("sigma_g1").get<double>();
        f.binning.small_sample_fallback = j.at("small_sample_fallback").get<bool>();
      }
      codec.features_.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("codec artifact: ") + e.what());
  }
  return codec;
}

EventEmbedder::EventEmbedder(const FeatureCodec& codec, Rng& rng) {
  for (const auto& f : codec.features()) {
    tables_.push_back(random_normal({f.cardinality() + 1, f.dim}, 1.0, rng));
    names_.push_back(f.name);
    width_ += f.dim;
  }
}

Tensor EventEmbedder::embed_event(const std::vector<long>& indices) const {
  if (indices.size() != tables_.size()) throw ShapeError("embed_event: feature count mismatch");
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < tables_.size(); ++j) parts.push_back(gather_rows(tables_[j], {indices[j]}));
  return concat_cols(parts);
}

Tensor EventEmbedder::embed_sequence(const EncodedSequence& sequence) const {
  if (sequence.empty()) throw DataError("embed_sequence: empty sequence");
  return embed_batch({&sequence}, sequence.size());
}

Tensor EventEmbedder::embed_batch(const std::vector<const EncodedSequence*>& batch, std::size_t max_len) const {
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < tables_.size(); ++j) {
    std::vector<long> idx(batch.size() * max_len, -1);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& seq = *batch[b];
      if (seq.size() > max_len) throw ShapeError("embed_batch: sequence longer than max_len");
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq[i].size() != tables_.size()) throw ShapeError("embed_batch: feature count mismatch");
        idx[b * max_len + i] = seq[i][j];
      }
    }
    parts.push_back(gather_rows(tables_[j], idx));
  }
  return concat_cols(parts);
}

void EventEmbedder::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t j = 0; j < tables_.size(); ++j) out.push_back({prefix + "." + names_[j], tables_[j]});
}

}  // namespace esqa
