#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "json.hpp"

namespace esqa {

enum class FeatureKind { categorical, integer, real, time_derived };
enum class TimeField { hour, weekday };

std::string to_string(FeatureKind kind);

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::categorical;
  // Declared vocabulary for categorical features; empty means undeclared.
  std::vector<std::string> categories;
  // Source field for time-derived features (computed from the timestamp).
  std::optional<TimeField> derive;
  std::string unit;

  bool is_categorical() const {
    return kind == FeatureKind::categorical || kind == FeatureKind::time_derived;
  }
  std::optional<std::size_t> cardinality() const;
};

struct Schema {
  int version = 1;
  std::vector<FeatureSpec> features;

  // Throws ConfigError on duplicate names or empty declared vocabularies.
  void validate() const;
  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  nlohmann::ordered_json to_json() const;
  static Schema from_json(const nlohmann::json& doc);
};

// Missing values are std::monostate.
using Value = std::variant<std::monostate, bool, std::int64_t, double, std::string>;

bool is_missing(const Value& v);
std::string value_to_string(const Value& v);
nlohmann::ordered_json value_to_json(const Value& v);
Value value_from_json(const nlohmann::json& j);
std::optional<double> as_number(const Value& v);

struct Event {
  std::int64_t t = 0;
  // One entry per schema feature, in schema order (derived ones included).
  std::vector<Value> values;
};

struct EventSequence {
  std::string client_id;
  std::vector<Event> events;
  std::vector<std::pair<std::string, Value>> targets;

  const Value* target(const std::string& name) const;
};

enum class Split { train, val, unsplit };
std::string to_string(Split split);

struct Dataset {
  Schema schema;
  std::vector<EventSequence> sequences;
  Split split = Split::unsplit;
};

struct LoadOptions {
  // Reject categorical values outside a declared vocabulary.
  bool strict_vocabulary = true;
};

Value derive_time_value(TimeField field, std::int64_t t);

// Parses JSONL text: one {"client_id", "targets", "events": [{"t", ...}]} per
// line. Errors are DataError and name the offending line and client.
Dataset parse_jsonl(const std::string& text, const Schema& schema, const LoadOptions& options = {});
Dataset load_jsonl(const std::filesystem::path& path, const Schema& schema,
                   const LoadOptions& options = {});

// Canonical serialization: key order client_id, targets, events; event keys
// "t" then non-derived features in schema order.
std::string export_jsonl(const Dataset& dataset);
std::string export_sequence_line(const EventSequence& sequence, const Schema& schema);

// Validates one sequence against the schema (strict timestamp order, arity).
void validate_sequence(const EventSequence& sequence, const Schema& schema);

// Client-disjoint split; val gets round(N * val_fraction) clients, clamped to
// [1, N-1]. Relative order of sequences is kept inside each part.
std::pair<Dataset, Dataset> split_by_client(const Dataset& dataset, double val_fraction,
                                            std::uint64_t seed);

// Keeps at most the `max_len` most recent events; drops sequences shorter
// than `min_len`.
Dataset truncate_sequences(const Dataset& dataset, std::size_t min_len, std::size_t max_len);

}  // namespace esqa
