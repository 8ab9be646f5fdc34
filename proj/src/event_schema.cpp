#include "esqa/event_schema.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_set>

#include "esqa/checkpoint.hpp"
#include "esqa/error.hpp"
#include "esqa/rng.hpp"

namespace esqa {

namespace {

const char* const kWeekdays[] = {"sun", "mon", "tue", "wed", "thu", "fri", "sat"};

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  std::int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

std::vector<std::string> derived_categories(TimeField field) {
  std::vector<std::string> out;
  if (field == TimeField::hour) {
    for (int h = 0; h < 24; ++h) out.push_back(std::to_string(h));
  } else {
    for (const char* d : kWeekdays) out.emplace_back(d);
  }
  return out;
}

FeatureKind kind_from_string(const std::string& s) {
  if (s == "categorical") return FeatureKind::categorical;
  if (s == "integer") return FeatureKind::integer;
  if (s == "real") return FeatureKind::real;
  if (s == "time") return FeatureKind::time_derived;
  throw ConfigError("unknown feature kind '" + s + "'");
}

}  // namespace

std::string to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::categorical: return "categorical";
    case FeatureKind::integer: return "integer";
    case FeatureKind::real: return "real";
    case FeatureKind::time_derived: return "time";
  }
  return "?";
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::unsplit: return "unsplit";
  }
  return "?";
}

std::optional<std::size_t> FeatureSpec::cardinality() const {
  if (!is_categorical() || categories.empty()) return std::nullopt;
  return categories.size();
}

void Schema::validate() const {
  std::set<std::string> names;
  if (features.empty()) throw ConfigError("schema has no features");
  for (const auto& f : features) {
    if (f.name.empty()) throw ConfigError("feature with empty name");
    if (f.name == "t") throw ConfigError("feature name 't' is reserved for the timestamp");
    if (!names.insert(f.name).second) throw ConfigError("duplicate feature name '" + f.name + "'");
    if (f.kind == FeatureKind::time_derived && !f.derive) {
      throw ConfigError("time feature '" + f.name + "' needs a derive field");
    }
    std::set<std::string> seen(f.categories.begin(), f.categories.end());
    if (seen.size() != f.categories.size()) {
      throw ConfigError("feature '" + f.name + "' declares duplicate categories");
    }
  }
}

std::optional<std::size_t> Schema::find(const std::string& name) const {
  for (std::size_t i = 0; i < features.size(); ++i)
    if (features[i].name == name) return i;
  return std::nullopt;
}

std::size_t Schema::index_of(const std::string& name) const {
  auto i = find(name);
  if (!i) throw ConfigError("unknown feature '" + name + "'");
  return *i;
}

nlohmann::ordered_json Schema::to_json() const {
  nlohmann::ordered_json doc;
  doc["version"] = version;
  auto& arr = doc["features"] = nlohmann::ordered_json::array();
  for (const auto& f : features) {
    nlohmann::ordered_json j;
    j["name"] = f.name;
    j["kind"] = to_string(f.kind);
    if (f.derive) j["derive"] = *f.derive == TimeField::hour ? "hour" : "weekday";
    if (!f.categories.empty() && f.kind != FeatureKind::time_derived) j["categories"] = f.categories;
    if (!f.unit.empty()) j["unit"] = f.unit;
    arr.push_back(std::move(j));
  }
  return doc;
}

Schema Schema::from_json(const nlohmann::json& doc) {
  Schema schema;
  try {
    if (!doc.contains("version")) throw ConfigError("schema: missing 'version'");
    schema.version = doc.at("version").get<int>();
    if (schema.version != 1) throw ConfigError("schema: unsupported version " + std::to_string(schema.version));
    for (const auto& j : doc.at("features")) {
      FeatureSpec f;
      f.name = j.at("name").get<std::string>();
      f.kind = kind_from_string(j.at("kind").get<std::string>());
      if (j.contains("categories")) f.categories = j.at("categories").get<std::vector<std::string>>();
      if (j.contains("cardinality") && f.categories.empty()) {
        const auto k = j.at("cardinality").get<std::size_t>();
        if (k < 1) throw ConfigError("feature '" + f.name + "': cardinality must be >= 1");
        for (std::size_t i = 0; i < k; ++i) f.categories.push_back(std::to_string(i));
      }
      if (j.contains("derive")) {
        const auto d = j.at("derive").get<std::string>();
        if (d == "hour") f.derive = TimeField::hour;
        else if (d == "weekday") f.derive = TimeField::weekday;
        else throw ConfigError("feature '" + f.name + "': unknown derive '" + d + "'");
        f.categories = derived_categories(*f.derive);
      }
      if (j.contains("unit")) f.unit = j.at("unit").get<std::string>();
      schema.features.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("schema: ") + e.what());
  }
  schema.validate();
  return schema;
}

bool is_missing(const Value& v) { return std::holds_alternative<std::monostate>(v); }

std::string value_to_string(const Value& v) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::monostate>) return "null";
        else if constexpr (std::is_same_v<T, bool>) return x ? "true" : "false";
        else if constexpr (std::is_same_v<T, std::int64_t>) return std::to_string(x);
        else if constexpr (std::is_same_v<T, double>) return nlohmann::json(x).dump();
        else return x;
      },
      v);
}

nlohmann::ordered_json value_to_json(const Value& v) {
  return std::visit(
      [](const auto& x) -> nlohmann::ordered_json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::monostate>) return nullptr;
        else return x;
      },
      v);
}

Value value_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::monostate{};
  if (j.is_boolean()) return j.get<bool>();
  if (j.is_number_integer()) return j.get<std::int64_t>();
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>();
  throw DataError("unsupported JSON value " + j.dump());
}

std::optional<double> as_number(const Value& v) {
  if (auto p = std::get_if<double>(&v)) return *p;
  if (auto p = std::get_if<std::int64_t>(&v)) return static_cast<double>(*p);
  return std::nullopt;
}

const Value* EventSequence::target(const std::string& name) const {
  for (const auto& [k, v] : targets)
    if (k == name) return &v;
  return nullptr;
}

Value derive_time_value(TimeField field, std::int64_t t) {
  if (field == TimeField::hour) {
    const auto h = floor_div(t, 3600) - floor_div(t, 86400) * 24;
    return std::to_string(h);
  }
  const auto day = floor_div(t, 86400);
  const auto wd = ((day + 4) % 7 + 7) % 7;  // 1970-01-01 was a Thursday
  return std::string(kWeekdays[wd]);
}

namespace {

Value parse_feature_value(const nlohmann::json& j, const FeatureSpec& f, const LoadOptions& options) {
  if (j.is_null()) return std::monostate{};
  switch (f.kind) {
    case FeatureKind::categorical: {
      if (!j.is_string()) throw DataError("feature '" + f.name + "' expects a string, got " + j.dump());
      auto s = j.get<std::string>();
      if (options.strict_vocabulary && !f.categories.empty() &&
          std::find(f.categories.begin(), f.categories.end(), s) == f.categories.end()) {
        throw DataError("feature '" + f.name + "': value '" + s + "' is not in the declared vocabulary");
      }
      return s;
    }
    case FeatureKind::integer:
      if (!j.is_number_integer()) throw DataError("feature '" + f.name + "' expects an integer, got " + j.dump());
      return j.get<std::int64_t>();
    case FeatureKind::real:
      if (!j.is_number()) throw DataError("feature '" + f.name + "' expects a number, got " + j.dump());
      return j.get<double>();
    case FeatureKind::time_derived:
      break;
  }
  throw DataError("feature '" + f.name + "' is derived from the timestamp and must not be supplied");
}

EventSequence parse_line(const nlohmann::json& doc, const Schema& schema, const LoadOptions& options) {
  EventSequence seq;
  if (!doc.is_object()) throw DataError("line is not a JSON object");
  if (!doc.contains("client_id") || !doc.at("client_id").is_string()) {
    throw DataError("missing string client_id");
  }
  seq.client_id = doc.at("client_id").get<std::string>();
  for (const auto& [key, _] : doc.items()) {
    if (key != "client_id" && key != "targets" && key != "events") {
      throw DataError("client " + seq.client_id + ": unknown top-level key '" + key + "'");
    }
  }
  if (doc.contains("targets")) {
    for (const auto& [k, v] : doc.at("targets").items()) seq.targets.emplace_back(k, value_from_json(v));
  }
  if (!doc.contains("events") || !doc.at("events").is_array()) {
    throw DataError("client " + seq.client_id + ": missing events array");
  }
  for (const auto& ej : doc.at("events")) {
    if (!ej.is_object() || !ej.contains("t") || !ej.at("t").is_number_integer()) {
      throw DataError("client " + seq.client_id + ": event without integer timestamp 't'");
    }
    Event e;
    e.t = ej.at("t").get<std::int64_t>();
    for (const auto& [key, _] : ej.items()) {
      if (key == "t") continue;
      auto idx = schema.find(key);
      if (!idx) throw DataError("client " + seq.client_id + ": unknown feature '" + key + "'");
    }
    e.values.reserve(schema.features.size());
    for (const auto& f : schema.features) {
      if (f.kind == FeatureKind::time_derived) {
        if (ej.contains(f.name)) parse_feature_value(ej.at(f.name), f, options);
        e.values.push_back(derive_time_value(*f.derive, e.t));
        continue;
      }
      if (!ej.contains(f.name)) {
        throw DataError("client " + seq.client_id + ": event at t=" + std::to_string(e.t) +
                        " has no value for '" + f.name + "' (use null for missing)");
      }
      try {
        e.values.push_back(parse_feature_value(ej.at(f.name), f, options));
      } catch (const DataError& err) {
        throw DataError("client " + seq.client_id + ": " + err.what());
      }
    }
    seq.events.push_back(std::move(e));
  }
  validate_sequence(seq, schema);
  return seq;
}

}  // namespace

void validate_sequence(const EventSequence& sequence, const Schema& schema) {
  for (std::size_t i = 0; i < sequence.events.size(); ++i) {
    const auto& e = sequence.events[i];
    if (e.values.size() != schema.features.size()) {
      throw DataError("client " + sequence.client_id + ": event " + std::to_string(i) +
                      " has wrong number of feature values");
    }
    if (i > 0 && !(sequence.events[i - 1].t < e.t)) {
      throw DataError("client " + sequence.client_id + ": timestamps not strictly increasing at event " +
                      std::to_string(i) + " (" + std::to_string(sequence.events[i - 1].t) +
                      " then " + std::to_string(e.t) + ")");
    }
  }
}

Dataset parse_jsonl(const std::string& text, const Schema& schema, const LoadOptions& options) {
  schema.validate();
  Dataset ds;
  ds.schema = schema;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::unordered_set<std::string> ids;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto doc = nlohmann::json::parse(line);
      auto seq = parse_line(doc, schema, options);
      if (!ids.insert(seq.client_id).second) throw DataError("duplicate client_id " + seq.client_id);
      ds.sequences.push_back(std::move(seq));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return ds;
}

Dataset load_jsonl(const std::filesystem::path& path, const Schema& schema, const LoadOptions& options) {
  return parse_jsonl(read_file(path), schema, options);
}

std::string export_sequence_line(const EventSequence& seq, const Schema& schema) {
  nlohmann::ordered_json doc;
  doc["client_id"] = seq.client_id;
  auto& targets = doc["targets"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : seq.targets) targets[k] = value_to_json(v);
  auto& events = doc["events"] = nlohmann::ordered_json::array();
  for (const auto& e : seq.events) {
    nlohmann::ordered_json ej;
    ej["t"] = e.t;
    for (std::size_t i = 0; i < schema.features.size(); ++i) {
      if (schema.features[i].kind == FeatureKind::time_derived) continue;
      ej[schema.features[i].name] = value_to_json(e.values[i]);
    }
    events.push_back(std::move(ej));
  }
  return doc.dump();
}

std::string export_jsonl(const Dataset& dataset) {
  std::string out;
  for (const auto& seq : dataset.sequences) {
    out += export_sequence_line(seq, dataset.schema);
    out += '\n';
  }
  return out;
}

std::pair<Dataset, Dataset> split_by_client(const Dataset& dataset, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("val_fraction must be in (0, 1)");
  }
  const std::size_t n = dataset.sequences.size();
  if (n < 2) throw DataError("split_by_client needs at least 2 clients, got " + std::to_string(n));
  auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 1);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<bool> is_val(n, false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;

  Dataset train{dataset.schema, {}, Split::train};
  Dataset val{dataset.schema, {}, Split::val};
  for (std::size_t i = 0; i < n; ++i) {
    (is_val[i] ? val : train).sequences.push_back(dataset.sequences[i]);
  }
  return {std::move(train), std::move(val)};
}

Dataset truncate_sequences(const Dataset& dataset, std::size_t min_len, std::size_t max_len) {
  Dataset out{dataset.schema, {}, dataset.split};
  for (const auto& seq : dataset.sequences) {
    if (seq.events.size() < std::max<std::size_t>(min_len, 1)) continue;
    EventSequence s = seq;
    if (max_len > 0 && s.events.size() > max_len) {
      s.events.erase(s.events.begin(), s.events.end() - static_cast<std::ptrdiff_t>(max_len));
    }
    out.sequences.push_back(std::move(s));
  }
  return out;
}

}  // namespace esqa
