#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "esqa/event_schema.hpp"
#include "json.hpp"

namespace esqa {

// How a categorical feature evolves along one client's sequence.
enum class CategoryProcess {
  uniform,          // iid uniform over the vocabulary
  client_favorite,  // per-client favourite with probability favorite_weight, else uniform
  markov,           // successor[prev] with probability successor_prob, else uniform
  repeat,           // first value drawn uniformly, then repeated
};

struct CategoryRule {
  std::string feature;
  CategoryProcess process = CategoryProcess::uniform;
  double favorite_weight = 0.6;
  double successor_prob = 0.8;
};

// Lognormal values; with `by_category` set, the log-mean is shifted per
// category of that feature by a seed-drawn offset of scale category_spread.
struct NumericRule {
  std::string feature;
  double log_mean = 0.0;
  double log_sd = 0.5;
  std::string by_category;
  double category_spread = 1.0;
};

// Sequence target: name = (mean of feature over the sequence > threshold).
struct LabelRule {
  std::string name;
  std::string feature;
  double threshold = 0.0;
};

struct GeneratorConfig {
  int version = 1;
  Schema schema;
  std::size_t clients = 100;
  std::size_t min_events = 5;
  std::size_t max_events = 20;
  std::int64_t start_time = 1600000000;
  double mean_gap_seconds = 3600.0;
  std::vector<CategoryRule> category_rules;
  std::vector<NumericRule> numeric_rules;
  std::vector<LabelRule> labels;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& doc);
};

// Parameters drawn from the seed, stored beside the data so targets can be
// recomputed.
struct GeneratorParams {
  std::map<std::string, std::vector<std::size_t>> successors;
  std::map<std::string, std::vector<double>> category_log_means;
};

struct SyntheticData {
  Dataset dataset;
  GeneratorParams params;
  // config, seed, realized parameters and schema as one JSON document.
  nlohmann::ordered_json provenance;
};

SyntheticData generate_synthetic(const GeneratorConfig& config, std::uint64_t seed);

// Recomputes a label rule from raw events.
bool evaluate_label(const LabelRule& rule, const EventSequence& sequence, const Schema& schema);

}  // namespace esqa
