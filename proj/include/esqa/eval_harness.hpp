#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "esqa/qa_engine.hpp"
#include "json.hpp"

namespace esqa {

// Constant predictors fitted on training truths only.
struct Baseline {
  std::string task;
  std::optional<std::string> mode;  // categorical
  std::optional<bool> majority;     // binary
  std::optional<double> mean;       // numeric
  std::optional<double> median;     // numeric

  nlohmann::ordered_json to_json() const;
};

Baseline statistical_baseline(const QATask& task, const std::vector<Value>& train_truths);

struct TaskReport {
  std::string task;
  std::string family;
  std::string mode;
  bool zero_shot = false;
  std::size_t n_total = 0;
  std::size_t n_unparseable = 0;
  std::map<std::string, double> metrics;
  std::map<std::string, double> baseline;  // e.g. "mode.accuracy", "mean.mae"

  nlohmann::ordered_json to_json() const;
};

// Scores the generated texts of one task. `scores` (p(Yes) - p(No)) feeds AUC
// for binary tasks when given.
TaskReport evaluate_task(const QATask& task, const std::vector<std::string>& generations,
                         const std::vector<Value>& truths, const std::vector<std::string>& vocabulary,
                         const std::vector<double>* scores = nullptr, const Baseline* baseline = nullptr);

// Metrics of a baseline predictor on the given truths, through the same path.
std::map<std::string, double> baseline_metrics(const QATask& task, const Baseline& baseline,
                                               const std::vector<Value>& truths);

struct EvalReport {
  std::uint64_t seed = 0;
  std::string checkpoint;
  std::string config_hash;
  std::vector<TaskReport> tasks;

  const TaskReport* find(const std::string& task) const;
  nlohmann::ordered_json to_json() const;
};

// Task rows by metric columns, model value followed by baseline values.
std::string render_table(const EvalReport& report);

}  // namespace esqa
