#include "esqa/eval_harness.hpp"

#include <cstdio>
#include <set>

#include "esqa/error.hpp"
#include "esqa/metrics.hpp"

namespace esqa {

namespace {

std::string mode_name(AnswerMode m) {
  switch (m) {
    case AnswerMode::binary: return "binary";
    case AnswerMode::multi_choice: return "multi-choice";
    case AnswerMode::open_ended: return "open-ended";
  }
  return "?";
}

int as_label(const Value& v) { return std::get<bool>(v) ? 1 : 0; }

// Classification metrics with unparseable predictions counted as misses.
void classification_metrics(const QATask& task, const std::vector<std::optional<Value>>& preds,
                            const std::vector<Value>& truths, std::map<std::string, double>& out,
                            const std::string& prefix) {
  if (task.mode() == AnswerMode::binary) {
    std::vector<int> p, t;
    std::vector<std::string> ps, ts;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const int truth = as_label(truths[i]);
      // An unparseable answer is scored as the wrong label.
      const int pred = preds[i] ? as_label(*preds[i]) : 1 - truth;
      p.push_back(pred);
      t.push_back(truth);
      ps.push_back(std::to_string(pred));
      ts.push_back(std::to_string(truth));
    }
    out[prefix + "accuracy"] = accuracy(ps, ts);
    out[prefix + "f1"] = f1_binary(p, t);
    return;
  }
  std::vector<std::string> ps, ts;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ps.push_back(preds[i] ? std::get<std::string>(*preds[i]) : std::string());
    ts.push_back(std::get<std::string>(truths[i]));
  }
  out[prefix + "accuracy"] = accuracy(ps, ts);
  out[prefix + "f1_macro"] = f1_macro(ps, ts, "");
}

}  // namespace

nlohmann::ordered_json Baseline::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  if (mode) j["mode"] = *mode;
  if (majority) j["majority"] = *majority;
  if (mean) j["mean"] = *mean;
  if (median) j["median"] = *median;
  return j;
}

Baseline statistical_baseline(const QATask& task, const std::vector<Value>& train_truths) {
  if (train_truths.empty()) throw DataError("baseline for '" + task.id + "': empty training split");
  Baseline b;
  b.task = task.id;
  if (task.mode() == AnswerMode::binary) {
    std::size_t yes = 0;
    for (const auto& v : train_truths) yes += std::get<bool>(v);
    b.majority = 2 * yes > train_truths.size();
  } else if (is_numeric_family(task.family)) {
    std::vector<double> xs;
    for (const auto& v : train_truths) xs.push_back(*as_number(v));
    b.mean = mean_of(xs);
    b.median = median_of(xs);
  } else {
    // Most frequent training answer; ties go to the earliest seen.
    std::map<std::string, std::size_t> counts;
    std::vector<std::string> order;
    for (const auto& v : train_truths) {
      const auto& s = std::get<std::string>(v);
      if (counts[s]++ == 0) order.push_back(s);
    }
    std::size_t best = 0;
    for (const auto& s : order) {
      if (counts[s] > best) {
        best = counts[s];
        b.mode = s;
      }
    }
  }
  return b;
}

std::map<std::string, double> baseline_metrics(const QATask& task, const Baseline& baseline,
                                               const std::vector<Value>& truths) {
  std::map<std::string, double> out;
  if (truths.empty()) return out;
  if (is_numeric_family(task.family)) {
    std::vector<double> t;
    for (const auto& v : truths) t.push_back(*as_number(v));
    for (const auto& [name, value] : {std::pair{"mean", baseline.mean}, std::pair{"median", baseline.median}}) {
      if (!value) continue;
      const std::vector<double> p(t.size(), *value);
      out[std::string(name) + ".mae"] = mae(p, t);
      out[std::string(name) + ".mse"] = mse(p, t);
    }
    return out;
  }
  std::vector<std::optional<Value>> preds;
  if (task.mode() == AnswerMode::binary) {
    preds.assign(truths.size(), Value(baseline.majority.value_or(false)));
    classification_metrics(task, preds, truths, out, "majority.");
  } else {
    preds.assign(truths.size(), Value(baseline.mode.value_or(std::string())));
    classification_metrics(task, preds, truths, out, "mode.");
  }
  return out;
}

TaskReport evaluate_task(const QATask& task, const std::vector<std::string>& generations,
                         const std::vector<Value>& truths, const std::vector<std::string>& vocabulary,
                         const std::vector<double>* scores, const Baseline* baseline) {
  if (generations.size() != truths.size()) throw ShapeError("evaluate_task: length mismatch");
  TaskReport r;
  r.task = task.id;
  r.family = to_string(task.family);
  r.mode = mode_name(task.mode());
  r.n_total = generations.size();
  std::vector<std::optional<Value>> preds;
  for (const auto& g : generations) {
    auto parsed = parse_answer(g, task, vocabulary);
    if (!parsed.ok()) ++r.n_unparseable;
    preds.push_back(parsed.value);
  }
  if (r.n_total > 0) {
    r.metrics["parseable_rate"] =
        static_cast<double>(r.n_total - r.n_unparseable) / static_cast<double>(r.n_total);
    if (is_numeric_family(task.family)) {
      // Unparseable numeric answers are left out of the error means.
      std::vector<double> p, t;
      for (std::size_t i = 0; i < preds.size(); ++i) {
        if (!preds[i]) continue;
        p.push_back(*as_number(*preds[i]));
        t.push_back(*as_number(truths[i]));
      }
      if (!p.empty()) {
        r.metrics["mae"] = mae(p, t);
        r.metrics["mse"] = mse(p, t);
      }
    } else {
      classification_metrics(task, preds, truths, r.metrics, "");
    }
    if (task.mode() == AnswerMode::binary && scores) {
      std::vector<int> labels;
      for (const auto& v : truths) labels.push_back(as_label(v));
      const std::set<int> classes(labels.begin(), labels.end());
      if (classes.size() == 2) r.metrics["roc_auc"] = roc_auc(*scores, labels);
    }
  }
  if (baseline) r.baseline = baseline_metrics(task, *baseline, truths);
  return r;
}

nlohmann::ordered_json TaskReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["family"] = family;
  j["mode"] = mode;
  j["zero_shot"] = zero_shot;
  j["n_total"] = n_total;
  j["n_unparseable"] = n_unparseable;
  j["metrics"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : metrics) j["metrics"][k] = v;
  j["baseline"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : baseline) j["baseline"][k] = v;
  return j;
}

const TaskReport* EvalReport::find(const std::string& task) const {
  for (const auto& t : tasks)
    if (t.task == task) return &t;
  return nullptr;
}

nlohmann::ordered_json EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["checkpoint"] = checkpoint;
  j["config_hash"] = config_hash;
  j["tasks"] = nlohmann::ordered_json::array();
  for (const auto& t : tasks) j["tasks"].push_back(t.to_json());
  return j;
}

std::string render_table(const EvalReport& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-12s %8s %8s  %-10s %9s  %s\n", "task", "mode", "n", "unparse",
                "metric", "model", "baseline");
  out += line;
  for (const auto& t : report.tasks) {
    bool first = true;
    for (const auto& [name, value] : t.metrics) {
      std::string base;
      for (const auto& [bname, bvalue] : t.baseline) {
        const auto dot = bname.find('.');
        if (bname.substr(dot + 1) != name) continue;
        char cell[64];
        std::snprintf(cell, sizeof cell, "%s=%.4f ", bname.substr(0, dot).c_str(), bvalue);
        base += cell;
      }
      const std::string label = first ? t.task + (t.zero_shot ? "*" : "") : "";
      std::snprintf(line, sizeof line, "%-16s %-12s %8s %8s  %-10s %9.4f  %s\n", label.c_str(),
                    first ? t.mode.c_str() : "", first ? std::to_string(t.n_total).c_str() : "",
                    first ? std::to_string(t.n_unparseable).c_str() : "", name.c_str(), value, base.c_str());
      out += line;
      first = false;
    }
  }
  return out;
}

}  // namespace esqa
