#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "esqa/event_schema.hpp"
#include "esqa/feature_codec.hpp"
#include "json.hpp"

namespace esqa {

enum class TaskKind { extractive, predictive };
enum class AnswerMode { binary, multi_choice, open_ended };

// Template families known to the engine. Each fixes how the truth is computed.
enum class TaskFamily {
  last,         // value of the last event
  mode,         // most frequent value
  mode_binary,  // is <value> the most frequent value
  mode_choice,  // most frequent value, with options
  occurrence,   // does <value> occur
  count,        // number of events
  min,
  max,
  mean,
  next,    // value of the held-out next event
  target,  // stored sequence-level label
};

std::string to_string(TaskFamily family);
TaskFamily task_family_from_string(const std::string& s);
TaskKind kind_of(TaskFamily family);
AnswerMode mode_of(TaskFamily family);
bool is_numeric_family(TaskFamily family);

inline constexpr const char* kDefaultPrefix = "Given the event history,";

struct QATask {
  std::string id;
  TaskFamily family = TaskFamily::last;
  std::string feature;  // event feature, or the target name for `target`
  // Slots: {feature}, {value}, {options}. Empty means the family default.
  std::string question;
  std::string instruction;
  bool sort_options = false;
  std::size_t option_count = 4;

  TaskKind kind() const { return kind_of(family); }
  AnswerMode mode() const { return mode_of(family); }

  nlohmann::ordered_json to_json() const;
  static QATask from_json(const nlohmann::json& doc);
};

// Task with the family's default template and instruction filled in.
QATask make_task(const std::string& id, TaskFamily family, const std::string& feature);

std::string default_question(TaskFamily family);
std::string default_instruction(TaskFamily family);

// Rejects tasks whose feature is missing or has the wrong kind.
void check_task(const QATask& task, const Schema& schema);

struct RenderedQuestion {
  std::string prefix;
  std::string body;
  std::optional<std::string> value;  // the {value} slot, when used
  std::vector<std::string> options;
};

RenderedQuestion render_question(const QATask& task, const EventSequence& sequence, const Schema& schema,
                                 std::uint64_t seed, const std::string& prefix = kDefaultPrefix);

// Events the encoder may see: all of them, minus the held-out one for `next`.
std::size_t visible_events(const QATask& task, const EventSequence& sequence);

// Typed truth: bool for binary, string for categorical, double for numeric.
// Numeric feature answers are discretized representatives when the codec bins the feature.
Value ground_truth(const QATask& task, const EventSequence& sequence, const Schema& schema,
                   const FeatureCodec* codec = nullptr, const RenderedQuestion* question = nullptr);

std::string serialize_answer(const Value& value);

struct ParsedAnswer {
  std::optional<Value> value;
  std::string reason;  // set when unparseable
  bool ok() const { return value.has_value(); }
};

// `vocabulary` lists admissible categorical answers (ignored for other modes).
ParsedAnswer parse_answer(const std::string& text, const QATask& task,
                          const std::vector<std::string>& vocabulary = {});

// Categories admissible as an answer to the task.
std::vector<std::string> answer_vocabulary(const QATask& task, const Schema& schema);

bool answers_equal(const Value& a, const Value& b);

struct QAPair {
  std::string task;
  std::string client_id;
  std::size_t sequence_index = 0;
  std::string prefix;
  std::string body;
  std::string answer;
  Value truth;
  std::size_t visible = 0;

  nlohmann::ordered_json to_json() const;
};

struct Corpus {
  std::vector<QAPair> pairs;
  std::map<std::string, std::size_t> counts;
  std::map<std::string, std::size_t> skipped;  // sequences a task could not use
};

struct CorpusOptions {
  std::string prefix = kDefaultPrefix;
  std::vector<std::string> exclude;  // held-out task ids
};

// One pair per (sequence, task), task-interleaved in sequence order.
Corpus build_corpus(const Dataset& dataset, const std::vector<QATask>& tasks, const FeatureCodec* codec,
                    std::uint64_t seed, const CorpusOptions& options = {});

std::string corpus_to_jsonl(const Corpus& corpus);

// Space-joined values of one feature over the first `count` events.
std::string events_as_text(const EventSequence& sequence, std::size_t feature, std::size_t count);

}  // namespace esqa
