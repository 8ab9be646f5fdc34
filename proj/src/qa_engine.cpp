#include "esqa/qa_engine.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <set>

#include "esqa/error.hpp"
#include "esqa/rng.hpp"

namespace esqa {

namespace {

struct FamilyInfo {
  TaskFamily family;
  const char* name;
  TaskKind kind;
  AnswerMode mode;
  bool numeric;
};

const FamilyInfo kFamilies[] = {
    {TaskFamily::last, "last", TaskKind::extractive, AnswerMode::open_ended, false},
    {TaskFamily::mode, "mode", TaskKind::extractive, AnswerMode::open_ended, false},
    {TaskFamily::mode_binary, "mode_binary", TaskKind::extractive, AnswerMode::binary, false},
    {TaskFamily::mode_choice, "mode_choice", TaskKind::extractive, AnswerMode::multi_choice, false},
    {TaskFamily::occurrence, "occurrence", TaskKind::extractive, AnswerMode::binary, false},
    {TaskFamily::count, "count", TaskKind::extractive, AnswerMode::open_ended, true},
    {TaskFamily::min, "min", TaskKind::extractive, AnswerMode::open_ended, true},
    {TaskFamily::max, "max", TaskKind::extractive, AnswerMode::open_ended, true},
    {TaskFamily::mean, "mean", TaskKind::extractive, AnswerMode::open_ended, true},
    {TaskFamily::next, "next", TaskKind::predictive, AnswerMode::open_ended, false},
    {TaskFamily::target, "target", TaskKind::predictive, AnswerMode::binary, false},
};

const FamilyInfo& info(TaskFamily f) {
  for (const auto& i : kFamilies)
    if (i.family == f) return i;
  throw ConfigError("unknown task family");
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? sep : "") + parts[i];
  return out;
}

bool is_word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '_'; }

// Values of a categorical feature over the first `count` events, missing skipped.
std::vector<std::string> categorical_values(const EventSequence& s, std::size_t fi, std::size_t count) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& v = s.events[i].values[fi];
    if (!is_missing(v)) out.push_back(value_to_string(v));
  }
  return out;
}

// Earliest first occurrence wins ties.
std::string mode_value(const std::vector<std::string>& values) {
  std::map<std::string, std::size_t> counts;
  for (const auto& v : values) ++counts[v];
  std::string best;
  std::size_t best_count = 0;
  std::set<std::string> seen;
  for (const auto& v : values) {
    if (!seen.insert(v).second) continue;
    if (counts[v] > best_count) {
      best = v;
      best_count = counts[v];
    }
  }
  return best;
}

double round2(double x) { return std::round(x * 100.0) / 100.0; }

std::size_t strip_marker(const std::string& text) {
  static const std::string marker = "answer:";
  std::string lower(text.size(), ' ');
  std::transform(text.begin(), text.end(), lower.begin(),
                 [](char c) { return static_cast<char>(std::tolower(static_cast<unsigned char>(c))); });
  const auto pos = lower.find(marker);
  return pos == std::string::npos ? 0 : pos + marker.size();
}

}  // namespace

std::string to_string(TaskFamily family) { return info(family).name; }

TaskFamily task_family_from_string(const std::string& s) {
  for (const auto& i : kFamilies)
    if (s == i.name) return i.family;
  throw ConfigError("unknown task family '" + s + "'");
}

TaskKind kind_of(TaskFamily family) { return info(family).kind; }
AnswerMode mode_of(TaskFamily family) { return info(family).mode; }
bool is_numeric_family(TaskFamily family) { return info(family).numeric; }

std::string default_question(TaskFamily family) {
  switch (family) {
    case TaskFamily::last: return "What is the {feature} of the last event?";
    case TaskFamily::mode: return "What is the most frequent value of {feature} in the entire dataset?";
    case TaskFamily::mode_binary: return "Is {value} the most frequent value of {feature}?";
    case TaskFamily::mode_choice:
      return "What is the most frequent value of {feature} in the entire dataset? Options: {options}.";
    case TaskFamily::occurrence: return "Is there an event with {feature} {value}?";
    case TaskFamily::count: return "How many events are in the history?";
    case TaskFamily::min: return "What is the minimum value of {feature}?";
    case TaskFamily::max: return "What is the maximum value of {feature}?";
    case TaskFamily::mean: return "What is the average value of {feature}?";
    case TaskFamily::next: return "What will be the {feature} of the next event?";
    case TaskFamily::target: return "Will {feature} be true for this client?";
  }
  return {};
}

std::string default_instruction(TaskFamily family) {
  switch (mode_of(family)) {
    case AnswerMode::binary: return "Answer Yes or No.";
    case AnswerMode::multi_choice: return "Answer with one of the options.";
    case AnswerMode::open_ended: return is_numeric_family(family) ? "Answer with a number." : "Answer with one value.";
  }
  return {};
}

QATask make_task(const std::string& id, TaskFamily family, const std::string& feature) {
  QATask t;
  t.id = id;
  t.family = family;
  t.feature = feature;
  t.question = default_question(family);
  t.instruction = default_instruction(family);
  return t;
}

nlohmann::ordered_json QATask::to_json() const {
  return {{"id", id},
          {"family", to_string(family)},
          {"feature", feature},
          {"question", question},
          {"instruction", instruction},
          {"sort_options", sort_options},
          {"option_count", option_count}};
}

QATask QATask::from_json(const nlohmann::json& doc) {
  try {
    QATask t = make_task(doc.at("id").get<std::string>(), task_family_from_string(doc.at("family").get<std::string>()),
                         doc.value("feature", std::string()));
    t.question = doc.value("question", t.question);
    t.instruction = doc.value("instruction", t.instruction);
    t.sort_options = doc.value("sort_options", t.sort_options);
    t.option_count = doc.value("option_count", t.option_count);
    if (t.id.empty()) throw ConfigError("task: empty id");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("task: ") + e.what());
  }
}

void check_task(const QATask& task, const Schema& schema) {
  if (task.family == TaskFamily::count) return;
  if (task.family == TaskFamily::target) {
    if (task.feature.empty()) throw ConfigError("task '" + task.id + "': target name required");
    return;
  }
  const auto fi = schema.find(task.feature);
  if (!fi) throw ConfigError("task '" + task.id + "': unknown feature '" + task.feature + "'");
  const auto* f = &schema.features[*fi];
  const bool numeric = f->kind == FeatureKind::real || f->kind == FeatureKind::integer;
  if (is_numeric_family(task.family) && !numeric) {
    throw ConfigError("task '" + task.id + "' needs a numeric feature, '" + task.feature + "' is not");
  }
  if (!is_numeric_family(task.family) && !f->is_categorical()) {
    throw ConfigError("task '" + task.id + "' needs a categorical feature, '" + task.feature + "' is not");
  }
  if (task.mode() == AnswerMode::multi_choice && task.option_count < 2) {
    throw ConfigError("task '" + task.id + "': need at least 2 options");
  }
}

std::vector<std::string> answer_vocabulary(const QATask& task, const Schema& schema) {
  if (task.mode() == AnswerMode::binary || is_numeric_family(task.family)) return {};
  const auto fi = schema.find(task.feature);
  return fi ? schema.features[*fi].categories : std::vector<std::string>{};
}

std::size_t visible_events(const QATask& task, const EventSequence& sequence) {
  if (task.family == TaskFamily::next) {
    if (sequence.events.size() < 2) {
      throw DataError("task '" + task.id + "': client " + sequence.client_id + " has no held-out event");
    }
    return sequence.events.size() - 1;
  }
  return sequence.events.size();
}

RenderedQuestion render_question(const QATask& task, const EventSequence& sequence, const Schema& schema,
                                 std::uint64_t seed, const std::string& prefix) {
  check_task(task, schema);
  if (sequence.events.empty()) throw DataError("render_question: empty sequence");
  RenderedQuestion q;
  q.prefix = prefix;
  Rng rng(mix(seed));
  std::string text = task.question.empty() ? default_question(task.family) : task.question;
  replace_all(text, "{feature}", task.feature);

  if (task.family == TaskFamily::mode_binary || task.family == TaskFamily::occurrence) {
    const auto& cats = schema.features[schema.index_of(task.feature)].categories;
    const std::size_t fi = schema.index_of(task.feature);
    const auto values = categorical_values(sequence, fi, visible_events(task, sequence));
    // Half the prompts ask about a value that makes the answer Yes.
    std::vector<std::string> yes, no;
    if (task.family == TaskFamily::mode_binary) {
      const std::string m = mode_value(values);
      for (const auto& c : cats) (c == m ? yes : no).push_back(c);
    } else {
      const std::set<std::string> present(values.begin(), values.end());
      for (const auto& c : cats) (present.count(c) ? yes : no).push_back(c);
    }
    const bool want_yes = rng.uniform() < 0.5;
    const auto& pool = (want_yes && !yes.empty()) || no.empty() ? yes : no;
    q.value = pool[rng.below(pool.size())];
    replace_all(text, "{value}", *q.value);
  }
  if (task.family == TaskFamily::mode_choice) {
    const auto truth = std::get<std::string>(ground_truth(task, sequence, schema));
    const auto& cats = schema.features[schema.index_of(task.feature)].categories;
    if (std::find(cats.begin(), cats.end(), truth) == cats.end()) {
      throw DataError("task '" + task.id + "': option pool lacks the answer '" + truth + "'");
    }
    std::vector<std::string> others;
    for (const auto& c : cats)
      if (c != truth) others.push_back(c);
    rng.shuffle(others);
    others.resize(std::min(others.size(), task.option_count - 1));
    q.options = others;
    q.options.push_back(truth);
    if (task.sort_options) std::sort(q.options.begin(), q.options.end());
    else rng.shuffle(q.options);
    replace_all(text, "{options}", join(q.options, "; "));
  }
  const std::string instruction = task.instruction.empty() ? default_instruction(task.family) : task.instruction;
  q.body = instruction.empty() ? text : text + " " + instruction;
  return q;
}

Value ground_truth(const QATask& task, const EventSequence& sequence, const Schema& schema,
                   const FeatureCodec* codec, const RenderedQuestion* question) {
  if (sequence.events.empty()) throw DataError("ground_truth: empty sequence");
  const std::size_t count = visible_events(task, sequence);
  if (task.family == TaskFamily::count) return static_cast<double>(count);
  if (task.family == TaskFamily::target) {
    for (const auto& [name, value] : sequence.targets) {
      if (name != task.feature) continue;
      if (auto b = std::get_if<bool>(&value)) return *b;
      if (auto x = as_number(value)) return *x != 0.0;
    }
    throw DataError("client " + sequence.client_id + " has no target '" + task.feature + "'");
  }
  const std::size_t fi = schema.index_of(task.feature);

  if (is_numeric_family(task.family)) {
    std::vector<double> xs;
    for (std::size_t i = 0; i < count; ++i)
      if (auto x = as_number(sequence.events[i].values[fi])) xs.push_back(*x);
    if (xs.empty()) throw DataError("client " + sequence.client_id + ": no values of '" + task.feature + "'");
    double v = 0.0;
    if (task.family == TaskFamily::min) v = *std::min_element(xs.begin(), xs.end());
    else if (task.family == TaskFamily::max) v = *std::max_element(xs.begin(), xs.end());
    else {
      for (double x : xs) v += x;
      v /= static_cast<double>(xs.size());
    }
    if (codec) {
      const auto& enc = codec->features()[codec->feature_index(task.feature)];
      if (enc.encoding == Encoding::binning) return discretize(v, enc.binning).value;
    }
    return round2(v);
  }

  if (task.family == TaskFamily::next) {
    const auto& v = sequence.events[count].values[fi];
    if (is_missing(v)) throw DataError("client " + sequence.client_id + ": held-out event lacks '" + task.feature + "'");
    return value_to_string(v);
  }
  const auto values = categorical_values(sequence, fi, count);
  if (values.empty()) throw DataError("client " + sequence.client_id + ": no values of '" + task.feature + "'");
  switch (task.family) {
    case TaskFamily::last: return values.back();
    case TaskFamily::mode:
    case TaskFamily::mode_choice: return mode_value(values);
    case TaskFamily::mode_binary:
    case TaskFamily::occurrence: {
      if (!question || !question->value) throw DataError("task '" + task.id + "' needs the rendered value slot");
      if (task.family == TaskFamily::mode_binary) return mode_value(values) == *question->value;
      return std::find(values.begin(), values.end(), *question->value) != values.end();
    }
    default: break;
  }
  throw ConfigError("ground_truth: unsupported family");
}

std::string serialize_answer(const Value& value) {
  if (auto b = std::get_if<bool>(&value)) return *b ? "Yes" : "No";
  if (auto s = std::get_if<std::string>(&value)) return *s;
  if (auto x = as_number(value)) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, *x, std::chars_format::fixed);
    return std::string(buf, res.ptr);
  }
  throw DataError("serialize_answer: missing value");
}

ParsedAnswer parse_answer(const std::string& text, const QATask& task, const std::vector<std::string>& vocabulary) {
  ParsedAnswer out;
  std::size_t start = strip_marker(text);
  while (start < text.size() && std::isspace(static_cast<unsigned char>(text[start]))) ++start;
  const std::string rest = text.substr(start);

  if (task.mode() == AnswerMode::binary) {
    auto leading = [&](const std::string& word) {
      if (rest.size() < word.size()) return false;
      for (std::size_t i = 0; i < word.size(); ++i) {
        if (std::tolower(static_cast<unsigned char>(rest[i])) != word[i]) return false;
      }
      return rest.size() == word.size() || !std::isalpha(static_cast<unsigned char>(rest[word.size()]));
    };
    if (leading("yes")) out.value = true;
    else if (leading("no")) out.value = false;
    else out.reason = "no leading Yes/No";
    return out;
  }

  if (is_numeric_family(task.family)) {
    for (std::size_t i = 0; i < rest.size(); ++i) {
      const bool neg = rest[i] == '-' && i + 1 < rest.size() && std::isdigit(static_cast<unsigned char>(rest[i + 1]));
      if (!neg && !std::isdigit(static_cast<unsigned char>(rest[i]))) continue;
      std::size_t j = i + (neg ? 1 : 0);
      while (j < rest.size() && std::isdigit(static_cast<unsigned char>(rest[j]))) ++j;
      if (j + 1 < rest.size() && rest[j] == '.' && std::isdigit(static_cast<unsigned char>(rest[j + 1]))) {
        ++j;
        while (j < rest.size() && std::isdigit(static_cast<unsigned char>(rest[j]))) ++j;
      }
      double v = 0.0;
      std::from_chars(rest.data() + i, rest.data() + j, v);
      out.value = v;
      return out;
    }
    out.reason = "no numeric literal";
    return out;
  }

  std::size_t best_pos = std::string::npos, best_len = 0;
  std::string best;
  for (const auto& word : vocabulary) {
    if (word.empty()) continue;
    for (std::size_t pos = rest.find(word); pos != std::string::npos; pos = rest.find(word, pos + 1)) {
      const bool left = pos == 0 || !is_word_char(rest[pos - 1]);
      const std::size_t end = pos + word.size();
      const bool right = end == rest.size() || !is_word_char(rest[end]);
      if (!left || !right) continue;
      if (pos < best_pos || (pos == best_pos && word.size() > best_len)) {
        best_pos = pos;
        best_len = word.size();
        best = word;
      }
      break;
    }
  }
  if (best_pos == std::string::npos) out.reason = "no vocabulary value";
  else out.value = best;
  return out;
}

bool answers_equal(const Value& a, const Value& b) {
  if (auto x = as_number(a)) {
    if (std::holds_alternative<bool>(a) || std::holds_alternative<bool>(b)) return a == b;
    auto y = as_number(b);
    return y && *x == *y;
  }
  return a == b;
}

nlohmann::ordered_json QAPair::to_json() const {
  return {{"task", task},   {"client_id", client_id}, {"prefix", prefix},
          {"body", body},   {"answer", answer},       {"truth", value_to_json(truth)}};
}

Corpus build_corpus(const Dataset& dataset, const std::vector<QATask>& tasks, const FeatureCodec* codec,
                    std::uint64_t seed, const CorpusOptions& options) {
  if (tasks.empty()) throw ConfigError("build_corpus: empty task list");
  std::vector<const QATask*> active;
  for (const auto& t : tasks) {
    check_task(t, dataset.schema);
    if (std::find(options.exclude.begin(), options.exclude.end(), t.id) == options.exclude.end()) {
      active.push_back(&t);
    }
  }
  if (active.empty()) throw ConfigError("build_corpus: every task is held out");
  Corpus corpus;
  for (std::size_t si = 0; si < dataset.sequences.size(); ++si) {
    const auto& seq = dataset.sequences[si];
    for (std::size_t ti = 0; ti < active.size(); ++ti) {
      const QATask& task = *active[ti];
      if (task.family == TaskFamily::next && seq.events.size() < 2) {
        ++corpus.skipped[task.id];
        continue;
      }
      const std::uint64_t pair_seed = mix(seed ^ mix(si * 1000003ULL + ti));
      QAPair p;
      const auto q = render_question(task, seq, dataset.schema, pair_seed, options.prefix);
      p.task = task.id;
      p.client_id = seq.client_id;
      p.sequence_index = si;
      p.prefix = q.prefix;
      p.body = q.body;
      p.truth = ground_truth(task, seq, dataset.schema, codec, &q);
      p.answer = serialize_answer(p.truth);
      p.visible = visible_events(task, seq);
      ++corpus.counts[task.id];
      corpus.pairs.push_back(std::move(p));
    }
  }
  return corpus;
}

std::string corpus_to_jsonl(const Corpus& corpus) {
  std::string out;
  for (const auto& p : corpus.pairs) out += p.to_json().dump() + "\n";
  return out;
}

std::string events_as_text(const EventSequence& sequence, std::size_t feature, std::size_t count) {
  std::vector<std::string> parts;
  for (std::size_t i = 0; i < std::min(count, sequence.events.size()); ++i) {
    const auto& v = sequence.events[i].values[feature];
    if (!is_missing(v)) parts.push_back(value_to_string(v));
  }
  return join(parts, " ");
}

}  // namespace esqa
