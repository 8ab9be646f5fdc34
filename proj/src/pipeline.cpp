#include "esqa/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "esqa/checkpoint.hpp"
#include "esqa/error.hpp"

namespace esqa {

namespace {

constexpr const char* kWeightsFile = "model.bin";
constexpr const char* kSidecarFile = "model.json";

// Families the text warm-up covers for every categorical task feature.
const TaskFamily kWarmupFamilies[] = {TaskFamily::last, TaskFamily::mode, TaskFamily::mode_binary,
                                      TaskFamily::occurrence, TaskFamily::mode_choice};

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t x = seed * 0x9E3779B97F4A7C15ULL + salt;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

LrSchedule resolved(LrSchedule s, long total_steps) {
  if (s.cycle_length <= 0) s.cycle_length = std::max<long>(1, total_steps - s.warmup_steps);
  return s;
}

void check_loss(double value, long step, const char* stage) {
  if (!std::isfinite(value)) {
    throw DivergenceError(std::string(stage) + ": non-finite loss at step " + std::to_string(step), step);
  }
}

}  // namespace

nlohmann::ordered_json StageConfig::to_json() const {
  return {{"epochs", epochs},
          {"batch_size", batch_size},
          {"peak_lr", schedule.peak_lr},
          {"min_lr", schedule.min_lr},
          {"warmup_steps", schedule.warmup_steps},
          {"cycle_length", schedule.cycle_length},
          {"restart_multiplier", schedule.restart_multiplier},
          {"clip_norm", clip_norm}};
}

StageConfig StageConfig::from_json(const nlohmann::json& doc, const StageConfig& defaults) {
  StageConfig c = defaults;
  c.epochs = doc.value("epochs", c.epochs);
  c.batch_size = doc.value("batch_size", c.batch_size);
  c.schedule.peak_lr = doc.value("peak_lr", c.schedule.peak_lr);
  c.schedule.min_lr = doc.value("min_lr", c.schedule.min_lr);
  c.schedule.warmup_steps = doc.value("warmup_steps", c.schedule.warmup_steps);
  c.schedule.cycle_length = doc.value("cycle_length", c.schedule.cycle_length);
  c.schedule.restart_multiplier = doc.value("restart_multiplier", c.schedule.restart_multiplier);
  c.clip_norm = doc.value("clip_norm", c.clip_norm);
  if (c.batch_size == 0) throw ConfigError("stage: batch_size must be >= 1");
  if (c.schedule.peak_lr < 0 || c.schedule.min_lr < 0 || c.schedule.min_lr > c.schedule.peak_lr) {
    throw ConfigError("stage: need 0 <= min_lr <= peak_lr");
  }
  return c;
}

void ExperimentConfig::validate() const {
  if (version != 1) throw ConfigError("config: unsupported version " + std::to_string(version));
  if (generator.has_value() == !data_path.empty()) {
    throw ConfigError("config.data: give exactly one of 'generator' or 'path'");
  }
  if (!data_path.empty() && !schema) throw ConfigError("config.data: 'path' needs a 'schema'");
  if (min_seq_len == 0 || min_seq_len > max_seq_len) throw ConfigError("config: need 1 <= min_seq_len <= max_seq_len");
  if (max_seq_len > encoder.max_positions) {
    throw ConfigError("config: max_seq_len " + std::to_string(max_seq_len) + " exceeds encoder.max_positions " +
                      std::to_string(encoder.max_positions));
  }
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("config: val_fraction must be in (0, 1)");
  encoder.validate();
  connector.validate();
  lm.validate();
  lora.validate();
  if (connector.output_width != lm.d_model) {
    throw ConfigError("config: connector.output_width " + std::to_string(connector.output_width) +
                      " must equal lm.d_model " + std::to_string(lm.d_model));
  }
  if (tasks.empty()) throw ConfigError("config: no tasks");
  std::set<std::string> ids;
  const Schema& s = generator ? generator->schema : *schema;
  for (const auto& t : tasks) {
    if (!ids.insert(t.id).second) throw ConfigError("config: duplicate task id '" + t.id + "'");
    if (t.family != TaskFamily::target) check_task(t, s);
  }
  for (const auto& h : holdout) {
    if (!ids.count(h)) throw ConfigError("config.holdout: unknown task id '" + h + "'");
  }
  if (holdout.size() >= tasks.size()) throw ConfigError("config.holdout: at least one task must be trained");
}

const QATask& ExperimentConfig::task(const std::string& id) const {
  for (const auto& t : tasks)
    if (t.id == id) return t;
  throw ConfigError("unknown task id '" + id + "'");
}

bool ExperimentConfig::is_holdout(const std::string& id) const {
  return std::find(holdout.begin(), holdout.end(), id) != holdout.end();
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::ordered_json j;
  j["version"] = version;
  j["seed"] = seed;
  if (generator) j["data"]["generator"] = generator->to_json();
  else {
    j["data"]["path"] = data_path;
    j["data"]["schema"] = schema->to_json();
  }
  j["min_seq_len"] = min_seq_len;
  j["max_seq_len"] = max_seq_len;
  j["val_fraction"] = val_fraction;
  j["codec"] = {{"integer_vocabulary_cap", codec.integer_vocabulary_cap}, {"strict", codec.strict}};
  j["encoder"] = encoder.to_json();
  j["connector"] = connector.to_json();
  j["lm"] = lm.to_json();
  j["lora"] = lora.to_json();
  j["tasks"] = nlohmann::ordered_json::array();
  for (const auto& t : tasks) j["tasks"].push_back(t.to_json());
  j["holdout"] = holdout;
  j["prefix"] = prefix;
  j["pretrain"] = pretrain.to_json();
  j["warmup"] = warmup.to_json();
  j["finetune"] = finetune.to_json();
  j["max_answer_tokens"] = max_answer_tokens;
  j["eval_limit"] = eval_limit;
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& doc) {
  static const std::set<std::string> known = {
      "version", "seed",    "data",      "min_seq_len", "max_seq_len", "val_fraction", "codec",
      "encoder", "connector", "lm",      "lora",        "tasks",       "holdout",      "prefix",
      "pretrain", "warmup", "finetune", "max_answer_tokens", "eval_limit"};
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (!known.count(key)) throw ConfigError("config: unknown field '" + key + "'");
  }
  ExperimentConfig c;
  try {
    if (!doc.contains("version")) throw ConfigError("config: missing 'version'");
    c.version = doc.at("version").get<int>();
    c.seed = doc.value("seed", c.seed);
    const auto& data = doc.at("data");
    if (data.contains("generator")) c.generator = GeneratorConfig::from_json(data.at("generator"));
    if (data.contains("path")) {
      c.data_path = data.at("path").get<std::string>();
      if (data.contains("schema")) c.schema = Schema::from_json(data.at("schema"));
    }
    c.min_seq_len = doc.value("min_seq_len", c.min_seq_len);
    c.max_seq_len = doc.value("max_seq_len", c.max_seq_len);
    c.val_fraction = doc.value("val_fraction", c.val_fraction);
    if (doc.contains("codec")) {
      c.codec.integer_vocabulary_cap = doc["codec"].value("integer_vocabulary_cap", c.codec.integer_vocabulary_cap);
      c.codec.strict = doc["codec"].value("strict", c.codec.strict);
    }
    if (doc.contains("encoder")) c.encoder = EncoderConfig::from_json(doc["encoder"]);
    if (doc.contains("connector")) c.connector = ConnectorConfig::from_json(doc["connector"]);
    if (doc.contains("lm")) c.lm = ToyLmConfig::from_json(doc["lm"]);
    if (doc.contains("lora")) c.lora = LoraConfig::from_json(doc["lora"]);
    for (const auto& t : doc.value("tasks", nlohmann::json::array())) c.tasks.push_back(QATask::from_json(t));
    c.holdout = doc.value("holdout", c.holdout);
    c.prefix = doc.value("prefix", c.prefix);
    StageConfig pretrain_defaults{3, 32, {1e-3, 1e-5, 20, 0, 1.0}, 1.0};
    StageConfig warmup_defaults{4, 32, {2e-3, 1e-5, 50, 0, 1.0}, 1.0};
    StageConfig finetune_defaults{4, 32, {1e-3, 1e-5, 50, 0, 1.0}, 1.0};
    c.pretrain = StageConfig::from_json(doc.value("pretrain", nlohmann::json::object()), pretrain_defaults);
    c.warmup = StageConfig::from_json(doc.value("warmup", nlohmann::json::object()), warmup_defaults);
    c.finetune = StageConfig::from_json(doc.value("finetune", nlohmann::json::object()), finetune_defaults);
    c.max_answer_tokens = doc.value("max_answer_tokens", c.max_answer_tokens);
    c.eval_limit = doc.value("eval_limit", c.eval_limit);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const { return hash_string(to_json().dump()); }

DataSplits prepare_data(const ExperimentConfig& config) {
  Dataset all;
  if (config.generator) {
    all = generate_synthetic(*config.generator, config.seed).dataset;
  } else {
    all = load_jsonl(config.data_path, *config.schema);
  }
  const std::size_t before = all.sequences.size();
  Dataset kept = truncate_sequences(all, config.min_seq_len, config.max_seq_len);
  DataSplits out;
  out.dropped_short = before - kept.sequences.size();
  auto [train, val] = split_by_client(kept, config.val_fraction, stream_seed(config.seed, 1));
  out.train = std::move(train);
  out.val = std::move(val);
  return out;
}

std::vector<std::string> vocabulary_texts(const Schema& schema, const std::vector<QATask>& tasks,
                                          const std::string& prefix) {
  std::vector<std::string> texts{prefix, "Answer yes.", "Answer no.", "Options:"};
  for (const auto& f : schema.features) {
    texts.push_back(f.name);
    for (const auto& c : f.categories) texts.push_back(c);
  }
  auto add_task = [&](const QATask& t) {
    texts.push_back(t.question.empty() ? default_question(t.family) : t.question);
    texts.push_back(t.instruction.empty() ? default_instruction(t.family) : t.instruction);
    texts.push_back(t.feature);
  };
  for (const auto& t : tasks) add_task(t);
  for (auto fam : kWarmupFamilies) add_task(make_task("warmup", fam, ""));
  for (auto& t : texts) {
    for (const char* slot : {"{feature}", "{value}", "{options}"}) {
      for (auto pos = t.find(slot); pos != std::string::npos; pos = t.find(slot)) t.replace(pos, std::string(slot).size(), "x");
    }
  }
  return texts;
}

Experiment Experiment::create(const ExperimentConfig& config, DataSplits data) {
  config.validate();
  Experiment e;
  e.config_ = config;
  e.data_ = std::move(data);
  e.codec_ = FeatureCodec::fit(e.data_.train, config.codec);
  const Schema& schema = e.data_.train.schema;
  e.tokenizer_ = Tokenizer::build(vocabulary_texts(schema, config.tasks, config.prefix));
  e.build_models(stream_seed(config.seed, 2));
  return e;
}

void Experiment::build_models(std::uint64_t seed) {
  Rng rng(seed);
  encoder_ = EventEncoder(codec_, config_.encoder, rng);
  heads_ = NextEventHeads(codec_, config_.encoder.width, rng);
  connector_ = QFormer(config_.connector, config_.encoder.width, rng);
  lm_ = ToyLm(tokenizer_.size(), config_.lm, rng);
}

void Experiment::note(const std::string& line) const {
  if (log) log(line);
}

PretrainResult Experiment::pretrain_encoder(long start_step) {
  std::vector<EncodedSequence> encoded;
  for (const auto& s : data_.train.sequences) encoded.push_back(codec_.encode_sequence(s, s.events.size()));
  PretrainConfig pc;
  pc.epochs = config_.pretrain.epochs;
  pc.batch_size = config_.pretrain.batch_size;
  const long per_epoch = static_cast<long>((encoded.size() + pc.batch_size - 1) / pc.batch_size);
  pc.schedule = resolved(config_.pretrain.schedule, per_epoch * static_cast<long>(pc.epochs));
  pc.clip_norm = config_.pretrain.clip_norm;
  pc.seed = stream_seed(config_.seed, 3 + static_cast<std::uint64_t>(start_step));
  // Resuming continues the schedule where the recorded step count left off.
  if (start_step > 0) {
    const long total = pc.schedule.warmup_steps + pc.schedule.cycle_length;
    pc.schedule.warmup_steps = std::max<long>(0, pc.schedule.warmup_steps - start_step);
    pc.schedule.cycle_length = std::max<long>(1, total - start_step - pc.schedule.warmup_steps);
  }
  PretrainResult r = pretrain_next_event(encoder_, heads_, encoded, pc);
  pretrain_steps_ = start_step + r.steps;
  stage_ = "pretrained";
  if (!r.losses.empty()) {
    note("pretrain: " + std::to_string(r.steps) + " steps, loss " + std::to_string(r.losses.front()) + " -> " +
         std::to_string(r.losses.back()));
  }
  return r;
}

std::vector<std::pair<MultimodalInput, std::vector<int>>> Experiment::warmup_corpus(const Dataset& dataset,
                                                                                   std::uint64_t seed) const {
  std::set<std::string> features;
  for (const auto& t : config_.tasks) {
    const auto fi = dataset.schema.find(t.feature);
    if (fi && dataset.schema.features[*fi].is_categorical()) features.insert(t.feature);
  }
  std::vector<QATask> tasks;
  for (const auto& f : features)
    for (auto fam : kWarmupFamilies) tasks.push_back(make_task(to_string(fam) + ":" + f, fam, f));

  std::vector<std::pair<MultimodalInput, std::vector<int>>> out;
  const auto prefix = tokenizer_.encode(config_.prefix);
  Rng rng(seed);
  for (std::size_t si = 0; si < dataset.sequences.size(); ++si) {
    const auto& seq = dataset.sequences[si];
    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
      const auto& task = tasks[ti];
      const auto q = render_question(task, seq, dataset.schema, stream_seed(seed, si * 131 + ti), config_.prefix);
      MultimodalInput in;
      in.prefix = prefix;
      in.event_tokens = tokenizer_.encode(events_as_text(seq, dataset.schema.index_of(task.feature), seq.events.size()));
      in.body = tokenizer_.encode(q.body);
      const Value truth = ground_truth(task, seq, dataset.schema, &codec_, &q);
      out.emplace_back(std::move(in), tokenizer_.encode(serialize_answer(truth)));
    }
    // Event-independent calibration prompts.
    const bool yes = rng.uniform() < 0.5;
    MultimodalInput in;
    in.prefix = prefix;
    in.event_tokens = out.back().first.event_tokens;
    in.body = tokenizer_.encode(yes ? "Answer yes." : "Answer no.");
    out.emplace_back(std::move(in), tokenizer_.encode(yes ? "Yes" : "No"));
  }
  return out;
}

std::vector<double> Experiment::warmup_lm() {
  if (lm_.has_lora()) throw ConfigError("warmup: language model is already frozen");
  auto corpus = warmup_corpus(data_.train, stream_seed(config_.seed, 4));
  ParamList params;
  lm_.collect(params, "lm");
  const auto tensors = trainable_tensors(params);
  AdamW opt(tensors);
  const auto& sc = config_.warmup;
  const long per_epoch = static_cast<long>((corpus.size() + sc.batch_size - 1) / sc.batch_size);
  const LrSchedule schedule = resolved(sc.schedule, per_epoch * static_cast<long>(sc.epochs));
  Rng rng(stream_seed(config_.seed, 5));
  ForwardContext ctx{true, &rng, config_.lm.dropout};
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> losses;
  long step = 0;
  for (std::size_t epoch = 0; epoch < sc.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += sc.batch_size) {
      std::vector<MultimodalInput> inputs;
      std::vector<std::vector<int>> targets;
      for (std::size_t i = start; i < std::min(order.size(), start + sc.batch_size); ++i) {
        inputs.push_back(corpus[order[i]].first);
        targets.push_back(corpus[order[i]].second);
      }
      opt.zero_grad();
      Tensor loss = lm_.loss(inputs, targets, ctx);
      const double value = loss.item();
      check_loss(value, step, "warmup");
      backward(loss);
      if (sc.clip_norm > 0) clip_grad_norm(tensors, sc.clip_norm);
      opt.step(lr_at(schedule, step));
      losses.push_back(value);
      epoch_loss += value;
      ++batches;
      ++step;
    }
    note("warmup epoch " + std::to_string(epoch + 1) + ": mean loss " + std::to_string(epoch_loss / batches));
  }
  stage_ = "warmed-up";
  return losses;
}

std::vector<MultimodalInput> Experiment::build_inputs(const Dataset& dataset, const std::vector<const QAPair*>& pairs,
                                                      const ForwardContext& ctx) const {
  std::vector<EncodedSequence> encoded;
  encoded.reserve(pairs.size());
  for (const auto* p : pairs) encoded.push_back(codec_.encode_sequence(dataset.sequences.at(p->sequence_index), p->visible));
  std::vector<const EncodedSequence*> ptrs;
  for (const auto& e : encoded) ptrs.push_back(&e);
  EncodedBatch enc = encoder_.encode_sequences(ptrs, ctx);
  Tensor queries = connector_.connect_batch(enc.rows, enc.lengths, enc.max_len, ctx);
  const std::size_t q = config_.connector.queries;
  std::vector<MultimodalInput> out;
  for (std::size_t b = 0; b < pairs.size(); ++b) {
    MultimodalInput in;
    in.prefix = tokenizer_.encode(pairs[b]->prefix);
    in.events = slice_rows(queries, b * q, q);
    in.body = tokenizer_.encode(pairs[b]->body);
    if (in.length() > config_.lm.max_input) {
      throw DataError("input stream length " + std::to_string(in.length()) + " exceeds lm.max_input " +
                      std::to_string(config_.lm.max_input));
    }
    out.push_back(std::move(in));
  }
  return out;
}

std::vector<double> Experiment::finetune() {
  if (!lm_.has_lora()) {
    Rng rng(stream_seed(config_.seed, 6));
    lora_report_ = lm_.apply_lora(config_.lora, rng);
    note("lora: " + lora_report_->to_json().dump());
  }
  const Corpus corpus =
      build_corpus(data_.train, config_.tasks, &codec_, stream_seed(config_.seed, 7), {config_.prefix, config_.holdout});
  trained_tasks_.clear();
  for (const auto& [id, n] : corpus.counts) trained_tasks_.push_back(id);

  ParamList params;
  encoder_.collect(params, "encoder");
  connector_.collect(params, "connector");
  lm_.collect(params, "lm");
  const auto tensors = trainable_tensors(params);
  AdamW opt(tensors);
  const auto& sc = config_.finetune;
  const long per_epoch = static_cast<long>((corpus.pairs.size() + sc.batch_size - 1) / sc.batch_size);
  const LrSchedule schedule = resolved(sc.schedule, per_epoch * static_cast<long>(sc.epochs));
  Rng rng(stream_seed(config_.seed, 8));
  ForwardContext ctx{true, &rng, config_.connector.dropout};

  std::vector<std::vector<int>> answers;
  for (const auto& p : corpus.pairs) answers.push_back(tokenizer_.encode(p.answer));
  std::vector<std::size_t> order(corpus.pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<double> losses;
  long step = 0;
  for (std::size_t epoch = 0; epoch < sc.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += sc.batch_size) {
      std::vector<const QAPair*> batch;
      std::vector<std::vector<int>> targets;
      for (std::size_t i = start; i < std::min(order.size(), start + sc.batch_size); ++i) {
        batch.push_back(&corpus.pairs[order[i]]);
        targets.push_back(answers[order[i]]);
      }
      opt.zero_grad();
      const auto inputs = build_inputs(data_.train, batch, ctx);
      Tensor loss = lm_.loss(inputs, targets, ctx);
      const double value = loss.item();
      check_loss(value, step, "finetune");
      backward(loss);
      if (sc.clip_norm > 0) clip_grad_norm(tensors, sc.clip_norm);
      opt.step(lr_at(schedule, step));
      losses.push_back(value);
      epoch_loss += value;
      ++batches;
      ++step;
    }
    note("finetune epoch " + std::to_string(epoch + 1) + ": mean loss " + std::to_string(epoch_loss / batches));
  }
  stage_ = "finetuned";
  return losses;
}

EvalReport Experiment::evaluate(const std::vector<std::string>& task_ids, bool zero_shot) const {
  EvalReport report;
  report.seed = config_.seed;
  report.config_hash = config_.hash();
  report.checkpoint = hash_params(parameters());
  const Schema& schema = data_.val.schema;
  for (const auto& id : task_ids) {
    const QATask& task = config_.task(id);
    const bool trained = std::find(trained_tasks_.begin(), trained_tasks_.end(), id) != trained_tasks_.end();
    if (zero_shot && (trained || !config_.is_holdout(id))) {
      throw ConfigError("zero-shot evaluation refused: task '" + id + "' is part of the training corpus");
    }
    const Corpus val = build_corpus(data_.val, {task}, &codec_, stream_seed(config_.seed, 9));
    const Corpus train = build_corpus(data_.train, {task}, &codec_, stream_seed(config_.seed, 10));
    std::vector<Value> train_truths;
    for (const auto& p : train.pairs) train_truths.push_back(p.truth);
    const Baseline baseline = statistical_baseline(task, train_truths);

    std::size_t n = val.pairs.size();
    if (config_.eval_limit > 0) n = std::min(n, config_.eval_limit);
    std::vector<std::string> generations;
    std::vector<Value> truths;
    std::vector<double> scores;
    const std::size_t chunk = 64;
    for (std::size_t start = 0; start < n; start += chunk) {
      NoGradGuard guard;
      std::vector<const QAPair*> batch;
      for (std::size_t i = start; i < std::min(n, start + chunk); ++i) {
        batch.push_back(&val.pairs[i]);
        truths.push_back(val.pairs[i].truth);
      }
      const auto inputs = build_inputs(data_.val, batch);
      for (const auto& g : lm_.generate(inputs, config_.max_answer_tokens, tokenizer_)) generations.push_back(g.text);
      if (task.mode() == AnswerMode::binary) {
        const auto s = lm_.binary_scores(inputs, tokenizer_);
        scores.insert(scores.end(), s.begin(), s.end());
      }
    }
    TaskReport r = evaluate_task(task, generations, truths, answer_vocabulary(task, schema),
                                 task.mode() == AnswerMode::binary ? &scores : nullptr, &baseline);
    r.zero_shot = zero_shot;
    report.tasks.push_back(std::move(r));
  }
  return report;
}

Experiment::Answer Experiment::ask(const EventSequence& sequence, const QATask& task, const std::string& body) const {
  NoGradGuard guard;
  validate_sequence(sequence, data_.train.schema);
  Dataset one;
  one.schema = data_.train.schema;
  one.sequences.push_back(sequence);
  QAPair pair;
  pair.prefix = config_.prefix;
  pair.body = body;
  pair.visible = sequence.events.size();
  const auto inputs = build_inputs(one, {&pair});
  Answer a;
  a.text = lm_.generate(inputs, config_.max_answer_tokens, tokenizer_).at(0).text;
  a.parsed = parse_answer(a.text, task, answer_vocabulary(task, one.schema));
  if (task.mode() == AnswerMode::binary) a.score = lm_.binary_score(inputs.at(0), tokenizer_);
  return a;
}

ParamList Experiment::parameters() const {
  ParamList params;
  encoder_.collect(params, "encoder");
  heads_.collect(params, "heads");
  connector_.collect(params, "connector");
  lm_.collect(params, "lm");
  return params;
}

void Experiment::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  const ParamList params = parameters();
  write_tensor_container(dir / kWeightsFile, params);
  nlohmann::ordered_json side;
  side["version"] = 1;
  side["config_hash"] = config_.hash();
  side["params_hash"] = hash_params(params);
  side["stage"] = stage_;
  side["pretrain_steps"] = pretrain_steps_;
  side["trained_tasks"] = trained_tasks_;
  side["lora"] = lora_report_ ? lora_report_->to_json() : nlohmann::ordered_json();
  side["frozen"] = nlohmann::ordered_json::array();
  for (const auto& p : params)
    if (!p.tensor.requires_grad()) side["frozen"].push_back(p.name);
  side["config"] = config_.to_json();
  side["codec"] = codec_.to_json();
  side["tokenizer"] = tokenizer_.to_json();
  write_file_atomic(dir / kSidecarFile, side.dump(1) + "\n");
}

Experiment Experiment::load(const std::filesystem::path& dir) {
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(read_file(dir / kSidecarFile));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint sidecar: ") + e.what());
  }
  if (side.value("version", 0) != 1) throw DataError("checkpoint: unsupported version");
  Experiment e;
  e.config_ = ExperimentConfig::from_json(side.at("config"));
  if (e.config_.hash() != side.at("config_hash").get<std::string>()) throw DataError("checkpoint: config hash mismatch");
  e.data_ = prepare_data(e.config_);
  e.codec_ = FeatureCodec::from_json(side.at("codec"));
  e.tokenizer_ = Tokenizer::from_json(side.at("tokenizer"));
  e.build_models(stream_seed(e.config_.seed, 2));
  if (!side.at("lora").is_null()) {
    Rng rng(stream_seed(e.config_.seed, 6));
    e.lora_report_ = e.lm_.apply_lora(e.config_.lora, rng);
  }
  const ParamList params = e.parameters();
  load_into(params, read_tensor_container(dir / kWeightsFile));
  const std::set<std::string> frozen = side.at("frozen").get<std::set<std::string>>();
  for (const auto& p : params) {
    if (p.tensor.requires_grad() == static_cast<bool>(frozen.count(p.name))) {
      throw DataError("checkpoint: frozen flag mismatch for '" + p.name + "'");
    }
  }
  if (hash_params(params) != side.at("params_hash").get<std::string>()) {
    throw DataError("checkpoint: parameter hash mismatch");
  }
  e.stage_ = side.at("stage").get<std::string>();
  e.pretrain_steps_ = side.at("pretrain_steps").get<long>();
  e.trained_tasks_ = side.at("trained_tasks").get<std::vector<std::string>>();
  return e;
}

}  // namespace esqa
