#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "esqa/eval_harness.hpp"
#include "esqa/event_encoder.hpp"
#include "esqa/feature_codec.hpp"
#include "esqa/qa_engine.hpp"
#include "esqa/qformer.hpp"
#include "esqa/synthetic.hpp"
#include "esqa/tokenizer.hpp"
#include "esqa/toy_lm.hpp"
#include "json.hpp"

namespace esqa {

struct StageConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  LrSchedule schedule;
  double clip_norm = 1.0;

  nlohmann::ordered_json to_json() const;
  static StageConfig from_json(const nlohmann::json& doc, const StageConfig& defaults);
};

struct ExperimentConfig {
  int version = 1;
  std::uint64_t seed = 7;
  // Exactly one data source: a generator config or a JSONL path plus schema.
  std::optional<GeneratorConfig> generator;
  std::string data_path;
  std::optional<Schema> schema;
  std::size_t min_seq_len = 2;
  std::size_t max_seq_len = 16;
  double val_fraction = 0.2;
  CodecOptions codec;
  EncoderConfig encoder;
  ConnectorConfig connector;
  ToyLmConfig lm;
  LoraConfig lora;
  std::vector<QATask> tasks;
  std::vector<std::string> holdout;
  std::string prefix = kDefaultPrefix;
  StageConfig pretrain;
  StageConfig warmup;
  StageConfig finetune;
  std::size_t max_answer_tokens = 12;
  std::size_t eval_limit = 0;  // per-task cap on evaluated pairs, 0 = all

  void validate() const;
  const QATask& task(const std::string& id) const;
  bool is_holdout(const std::string& id) const;
  nlohmann::ordered_json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& doc);
  std::string hash() const;
};

struct DataSplits {
  Dataset train;
  Dataset val;
  std::size_t dropped_short = 0;
};

// Generates or loads, truncates to the most recent max_seq_len events, drops
// sequences below min_seq_len, then splits by client.
DataSplits prepare_data(const ExperimentConfig& config);

// Everything a trained system consists of. Models are built from the config
// and the codec fitted on the training split.
class Experiment {
 public:
  Experiment() = default;

  // Fits the codec on `data.train` and builds fresh models.
  static Experiment create(const ExperimentConfig& config, DataSplits data);

  const ExperimentConfig& config() const { return config_; }
  const DataSplits& data() const { return data_; }
  const FeatureCodec& codec() const { return codec_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  EventEncoder& encoder() { return encoder_; }
  NextEventHeads& heads() { return heads_; }
  QFormer& connector() { return connector_; }
  ToyLm& lm() { return lm_; }
  const ToyLm& lm() const { return lm_; }
  const std::optional<LoraReport>& lora_report() const { return lora_report_; }
  const std::vector<std::string>& trained_tasks() const { return trained_tasks_; }
  const std::string& stage() const { return stage_; }
  long pretrain_steps() const { return pretrain_steps_; }

  PretrainResult pretrain_encoder(long start_step = 0);
  std::vector<double> warmup_lm();
  std::vector<double> finetune();

  // Text-only corpus used to warm the language model up.
  std::vector<std::pair<MultimodalInput, std::vector<int>>> warmup_corpus(const Dataset& dataset,
                                                                         std::uint64_t seed) const;

  // Model inputs for QA pairs, connector output injected.
  std::vector<MultimodalInput> build_inputs(const Dataset& dataset, const std::vector<const QAPair*>& pairs,
                                            const ForwardContext& ctx = {}) const;

  // Evaluates tasks on the validation split. With zero_shot, every task must
  // be held out and absent from the training manifest.
  EvalReport evaluate(const std::vector<std::string>& task_ids, bool zero_shot) const;

  struct Answer {
    std::string text;
    ParsedAnswer parsed;
    std::optional<double> score;
  };
  Answer ask(const EventSequence& sequence, const QATask& task, const std::string& body) const;

  ParamList parameters() const;
  void save(const std::filesystem::path& dir) const;
  static Experiment load(const std::filesystem::path& dir);

  // Logs one line per reporting interval; null silences training.
  std::function<void(const std::string&)> log;

 private:
  ExperimentConfig config_;
  DataSplits data_;
  FeatureCodec codec_;
  Tokenizer tokenizer_;
  EventEncoder encoder_;
  NextEventHeads heads_;
  QFormer connector_;
  ToyLm lm_;
  std::optional<LoraReport> lora_report_;
  std::vector<std::string> trained_tasks_;
  std::string stage_ = "initialized";
  long pretrain_steps_ = 0;

  void build_models(std::uint64_t seed);
  void note(const std::string& line) const;
};

// Strings the tokenizer must cover for a schema and task list.
std::vector<std::string> vocabulary_texts(const Schema& schema, const std::vector<QATask>& tasks,
                                          const std::string& prefix);

}  // namespace esqa
