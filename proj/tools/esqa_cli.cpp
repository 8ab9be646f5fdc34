#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

#include "CLI11.hpp"
#include "esqa/checkpoint.hpp"
#include "esqa/error.hpp"
#include "esqa/pipeline.hpp"

using namespace esqa;

namespace {

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  auto doc = read_json(path);
  if (seed) doc["seed"] = *seed;
  return ExperimentConfig::from_json(doc);
}

void write_losses(const std::filesystem::path& path, const std::vector<double>& losses) {
  std::string csv = "step,loss\n";
  char line[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(line, sizeof line, "%zu,%.10g\n", i, losses[i]);
    csv += line;
  }
  write_file_atomic(path, csv);
}

std::vector<std::string> split_ids(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string regex_escape(const std::string& s) {
  static const std::regex special(R"([.^$|()\[\]{}*+?\\])");
  return std::regex_replace(s, special, R"(\$&)");
}

// Finds the task whose question template matches `text`; slots match anything.
const QATask* match_question(const ExperimentConfig& config, const std::string& text) {
  for (const auto& t : config.tasks) {
    std::string pattern = regex_escape(t.question);
    for (const char* slot : {"\\{value\\}", "\\{options\\}"}) {
      pattern = std::regex_replace(pattern, std::regex(regex_escape(slot)), "(.+)");
    }
    pattern = std::regex_replace(pattern, std::regex(regex_escape("\\{feature\\}")), regex_escape(t.feature));
    if (std::regex_search(text, std::regex("^" + pattern))) return &t;
  }
  return nullptr;
}

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

void print_report(const EvalReport& report, const std::string& out) {
  std::cout << render_table(report);
  if (!out.empty()) write_file_atomic(out, report.to_json().dump(1) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Question answering over event sequences"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Log training progress to stderr");
  auto logger = [&](const std::string& line) {
    if (verbose) std::cerr << line << std::endl;
  };

  std::string config_path, out_path, checkpoint, tasks_csv, sequence_path, question, resume;
  std::optional<std::uint64_t> seed;
  bool zero_shot = false, from_scratch = false;

  auto* gen = app.add_subcommand("generate-data", "Write a synthetic JSONL dataset and its provenance");
  gen->add_option("--config", config_path, "Generator config JSON")->required();
  gen->add_option("--out", out_path, "Output JSONL path")->required();
  gen->add_option("--seed", seed, "Generator seed");

  auto* fit = app.add_subcommand("fit-codec", "Fit the feature codec on the training split");
  fit->add_option("--config", config_path, "Experiment config JSON")->required();
  fit->add_option("--out", out_path, "Codec JSON path")->required();

  auto* pre = app.add_subcommand("pretrain-encoder", "Next-event pretraining of the event encoder");
  pre->add_option("--config", config_path, "Experiment config JSON");
  pre->add_option("--out", out_path, "Checkpoint directory")->required();
  pre->add_option("--resume", resume, "Continue from this checkpoint");
  pre->add_option("--seed", seed, "Override the config seed");

  auto* warm = app.add_subcommand("warmup-lm", "Text-only training of the language model");
  warm->add_option("--config", config_path, "Experiment config JSON (fresh start)");
  warm->add_option("--checkpoint", checkpoint, "Start from this checkpoint");
  warm->add_option("--out", out_path, "Checkpoint directory")->required();

  auto* train = app.add_subcommand("train", "Run the remaining stages up to LoRA fine-tuning");
  train->add_option("--config", config_path, "Experiment config JSON (fresh start)");
  train->add_option("--checkpoint", checkpoint, "Continue from this checkpoint");
  train->add_option("--out", out_path, "Checkpoint directory")->required();
  train->add_option("--seed", seed, "Override the config seed");
  train->add_flag("--from-scratch", from_scratch, "Skip encoder pretraining");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval->add_option("--tasks", tasks_csv, "Comma-separated task ids (default: trained tasks)");
  eval->add_flag("--zero-shot", zero_shot, "Evaluate held-out tasks only");
  eval->add_option("--out", out_path, "Report JSON path");

  auto* ask = app.add_subcommand("ask", "Answer one question about one sequence");
  ask->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  ask->add_option("--sequence", sequence_path, "JSONL file; the first line is used")->required();
  ask->add_option("--question", question, "Question text")->required();

  auto* base = app.add_subcommand("baseline", "Statistical baselines fitted on the training split");
  base->add_option("--config", config_path, "Experiment config JSON")->required();
  base->add_option("--tasks", tasks_csv, "Comma-separated task ids (default: all)");
  base->add_option("--out", out_path, "Baseline JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = GeneratorConfig::from_json(read_json(config_path));
      const auto data = generate_synthetic(cfg, seed.value_or(0));
      write_file_atomic(out_path, export_jsonl(data.dataset));
      write_file_atomic(out_path + ".provenance.json", data.provenance.dump(1) + "\n");
      std::cout << data.dataset.sequences.size() << " clients -> " << out_path << "\n";
    } else if (fit->parsed()) {
      const auto cfg = load_config(config_path, std::nullopt);
      const auto data = prepare_data(cfg);
      const auto codec = FeatureCodec::fit(data.train, cfg.codec);
      auto doc = codec.to_json();
      doc["config_hash"] = cfg.hash();
      write_file_atomic(out_path, doc.dump(1) + "\n");
      std::cout << codec.features().size() << " features, total width " << codec.total_dim() << "\n";
    } else if (pre->parsed()) {
      Experiment e;
      long start = 0;
      if (!resume.empty()) {
        e = Experiment::load(resume);
        start = e.pretrain_steps();
      } else {
        if (config_path.empty()) throw ConfigError("pretrain-encoder: --config or --resume required");
        const auto cfg = load_config(config_path, seed);
        e = Experiment::create(cfg, prepare_data(cfg));
      }
      e.log = logger;
      const auto r = e.pretrain_encoder(start);
      e.save(out_path);
      write_losses(std::filesystem::path(out_path) / "pretrain_loss.csv", r.losses);
      std::cout << "pretrained " << r.steps << " steps (total " << e.pretrain_steps() << "), skipped "
                << r.skipped_sequences << " short sequences\n";
    } else if (warm->parsed()) {
      Experiment e;
      if (!checkpoint.empty()) e = Experiment::load(checkpoint);
      else {
        if (config_path.empty()) throw ConfigError("warmup-lm: --config or --checkpoint required");
        const auto cfg = load_config(config_path, std::nullopt);
        e = Experiment::create(cfg, prepare_data(cfg));
      }
      e.log = logger;
      const auto losses = e.warmup_lm();
      e.save(out_path);
      write_losses(std::filesystem::path(out_path) / "warmup_loss.csv", losses);
      std::cout << "warm-up: " << losses.size() << " steps\n";
    } else if (train->parsed()) {
      Timer timer;
      Experiment e;
      if (!checkpoint.empty()) e = Experiment::load(checkpoint);
      else {
        if (config_path.empty()) throw ConfigError("train: --config or --checkpoint required");
        const auto cfg = load_config(config_path, seed);
        e = Experiment::create(cfg, prepare_data(cfg));
      }
      e.log = logger;
      if (e.stage() == "initialized" && !from_scratch) e.pretrain_encoder();
      if (e.stage() == "initialized" || e.stage() == "pretrained") e.warmup_lm();
      const auto losses = e.finetune();
      e.save(out_path);
      write_losses(std::filesystem::path(out_path) / "finetune_loss.csv", losses);
      std::cout << "trained tasks:";
      for (const auto& t : e.trained_tasks()) std::cout << " " << t;
      std::cout << "\nconfig hash " << e.config().hash() << ", " << timer.seconds() << " s\n";
      if (e.lora_report()) std::cout << "lora " << e.lora_report()->to_json().dump() << "\n";
    } else if (eval->parsed()) {
      const auto e = Experiment::load(checkpoint);
      std::vector<std::string> ids = split_ids(tasks_csv);
      if (ids.empty()) ids = zero_shot ? e.config().holdout : e.trained_tasks();
      auto report = e.evaluate(ids, zero_shot);
      report.checkpoint = checkpoint + " " + report.checkpoint;
      print_report(report, out_path);
    } else if (ask->parsed()) {
      const auto e = Experiment::load(checkpoint);
      const QATask* task = match_question(e.config(), question);
      if (!task) {
        std::cerr << "question does not match a registered template; known templates:\n";
        for (const auto& t : e.config().tasks) std::cerr << "  [" << t.id << "] " << t.question << "\n";
        return 2;
      }
      std::ifstream in(sequence_path);
      std::string line;
      if (!in || !std::getline(in, line)) throw DataError(sequence_path + ": no sequence line");
      const auto data = parse_jsonl(line + "\n", e.data().train.schema, {e.codec().strict()});
      const std::string instruction = task->instruction;
      std::string body = question;
      if (!instruction.empty() && body.find(instruction) == std::string::npos) body += " " + instruction;
      const auto answer = e.ask(data.sequences.at(0), *task, body);
      std::cout << "task: " << task->id << "\nanswer: " << answer.text << "\n";
      if (answer.parsed.ok()) std::cout << "parsed: " << serialize_answer(*answer.parsed.value) << "\n";
      else std::cout << "parsed: unparseable (" << answer.parsed.reason << ")\n";
      if (answer.score) std::cout << "score: " << *answer.score << "\n";
    } else if (base->parsed()) {
      const auto cfg = load_config(config_path, std::nullopt);
      const auto data = prepare_data(cfg);
      const auto codec = FeatureCodec::fit(data.train, cfg.codec);
      std::vector<std::string> ids = split_ids(tasks_csv);
      if (ids.empty())
        for (const auto& t : cfg.tasks) ids.push_back(t.id);
      nlohmann::ordered_json out = nlohmann::ordered_json::array();
      for (const auto& id : ids) {
        const auto& task = cfg.task(id);
        std::vector<Value> train_truths, val_truths;
        for (const auto& p : build_corpus(data.train, {task}, &codec, 0).pairs) train_truths.push_back(p.truth);
        for (const auto& p : build_corpus(data.val, {task}, &codec, 0).pairs) val_truths.push_back(p.truth);
        const auto b = statistical_baseline(task, train_truths);
        auto j = b.to_json();
        j["val_metrics"] = baseline_metrics(task, b, val_truths);
        std::cout << j.dump() << "\n";
        out.push_back(j);
      }
      if (!out_path.empty()) write_file_atomic(out_path, out.dump(1) + "\n");
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged at step " << e.step() << ": " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
