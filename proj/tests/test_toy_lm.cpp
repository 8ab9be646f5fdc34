#include <cmath>
#include <numeric>

#include "doctest.h"
#include "esqa/checkpoint.hpp"
#include "esqa/error.hpp"
#include "esqa/grad_check.hpp"
#include "esqa/toy_lm.hpp"

using namespace esqa;

namespace {

Tokenizer make_tokenizer() {
  return Tokenizer::build({"Given the event history,", "What is the category of the last event?",
                           "Answer with one value.", "bread milk tea", "Answer yes.", "Answer no.",
                           "Answer Yes or No."});
}

ToyLmConfig tiny_config() {
  ToyLmConfig c;
  c.d_model = 8;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.heads = 2;
  c.ffn_width = 12;
  c.max_input = 48;
  c.max_output = 8;
  return c;
}

}  // namespace

TEST_CASE("tokenizer reserved ids, round trip and single-token Yes/No") {
  const auto tok = make_tokenizer();
  CHECK(tok.token(0) == "<pad>");
  CHECK(tok.token(Tokenizer::kSeqPrefix) == "<seq>");
  CHECK(tok.token(Tokenizer::kSeqSuffix) == "</seq>");
  CHECK(tok.encode("Yes") == std::vector<int>{tok.yes_id()});
  CHECK(tok.encode("No") == std::vector<int>{tok.no_id()});
  for (const std::string s : {"Given the event history,", "What is the category of the last event?  bread",
                              "12.75 milk; tea: 3", " bread-milk"}) {
    const auto ids = tok.encode(s);
    CHECK(tok.decode(ids) == s);
    for (int id : ids) CHECK(id >= Tokenizer::kSpecialCount);
  }
  CHECK_THROWS_AS(tok.encode("zebra"), DataError);
  CHECK(split_units(" bread, milk") == std::vector<std::string>{" bread", ",", " milk"});
  CHECK(Tokenizer::from_json(tok.to_json()).to_json() == tok.to_json());
}

TEST_CASE("inject layout and stream length arithmetic") {
  const auto tok = make_tokenizer();
  Rng rng(1);
  ToyLm lm(tok.size(), tiny_config(), rng);
  Tensor events = random_normal({8, 8}, 1.0, rng, false);
  auto in = lm.inject(tok, "Given the event history,", "What is the category of the last event?", events);
  CHECK(in.prefix.size() == 5);
  CHECK(in.length() == in.prefix.size() + 1 + 8 + 1 + in.body.size());
  const auto layout = lm.stream_layout(in);
  CHECK(layout.size() == in.length());
  CHECK(layout[in.prefix.size()] == Tokenizer::kSeqPrefix);
  CHECK(layout[in.prefix.size() + 1] == -1);
  CHECK(layout[in.prefix.size() + 8] == -8);
  CHECK(layout[in.prefix.size() + 9] == Tokenizer::kSeqSuffix);

  // same question, different events: only the injected rows differ
  auto other = lm.inject(tok, "Given the event history,", "What is the category of the last event?",
                         random_normal({8, 8}, 1.0, rng, false));
  CHECK(other.prefix == in.prefix);
  CHECK(other.body == in.body);
  CHECK(lm.stream_layout(other) == layout);

  // empty event segment still decodes
  auto text_only = lm.inject(tok, "Given the event history,", "Answer yes.", Tensor());
  CHECK(text_only.length() == text_only.prefix.size() + 2 + text_only.body.size());
  const auto g = lm.generate({text_only}, 3, tok);
  CHECK(g.size() == 1);

  CHECK_THROWS_AS(lm.inject(tok, "", "bread", random_normal({60, 8}, 1.0, rng, false)), DataError);
  CHECK_THROWS_AS(lm.inject(tok, "", "bread", random_normal({2, 7}, 1.0, rng, false)), ShapeError);
}

TEST_CASE("overlength message reports measured lengths") {
  const auto tok = make_tokenizer();
  Rng rng(1);
  ToyLm lm(tok.size(), tiny_config(), rng);
  try {
    lm.inject(tok, "Given the event history,", "bread", random_normal({50, 8}, 1.0, rng, false));
    FAIL("expected DataError");
  } catch (const DataError& e) {
    const std::string what = e.what();
    CHECK(what.find("50") != std::string::npos);
    CHECK(what.find("48") != std::string::npos);
  }
}

TEST_CASE("greedy decoding is deterministic and the first distribution sums to one") {
  const auto tok = make_tokenizer();
  Rng rng(2);
  ToyLm lm(tok.size(), tiny_config(), rng);
  auto in = lm.inject(tok, "Given the event history,", "Answer yes.", random_normal({3, 8}, 1.0, rng, false));
  const auto a = lm.generate({in, in}, 5, tok);
  const auto b = lm.generate({in}, 5, tok);
  CHECK(a[0].ids == b[0].ids);
  CHECK(a[1].ids == b[0].ids);
  const double s = std::accumulate(a[0].first_distribution.begin(), a[0].first_distribution.end(), 0.0);
  CHECK(std::abs(s - 1.0) < 1e-9);
  CHECK(a[0].ids.size() <= 5);
}

TEST_CASE("tied Yes/No embeddings give a zero score") {
  const auto tok = make_tokenizer();
  Rng rng(3);
  ToyLm lm(tok.size(), tiny_config(), rng);
  auto e = lm.token_embedding().data_mut();
  const std::size_t d = 8;
  for (std::size_t c = 0; c < d; ++c) e[tok.no_id() * d + c] = e[tok.yes_id() * d + c];
  auto in = lm.inject(tok, "Given the event history,", "Answer Yes or No.", random_normal({3, 8}, 1.0, rng, false));
  CHECK(lm.binary_score(in, tok) == 0.0);
}

TEST_CASE("a model trained to always say Yes says Yes") {
  const auto tok = make_tokenizer();
  Rng rng(4);
  ToyLm lm(tok.size(), tiny_config(), rng);
  std::vector<MultimodalInput> batch;
  for (int i = 0; i < 4; ++i)
    batch.push_back(lm.inject(tok, "Given the event history,", i % 2 ? "Answer no." : "bread milk",
                              random_normal({2, 8}, 1.0, rng, false)));
  std::vector<std::vector<int>> targets(4, tok.encode("Yes"));
  ParamList params;
  lm.collect(params, "lm");
  AdamW opt(trainable_tensors(params));
  for (int step = 0; step < 60; ++step) {
    opt.zero_grad();
    backward(lm.loss(batch, targets));
    opt.step(1e-2);
  }
  for (const auto& g : lm.generate(batch, 4, tok)) CHECK(g.text == "Yes");
  for (double s : lm.binary_scores(batch, tok)) {
    CHECK(s > 0.0);
    CHECK(s <= 1.0);
  }
}

TEST_CASE("LoRA: zero-init identity, census and rank guard") {
  const auto tok = make_tokenizer();
  Rng rng(5);
  ToyLmConfig cfg = tiny_config();
  cfg.d_model = 16;
  ToyLm lm(tok.size(), cfg, rng);
  auto in = lm.inject(tok, "Given the event history,", "bread", random_normal({3, 16}, 1.0, rng, false));
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;
  NoGradGuard g;
  const Tensor mem_before = lm.encode({in}, lengths, max_len);
  const Tensor before = lm.decode(mem_before, lengths, max_len, {{Tokenizer::kBos, 7}}, 2);
  LoraConfig lc{4, 8.0, 0.0};
  const auto report = lm.apply_lora(lc, rng);
  const Tensor mem_after = lm.encode({in}, lengths, max_len);
  const Tensor after = lm.decode(mem_after, lengths, max_len, {{Tokenizer::kBos, 7}}, 2);
  for (std::size_t k = 0; k < before.size(); ++k) CHECK(before.data()[k] == after.data()[k]);
  // encoder layer: self wq, wv; decoder: self + cross wq, wv
  CHECK(report.adapted_matrices == 6);
  CHECK(report.trainable_values == 6 * 2 * 16 * 4);
  CHECK(report.layers == 2);
  CHECK(report.formula_values == 2 * 2 * 16 * 4);
  ParamList all;
  lm.collect(all, "lm");
  CHECK(count_values(all, true) == report.trainable_values);
  for (const auto& p : lm.base_parameters()) CHECK_FALSE(p.tensor.requires_grad());
  CHECK_THROWS_AS(lm.apply_lora(lc, rng), ConfigError);

  ToyLm other(tok.size(), cfg, rng);
  CHECK_THROWS_AS(other.apply_lora({16, 32.0, 0.0}, rng), ConfigError);
}

TEST_CASE("one adapted 64x64 matrix with r=4 has 512 values") {
  Rng rng(6);
  Linear l(64, 64, false, rng);
  l.attach_lora(4, 8.0, 0.0, rng);
  CHECK(l.lora->a.size() + l.lora->b.size() == 512);
  for (double v : l.lora->b.data()) CHECK(v == 0.0);
}

TEST_CASE("base weights are bit-identical after an optimizer step on adapters") {
  const auto tok = make_tokenizer();
  Rng rng(7);
  ToyLm lm(tok.size(), tiny_config(), rng);
  lm.apply_lora({2, 4.0, 0.05}, rng);
  const std::string before = hash_params(lm.base_parameters());
  ParamList all;
  lm.collect(all, "lm");
  AdamW opt(trainable_tensors(all));
  auto in = lm.inject(tok, "Given the event history,", "bread", random_normal({3, 8}, 1.0, rng, true));
  Rng drop(1);
  ForwardContext ctx{true, &drop, 0.0};
  backward(lm.loss({in}, {tok.encode(" milk")}, ctx));
  opt.step(1e-2);
  CHECK(hash_params(lm.base_parameters()) == before);
}

TEST_CASE("gradient check through encoder block, decoder block and adapters") {
  const auto tok = make_tokenizer();
  Rng rng(8);
  ToyLm lm(tok.size(), tiny_config(), rng);
  lm.apply_lora({2, 4.0, 0.0}, rng);
  ParamList params;
  lm.collect(params, "lm");
  ParamList adapters;
  for (auto& p : params) {
    if (p.name.find("lora_b") != std::string::npos) {
      for (double& v : p.tensor.data_mut()) v = rng.normal(0.0, 0.5);
    }
    if (p.tensor.requires_grad()) adapters.push_back(p);
  }
  Tensor events = random_normal({3, 8}, 1.0, rng, true);
  adapters.push_back({"events", events});
  const std::vector<std::vector<int>> targets{tok.encode(" milk"), tok.encode("Yes")};
  auto r = grad_check(
      [&] {
        auto a = lm.inject(tok, "Given the event history,", "bread milk", events);
        auto b = lm.inject(tok, "Given", "tea", slice_rows(events, 0, 2));
        return lm.loss({a, b}, targets);
      },
      adapters);
  CHECK_MESSAGE(r.passed, r.first_failure);
  CHECK(adapters.size() == 6 * 2 + 1);
}
