#include <cmath>

#include "doctest.h"
#include "esqa/error.hpp"
#include "esqa/event_encoder.hpp"
#include "esqa/grad_check.hpp"
#include "esqa/synthetic.hpp"

using namespace esqa;

namespace {

GeneratorConfig gen_config(CategoryProcess process, std::size_t k, std::size_t clients) {
  GeneratorConfig c;
  nlohmann::json schema = {{"version", 1},
                           {"features", {{{"name", "cat"}, {"kind", "categorical"}, {"cardinality", k}},
                                         {{"name", "amount"}, {"kind", "real"}}}}};
  c.schema = Schema::from_json(schema);
  c.clients = clients;
  c.min_events = 3;
  c.max_events = 10;
  c.category_rules.push_back({"cat", process, 0.6, 0.8});
  return c;
}

struct Fixture {
  Dataset data;
  FeatureCodec codec;
  std::vector<EncodedSequence> encoded;
};

Fixture fixture(CategoryProcess process, std::size_t k, std::size_t clients, std::uint64_t seed = 3) {
  Fixture f;
  f.data = generate_synthetic(gen_config(process, k, clients), seed).dataset;
  f.codec = FeatureCodec::fit(f.data);
  for (const auto& s : f.data.sequences) f.encoded.push_back(f.codec.encode_sequence(s, s.events.size()));
  return f;
}

EncoderConfig tiny(EncoderArchitecture arch = EncoderArchitecture::causal_transformer) {
  EncoderConfig c;
  c.architecture = arch;
  c.layers = 2;
  c.width = 8;
  c.heads = 2;
  c.ffn_width = 12;
  c.max_positions = 16;
  return c;
}

}  // namespace

TEST_CASE("encode shape contract and single event") {
  auto f = fixture(CategoryProcess::uniform, 4, 5);
  Rng rng(1);
  EncoderConfig cfg = tiny();
  cfg.width = 32;
  cfg.heads = 4;
  EventEncoder enc(f.codec, cfg, rng);
  Tensor x = random_normal({5, enc.input_width()}, 1.0, rng, false);
  CHECK(enc.encode(x).shape() == Shape{5, 32});
  CHECK(enc.encode(slice_rows(x, 0, 1)).shape() == Shape{1, 32});
  CHECK_THROWS_AS(enc.encode(random_normal({17, enc.input_width()}, 1.0, rng, false)), DataError);
  CHECK_THROWS_AS(enc.project_inputs(random_normal({2, enc.input_width() + 1}, 1.0, rng, false)), ShapeError);
}

TEST_CASE("projection identity, zero and per-row contracts") {
  auto f = fixture(CategoryProcess::uniform, 4, 5);
  Rng rng(2);
  EncoderConfig cfg = tiny();
  cfg.heads = 1;
  cfg.width = f.codec.total_dim();
  EventEncoder enc(f.codec, cfg, rng);
  const std::size_t d = cfg.width;
  Tensor x = random_normal({3, d}, 1.0, rng, false);
  // per-row recomputation
  const Tensor y = enc.project_inputs(x);
  for (std::size_t i = 0; i < 3; ++i) {
    const Tensor yi = enc.project_inputs(slice_rows(x, i, 1));
    for (std::size_t c = 0; c < d; ++c) CHECK(yi.at(0, c) == doctest::Approx(y.at(i, c)).epsilon(1e-14));
  }
  auto w = enc.projection().weight.data_mut();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < d; ++i) w[i * d + i] = 1.0;
  auto b = enc.projection().bias.data_mut();
  std::fill(b.begin(), b.end(), 0.0);
  const Tensor id = enc.project_inputs(x);
  for (std::size_t k = 0; k < x.size(); ++k) CHECK(id.data()[k] == x.data()[k]);
  std::fill(w.begin(), w.end(), 0.0);
  const Tensor zero = enc.project_inputs(x);
  for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("causality: perturbing later events leaves earlier rows bit-identical") {
  auto f = fixture(CategoryProcess::uniform, 5, 5);
  for (auto arch : {EncoderArchitecture::causal_transformer, EncoderArchitecture::gru, EncoderArchitecture::lstm}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      EventEncoder enc(f.codec, tiny(arch), rng);
      const std::size_t n = 6;
      Tensor x = random_normal({n, enc.input_width()}, 1.0, rng, false);
      const Tensor base = enc.encode(x);
      const std::size_t i = rng.below(n - 1);
      std::vector<double> p(x.data().begin(), x.data().end());
      for (std::size_t r = i + 1; r < n; ++r)
        for (std::size_t c = 0; c < enc.input_width(); ++c) p[r * enc.input_width() + c] += rng.normal();
      const Tensor out = enc.encode(Tensor::from(x.shape(), p));
      for (std::size_t r = 0; r <= i; ++r)
        for (std::size_t c = 0; c < 8; ++c) CHECK(out.at(r, c) == base.at(r, c));
      bool changed = false;
      for (std::size_t c = 0; c < 8; ++c) changed = changed || out.at(i + 1, c) != base.at(i + 1, c);
      CHECK(changed);
    }
  }
}

TEST_CASE("batch invariance: alone vs inside a padded batch") {
  auto f = fixture(CategoryProcess::uniform, 5, 12);
  for (auto arch : {EncoderArchitecture::causal_transformer, EncoderArchitecture::gru, EncoderArchitecture::lstm}) {
    Rng rng(4);
    EventEncoder enc(f.codec, tiny(arch), rng);
    std::vector<const EncodedSequence*> batch;
    for (std::size_t i = 0; i < 6; ++i) batch.push_back(&f.encoded[i]);
    const auto all = enc.encode_sequences(batch);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto alone = enc.encode_sequences({batch[b]});
      for (std::size_t r = 0; r < batch[b]->size(); ++r)
        for (std::size_t c = 0; c < 8; ++c)
          CHECK(std::abs(alone.rows.at(r, c) - all.rows.at(b * all.max_len + r, c)) < 1e-10);
    }
  }
}

TEST_CASE("gradient check through the pretraining loss") {
  auto f = fixture(CategoryProcess::uniform, 3, 4);
  for (auto arch : {EncoderArchitecture::causal_transformer, EncoderArchitecture::gru, EncoderArchitecture::lstm}) {
    Rng rng(9);
    EncoderConfig cfg = tiny(arch);
    cfg.layers = 1;
    EventEncoder enc(f.codec, cfg, rng);
    NextEventHeads heads(f.codec, cfg.width, rng);
    std::vector<EncodedSequence> seqs;
    for (std::size_t i = 0; i < 2; ++i) {
      EncodedSequence s(f.encoded[i].begin(), f.encoded[i].begin() + 3);
      seqs.push_back(s);
    }
    seqs[1].resize(2);
    ParamList params;
    enc.collect(params, "encoder");
    heads.collect(params, "heads");
    GradCheckOptions opt;
    opt.max_entries_per_param = 12;
    auto r = grad_check([&] { return next_event_loss(enc, heads, {&seqs[0], &seqs[1]}); }, params, opt);
    CHECK_MESSAGE(r.passed, to_string(arch) << ": " << r.first_failure);
  }
}

TEST_CASE("untrained loss is near ln(K+1) per categorical head") {
  auto f = fixture(CategoryProcess::uniform, 4, 200);
  Rng rng(6);
  EncoderConfig cfg = tiny();
  EventEncoder enc(f.codec, cfg, rng);
  NextEventHeads heads(f.codec, cfg.width, rng);
  CHECK(heads.size() == 2);
  CHECK(heads.arity(0) == 5);
  CHECK(heads.arity(1) == f.codec.features()[1].cardinality() + 1);
  // single categorical feature codec for the per-feature check
  Dataset only = f.data;
  only.schema.features.resize(1);
  for (auto& s : only.sequences)
    for (auto& e : s.events) e.values.resize(1);
  const auto codec = FeatureCodec::fit(only);
  EventEncoder e1(codec, cfg, rng);
  NextEventHeads h1(codec, cfg.width, rng);
  std::vector<EncodedSequence> enc_seqs;
  for (const auto& s : only.sequences) enc_seqs.push_back(codec.encode_sequence(s, s.events.size()));
  std::vector<const EncodedSequence*> batch;
  for (const auto& s : enc_seqs) batch.push_back(&s);
  NoGradGuard g;
  const double loss = next_event_loss(e1, h1, batch).item();
  CHECK(loss == doctest::Approx(std::log(5.0)).epsilon(0.15));
}

TEST_CASE("pretraining learns a repeating category") {
  auto f = fixture(CategoryProcess::repeat, 4, 200);
  Rng rng(7);
  EncoderConfig cfg = tiny();
  cfg.width = 16;
  EventEncoder enc(f.codec, cfg, rng);
  NextEventHeads heads(f.codec, cfg.width, rng);
  PretrainConfig pc;
  pc.epochs = 6;
  pc.batch_size = 16;
  pc.schedule = {3e-3, 1e-5, 10, 1000, 1.0};
  const auto r = pretrain_next_event(enc, heads, f.encoded, pc);
  CHECK(r.losses.back() < r.losses.front());
  CHECK(next_event_accuracy(enc, heads, f.encoded, 0) > 0.95);
}

TEST_CASE("uniform categories stay near the Bayes rate") {
  auto f = fixture(CategoryProcess::uniform, 4, 300);
  auto val = fixture(CategoryProcess::uniform, 4, 300, 99);
  Rng rng(8);
  EncoderConfig cfg = tiny();
  EventEncoder enc(f.codec, cfg, rng);
  NextEventHeads heads(f.codec, cfg.width, rng);
  PretrainConfig pc;
  pc.epochs = 3;
  pc.batch_size = 32;
  pretrain_next_event(enc, heads, f.encoded, pc);
  std::vector<EncodedSequence> v;
  for (const auto& s : val.data.sequences) v.push_back(f.codec.encode_sequence(s, s.events.size()));
  CHECK(next_event_accuracy(enc, heads, v, 0) == doctest::Approx(0.25).epsilon(0.2));
}

TEST_CASE("length-1 sequences are skipped and counted") {
  auto f = fixture(CategoryProcess::uniform, 3, 10);
  f.encoded[0].resize(1);
  f.encoded[3].resize(1);
  Rng rng(1);
  EventEncoder enc(f.codec, tiny(), rng);
  NextEventHeads heads(f.codec, 8, rng);
  PretrainConfig pc;
  pc.epochs = 1;
  pc.batch_size = 4;
  const auto r = pretrain_next_event(enc, heads, f.encoded, pc);
  CHECK(r.skipped_sequences == 2);
  CHECK(r.steps == 2);
}

TEST_CASE("non-finite loss raises a divergence error with the step") {
  auto f = fixture(CategoryProcess::uniform, 3, 10);
  Rng rng(1);
  EventEncoder enc(f.codec, tiny(), rng);
  NextEventHeads heads(f.codec, 8, rng);
  enc.projection().weight.data_mut()[0] = NAN;
  PretrainConfig pc;
  pc.epochs = 1;
  try {
    pretrain_next_event(enc, heads, f.encoded, pc);
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == 0);
  }
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto f = fixture(CategoryProcess::uniform, 3, 20);
  Rng rng(1);
  EventEncoder enc(f.codec, tiny(), rng);
  NextEventHeads heads(f.codec, 8, rng);
  ParamList params;
  enc.collect(params, "encoder");
  std::vector<std::vector<double>> before;
  for (const auto& p : params) before.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  PretrainConfig pc;
  pc.epochs = 1;
  pc.schedule = {0.0, 0.0, 0, 1000, 1.0};
  pretrain_next_event(enc, heads, f.encoded, pc);
  for (std::size_t i = 0; i < params.size(); ++i)
    CHECK(std::vector<double>(params[i].tensor.data().begin(), params[i].tensor.data().end()) == before[i]);
}
