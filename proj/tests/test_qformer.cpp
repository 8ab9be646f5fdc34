#include <cmath>

#include "doctest.h"
#include "esqa/error.hpp"
#include "esqa/grad_check.hpp"
#include "esqa/qformer.hpp"

using namespace esqa;

namespace {

ConnectorConfig tiny() {
  ConnectorConfig c;
  c.queries = 2;
  c.width = 8;
  c.blocks = 2;
  c.heads = 2;
  c.ffn_width = 12;
  c.output_width = 6;
  return c;
}

ConnectorConfig desk() {
  ConnectorConfig c;
  c.queries = 8;
  c.output_width = 48;
  return c;
}

}  // namespace

TEST_CASE("exactly q rows for any event count") {
  Rng rng(1);
  QFormer qf(desk(), 32, rng);
  for (std::size_t n : {1, 10, 500}) {
    CHECK(qf.connect(random_normal({n, 32}, 1.0, rng, false)).shape() == Shape{8, 48});
  }
  for (std::size_t n = 1; n <= 64; ++n) CHECK(qf.connect(random_normal({n, 32}, 1.0, rng, false)).rows() == 8);
}

TEST_CASE("cross-attention sits in odd blocks by default") {
  Rng rng(1);
  ConnectorConfig c = desk();
  c.blocks = 4;
  QFormer qf(c, 32, rng);
  CHECK_FALSE(qf.has_cross(0));
  CHECK(qf.has_cross(1));
  CHECK_FALSE(qf.has_cross(2));
  CHECK(qf.has_cross(3));
  CHECK(qf.blocks()[1].has_cross());
  CHECK_FALSE(qf.blocks()[0].has_cross());
}

TEST_CASE("encoder width mismatch is rejected") {
  Rng rng(1);
  QFormer qf(desk(), 32, rng);
  CHECK_THROWS_AS(qf.connect(random_normal({3, 31}, 1.0, rng, false)), ShapeError);
}

TEST_CASE("zeroed cross value projections make output content-independent") {
  Rng rng(2);
  QFormer qf(desk(), 32, rng);
  for (auto& b : qf.blocks()) {
    if (!b.cross) continue;
    auto w = b.cross->wv.weight.data_mut();
    std::fill(w.begin(), w.end(), 0.0);
  }
  const Tensor a = qf.connect(random_normal({5, 32}, 1.0, rng, false));
  const Tensor b = qf.connect(random_normal({5, 32}, 1.0, rng, false));
  const Tensor c = qf.connect(random_normal({11, 32}, 1.0, rng, false));
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a.data()[k] == doctest::Approx(b.data()[k]).epsilon(1e-14));
    CHECK(a.data()[k] == doctest::Approx(c.data()[k]).epsilon(1e-14));
  }
}

TEST_CASE("disabled cross-attention is constant in the encoder output") {
  Rng rng(3);
  ConnectorConfig cfg = desk();
  cfg.cross_attention = false;
  QFormer qf(cfg, 32, rng);
  const Tensor a = qf.connect(random_normal({4, 32}, 1.0, rng, false));
  const Tensor b = qf.connect(random_normal({9, 32}, 1.0, rng, false));
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a.data()[k] == b.data()[k]);
}

TEST_CASE("batched connect equals per-item connect") {
  Rng rng(4);
  QFormer qf(desk(), 32, rng);
  const std::vector<std::size_t> lengths{3, 7, 1};
  const std::size_t max_len = 7;
  Tensor rows = random_normal({3 * max_len, 32}, 1.0, rng, false);
  const Tensor all = qf.connect_batch(rows, lengths, max_len);
  for (std::size_t b = 0; b < 3; ++b) {
    const Tensor one = qf.connect(slice_rows(rows, b * max_len, lengths[b]));
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 48; ++c) CHECK(std::abs(one.at(r, c) - all.at(b * 8 + r, c)) < 1e-10);
  }
}

TEST_CASE("gradient check through two blocks") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed + 10);
    QFormer qf(tiny(), 5, rng);
    Tensor rows = random_normal({4, 5}, 1.0, rng, true);
    ParamList params;
    qf.collect(params, "connector");
    params.push_back({"encoder_rows", rows});
    auto r = grad_check([&] { return sum(qf.connect(rows)); }, params);
    CHECK_MESSAGE(r.passed, r.first_failure);
    // query embeddings on their own
    auto rq = grad_check([&] { return sum(qf.connect(rows)); }, {{"queries", qf.queries()}});
    CHECK(rq.passed);
  }
}

TEST_CASE("sensitivity probe examples") {
  Rng rng(5);
  QFormer qf(desk(), 32, rng);
  std::vector<double> one(6 * 32, 0.0);
  for (std::size_t c = 0; c < 32; ++c) one[3 * 32 + c] = rng.normal();
  const auto s = sensitivity_probe(qf, Tensor::from({6, 32}, one));
  for (std::size_t i = 0; i < 6; ++i)
    if (i != 3) CHECK(s[3] > s[i]);

  const auto z = sensitivity_probe(qf, Tensor::zeros({4, 32}));
  for (double v : z) CHECK(v == 0.0);

  // brute-force masking oracle
  const Tensor x = random_normal({5, 32}, 1.0, rng, false);
  const auto probe = sensitivity_probe(qf, x);
  const Tensor base = qf.connect(x);
  for (std::size_t i = 0; i < 5; ++i) {
    std::vector<double> m(x.data().begin(), x.data().end());
    for (std::size_t c = 0; c < 32; ++c) m[i * 32 + c] = 0.0;
    const Tensor y = qf.connect(Tensor::from({5, 32}, m));
    double ss = 0;
    for (std::size_t k = 0; k < y.size(); ++k) ss += (y.data()[k] - base.data()[k]) * (y.data()[k] - base.data()[k]);
    CHECK(probe[i] == doctest::Approx(std::sqrt(ss)).epsilon(1e-12));
  }
}

TEST_CASE("config validation") {
  ConnectorConfig c = desk();
  c.blocks = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = desk();
  c.queries = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = desk();
  CHECK(ConnectorConfig::from_json(c.to_json()).to_json() == c.to_json());
}
