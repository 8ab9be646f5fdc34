#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "esqa/error.hpp"
#include "esqa/feature_codec.hpp"
#include "esqa/synthetic.hpp"

using namespace esqa;

namespace {

// Third standardized moment, population form, written independently.
double skew_oracle(const std::vector<double>& xs) {
  long double m = 0;
  for (double x : xs) m += x;
  m /= xs.size();
  long double m2 = 0, m3 = 0;
  for (double x : xs) {
    const long double d = x - m;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= xs.size();
  m3 /= xs.size();
  return static_cast<double>(m3 / std::pow(m2, 1.5L));
}

BinningSpec spec_of(std::vector<double> b) {
  BinningSpec s;
  s.boundaries = std::move(b);
  s.bins = s.boundaries.size() - 1;
  return s;
}

}  // namespace

TEST_CASE("embedding_dim examples") {
  CHECK(embedding_dim(1) == 2);
  CHECK(embedding_dim(2) == 3);
  CHECK(embedding_dim(10) == 6);
  CHECK_THROWS_AS(embedding_dim(0), ConfigError);
}

TEST_CASE("embedding_dim is monotone, at least 2 and finite up to 1e6") {
  std::size_t prev = 0;
  for (long k = 1; k <= 1000000; k += (k < 1000 ? 1 : 997)) {
    const auto d = embedding_dim(k);
    CHECK(d >= 2);
    CHECK(d >= prev);
    prev = d;
  }
  CHECK(embedding_dim(1000000) == static_cast<std::size_t>(std::ceil(1.6 * std::pow(1e6, 0.56))));
}

TEST_CASE("doane on a symmetric N=256 sample gives 9 bins") {
  std::vector<double> xs;
  for (int i = 0; i < 128; ++i) {
    xs.push_back(i + 0.5);
    xs.push_back(-(i + 0.5));
  }
  CHECK(std::abs(skew_oracle(xs)) < 1e-12);
  const auto s = fit_doane_bins(xs);
  CHECK(s.requested_bins == 9);
  CHECK(s.bins == 9);
  CHECK(s.boundaries.size() == 10);
}

TEST_CASE("doane sigma at N=8 and a skewed 8-point sample") {
  CHECK(std::abs(doane_sigma(8) - std::sqrt(36.0 / 99.0)) < 1e-12);
  const std::vector<double> xs{1, 1, 1, 2, 2, 3, 5, 9};
  const double g1 = skew_oracle(xs);
  CHECK(std::abs(sample_skewness(xs) - g1) < 1e-12);
  const auto expected = static_cast<std::size_t>(std::ceil(1 + 3 + std::log2(1 + std::abs(g1) / std::sqrt(36.0 / 99.0))));
  CHECK(doane_bin_count(8, g1) == expected);
  // the hand-evaluated case from the formula
  CHECK(doane_bin_count(8, 1.2) == 6);
}

TEST_CASE("constant sample collapses to one bin") {
  const std::vector<double> xs(50, 4.25);
  const auto s = fit_doane_bins(xs);
  CHECK(s.bins == 1);
  CHECK(s.boundaries == std::vector<double>{4.25, 4.25});
  CHECK(discretize(-3, s).value == 4.25);
  CHECK(discretize(100, s).value == 4.25);
}

TEST_CASE("small samples fall back and record it") {
  const auto s = fit_doane_bins(std::vector<double>{1.0, 2.0});
  CHECK(s.small_sample_fallback);
  CHECK(s.requested_bins == 2);
  CHECK_THROWS_AS(fit_doane_bins(std::vector<double>{}), DataError);
  CHECK_THROWS_AS(fit_doane_bins(std::vector<double>{1.0, NAN, 2.0}), DataError);
}

TEST_CASE("discretize examples") {
  const auto s = spec_of({0, 10, 20});
  CHECK(discretize(-5, s).value == 0);
  CHECK(discretize(25, s).value == 20);
  CHECK(discretize(7, s).value == 10);
  CHECK(discretize(7, s).index == 1);
  CHECK(discretize(20, s).value == 20);
  CHECK(discretize(10, s).value == 20);
  CHECK_THROWS_AS(discretize(NAN, s), DataError);
}

TEST_CASE("discretize totality, monotonicity and clamping over 10000 pairs") {
  Rng rng(77);
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<double> b;
    const int n = 1 + static_cast<int>(rng.below(6));
    double x0 = rng.uniform(-50, 50);
    b.push_back(x0);
    for (int i = 0; i < n; ++i) b.push_back(b.back() + rng.uniform(0.1, 10));
    const auto s = spec_of(b);
    const double x = rng.uniform(-80, 120);
    const double y = x + rng.uniform(0, 20);
    const auto dx = discretize(x, s);
    CHECK(std::find(b.begin(), b.end(), dx.value) != b.end());
    CHECK(b[dx.index] == dx.value);
    CHECK(discretize(y, s).value >= dx.value);
    if (x < b.front()) CHECK(dx.value == b.front());
    if (x >= b.back()) CHECK(dx.value == b.back());
    if (x >= b.front() && x < b.back()) {
      // right edge of the containing interval
      CHECK(b[dx.index - 1] <= x);
      CHECK(x < dx.value);
    }
  }
}

TEST_CASE("discretize is idempotent on interior representatives") {
  const auto s = spec_of({0, 1, 5, 9});
  for (double x : {-1.0, 0.5, 3.0, 7.0, 12.0}) {
    const double once = discretize(x, s).value;
    if (once != s.boundaries.back() && once != s.boundaries.front()) {
      // interior representatives map to the next edge under the half-open rule
      CHECK(discretize(once, s).value >= once);
    }
  }
  // the top clamp is a fixed point; the bottom edge itself maps up to the next one
  CHECK(discretize(discretize(12.0, s).value, s).value == 9);
  CHECK(discretize(discretize(-1.0, s).value, s).value == 1);
}

TEST_CASE("shuffling the sample keeps boundaries") {
  Rng rng(5);
  std::vector<double> xs;
  for (int i = 0; i < 301; ++i) xs.push_back(std::exp(rng.normal()));
  const auto a = fit_doane_bins(xs);
  rng.shuffle(xs);
  const auto b = fit_doane_bins(xs);
  CHECK(a.boundaries == b.boundaries);
  CHECK(a.bins == b.bins);
}

TEST_CASE("equal-frequency bins hold floor(N/n)-1 .. ceil(N/n)+1 points") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<double> xs;
    const int n_pts = 50 + static_cast<int>(rng.below(400));
    for (int i = 0; i < n_pts; ++i) xs.push_back(rng.normal() * 3 + rng.exponential(2));
    const auto s = fit_doane_bins(xs);
    const auto& b = s.boundaries;
    const std::size_t n = s.bins;
    std::vector<std::size_t> counts(n, 0);
    for (double x : xs) {
      auto it = std::upper_bound(b.begin(), b.end(), x);
      std::size_t i = static_cast<std::size_t>(it - b.begin());
      i = std::clamp<std::size_t>(i, 1, n);
      ++counts[i - 1];
    }
    const std::size_t lo = xs.size() / n - 1, hi = (xs.size() + n - 1) / n + 1;
    for (auto c : counts) {
      CHECK(c >= lo);
      CHECK(c <= hi);
    }
  }
}

TEST_CASE("vocabulary reserves index 0") {
  Vocabulary v("f", {"x", "y"});
  CHECK(*v.index("x") == 1);
  CHECK(*v.index("y") == 2);
  CHECK_FALSE(v.index("z").has_value());
  CHECK(v.value_at(2) == "y");
}

namespace {

Dataset codec_data() {
  GeneratorConfig c;
  c.schema = Schema::from_json(nlohmann::json::parse(R"({
    "version": 1,
    "features": [
      {"name": "cat", "kind": "categorical", "categories": ["p", "q", "r"]},
      {"name": "amount", "kind": "real"},
      {"name": "day", "kind": "time", "derive": "weekday"}
    ]})"));
  c.clients = 30;
  c.min_events = 3;
  c.max_events = 9;
  return generate_synthetic(c, 8).dataset;
}

}  // namespace

TEST_CASE("codec fit, encode and JSON round trip") {
  const auto data = codec_data();
  const auto codec = FeatureCodec::fit(data);
  REQUIRE(codec.features().size() == 3);
  CHECK(codec.features()[0].cardinality() == 3);
  CHECK(codec.features()[0].dim == embedding_dim(3));
  CHECK(codec.features()[1].encoding == Encoding::binning);
  CHECK(codec.features()[2].cardinality() == 7);
  std::size_t total = 0;
  for (const auto& f : codec.features()) total += f.dim;
  CHECK(codec.total_dim() == total);
  CHECK(codec.encode_value(0, Value{std::string("q")}) == 2);
  CHECK(codec.encode_value(0, Value{}) == 0);
  const auto back = FeatureCodec::from_json(codec.to_json());
  CHECK(back.to_json().dump() == codec.to_json().dump());
  const auto& s = data.sequences[0];
  CHECK(back.encode_sequence(s, s.events.size()) == codec.encode_sequence(s, s.events.size()));
}

TEST_CASE("integer features use a vocabulary under the cap, bins above it") {
  Dataset d;
  d.schema = Schema::from_json(nlohmann::json::parse(
      R"({"version":1,"features":[{"name":"n","kind":"integer"}]})"));
  EventSequence s;
  s.client_id = "a";
  for (int i = 0; i < 40; ++i) s.events.push_back({i, {Value{std::int64_t(i % 20)}}});
  d.sequences.push_back(s);
  CHECK(FeatureCodec::fit(d).features()[0].encoding == Encoding::vocabulary);
  CodecOptions opt;
  opt.integer_vocabulary_cap = 10;
  CHECK(FeatureCodec::fit(d, opt).features()[0].encoding == Encoding::binning);
}

TEST_CASE("embed event and sequence contracts") {
  const auto data = codec_data();
  const auto codec = FeatureCodec::fit(data);
  Rng rng(2);
  EventEmbedder emb(codec, rng);
  CHECK(emb.width() == codec.total_dim());
  const auto& s = data.sequences[1];
  const auto enc = codec.encode_sequence(s, s.events.size());
  const auto m = emb.embed_sequence(enc);
  CHECK(m.shape() == Shape{s.events.size(), emb.width()});
  for (std::size_t i = 0; i < enc.size(); ++i) {
    const auto row = emb.embed_event(enc[i]);
    for (std::size_t c = 0; c < emb.width(); ++c) CHECK(row.at(0, c) == m.at(i, c));
  }
  // swapping two events swaps only their rows
  auto swapped = enc;
  std::swap(swapped[0], swapped[2]);
  const auto m2 = emb.embed_sequence(swapped);
  for (std::size_t c = 0; c < emb.width(); ++c) {
    CHECK(m2.at(0, c) == m.at(2, c));
    CHECK(m2.at(2, c) == m.at(0, c));
    CHECK(m2.at(1, c) == m.at(1, c));
  }
  CHECK_THROWS_AS(emb.embed_sequence({}), DataError);
  for (auto& t : emb.tables())
    for (double& v : t.data_mut()) v = 0.0;
  const Tensor zero = emb.embed_event(enc[0]);
  for (double v : zero.data()) CHECK(v == 0.0);
}

TEST_CASE("dims {3, 6} give a 9-wide event") {
  Dataset d;
  d.schema = Schema::from_json(nlohmann::json::parse(R"({"version":1,"features":[
      {"name":"a","kind":"categorical","cardinality":3},
      {"name":"b","kind":"categorical","cardinality":10}]})"));
  EventSequence s;
  s.client_id = "x";
  s.events.push_back({1, {Value{std::string("0")}, Value{std::string("9")}}});
  d.sequences.push_back(s);
  const auto codec = FeatureCodec::fit(d);
  CHECK(codec.features()[0].dim == 3);
  CHECK(codec.features()[1].dim == 6);
  Rng rng(1);
  EventEmbedder emb(codec, rng);
  CHECK(emb.embed_event(codec.encode_event(s.events[0])).size() == 9);
}

TEST_CASE("strict codec rejects unknown categories") {
  const auto data = codec_data();
  const auto codec = FeatureCodec::fit(data);
  CHECK_THROWS_AS(codec.encode_value(0, Value{std::string("zzz")}), DataError);
}
