#include <cmath>
#include <set>
#include <functional>

#include "doctest.h"
#include "esqa/checkpoint.hpp"
#include "esqa/error.hpp"
#include "esqa/grad_check.hpp"
#include "esqa/nn.hpp"
#include "esqa/ops.hpp"
#include "esqa/optim.hpp"

using namespace esqa;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, bool grad = true) {
  return random_normal(std::move(shape), 1.0, rng, grad);
}

}  // namespace

TEST_CASE("x*x has derivative 2x") {
  auto x = Tensor::scalar(3.0, true);
  backward(mul(x, x));
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("sum of softmax has zero gradient") {
  Rng rng(3);
  auto x = rand_tensor({2, 5}, rng);
  backward(sum(softmax_rows(x)));
  for (double g : x.grad()) CHECK(std::abs(g) < 1e-12);
}

TEST_CASE("matmul gradient matches central differences") {
  Rng rng(5);
  auto w = rand_tensor({3, 3}, rng);
  auto a = rand_tensor({3, 2}, rng, false);
  GradCheckOptions opt;
  opt.tolerance = 1e-6;
  auto r = grad_check([&] { return sum(matmul(w, a)); }, {{"w", w}}, opt);
  CHECK_MESSAGE(r.passed, r.first_failure);
}

TEST_CASE("backward rejects a non-scalar loss") {
  auto x = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.0)), ShapeError);
}

TEST_CASE("disconnected parameter keeps a zero gradient") {
  auto x = Tensor::scalar(2.0, true);
  auto y = Tensor::scalar(5.0, true);
  backward(mul(x, x));
  CHECK((!y.has_grad() || y.grad()[0] == 0.0));
}

TEST_CASE("exp at zero grad-checks to within 1e-8") {
  auto x = Tensor::scalar(0.0, true);
  GradCheckOptions opt;
  opt.tolerance = 1e-8;
  auto r = grad_check([&] { return sum(exp(x)); }, {{"x", x}}, opt);
  CHECK(r.passed);
  CHECK(r.max_rel_error < 1e-8);
}

TEST_CASE("grad_check reports non-finite gradients") {
  auto x = Tensor::scalar(0.0, true);
  auto r = grad_check([&] { return sum(log(x)); }, {{"x", x}});
  CHECK_FALSE(r.passed);
  CHECK_FALSE(r.entries.at(0).finite);
}

// Every differentiable op, 20 seeds each.
TEST_CASE("op gradients match finite differences over seeds") {
  using Builder = std::function<Tensor(const Tensor&, const Tensor&)>;
  const std::vector<std::pair<const char*, Builder>> ops = {
      {"add", [](const Tensor& a, const Tensor& b) { return sum(mul(add(a, b), add(a, b))); }},
      {"sub_mul", [](const Tensor& a, const Tensor& b) { return sum(mul(sub(a, b), a)); }},
      {"matmul_t", [](const Tensor& a, const Tensor& b) { return sum(tanh(matmul(a, transpose(b)))); }},
      {"sigmoid", [](const Tensor& a, const Tensor& b) { return mean(mul(sigmoid(a), b)); }},
      {"gelu", [](const Tensor& a, const Tensor& b) { return sum(mul(gelu(a), b)); }},
      {"exp_log", [](const Tensor& a, const Tensor& b) { return sum(log(add(exp(a), exp(b)))); }},
      {"softmax", [](const Tensor& a, const Tensor& b) { return sum(mul(softmax_rows(a), b)); }},
      {"layer_norm",
       [](const Tensor& a, const Tensor& b) {
         auto g = slice_rows(b, 0, 1);
         auto bias = slice_rows(b, 1, 1);
         return sum(mul(layer_norm(a, reshape(g, {4}), reshape(bias, {4})), a));
       }},
      {"add_row", [](const Tensor& a, const Tensor& b) { return sum(tanh(add_row(a, reshape(slice_rows(b, 0, 1), {4})))); }},
      {"gather_concat",
       [](const Tensor& a, const Tensor& b) {
         auto g = gather_rows(a, {2, -1, 0});
         auto c = concat_cols({g, slice_cols(b, 1, 2)});
         return sum(mul(concat_rows({c, c}), concat_rows({c, scale(c, 0.5)})));
       }},
      {"scale_rows", [](const Tensor& a, const Tensor& b) { return sum(mul(scale_rows(a, {1, -2, 0.5}), b)); }},
      {"cross_entropy", [](const Tensor& a, const Tensor& b) { return cross_entropy(add(a, b), {1, -1, 3}); }},
  };
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (const auto& [name, fn] : ops) {
      Rng rng(seed * 31 + 1);
      auto a = rand_tensor({3, 4}, rng);
      auto b = rand_tensor({3, 4}, rng);
      auto r = grad_check([&] { return fn(a, b); }, {{"a", a}, {"b", b}});
      CHECK_MESSAGE(r.passed, name << " seed " << seed << ": " << r.first_failure);
    }
  }
}

TEST_CASE("attention gradients with masks match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed + 100);
    const bool causal = seed % 2 == 0;
    const std::size_t kl = causal ? 3 : 4;
    auto q = rand_tensor({2 * 3, 4}, rng);
    auto k = rand_tensor({2 * kl, 4}, rng);
    auto v = rand_tensor({2 * kl, 4}, rng);
    AttentionLayout layout{2, 3, kl, 2, causal, {kl, 2}};
    auto r = grad_check([&] { return sum(mul(attention(q, k, v, layout), q)); }, {{"q", q}, {"k", k}, {"v", v}});
    CHECK_MESSAGE(r.passed, "seed " << seed << ": " << r.first_failure);
  }
}

TEST_CASE("adamw single step examples") {
  AdamWConfig cfg;
  cfg.weight_decay = 0.0;
  {
    std::vector<double> p{1.0}, g{1.0};
    MomentState m{{0.0}, {0.0}};
    adamw_update(p, g, m, cfg, 1, 0.1);
    CHECK(p[0] == doctest::Approx(0.9).epsilon(1e-7));
  }
  {
    std::vector<double> p{1.0, -2.0}, g{0.0, 0.0};
    MomentState m{{0.0, 0.0}, {0.0, 0.0}};
    adamw_update(p, g, m, cfg, 1, 0.1);
    CHECK(p[0] == 1.0);
    CHECK(p[1] == -2.0);
  }
  {
    AdamWConfig wd;
    wd.weight_decay = 0.01;
    std::vector<double> p{1.0}, g{0.0};
    MomentState m{{0.0}, {0.0}};
    adamw_update(p, g, m, wd, 1, 0.1);
    CHECK(p[0] == doctest::Approx(0.999).epsilon(1e-15));
  }
}

TEST_CASE("adamw rejects mismatched shapes") {
  std::vector<double> p{1.0, 2.0}, g{1.0};
  MomentState m{{0.0, 0.0}, {0.0, 0.0}};
  CHECK_THROWS_AS(adamw_update(p, g, m, {}, 1, 0.1), ShapeError);
}

TEST_CASE("adamw step counter increases by one") {
  auto w = Tensor::from({2}, {1.0, 2.0}, true);
  AdamW opt({w});
  for (int i = 1; i <= 3; ++i) {
    backward(sum(mul(w, w)));
    opt.step(0.01);
    opt.zero_grad();
    CHECK(opt.state().step == i);
    CHECK(opt.state().moments.at(0).m.size() == 2);
  }
}

TEST_CASE("lr schedule examples and properties") {
  LrSchedule s{1e-3, 0.0, 100, 400, 1.0};
  CHECK(lr_at(s, 100) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(lr_at(s, 50) == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(lr_at(s, 300) == doctest::Approx(5e-4).epsilon(1e-12));
  // restart back at peak
  CHECK(lr_at(s, 500) == doctest::Approx(1e-3).epsilon(1e-12));

  LrSchedule grow{1.0, 0.1, 10, 20, 2.0};
  CHECK(lr_at(grow, 30) == doctest::Approx(1.0));
  CHECK(lr_at(grow, 30 + 20) == doctest::Approx(0.55));  // midpoint of the 40-step cycle
  // non-increasing inside a cycle, jumps back to peak only at 30, 70, 150, 310
  const std::set<long> restarts{30, 70, 150, 310};
  for (long t = 10; t < 400; ++t) {
    CHECK(lr_at(grow, t) >= 0.1 - 1e-15);
    if (restarts.count(t + 1)) CHECK(lr_at(grow, t + 1) == doctest::Approx(1.0));
    else CHECK(lr_at(grow, t + 1) <= lr_at(grow, t) + 1e-15);
  }
  CHECK(std::abs(lr_at(grow, 10) - lr_at(grow, 9)) <= 0.1 + 1e-12);
}

TEST_CASE("clip_grad_norm rescales to the limit") {
  auto w = Tensor::from({2}, {3.0, 4.0}, true);
  backward(sum(mul(w, w)));  // grad (6, 8), norm 10
  const double n = clip_grad_norm({w}, 1.0);
  CHECK(n == doctest::Approx(10.0));
  CHECK(w.grad()[0] == doctest::Approx(0.6));
  CHECK(w.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("forward computations are bit-identical across runs") {
  auto run = [] {
    Rng rng(42);
    TransformerBlock block(8, 2, 16, std::nullopt, rng);
    auto x = random_normal({5, 8}, 1.0, rng, false);
    AttentionLayout layout{1, 5, 5, 2, true, {}};
    return sum(block.forward(x, layout, {})).item();
  };
  CHECK(run() == run());
}

TEST_CASE("tensor container round trip and hash") {
  Rng rng(1);
  ParamList list{{"a", random_normal({2, 3}, 1.0, rng)}, {"b.c", random_normal({4}, 1.0, rng)}};
  const auto path = std::filesystem::temp_directory_path() / "esqa_container_test.bin";
  write_tensor_container(path, list);
  auto back = read_tensor_container(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].name == "a");
  CHECK(back[1].tensor.shape() == Shape{4});
  CHECK(hash_params(back) == hash_params(list));
  back[1].tensor.data_mut()[0] += 1.0;
  CHECK(hash_params(back) != hash_params(list));
  std::filesystem::remove(path);
}
