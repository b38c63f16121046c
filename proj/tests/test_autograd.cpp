#include <doctest.h>

#include <cmath>

#include "mdgd/autograd.hpp"
#include "mdgd/errors.hpp"
#include "mdgd/rng.hpp"

using namespace mdgd;

namespace {

ParamSet single(const std::string& name, Tensor value, bool trainable = true) {
  ParamSet ps;
  ps.emplace(name, Parameter{.name = name, .value = std::move(value), .trainable = trainable});
  return ps;
}

Tensor random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("backward on closed-form losses") {
  SUBCASE("sum") {
    const auto ps = single("w", Tensor::vector({1, 2, 3}));
    const auto g = gradient_of([](Tape& t, const ParamSet&) { return ag::sum(t.param("w")); }, ps);
    CHECK(g.at("w") == Tensor::vector({1, 1, 1}));
  }
  SUBCASE("half squared norm") {
    const auto ps = single("w", Tensor::vector({3, -4}));
    const auto g = gradient_of(
        [](Tape& t, const ParamSet&) { return ag::scale(ag::sum_squares(t.param("w")), 0.5); }, ps);
    CHECK(g.at("w") == Tensor::vector({3, -4}));
  }
  SUBCASE("L1 distance uses sign with sign(0) = 0") {
    const auto ps = single("w", Tensor::vector({1}));
    auto g = gradient_of(
        [](Tape& t, const ParamSet&) {
          return ag::l1_distance(t.param("w"), Tensor::vector({2}), ag::L1Norm::kSum);
        },
        ps);
    CHECK(g.at("w") == Tensor::vector({-1}));
    const auto at_kink = single("w", Tensor::vector({2}));
    g = gradient_of(
        [](Tape& t, const ParamSet&) {
          return ag::l1_distance(t.param("w"), Tensor::vector({2}), ag::L1Norm::kSum);
        },
        at_kink);
    CHECK(g.at("w") == Tensor::vector({0}));
  }
}

TEST_CASE("frozen parameters get no gradient entry") {
  ParamSet ps = single("a", Tensor::vector({1, 2}));
  ps.emplace("b", Parameter{.name = "b", .value = Tensor::vector({3, 4}), .trainable = false});
  const auto g = gradient_of(
      [](Tape& t, const ParamSet&) { return ag::sum(ag::mul(t.param("a"), t.param("b"))); }, ps);
  CHECK(g.contains("a"));
  CHECK_FALSE(g.contains("b"));
  CHECK(g.at("a") == Tensor::vector({3, 4}));
}

TEST_CASE("unused trainable parameters report zeros") {
  ParamSet ps = single("a", Tensor::vector({1, 2}));
  ps.emplace("z", Parameter{.name = "z", .value = Tensor::vector({5}), .trainable = true});
  const auto g = gradient_of([](Tape& t, const ParamSet&) { return ag::sum(t.param("a")); }, ps);
  CHECK(g.at("z") == Tensor::vector({0}));
}

TEST_CASE("tape misuse") {
  Tape tape;
  const auto ps = single("w", Tensor::vector({1, 2}));
  tape.bind_all(ps);
  SUBCASE("non-scalar loss") { CHECK_THROWS_AS(tape.backward(tape.param("w")), ContractError); }
  SUBCASE("second backward") {
    Var loss = ag::sum(tape.param("w"));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), UsageError);
  }
}

TEST_CASE("finite differences agree with every primitive") {
  Rng rng(101);
  for (int probe = 0; probe < 16; ++probe) {
    ParamSet ps;
    auto add = [&](const std::string& name, Shape shape) {
      ps.emplace(name, Parameter{.name = name, .value = random_tensor(rng, shape), .trainable = true});
    };
    add("x", {3, 4});
    add("w", {4, 4});
    add("b", {4});
    add("g", {4});
    add("q", {6, 4});
    add("k", {6, 4});
    add("v", {6, 4});
    const Tensor target = random_tensor(rng, {3, 4});

    const std::vector<std::pair<const char*, LossBuilder>> cases = {
        {"matmul", [](Tape& t, const ParamSet&) {
           return ag::sum_squares(ag::matmul(t.param("x"), t.param("w")));
         }},
        {"add_bias+gelu", [](Tape& t, const ParamSet&) {
           return ag::sum_squares(ag::gelu(ag::add_bias(t.param("x"), t.param("b"))));
         }},
        {"layer_norm", [](Tape& t, const ParamSet&) {
           return ag::sum_squares(
               ag::mul(ag::layer_norm(t.param("x"), t.param("g"), t.param("b")),
                       ag::add_bias(t.param("x"), t.param("b"))));
         }},
        {"gather/concat", [](Tape& t, const ParamSet&) {
           Var c = ag::concat_rows({t.param("x"), t.param("w")});
           return ag::sum_squares(ag::gather_rows(c, {0, 6, 2, 2, 4}));
         }},
        {"attention", [](Tape& t, const ParamSet&) {
           ag::AttentionLayout layout{.batch = 2, .seq = 3, .heads = 2, .key_valid = {1, 1, 0, 1, 1, 1}};
           return ag::sum_squares(ag::causal_attention(t.param("q"), t.param("k"), t.param("v"), layout));
         }},
        {"cross_entropy", [](Tape& t, const ParamSet&) {
           return ag::cross_entropy(ag::matmul(t.param("x"), t.param("w")), {0, 3, 1}, {0.5, 0.0, 0.25});
         }},
        {"l1 (smooth point)", [target](Tape& t, const ParamSet&) {
           return ag::l1_distance(ag::matmul(t.param("x"), t.param("w")), target, ag::L1Norm::kMean);
         }},
        {"sub/scale/mean", [](Tape& t, const ParamSet&) {
           return ag::mean(ag::scale(ag::sub(t.param("q"), t.param("k")), 3.0));
         }},
    };
    for (const auto& [name, build] : cases) {
      CAPTURE(name);
      CHECK(finite_difference_check(build, ps, 1e-6) <= 1e-4);
    }
  }
}

TEST_CASE("finite_difference_check contract") {
  const auto quad = single("w", Tensor::vector({0.3, -1.2, 2.0}));
  const LossBuilder q = [](Tape& t, const ParamSet&) { return ag::scale(ag::sum_squares(t.param("w")), 0.5); };
  CHECK(finite_difference_check(q, quad, 1e-5) <= 1e-9);
  const LossBuilder constant = [](Tape& t, const ParamSet&) { return ag::sum(t.constant(Tensor::vector({1, 2}))); };
  CHECK(finite_difference_check(constant, ParamSet{}, 1e-6) == 0.0);
  CHECK_THROWS_AS(finite_difference_check(q, quad, 1e-3), ContractError);
  CHECK_THROWS_AS(finite_difference_check(q, quad, 1e-8), ContractError);
  const LossBuilder nan_loss = [](Tape& t, const ParamSet&) {
    return ag::scale(ag::sum(t.param("w")), std::nan(""));
  };
  CHECK_THROWS_AS(finite_difference_check(nan_loss, quad, 1e-6), NumericError);
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(7);
  ParamSet ps;
  ps.emplace("w", Parameter{.name = "w", .value = random_tensor(rng, {3, 3}), .trainable = true});
  const Tensor x = random_tensor(rng, {2, 3});
  const LossBuilder f = [x](Tape& t, const ParamSet&) {
    return ag::sum_squares(ag::gelu(ag::matmul(t.constant(x), t.param("w"))));
  };
  const LossBuilder g = [](Tape& t, const ParamSet&) { return ag::sum(ag::gelu(t.param("w"))); };
  const LossBuilder both = [&](Tape& t, const ParamSet& p) { return ag::add(f(t, p), g(t, p)); };
  const auto sum_of = gv_axpy(gradient_of(f, ps), 1.0, gradient_of(g, ps));
  const auto of_sum = gradient_of(both, ps);
  CHECK(gv_norm(gv_axpy(sum_of, -1.0, of_sum)) <= 1e-12);
}

TEST_CASE("gradient vector arithmetic") {
  const GradientVector a({{"w", Tensor::vector({1, 0})}});
  const GradientVector b({{"w", Tensor::vector({0, 1})}});
  CHECK(gv_dot(a, b) == 0.0);
  CHECK(gv_norm(GradientVector({{"w", Tensor::vector({3, 4})}})) == 5.0);
  CHECK(gv_axpy(GradientVector({{"w", Tensor::vector({1, 1})}}), -1.0, a) == b);

  SUBCASE("key mismatch lists the symmetric difference") {
    const GradientVector c({{"u", Tensor::vector({1})}, {"w", Tensor::vector({1, 2})}});
    try {
      gv_dot(a, c);
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      CHECK(std::string(e.what()).find("{u}") != std::string::npos);
    }
  }

  SUBCASE("flatten is lexicographic and inverts unflatten") {
    const GradientVector v({{"b", Tensor::vector({3})}, {"a", Tensor::matrix({{1, 2}})}});
    CHECK(v.flatten() == std::vector<double>{1, 2, 3});
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
      GradientVector r({{"x.0", random_tensor(rng, {2, 3})}, {"x.1", random_tensor(rng, {4})}});
      CHECK(GradientVector::unflatten(r.flatten(), r) == r);
    }
  }
}
