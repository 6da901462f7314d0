#include <doctest.h>

#include "mutr/ops.hpp"

using namespace mutr;

TEST_CASE("loss = sum(x) gives all-ones gradient") {
  Rng rng(31);
  Var x = Var::leaf(rand_uniform({3, 4}, DType::kF64, -1.0, 1.0, rng), true);
  Tape tape;
  Var loss = ops::sum(x);
  tape.backward(loss);
  for (std::int64_t i = 0; i < x.value().numel(); ++i) {
    CHECK(x.grad().get(i) == 1.0);
  }
}

TEST_CASE("loss = sum(x*x) gives exactly 2x") {
  Rng rng(32);
  Var x = Var::leaf(rand_uniform({5, 2}, DType::kF64, -2.0, 2.0, rng), true);
  Tape tape;
  Var loss = ops::sum(ops::mul(x, x));
  tape.backward(loss);
  for (std::int64_t i = 0; i < x.value().numel(); ++i) {
    CHECK(x.grad().get(i) == 2.0 * x.value().get(i));
  }
}

TEST_CASE("unused leaves read zero gradients") {
  Rng rng(33);
  Var x = Var::leaf(rand_uniform({2, 2}, DType::kF64, -1.0, 1.0, rng), true);
  Var unused = Var::leaf(rand_uniform({2, 2}, DType::kF64, -1.0, 1.0, rng), true);
  Tape tape;
  Var loss = ops::sum(x);
  tape.backward(loss);
  CHECK_FALSE(unused.has_grad());
  for (std::int64_t i = 0; i < 4; ++i) CHECK(unused.grad().get(i) == 0.0);
}

TEST_CASE("gradients accumulate across shared uses") {
  Var x = Var::leaf(Tensor::full({3}, DType::kF64, 2.0), true);
  Tape tape;
  Var loss = ops::sum(ops::add(x, x));
  tape.backward(loss);
  for (std::int64_t i = 0; i < 3; ++i) CHECK(x.grad().get(i) == 2.0);
}

TEST_CASE("backward demands a scalar produced under this tape") {
  Var x = Var::leaf(Tensor::full({2, 2}, DType::kF64, 1.0), true);
  {
    Tape tape;
    Var y = ops::add(x, x);
    CHECK_THROWS_AS(tape.backward(y), ConfigError);  // non-scalar
  }
  {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(x), ConfigError);  // not produced here
  }
}

TEST_CASE("a consumed tape cannot run backward twice") {
  Var x = Var::leaf(Tensor::full({2}, DType::kF64, 1.0), true);
  Tape tape;
  Var loss = ops::sum(x);
  tape.backward(loss);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(loss), ConfigError);
}

TEST_CASE("nested tapes are rejected (single owner)") {
  Tape tape;
  CHECK_THROWS_AS(Tape{}, ConfigError);
}

TEST_CASE("no recording happens without an active tape") {
  Var x = Var::leaf(Tensor::full({2}, DType::kF64, 1.0), true);
  Var y = ops::sum(x);
  CHECK_FALSE(y.needs_grad());
  CHECK(y.value().get(0) == 2.0);
}

TEST_CASE("forward results are identical with and without a tape") {
  Rng rng(34);
  Var x = Var::leaf(rand_uniform({2, 3, 4, 4}, DType::kF32, -1.0, 1.0, rng), true);
  Var w = Var::leaf(rand_uniform({5, 3, 3, 3}, DType::kF32, -1.0, 1.0, rng), true);
  Tensor with_tape, without_tape;
  {
    Tape tape;
    with_tape = ops::conv2d(x, w, nullptr, {1, 1, 1}).value();
  }
  without_tape = ops::conv2d(x, w, nullptr, {1, 1, 1}).value();
  CHECK(with_tape.same_bits(without_tape));
}
