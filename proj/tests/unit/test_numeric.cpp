#include <gtest/gtest.h>

#include <cmath>

#include "grad_oracle.hpp"
#include "mechshift/autodiff.hpp"
#include "mechshift/errors.hpp"
#include "mechshift/io.hpp"
#include "mechshift/parallel.hpp"
#include "mechshift/tensor.hpp"

using namespace mechshift;

TEST(Tensor, ShapeAndAccess) {
  Tensor t({2, 3}, 1.5f);
  EXPECT_EQ(t.rows(), 2);
  EXPECT_EQ(t.cols(), 3);
  EXPECT_EQ(t.size(), 6u);
  t.at(1, 2) = 4.0f;
  EXPECT_FLOAT_EQ(t[5], 4.0f);
  EXPECT_EQ(t.row(1)[2], 4.0f);
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), DimensionError);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Tensor, MaxAbsDiffAndFinite) {
  Tensor a({2, 2}, 1.0f), b({2, 2}, 1.0f);
  b[3] = 3.0f;
  EXPECT_FLOAT_EQ(max_abs_diff(a, b), 2.0f);
  EXPECT_TRUE(a.all_finite());
  a[0] = NAN;
  EXPECT_FALSE(a.all_finite());
}

TEST(Autodiff, SecondBackwardWithoutResetIsUsageError) {
  Tape tape;
  Var x = tape.input(Tensor({2}, 1.0f), true);
  Var y = sum(scale(x, 2.0f));
  tape.backward(y);
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  EXPECT_THROW(tape.backward(y), UsageError);
  tape.reset_gradients();
  tape.backward(y);
  EXPECT_FLOAT_EQ(x.grad()[1], 2.0f);
}

TEST(Autodiff, BackwardNeedsScalarRoot) {
  Tape tape;
  Var x = tape.input(Tensor({2, 2}, 1.0f), true);
  EXPECT_THROW(tape.backward(gelu(x)), Error);
}

TEST(Autodiff, MismatchedShapesThrow) {
  Tape tape;
  Var a = tape.input(Tensor({2, 3}), false);
  Var b = tape.input(Tensor({2, 3}), false);
  EXPECT_THROW(matmul(a, b), DimensionError);
  EXPECT_THROW(add(a, tape.input(Tensor({3, 2}), false)), DimensionError);
}

TEST(Autodiff, ReplayIsBitExact) {
  std::mt19937_64 rng(5);
  Tape tape;
  Var a = tape.input(oracle::random_tensor(rng, {4, 6}), true);
  Var g = tape.input(oracle::random_tensor(rng, {6}), true);
  Var w = tape.input(oracle::random_tensor(rng, {6, 3}), true);
  Var y = softmax(matmul(gelu(rmsnorm(a, g)), w));
  tape.backward(sum(y));
  EXPECT_TRUE(tape.replay_matches());
}

TEST(Autodiff, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(9);
  Tape tape;
  const Tensor s = softmax(tape.input(oracle::random_tensor(rng, {5, 7}, 10.0))).value();
  for (int r = 0; r < 5; ++r) {
    double total = 0.0;
    for (float p : s.row(r)) total += p;
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Autodiff, RmsNormOfZeroIsZero) {
  Tape tape;
  const Tensor y = rmsnorm(tape.input(Tensor({1, 4})), tape.input(Tensor({4}, 2.0f))).value();
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Autodiff, CrossEntropyRejectsBadTarget) {
  Tape tape;
  Var x = tape.input(Tensor({1, 3}), true);
  EXPECT_THROW(cross_entropy(x, 3), IndexError);
}

TEST(Autodiff, AddNFoldsLeftToRight) {
  Tape tape;
  const Var terms[] = {tape.input(Tensor::scalar(1e8f)), tape.input(Tensor::scalar(-1e8f)),
                       tape.input(Tensor::scalar(1.0f))};
  EXPECT_EQ(add_n(terms).value()[0], (1e8f + -1e8f) + 1.0f);
}


TEST(GradientOracle, EveryCaseWithinTolerance) {
  const auto cases = oracle::all_grad_cases();
  ASSERT_GE(cases.size(), 20u);
  for (const auto& c : cases) {
    const double err = oracle::relative_error(c);
    EXPECT_LE(err, 1e-4) << c.name;
  }
}

TEST(GradientOracle, DetectsAWrongGradient) {
  // A deliberately wrong backward must be caught by the same harness.
  oracle::GradCase c;
  c.name = "broken";
  c.inputs = {Tensor({3}, std::vector<float>{0.5f, -1.0f, 2.0f})};
  c.differentiable = {true};
  c.build = [](Tape& tape, const std::vector<Tensor>& in) {
    Var x = tape.input(in[0], true);
    Var y = tape.record(
        {x}, [](std::span<const Tensor* const> v) { return Tensor::scalar((*v[0])[0] * (*v[0])[0]); },
        [](std::span<const Tensor* const> v, const Tensor&, const Tensor& g, std::span<Tensor* const> gin) {
          (*gin[0])[0] += g[0] * (*v[0])[0];  // missing factor 2
        });
    return std::make_pair(y, std::vector<Var>{x});
  };
  c.reference = [](const std::vector<oracle::Flat>& x) { return x[0][0] * x[0][0]; };
  EXPECT_GT(oracle::relative_error(c), 0.1);
}

TEST(Io, AtomicWriteAndRead) {
  const auto dir = std::filesystem::temp_directory_path() / "mechshift_io_test";
  std::filesystem::remove_all(dir);
  write_file_atomic(dir / "sub" / "a.txt", "hello");
  EXPECT_EQ(read_file(dir / "sub" / "a.txt"), "hello");
  write_file_atomic(dir / "sub" / "a.txt", "bye");
  EXPECT_EQ(read_file(dir / "sub" / "a.txt"), "bye");
  EXPECT_THROW(read_file(dir / "missing"), FileError);
  std::filesystem::remove_all(dir);
}

TEST(Io, FloatFormattingRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-7, 123456.789}) {
    EXPECT_EQ(std::stod(format_float(v, 17)), v);
  }
  EXPECT_EQ(format_float(0.5), "0.5");
  EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_field("x\"y"), "\"x\"\"y\"");
  EXPECT_EQ(csv_field("plain"), "plain");
}

TEST(Parallel, ResultIndependentOfWorkerCount) {
  std::vector<double> a(100), b(100);
  setenv("MECHSHIFT_WORKERS", "1", 1);
  parallel_for(100, [&](int i) { a[static_cast<std::size_t>(i)] = std::sin(i); });
  setenv("MECHSHIFT_WORKERS", "4", 1);
  EXPECT_EQ(worker_count(), 4);
  parallel_for(100, [&](int i) { b[static_cast<std::size_t>(i)] = std::sin(i); });
  unsetenv("MECHSHIFT_WORKERS");
  EXPECT_EQ(a, b);
  EXPECT_EQ(worker_count(), 1);
}

TEST(Parallel, PropagatesErrors) {
  setenv("MECHSHIFT_WORKERS", "3", 1);
  EXPECT_THROW(parallel_for(10, [](int i) {
                 if (i == 7) throw UsageError("boom");
               }),
               UsageError);
  unsetenv("MECHSHIFT_WORKERS");
}
