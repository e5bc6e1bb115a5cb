#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "hprune/errors.hpp"
#include "hprune/rng.hpp"
#include "hprune/tensor.hpp"
#include "test_support.hpp"

using namespace hprune;

namespace {

std::vector<float> vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(TensorTest, LeafInvariants) {
  const auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor::from({2}, {1, NAN}), ContractError);
  EXPECT_THROW(Tensor::from({1}, {INFINITY}), ContractError);
  EXPECT_THROW(Tensor::from({0, 2}, {}), DimensionError);
}

TEST(TensorTest, MatmulIdentity) {
  const auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(vec(matmul(a, eye)), (std::vector<float>{1, 2, 3, 4}));
}

TEST(TensorTest, SoftmaxOfZerosIsUniform) {
  const auto y = softmax(Tensor::from({3}, {0, 0, 0}));
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 1.0f / 3.0f);
}

TEST(TensorTest, LayerNormClosedForm) {
  const auto y = layer_norm(Tensor::from({3}, {2, 4, 6}), Tensor::full({3}, 1.0f), Tensor::zeros({3}));
  // mean 4, biased variance 8/3
  const double inv = 1.0 / std::sqrt(8.0 / 3.0 + 1e-5);
  EXPECT_NEAR(y.data()[0], -2.0 * inv, 1e-6);
  EXPECT_NEAR(y.data()[1], 0.0, 1e-6);
  EXPECT_NEAR(y.data()[2], 2.0 * inv, 1e-6);
}

TEST(TensorTest, ShapeErrorsNameOpAndShapes) {
  const auto a = Tensor::zeros({2, 3});
  const auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
  EXPECT_THROW(parse_op_kind("conv2d"), UnsupportedOpError);
  EXPECT_THROW(hprune::apply(static_cast<OpKind>(999), std::vector<Tensor>{a}), UnsupportedOpError);
}

TEST(TensorTest, LeadingAxisBroadcast) {
  const auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto b = Tensor::from({1, 3}, {10, 20, 30});
  EXPECT_EQ(vec(add(a, b)), (std::vector<float>{11, 22, 33, 14, 25, 36}));
  EXPECT_EQ(vec(add(Tensor::from({3}, {10, 20, 30}), a)), (std::vector<float>{11, 22, 33, 14, 25, 36}));
  // Broadcasting on a trailing axis is not supported.
  EXPECT_THROW(add(a, Tensor::zeros({2, 1})), DimensionError);
}

TEST(TensorTest, BackwardOfSum) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  Tape tape;
  TapeScope scope(tape);
  backward(sum(x));
  EXPECT_EQ(vec_grad(x), (std::vector<float>{1, 1, 1}));
}

TEST(TensorTest, BackwardOfSquare) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  Tape tape;
  TapeScope scope(tape);
  backward(sum(mul(x, x)));
  EXPECT_EQ(vec_grad(x), (std::vector<float>{2, 4, 6}));
}

TEST(TensorTest, BackwardErrors) {
  Tape tape;
  TapeScope scope(tape);
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(tape.backward(mul(x, x)), ContractError);
  EXPECT_THROW(tape.backward(Tensor::scalar(1.0f)), NoGraphError);
  Tape other;
  Tensor foreign;
  {
    TapeScope inner(other);
    foreign = sum(x);
  }
  EXPECT_THROW(tape.backward(foreign), NoGraphError);
}

TEST(TensorTest, BackwardVisitsEachRecordOnceAndConsumesTape) {
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  Tape tape;
  TapeScope scope(tape);
  const auto loss = mean(gelu(matmul(x, x)));
  const std::size_t n = tape.size();
  EXPECT_EQ(n, 3u);
  tape.backward(loss);
  EXPECT_EQ(tape.last_visit_count(), n);
  EXPECT_EQ(tape.size(), 0u);
}

TEST(TensorTest, MseMatmulMatchesFiniteDifferences) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = test::random_tensor(rng, {2, 2}, true);
    auto w = test::random_tensor(rng, {2, 2}, true);
    const auto y = test::random_tensor(rng, {2, 2});
    auto loss_at = [&](const Tensor& xv, const Tensor& wv) { return squared_error(matmul(xv, wv), y, 2).item(); };
    {
      Tape tape;
      TapeScope scope(tape);
      tape.backward(squared_error(matmul(x, w), y, 2));
    }
    const float h = 1e-3f;
    for (int which = 0; which < 2; ++which) {
      const Tensor& t = which == 0 ? x : w;
      std::vector<double> num(4);
      for (std::size_t e = 0; e < 4; ++e) {
        auto plus = vec(t), minus = vec(t);
        plus[e] += h;
        minus[e] -= h;
        const auto tp = Tensor::from({2, 2}, plus), tm = Tensor::from({2, 2}, minus);
        const double lp = which == 0 ? loss_at(tp, w) : loss_at(x, tp);
        const double lm = which == 0 ? loss_at(tm, w) : loss_at(x, tm);
        num[e] = (lp - lm) / (double(plus[e]) - double(minus[e]));
      }
      EXPECT_LT(test::max_rel_error(vec_grad(t), num), 1e-3);
    }
  }
}

TEST(TensorTest, GradCheckExamples) {
  Rng rng(3);
  const std::vector<Tensor> sm{test::random_tensor(rng, {4}, true)};
  EXPECT_TRUE(grad_check(OpKind::Softmax, sm, {}, 1e-3f, 1e-3).pass);
  const std::vector<Tensor> ln{test::random_tensor(rng, {8}, true)};
  EXPECT_TRUE(grad_check(OpKind::LayerNorm, ln, {}, 1e-3f, 1e-3).pass);

  const std::vector<Tensor> mm{test::random_tensor(rng, {2, 3}, true), test::random_tensor(rng, {3, 2}, false)};
  const auto report = grad_check(OpKind::MatMul, mm, {}, 1e-3f, 1e-3);
  EXPECT_TRUE(report.pass);
  ASSERT_EQ(report.max_rel_error.size(), 2u);
  EXPECT_TRUE(report.max_rel_error[0].has_value());
  EXPECT_FALSE(report.max_rel_error[1].has_value());
  EXPECT_THROW(grad_check(static_cast<OpKind>(77), mm, {}, 1e-3f, 1e-3), UnsupportedOpError);
}

// Every differentiable op kind, 100 random small instances each.
TEST(TensorProperty, AllOpsPassFiniteDifferenceCheck) {
  Rng rng(2024);
  for (auto kind : all_op_kinds()) {
    for (int trial = 0; trial < 100; ++trial) {
      const auto inst = test::random_instance(kind, rng);
      const auto report = grad_check(kind, inst.inputs, inst.attrs, 1e-3f, 1e-3);
      ASSERT_TRUE(report.pass) << op_name(kind) << " trial " << trial << " err " << report.max_rel_error[0].value_or(-1) << " shape " << shape_str(inst.inputs[0].shape());
    }
  }
}

TEST(TensorProperty, ApplyIsDeterministic) {
  Rng rng(5);
  for (auto kind : all_op_kinds()) {
    const auto inst = test::random_instance(kind, rng);
    const auto a = hprune::apply(kind, inst.inputs, inst.attrs);
    const auto b = hprune::apply(kind, inst.inputs, inst.attrs);
    EXPECT_EQ(vec(a), vec(b)) << op_name(kind);
  }
}

TEST(TensorProperty, SoftmaxRowsAreDistributions) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 1 + rng.index(4), cols = 1 + rng.index(9);
    std::vector<float> d(rows * cols);
    for (auto& v : d) v = rng.normal() * 10.0f;
    const auto y = softmax(Tensor::from({rows, cols}, d));
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        EXPECT_GE(y.data()[r * cols + c], 0.0f);
        s += y.data()[r * cols + c];
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(TensorProperty, AdjointsAreLinear) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = test::random_tensor(rng, {3, 4}, true);
    const auto w = test::random_tensor(rng, {4, 2});
    auto l1 = [&] { return sum(gelu(matmul(x, w))); };
    auto l2 = [&] { return mean(mul(x, x)); };
    std::vector<float> g1, g2, g12;
    {
      Tape tape;
      TapeScope s(tape);
      tape.backward(l1());
    }
    g1 = vec_grad(x);
    x.zero_grad();
    {
      Tape tape;
      TapeScope s(tape);
      tape.backward(l2());
    }
    g2 = vec_grad(x);
    x.zero_grad();
    {
      Tape tape;
      TapeScope s(tape);
      tape.backward(add(l1(), l2()));
    }
    g12 = vec_grad(x);
    x.zero_grad();
    for (std::size_t i = 0; i < g12.size(); ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-6);
  }
}

TEST(TensorTest, NoRecordingWithoutTapeOrGradInputs) {
  auto p = Tensor::from({2}, {1, 2}, true);
  const auto y = mul(p, p);  // no active tape
  EXPECT_NO_THROW(p.mutable_data()[0] = 3.0f);
  Tape tape;
  TapeScope scope(tape);
  const auto c = Tensor::from({2}, {1, 2});
  mul(c, c);
  EXPECT_EQ(tape.size(), 0u);
  const auto r = mul(p, c);
  EXPECT_EQ(tape.size(), 1u);
  EXPECT_THROW(const_cast<Tensor&>(r).mutable_data(), ContractError);
  (void)y;
}

TEST(TensorTest, CheckedOutputsRejectNonFinite) {
  const auto big = Tensor::from({1}, {3e38f});
  EXPECT_NO_THROW(scale(big, 10.0f));
  set_checked_outputs(true);
  EXPECT_THROW(scale(big, 10.0f), ContractError);
  set_checked_outputs(false);
}

TEST(TensorTest, MacCounter) {
  auto& counter = matmul_mac_counter();
  const auto before = counter;
  matmul(Tensor::zeros({3, 4}), Tensor::zeros({4, 5}));
  EXPECT_EQ(counter - before, 60u);
}
