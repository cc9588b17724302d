#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>

#include "test_util.hpp"

namespace attnet {
namespace {

using testing::naive_conv2d;
using testing::naive_matmul;
using testing::random_parameter;
using testing::random_tensor;

TEST(Tensor, ShapeAndDataLengthAgree) {
  Tensor t = Tensor::zeros({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor::from({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
}

TEST(Tensor, GradHasDataShape) {
  Tensor p = Tensor::parameter({3, 2}, {1, 2, 3, 4, 5, 6});
  ASSERT_TRUE(p.has_grad());
  EXPECT_EQ(p.grad().size(), p.size());
}

TEST(Tensor, ItemNeedsSingleValue) {
  EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_THROW(Tensor::zeros({2}).item(), ContractError);
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Rng rng(1);
  Tensor b = random_tensor(rng, {3, 2});
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tape tape;
  Tensor out = tape.matmul(eye, b);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(out[i], b[i]);
}

TEST(Matmul, ZeroOperandGivesZeros) {
  Rng rng(2);
  Tape tape;
  Tensor out = tape.matmul(Tensor::zeros({2, 3}), random_tensor(rng, {3, 4}));
  ASSERT_EQ(out.shape(), (Shape{2, 4}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor(rng, {4, 5}), b = random_tensor(rng, {5, 3});
    Tape tape;
    Tensor out = tape.matmul(a, b);
    const auto expect = naive_matmul(a, b);
    for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape;
  try {
    tape.matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 5}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(shape_str({2, 3})), std::string::npos) << msg;
    EXPECT_NE(msg.find(shape_str({4, 5})), std::string::npos) << msg;
  }
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  Rng rng(4);
  Tensor x = random_tensor(rng, {7, 6, 1});
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  Tape tape;
  Tensor out = tape.conv2d(x, Tensor::from({3, 3, 1, 1}, k), Padding::same);
  ASSERT_EQ(out.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(out[i], x[i]);
}

TEST(Conv2d, ZeroKernelGivesZeros) {
  Rng rng(5);
  Tape tape;
  Tensor out = tape.conv2d(random_tensor(rng, {5, 5, 2}), Tensor::zeros({3, 3, 2, 3}), Padding::same);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2d, MatchesNaiveLoops) {
  Rng rng(6);
  for (Padding pad : {Padding::same, Padding::valid}) {
    for (std::size_t stride : {1u, 2u, 3u}) {
      Tensor x = random_tensor(rng, {8, 8, 2}), k = random_tensor(rng, {3, 3, 2, 4});
      Tape tape;
      Tensor out = tape.conv2d(x, k, pad, stride);
      const auto expect = naive_conv2d(x, k, pad == Padding::same, stride);
      ASSERT_EQ(out.size(), expect.size());
      for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
    }
  }
}

TEST(Conv2d, SamePaddingOutputIsCeilOfInputOverStride) {
  Tape tape;
  for (std::size_t h : {5u, 6u, 7u, 8u}) {
    for (std::size_t s : {1u, 2u, 3u}) {
      Tensor out = tape.conv2d(Tensor::zeros({h, h + 1, 1}), Tensor::zeros({3, 3, 1, 2}), Padding::same, s);
      EXPECT_EQ(out.dim(0), (h + s - 1) / s);
      EXPECT_EQ(out.dim(1), (h + 1 + s - 1) / s);
    }
  }
}

TEST(Conv2d, Errors) {
  Tape tape;
  EXPECT_THROW(tape.conv2d(Tensor::zeros({4, 4, 2}), Tensor::zeros({3, 3, 3, 1}), Padding::same), DimensionError);
  EXPECT_THROW(tape.conv2d(Tensor::zeros({4, 4, 1}), Tensor::zeros({2, 2, 1, 1}), Padding::same), ContractError);
  EXPECT_THROW(tape.conv2d(Tensor::zeros({4, 4, 1}), Tensor::zeros({3, 3, 1, 1}), Padding::same, 0), ContractError);
}

TEST(MaxPool, MatchesNaiveLoops) {
  Rng rng(7);
  Tensor x = random_tensor(rng, {6, 8, 3});
  Tape tape;
  Tensor out = tape.max_pool2d(x);
  const auto expect = testing::naive_max_pool({x.data().begin(), x.data().end()}, 6, 8, 3);
  for (std::size_t i = 0; i < expect.size(); ++i) EXPECT_EQ(out[i], expect[i]);
  EXPECT_THROW(tape.max_pool2d(Tensor::zeros({5, 4, 1})), DimensionError);
}

TEST(Elementwise, SpecExamples) {
  Tape tape;
  Tensor r = tape.relu(Tensor::from({3}, {-1.0, 0.0, 2.0}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(r[2], 2.0);
  EXPECT_EQ(tape.sigmoid(Tensor::scalar(0.0))[0], 0.5);
  Rng rng(8);
  Tensor x = random_tensor(rng, {2, 3});
  Tensor y = tape.add(x, Tensor::zeros({2, 3}));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(y[i], x[i]);
  EXPECT_THROW(tape.add(x, Tensor::zeros({3, 2})), DimensionError);
  EXPECT_THROW(tape.mul(x, Tensor::zeros({6})), DimensionError);
}

TEST(Elementwise, ReluSubgradientAtZeroIsZero) {
  Tensor x = Tensor::parameter({3}, {-1.0, 0.0, 2.0});
  Tape tape;
  tape.backward(tape.sum(tape.relu(x)));
  EXPECT_EQ(x.grad()[0], 0.0);
  EXPECT_EQ(x.grad()[1], 0.0);
  EXPECT_EQ(x.grad()[2], 1.0);
}

TEST(Elementwise, SigmoidIsFiniteAtExtremes) {
  Tape tape;
  Tensor s = tape.sigmoid(Tensor::from({2}, {-800.0, 800.0}));
  EXPECT_TRUE(s.all_finite());
  EXPECT_EQ(s[0], 0.0);
  EXPECT_EQ(s[1], 1.0);
}

// Extended-precision reference for the masked softmax.
std::vector<long double> softmax_oracle(const Tensor& logits, const CellMask& ex, double t) {
  long double total = 0.0L;
  std::vector<long double> out(logits.size(), 0.0L);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!ex[i]) total += std::exp(static_cast<long double>(logits[i]) / t);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!ex[i]) out[i] = std::exp(static_cast<long double>(logits[i]) / t) / total;
  }
  return out;
}

CellMask random_mask(Rng& rng, std::size_t n, double p_excluded) {
  CellMask m(n);
  for (auto& v : m) v = rng.uniform() < p_excluded ? 1 : 0;
  m[rng.below(n)] = 0;
  return m;
}

TEST(MaskedSoftmax, UniformLogitsGiveUniformProbabilities) {
  Tape tape;
  Tensor p = tape.masked_softmax(Tensor::zeros({14, 14}), CellMask(196, 0), 1.0);
  for (double v : p.data()) EXPECT_NEAR(v, 1.0 / 196.0, 1e-15);
}

TEST(MaskedSoftmax, SingleAdmissibleCellGetsAllMass) {
  Rng rng(9);
  CellMask ex(25, 1);
  ex[2 * 5 + 2] = 0;
  Tape tape;
  Tensor p = tape.masked_softmax(random_tensor(rng, {5, 5}), ex, 1.0);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(p[i], i == 12 ? 1.0 : 0.0);
}

TEST(MaskedSoftmax, MatchesExtendedPrecisionFormula) {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor logits = random_tensor(rng, {6, 7}, -5.0, 5.0);
    const CellMask ex = random_mask(rng, 42, 0.4);
    const double t = rng.uniform(0.25, 4.0);
    Tape tape;
    Tensor p = tape.masked_softmax(logits, ex, t);
    Tensor lp = tape.masked_log_softmax(logits, ex, t);
    const auto ref = softmax_oracle(logits, ex, t);
    double total = 0.0;
    for (std::size_t i = 0; i < 42; ++i) {
      EXPECT_NEAR(p[i], static_cast<double>(ref[i]), 1e-15);
      if (ex[i]) {
        EXPECT_EQ(p[i], 0.0);
        EXPECT_EQ(lp[i], 0.0);
      } else {
        EXPECT_NEAR(lp[i], static_cast<double>(std::log(ref[i])), 1e-12);
      }
      total += p[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(MaskedSoftmax, InvariantUnderConstantShift) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor logits = random_tensor(rng, {4, 4});
    const CellMask ex = random_mask(rng, 16, 0.3);
    const double c = rng.uniform(-50.0, 50.0);
    std::vector<double> shifted(logits.data().begin(), logits.data().end());
    for (std::size_t i = 0; i < 16; ++i) {
      if (!ex[i]) shifted[i] += c;
    }
    Tape tape;
    Tensor a = tape.masked_softmax(logits, ex, 1.0);
    Tensor b = tape.masked_softmax(Tensor::from({4, 4}, shifted), ex, 1.0);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  }
}

TEST(MaskedSoftmax, Errors) {
  Tape tape;
  EXPECT_THROW(tape.masked_softmax(Tensor::zeros({2, 2}), CellMask(4, 1), 1.0), ExhaustedLocationsError);
  EXPECT_THROW(tape.masked_softmax(Tensor::zeros({2, 2}), CellMask(4, 0), 0.0), ContractError);
  EXPECT_THROW(tape.masked_softmax(Tensor::zeros({2, 2}), CellMask(3, 0), 1.0), DimensionError);
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::parameter({2, 3, 2}, std::vector<double>(12, 0.7));
  Tape tape;
  tape.backward(tape.sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, FanOutAccumulatesAdditively) {
  Tensor x = Tensor::parameter({3}, {1.0, -2.0, 0.5});
  Tape tape;
  // loss = Σ x·x + Σ 3x → grad = 2x + 3
  tape.backward(tape.add(tape.sum(tape.mul(x, x)), tape.sum(tape.scale(x, 3.0))));
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -1.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 4.0);
}

TEST(Backward, GradientsAccumulateAcrossTapes) {
  Tensor x = Tensor::parameter({2}, {1.0, 2.0});
  for (int i = 0; i < 3; ++i) {
    Tape tape;
    tape.backward(tape.sum(x));
  }
  EXPECT_EQ(x.grad()[0], 3.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Backward, UnusedParameterKeepsZeroGrad) {
  Tensor used = Tensor::parameter({2}, {1.0, 2.0});
  Tensor unused = Tensor::parameter({2}, {3.0, 4.0});
  Tape tape;
  tape.backward(tape.sum(tape.sigmoid(used)));
  for (double g : unused.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, SigmoidOfDotMatchesFiniteDifferences) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor w = random_parameter(rng, {1, 6}), x = random_parameter(rng, {6, 1});
    auto loss = [&](Tape& t) { return t.sum(t.sigmoid(t.matmul(w, x))); };
    const auto r = gradcheck(loss, {{"w", w}, {"x", x}});
    EXPECT_TRUE(r.passed) << r.max_rel_error;
    EXPECT_LT(r.max_rel_error, 1e-6);
  }
}

TEST(Backward, ClearsTapeAndRejectsBadLoss) {
  Tensor x = Tensor::parameter({2}, {1.0, 2.0});
  Tape tape;
  Tensor y = tape.scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
  Tensor s = tape.sum(y);
  EXPECT_GT(tape.size(), 0u);
  tape.backward(s);
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_THROW(tape.backward(s), ContractError);
  Tape other;
  EXPECT_THROW(other.backward(other.sum(Tensor::zeros({2}))), ContractError);
}

TEST(Tape, RecordsInTopologicalOrderOnlyWhenNeeded) {
  Tensor p = Tensor::parameter({2, 2}, {1, 2, 3, 4});
  Tensor c = Tensor::from({2, 2}, {1, 1, 1, 1});
  Tape tape;
  tape.add(c, c);  // no parameter involved
  EXPECT_EQ(tape.size(), 0u);
  tape.sum(tape.relu(tape.matmul(p, c)));
  EXPECT_EQ(tape.kinds(), (std::vector<OpKind>{OpKind::matmul, OpKind::relu, OpKind::sum}));
  Tape inference = Tape::inference();
  inference.sum(inference.relu(p));
  EXPECT_EQ(inference.size(), 0u);
}

TEST(Tape, ForwardAndBackwardAreBitDeterministic) {
  auto run = [] {
    Rng rng(13);
    Tensor x = random_tensor(rng, {6, 6, 2});
    Tensor k = random_parameter(rng, {3, 3, 2, 3});
    Tape tape;
    Tensor y = tape.sum(tape.sigmoid(tape.max_pool2d(tape.conv2d(x, k, Padding::same))));
    tape.backward(y);
    std::vector<double> out{y.item()};
    out.insert(out.end(), k.grad().begin(), k.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

// Every differentiable op against central differences on inputs in [-2, 2],
// over 100 seeded trials each. Each output component is checked on its own,
// so every Jacobian entry is compared.
struct OpCase {
  const char* name;
  std::function<Tensor(Tape&, const std::vector<Tensor>&, Rng&)> build;
  std::vector<Shape> inputs;
};

class OpGradient : public ::testing::TestWithParam<int> {};

std::vector<OpCase> op_cases() {
  return {
      {"matmul", [](Tape& t, const auto& in, Rng&) { return t.matmul(in[0], in[1]); }, {{3, 4}, {4, 2}}},
      {"conv2d_same",
       [](Tape& t, const auto& in, Rng&) { return t.conv2d(in[0], in[1], Padding::same); },
       {{5, 5, 2}, {3, 3, 2, 2}}},
      {"conv2d_valid_stride2",
       [](Tape& t, const auto& in, Rng&) { return t.conv2d(in[0], in[1], Padding::valid, 2); },
       {{7, 7, 2}, {3, 3, 2, 3}}},
      {"conv2d_same_stride2",
       [](Tape& t, const auto& in, Rng&) { return t.conv2d(in[0], in[1], Padding::same, 2); },
       {{6, 5, 1}, {3, 3, 1, 2}}},
      {"max_pool2d", [](Tape& t, const auto& in, Rng&) { return t.max_pool2d(in[0]); }, {{4, 6, 2}}},
      {"relu", [](Tape& t, const auto& in, Rng&) { return t.relu(in[0]); }, {{3, 5}}},
      {"sigmoid", [](Tape& t, const auto& in, Rng&) { return t.sigmoid(in[0]); }, {{3, 5}}},
      {"add", [](Tape& t, const auto& in, Rng&) { return t.add(in[0], in[1]); }, {{2, 3}, {2, 3}}},
      {"mul", [](Tape& t, const auto& in, Rng&) { return t.mul(in[0], in[1]); }, {{2, 3}, {2, 3}}},
      {"scale", [](Tape& t, const auto& in, Rng&) { return t.scale(in[0], -1.7); }, {{4}}},
      {"add_bias", [](Tape& t, const auto& in, Rng&) { return t.add_bias(in[0], in[1]); }, {{3, 4}, {4}}},
      {"sum", [](Tape& t, const auto& in, Rng&) { return t.sum(in[0]); }, {{2, 2, 3}}},
      {"reshape", [](Tape& t, const auto& in, Rng&) { return t.reshape(in[0], {6, 2}); }, {{3, 4}}},
      {"crop", [](Tape& t, const auto& in, Rng&) { return t.crop(in[0], 1, 2, 3, 2); }, {{5, 5, 2}}},
      {"pick", [](Tape& t, const auto& in, Rng&) { return t.pick(in[0], 7); }, {{3, 4}}},
      {"masked_softmax",
       [](Tape& t, const auto& in, Rng& rng) {
         return t.masked_softmax(in[0], random_mask(rng, 20, 0.3), rng.uniform(0.5, 2.0));
       },
       {{4, 5}}},
      {"masked_log_softmax",
       [](Tape& t, const auto& in, Rng& rng) {
         return t.masked_log_softmax(in[0], random_mask(rng, 20, 0.3), rng.uniform(0.5, 2.0));
       },
       {{4, 5}}},
      {"bce",
       [](Tape& t, const auto& in, Rng& rng) { return t.bce(t.sigmoid(in[0]), rng.below(2) ? 1.0 : 0.0); },
       {{1}}},
  };
}

TEST_P(OpGradient, MatchesCentralDifferences) {
  const OpCase c = op_cases()[GetParam()];
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(1000 + GetParam(), trial));
    std::vector<Tensor> inputs;
    std::vector<NamedTensor> named;
    for (std::size_t i = 0; i < c.inputs.size(); ++i) {
      inputs.push_back(random_parameter(rng, c.inputs[i]));
      named.push_back({"in" + std::to_string(i), inputs.back()});
    }
    const std::uint64_t op_seed = rng.next_u64();
    std::size_t outputs = 0;
    {
      Tape probe = Tape::inference();
      Rng op_rng(op_seed);
      outputs = c.build(probe, inputs, op_rng).size();
    }
    for (std::size_t j = 0; j < outputs; ++j) {
      auto loss = [&](Tape& t) {
        Rng op_rng(op_seed);  // same mask/temperature on every evaluation
        return t.pick(c.build(t, inputs, op_rng), j);
      };
      worst = std::max(worst, gradcheck(loss, named).max_rel_error);
    }
  }
  EXPECT_LT(worst, 1e-6) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, static_cast<int>(op_cases().size())),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(Gradcheck, LinearFunctionIsNearlyExact) {
  Rng rng(14);
  Tensor x = random_parameter(rng, {10});
  Tensor a = random_tensor(rng, {10});
  const auto r = gradcheck([&](Tape& t) { return t.sum(t.mul(x, a)); }, {{"x", x}});
  EXPECT_LT(r.max_rel_error, 1e-9);
}

TEST(Gradcheck, CorruptedRuleIsReportedAsFailure) {
  Rng rng(15);
  Tensor x = random_parameter(rng, {5});
  const auto r = gradcheck([&](Tape& t) { return t.sum(t.sigmoid(x)); }, {{"x", x}}, {},
                           [](Tape& t) { t.corrupt_sigmoid_gradient(1.001); });
  EXPECT_FALSE(r.passed);
  ASSERT_EQ(r.blocks.size(), 1u);
  EXPECT_FALSE(r.blocks[0].passed);
}

TEST(Gradcheck, RestoresInputsAfterKinkShift) {
  Tensor x = Tensor::parameter({3}, {0.0, 1.0, -1.0});  // exactly on a relu kink
  const auto r = gradcheck([&](Tape& t) { return t.sum(t.relu(x)); }, {{"x", x}});
  EXPECT_TRUE(r.passed);
  EXPECT_GE(r.kink_shifts, 1);
  EXPECT_EQ(x[0], 0.0);
  EXPECT_EQ(x[1], 1.0);
}

TEST(Gradcheck, RelativeErrorUsesFloor) {
  EXPECT_EQ(relative_error(1.0, 1.1, 1e-6), (1.1 - 1.0) / 1.1);
  EXPECT_EQ(relative_error(0.0, 1e-9, 1e-6), 1e-9 / 1e-6);
}

}  // namespace
}  // namespace attnet
