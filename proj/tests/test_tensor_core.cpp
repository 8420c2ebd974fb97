#include <cmath>
#include <cstring>

#include "lcanet/testing/self_test.hpp"
#include "test_util.hpp"

using namespace lcanet;
using lcanet::test::randn;
using lcanet::test::randu;

namespace {

double max_diff(const Tensor& a, const Tensor& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

// ---- conv2d ---------------------------------------------------------------

TEST(Conv2d, IdentityKernel) {
  const Tensor x = randn({1, 1, 3, 3}, 1);
  const Tensor w({1, 1, 1, 1}, 1.0f);
  EXPECT_TRUE(test::bit_equal(conv2d(x, w), x));
}

TEST(Conv2d, ZeroWeightGivesZero) {
  const Tensor x = randn({2, 3, 6, 5}, 2);
  const Tensor y = conv2d(x, Tensor({4, 3, 3, 3}), {}, 1, 1);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, MatchesQuadrupleLoop) {
  const Tensor x = randn({1, 2, 5, 5}, 3), w = randn({3, 2, 3, 3}, 4), b = randn({3}, 5);
  const Tensor y = conv2d(x, w, b, 1, 1);
  const auto ref = oracle::conv2d(oracle::Grid::from(x), oracle::Grid::from(w), test::as_doubles(b), 1, 1);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 5, 5}));
  EXPECT_LT(oracle::max_abs_diff(ref, y), 1e-5);
}

TEST(Conv2d, StrideAndPaddingShape) {
  const Tensor y = conv2d(randn({2, 3, 9, 7}, 1), randn({4, 3, 3, 3}, 2), {}, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 4, 5, 4}));
}

TEST(Conv2d, LinearInInputAndWeight) {
  const Tensor x = randn({1, 3, 6, 6}, 6), z = randn({1, 3, 6, 6}, 7), w = randn({2, 3, 3, 3}, 8);
  const Tensor v = randn({2, 3, 3, 3}, 9);
  const double a = 0.7, b = -1.3;
  const Tensor lhs = conv2d(add(scale(x, a), scale(z, b)), w, {}, 1, 1);
  const Tensor rhs = add(scale(conv2d(x, w, {}, 1, 1), a), scale(conv2d(z, w, {}, 1, 1), b));
  EXPECT_LT(max_diff(lhs, rhs), 1e-5);
  const Tensor lhs_w = conv2d(x, add(scale(w, a), scale(v, b)), {}, 1, 1);
  const Tensor rhs_w = add(scale(conv2d(x, w, {}, 1, 1), a), scale(conv2d(x, v, {}, 1, 1), b));
  EXPECT_LT(max_diff(lhs_w, rhs_w), 1e-5);
}

TEST(Conv2d, ChannelMismatchIsShapeError) {
  try {
    conv2d(randn({1, 3, 5, 5}, 1), randn({2, 4, 3, 3}, 2));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
}

TEST(Conv2d, KernelLargerThanPaddedInputRejected) {
  EXPECT_THROW(conv2d(randn({1, 1, 2, 2}, 1), randn({1, 1, 5, 5}, 2)), ShapeError);
}

// ---- resampling -----------------------------------------------------------

TEST(BilinearResize, SameSizeIsIdentity) {
  const Tensor x = randn({2, 3, 5, 7}, 10);
  EXPECT_TRUE(test::bit_equal(bilinear_resize(x, 5, 7), x));
}

TEST(BilinearResize, ConstantStaysConstant) {
  const Tensor x({1, 2, 4, 6}, 0.37f);
  for (auto [h, w] : {std::pair{1, 1}, {3, 11}, {16, 9}})
    for (float v : test::values(bilinear_resize(x, h, w))) EXPECT_FLOAT_EQ(v, 0.37f);
}

TEST(BilinearResize, RampMatchesPerPixelOracle) {
  Tensor x({1, 1, 4, 4});
  for (int y = 0; y < 4; ++y)
    for (int c = 0; c < 4; ++c) x.at(0, 0, y, c) = float(y * 4 + c);
  const auto ref = oracle::bilinear_resize(oracle::Grid::from(x), 8, 8);
  EXPECT_LT(oracle::max_abs_diff(ref, bilinear_resize(x, 8, 8)), 1e-6);
}

TEST(BilinearResize, NoOvershoot) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor x = randn({1, 2, 5, 6}, s);
    const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
    for (float v : test::values(bilinear_resize(x, 13, 4))) {
      EXPECT_GE(v, *lo);
      EXPECT_LE(v, *hi);
    }
  }
}

TEST(BilinearResize, ZeroTargetRejected) { EXPECT_ANY_THROW(bilinear_resize(randn({1, 1, 4, 4}, 1), 0, 4)); }

TEST(CropResize, FullBoxIsIdentity) {
  const Tensor x = randn({1, 3, 6, 5}, 11);
  EXPECT_TRUE(test::bit_equal(crop_resize(x, BBox::full(6, 5), 6, 5), x));
}

TEST(CropResize, SinglePixelBoxIsConstant) {
  const Tensor x = randn({1, 2, 6, 6}, 12);
  const Tensor y = crop_resize(x, BBox{3, 2, 3, 2}, 4, 5);
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 5; ++j) EXPECT_EQ(y.at(0, c, i, j), x.at(0, c, 2, 3));
}

TEST(CropResize, LeftHalfMatchesComposedOracle) {
  Tensor x({1, 1, 8, 8});
  for (int y = 0; y < 8; ++y)
    for (int c = 0; c < 8; ++c) x.at(0, 0, y, c) = float(3 * y + c);
  const BBox left{0, 0, 3, 7};
  // Crop the sub-image explicitly, then resize it with the plain oracle.
  oracle::Grid sub(1, 1, 8, 4);
  for (int y = 0; y < 8; ++y)
    for (int c = 0; c < 4; ++c) sub(0, 0, y, c) = x.at(0, 0, y, c);
  EXPECT_LT(oracle::max_abs_diff(oracle::bilinear_resize(sub, 4, 4), crop_resize(x, left, 4, 4)), 1e-6);
}

TEST(CropResize, BoxOutsideImageRejected) {
  EXPECT_THROW(crop_resize(randn({1, 1, 4, 4}, 1), BBox{5, 5, 7, 7}, 2, 2), BoxOutOfImage);
}

// ---- pooling, activations, concat -----------------------------------------

TEST(GlobalAvgPool, Examples) {
  for (float v : test::values(global_avg_pool(Tensor({2, 3, 4, 5}, 2.5f)))) EXPECT_FLOAT_EQ(v, 2.5f);
  const Tensor x({1, 1, 2, 2}, std::vector<float>{0, 1, 2, 3});
  EXPECT_FLOAT_EQ(global_avg_pool(x).item(), 1.5f);
}

TEST(GlobalAvgPool, MatchesNaiveMean) {
  const Tensor x = randn({2, 3, 5, 7}, 13);
  const Tensor y = global_avg_pool(x);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 1, 1}));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double acc = 0;
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 7; ++j) acc += x.at(n, c, i, j);
      EXPECT_NEAR(y.at(n, c, 0, 0), acc / 35.0, 1e-6);
    }
}

TEST(MaxPool, PicksWindowMaximum) {
  const Tensor x({1, 1, 2, 4}, std::vector<float>{1, 5, -1, 0, 3, 2, -2, -3});
  const Tensor y = max_pool2x2(x);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 2}));
  EXPECT_EQ(y[0], 5.0f);
  EXPECT_EQ(y[1], 0.0f);
}

TEST(Activation, Examples) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0f)).item(), 0.5f);
  EXPECT_EQ(relu(Tensor::scalar(-3.0f)).item(), 0.0f);
  EXPECT_EQ(relu(Tensor::scalar(2.0f)).item(), 2.0f);
  for (float v : test::values(sigmoid(randn({100}, 3, 10.0)))) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Activation, SigmoidGradientMatchesClosedForm) {
  Tensor x = randn({50}, 14, 2.0);
  x.set_requires_grad();
  backward(sum(sigmoid(x)));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-double(x[i])));
    EXPECT_NEAR(x.grad()[i], s * (1 - s), 1e-6);
  }
}

TEST(ConcatChannels, SingleInputIsIdentity) {
  const Tensor x = randn({2, 3, 4, 4}, 15);
  EXPECT_TRUE(test::bit_equal(concat_channels<float>({x}), x));
}

TEST(ConcatChannels, OrderingAndSliceBack) {
  const Tensor a = randn({2, 1, 3, 3}, 16), b = randn({2, 2, 3, 3}, 17), c = randn({2, 3, 3, 3}, 18);
  const Tensor y = concat_channels<float>({a, b, c});
  ASSERT_EQ(y.shape(), (Shape{2, 6, 3, 3}));
  EXPECT_TRUE(test::bit_equal(slice_channels(y, 0, 1), a));
  EXPECT_TRUE(test::bit_equal(slice_channels(y, 1, 2), b));
  EXPECT_TRUE(test::bit_equal(slice_channels(y, 3, 3), c));
}

TEST(ConcatChannels, SpatialMismatchRejected) {
  EXPECT_THROW(concat_channels<float>({randn({1, 1, 3, 3}, 1), randn({1, 1, 3, 4}, 2)}), ShapeError);
}

// ---- sobel ---------------------------------------------------------------

TEST(Sobel, ConstantImageHasNoEdges) {
  // Zero padding makes the border respond, so only the interior is edge-free.
  const Tensor y = sobel_magnitude(Tensor({1, 1, 6, 6}, 0.8f));
  for (int i = 1; i < 5; ++i)
    for (int j = 1; j < 5; ++j) EXPECT_NEAR(y.at(0, 0, i, j), 0.0f, 1e-6);
  const Tensor z = sobel_magnitude(Tensor({1, 1, 6, 6}, 0.0f));
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Sobel, VerticalStepPeaksNextToTheStep) {
  Tensor x({1, 1, 8, 8});
  for (int i = 0; i < 8; ++i)
    for (int j = 4; j < 8; ++j) x.at(0, 0, i, j) = 1.0f;
  const Tensor y = sobel_magnitude(x);
  for (int i = 1; i < 7; ++i) {
    EXPECT_GT(y.at(0, 0, i, 3), 0.5f);
    EXPECT_FLOAT_EQ(y.at(0, 0, i, 3), y.at(0, 0, i, 4));
    EXPECT_EQ(y.at(0, 0, i, 1), 0.0f);
    EXPECT_EQ(y.at(0, 0, i, 6), 0.0f);
  }
}

TEST(Sobel, MatchesStencilOracleAndStaysInUnitRange) {
  const Tensor x = randu({1, 1, 6, 6}, 19);
  const Tensor y = sobel_magnitude(x);
  EXPECT_LT(oracle::max_abs_diff(oracle::sobel(oracle::Grid::from(x)), y), 1e-6);
  for (float v : y.data()) EXPECT_LE(v, 1.0f);
}

TEST(Sobel, MultiChannelRejected) { EXPECT_THROW(sobel_magnitude(randn({1, 2, 4, 4}, 1)), ShapeError); }

// ---- autodiff --------------------------------------------------------------

TEST(Backward, SumGivesOnes) {
  Tensor w = randn({3, 4}, 20);
  w.set_requires_grad();
  backward(sum(w));
  for (float g : w.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, SquareGivesTwoW) {
  Tensor w = randn({7}, 21);
  w.set_requires_grad();
  backward(sum(mul(w, w)));
  for (std::size_t i = 0; i < w.numel(); ++i) EXPECT_FLOAT_EQ(w.grad()[i], 2 * w[i]);
}

TEST(Backward, GradientsAccumulateUntilZeroed) {
  Tensor w = randn({5}, 22);
  w.set_requires_grad();
  backward(sum(w));
  backward(sum(w));
  for (float g : w.grad()) EXPECT_EQ(g, 2.0f);
  w.zero_grad();
  backward(sum(w));
  for (float g : w.grad()) EXPECT_EQ(g, 1.0f);
}

TEST(Backward, NonScalarRejected) {
  Tensor w = randn({3}, 1);
  w.set_requires_grad();
  EXPECT_THROW(backward(mul(w, w)), ShapeError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor w = randn({3}, 1);
  w.set_requires_grad();
  NoGradGuard guard;
  EXPECT_FALSE(sum(w).requires_grad());
}

TEST(Backward, ConvSigmoidBceCompositeMatchesFiniteDifferences) {
  Rng rng(23, 0);
  using D = BasicTensor<double>;
  D x = random_normal<double>({1, 1, 4, 4}, rng);
  D w = random_normal<double>({1, 1, 3, 3}, rng, 0.5);
  D b = random_normal<double>({1}, rng);
  D t({1, 1, 4, 4});
  for (std::size_t i = 0; i < t.numel(); i += 3) t[i] = 1.0;
  w.set_requires_grad();
  b.set_requires_grad();
  x.set_requires_grad();
  auto fn = [&] { return mean(bce_map(sigmoid(conv2d(x, w, b, 1, 1)), t)); };
  GradCheckOptions opt;
  opt.eps = 1e-3;
  const auto rep = grad_check<double>(fn, {{"x", x}, {"w", w}, {"b", b}}, opt);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  EXPECT_LT(rep.max_rel_error, 1e-3);
}

// ---- grad_check itself -----------------------------------------------------

TEST(GradCheck, LinearFunctionIsExactToRoundoff) {
  Rng rng(24, 0);
  BasicTensor<double> w = random_normal<double>({10}, rng);
  const BasicTensor<double> c = random_normal<double>({10}, rng);
  w.set_requires_grad();
  const auto rep = grad_check<double>([&] { return sum(mul(w, c)); }, {{"w", w}});
  EXPECT_TRUE(rep.passed);
  EXPECT_LT(rep.max_rel_error, 1e-9);
}

TEST(GradCheck, SigmoidChainPasses) {
  Rng rng(25, 0);
  BasicTensor<double> w = random_normal<double>({12}, rng);
  w.set_requires_grad();
  GradCheckOptions opt;
  opt.eps = 1e-3;
  opt.tol = 1e-3;
  const auto rep = grad_check<double>([&] { return mean(sigmoid(sigmoid(w))); }, {{"w", w}}, opt);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(GradCheck, CorruptedGradientFails) {
  BasicTensor<double> w({8});
  Rng rng(26, 0);
  w = random_normal<double>({8}, rng);
  w.set_requires_grad();
  detail::sigmoid_grad_scale() = 2.0;
  const auto rep = grad_check<double>([&] { return sum(sigmoid(w)); }, {{"w", w}});
  detail::sigmoid_grad_scale() = 1.0;
  EXPECT_FALSE(rep.passed);
  EXPECT_GT(rep.max_rel_error, 0.4);
}

TEST(GradCheck, NonFiniteValueReportedWithLocation) {
  BasicTensor<double> w({3}, 1.0);
  w.set_requires_grad();
  const auto rep = grad_check<double>(
      [&] { return sum(mul(w, BasicTensor<double>({3}, std::vector<double>{1, NAN, 1}))); }, {{"w", w}});
  EXPECT_FALSE(rep.passed);
  ASSERT_EQ(rep.entries.size(), 1u);
  EXPECT_FALSE(rep.entries[0].finite);
  EXPECT_EQ(rep.entries[0].failure, "w[0]");  // first probe that saw the NaN
}

// Every differentiable op over two seeds; the acceptance runner repeats this with ten.
class OpGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(OpGradients, MatchCentralDifferences) {
  for (const auto& gc : lcanet::testing::grad_cases()) {
    if (gc.name != GetParam()) continue;
    const auto out = lcanet::testing::run_grad_case(gc, 2);
    EXPECT_TRUE(out.passed) << out.detail;
    return;
  }
  FAIL() << "no gradient case " << GetParam();
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradients, ::testing::ValuesIn([] {
                           std::vector<std::string> names;
                           for (const auto& gc : lcanet::testing::grad_cases()) names.push_back(gc.name);
                           return names;
                         }()));

// ---- determinism and formats ------------------------------------------------

TEST(Determinism, OpsAreBitReproducible) {
  auto run = [] {
    const Tensor x = randn({2, 3, 8, 8}, 27), w = randn({4, 3, 3, 3}, 28);
    return bilinear_resize(sigmoid(conv2d(x, w, {}, 1, 1)), 16, 16);
  };
  EXPECT_TRUE(test::bit_equal(run(), run()));
}

TEST(RandomStreams, SameSeedSameDraws) {
  Rng a(5, 9), b(5, 9), c(5, 10);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const double x = a.normal();
    EXPECT_EQ(x, b.normal());
    differs = differs || x != c.normal();
  }
  EXPECT_TRUE(differs);
}

TEST(TensorFormat, RoundTripIsBitExactAndSizedByFormula) {
  const auto dir = test::scratch_dir();
  for (const Shape& shape : {Shape{7}, Shape{3, 4}, Shape{2, 3, 5}, Shape{2, 3, 4, 5}}) {
    Tensor t = randn(shape, shape.size());
    t[0] = -0.0f;
    t[t.numel() - 1] = std::numeric_limits<float>::denorm_min();
    const auto path = dir / ("t" + std::to_string(shape.size()) + ".ten");
    save_tensor(path, t);
    EXPECT_TRUE(test::bit_equal(load_tensor<float>(path), t));
    EXPECT_EQ(std::filesystem::file_size(path), 4 + 4 + 4 * shape.size() + 4 * t.numel());
    const std::string bytes = test::slurp(path);
    EXPECT_EQ(bytes.substr(0, 4), "LCAT");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]), shape.size());  // little-endian rank
  }
}

TEST(TensorFormat, BadMagicAndTruncationRejected) {
  const auto dir = test::scratch_dir();
  save_tensor(dir / "a.ten", randn({4}, 1));
  std::string bytes = test::slurp(dir / "a.ten");
  std::ofstream(dir / "bad.ten", std::ios::binary) << "XXXX" + bytes.substr(4);
  EXPECT_THROW(load_tensor<float>(dir / "bad.ten"), FormatError);
  std::ofstream(dir / "short.ten", std::ios::binary) << bytes.substr(0, bytes.size() - 2);
  EXPECT_THROW(load_tensor<float>(dir / "short.ten"), FormatError);
}

TEST(CheckpointFormat, RoundTripAndLayout) {
  const auto dir = test::scratch_dir();
  ParameterSet<float> ps(3);
  ps.add_conv("a.conv", 2, 3, 3);
  ps.add("b", randn({5}, 2));
  save_checkpoint(dir / "m.lcam", ps);
  const std::string bytes = test::slurp(dir / "m.lcam");
  EXPECT_EQ(bytes.substr(0, 4), "LCAM");
  std::size_t expected = 8;
  for (const auto& p : ps.all()) expected += 2 + p.name.size() + 8 + 4 * p.tensor.rank() + 4 * p.tensor.numel();
  EXPECT_EQ(bytes.size(), expected);

  ParameterSet<float> other(99);
  other.add_conv("a.conv", 2, 3, 3);
  other.add("b", Tensor({5}));
  load_checkpoint(dir / "m.lcam", other);
  for (const auto& p : ps.all()) EXPECT_TRUE(test::bit_equal(other[p.name], p.tensor));
}

TEST(CheckpointFormat, MismatchedModelRejected) {
  const auto dir = test::scratch_dir();
  ParameterSet<float> ps(3);
  ps.add("w", randn({4}, 1));
  save_checkpoint(dir / "m.lcam", ps);
  ParameterSet<float> wrong_shape;
  wrong_shape.add("w", Tensor({5}));
  EXPECT_THROW(load_checkpoint(dir / "m.lcam", wrong_shape), FormatError);
  ParameterSet<float> wrong_name;
  wrong_name.add("v", Tensor({4}));
  EXPECT_THROW(load_checkpoint(dir / "m.lcam", wrong_name), FormatError);
}

TEST(Parameters, NamesAreUniqueAndMomentumMatchesShape) {
  ParameterSet<float> ps(1);
  ps.add_conv("c", 2, 2, 3);
  EXPECT_ANY_THROW(ps.add("c.w", Tensor({1})));
  for (const auto& p : ps.all()) {
    EXPECT_TRUE(p.tensor.requires_grad());
    EXPECT_EQ(p.momentum.size(), p.tensor.numel());
  }
}
