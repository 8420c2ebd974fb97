#include <algorithm>
#include <cmath>
#include <functional>

#include "test_util.hpp"

using namespace lcanet;
using lcanet::test::randu;

namespace {

double bce_pixel(double p, double t) {
  p = std::clamp(p, 1e-7, 1.0 - 1e-7);
  return -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
}

double bce_oracle(const Tensor& pred, const Tensor& target) {
  double s = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) s += bce_pixel(pred[i], target[i]);
  return s / pred.numel();
}

Tensor binary_mask(Shape shape, std::uint64_t seed) {
  Tensor t = randu(std::move(shape), seed);
  for (auto& v : t.data()) v = v > 0.5f ? 1.0f : 0.0f;
  return t;
}

Tensor square_mask(int h, int w, int r0, int r1, int c0, int c1) {
  Tensor t({1, 1, h, w});
  for (int r = r0; r < r1; ++r)
    for (int c = c0; c < c1; ++c) t[std::size_t(r) * w + c] = 1.0f;
  return t;
}

ForwardOutputs<float> random_outputs(std::uint64_t seed) {
  ForwardOutputs<float> out;
  out.coarse = randu({2, 1, 16, 16}, seed, 0.01, 0.99);
  out.refined = randu({2, 1, 16, 16}, seed + 1, 0.01, 0.99);
  return out;
}

}  // namespace

TEST(Bce, FairCoinIsLn2) {
  const Tensor half = Tensor::full({1, 1, 8, 8}, 0.5f);
  EXPECT_NEAR(bce_loss(half, half).item(), std::log(2.0), 1e-6);
}

TEST(Bce, ExactPredictionHitsTheClampFloor) {
  // -log(1 - 1e-7) ~= 1e-7 per pixel; float rounding of the clamp bound lifts it slightly.
  const Tensor t = binary_mask({1, 1, 16, 16}, 1);
  const double floor = bce_loss(t, t).item();
  EXPECT_GT(floor, 0.0);
  EXPECT_LT(floor, 2e-6);
}

TEST(Bce, MatchesPerPixelOracle) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor p = randu({2, 1, 9, 7}, seed, 0.0, 1.0);
    const Tensor t = randu({2, 1, 9, 7}, seed + 100, 0.0, 1.0);
    EXPECT_NEAR(bce_loss(p, t).item(), bce_oracle(p, t), 1e-6);
  }
}

TEST(Bce, ShapeMismatchRejected) {
  EXPECT_THROW(bce_loss(Tensor({1, 1, 4, 4}), Tensor({1, 1, 4, 5})), ShapeError);
}

TEST(Ohem, FullKeepIsBitIdenticalToBce) {
  const Tensor p = randu({2, 1, 16, 16}, 2, 0.01, 0.99);
  const Tensor t = binary_mask({2, 1, 16, 16}, 3);
  EXPECT_TRUE(test::bit_equal(ohem_bce(p, t, 1.0, 0), bce_loss(p, t)));
  EXPECT_TRUE(test::bit_equal(ohem_bce(p, t, 1.0, 256), bce_loss(p, t)));
}

TEST(Ohem, SelectsTheHardestPixel) {
  const Tensor t = square_mask(16, 16, 4, 12, 4, 12);
  Tensor p = t.clone();
  p[5 * 16 + 5] = 0.2f;  // one confidently wrong foreground pixel
  const double single = bce_pixel(0.2, 1.0);
  EXPECT_NEAR(ohem_bce(p, t, 1.0 / 256, 1).item(), single, 1e-5);
  EXPECT_LT(bce_loss(p, t).item(), single / 100);
}

TEST(Ohem, MatchesFullSortOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Tensor p = randu({1, 1, 20, 20}, seed + 10, 0.0, 1.0);
    const Tensor t = binary_mask({1, 1, 20, 20}, seed + 20);
    const double keep = 0.05 + 0.09 * seed;
    std::vector<double> losses;
    for (std::size_t i = 0; i < p.numel(); ++i) losses.push_back(bce_pixel(p[i], t[i]));
    std::sort(losses.begin(), losses.end(), std::greater<>());
    const std::size_t k = std::max<std::size_t>({std::size_t(std::floor(keep * 400)), 30, 1});
    double s = 0;
    for (std::size_t i = 0; i < k; ++i) s += losses[i];
    EXPECT_NEAR(ohem_bce(p, t, keep, 30).item(), s / k, 1e-5) << "keep " << keep;
  }
}

TEST(Ohem, KeepCountRule) {
  EXPECT_EQ(ohem_keep_count(1000, 0.5, 256), 500u);
  EXPECT_EQ(ohem_keep_count(1000, 0.1, 256), 256u);
  EXPECT_EQ(ohem_keep_count(100, 0.5, 256), 100u);
  EXPECT_EQ(ohem_keep_count(10, 0.01, 0), 1u);
}

TEST(BoundaryLoss, FlatMapsSitAtTheFloor) {
  const Tensor zero({1, 1, 16, 16});
  EXPECT_LT(boundary_loss(zero, zero, 0.3).item(), 2e-6);
}

TEST(BoundaryLoss, NonZeroConstantOnlyRespondsAtTheBorder) {
  // Zero padding turns the image border into a step.
  const Tensor c = Tensor::full({1, 1, 16, 16}, 0.3f);
  const Tensor mag = sobel_magnitude(c);
  for (int r = 1; r < 15; ++r)
    for (int col = 1; col < 15; ++col) EXPECT_EQ(mag[std::size_t(r) * 16 + col], 0.0f);
  EXPECT_GT(boundary_loss(c, Tensor({1, 1, 16, 16}), 0.3).item(), 1e-3);
}

TEST(BoundaryLoss, MatchingStepBeatsAShiftedStep) {
  const Tensor t = square_mask(16, 16, 4, 12, 4, 12);
  const Tensor edges = edge_target(t, 0.3);
  for (int c = 0; c < 16; ++c) {
    const bool edge = c == 3 || c == 4 || c == 11 || c == 12;
    EXPECT_EQ(edges[8 * 16 + c], edge ? 1.0f : 0.0f) << "column " << c;
  }
  const double matched = boundary_loss(t, t, 0.3).item();
  const double shifted = boundary_loss(square_mask(16, 16, 5, 13, 6, 14), t, 0.3).item();
  EXPECT_LT(matched, shifted / 3);
}

TEST(BoundaryLoss, EqualsComposedSobelAndBce) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor p = randu({2, 1, 12, 12}, seed + 30, 0.0, 1.0);
    const Tensor t = square_mask(12, 12, 2, 9, 3, 10);
    const Tensor t2 = concat_batch(std::vector<Tensor>{t, t});
    const Tensor sp = sobel_magnitude(p), st = sobel_magnitude(t2);
    double s = 0;
    for (std::size_t i = 0; i < p.numel(); ++i)
      s += bce_pixel(std::clamp<double>(sp[i], 1e-7, 1 - 1e-7), st[i] > 0.3f ? 1.0 : 0.0);
    EXPECT_NEAR(boundary_loss(p, t2, 0.3).item(), s / p.numel(), 1e-5);
  }
}

TEST(TotalLoss, SingleTermWeighting) {
  LossConfig cfg;
  cfg.lambda[0] = 1;
  cfg.lambda[1] = cfg.lambda[2] = cfg.lambda[3] = 0;
  const auto out = random_outputs(40);
  const auto br = total_loss(out, binary_mask({2, 1, 16, 16}, 41), cfg);
  EXPECT_EQ(br.total, br.l_cs);
  EXPECT_FLOAT_EQ(br.objective.item(), static_cast<float>(br.l_cs));
}

TEST(TotalLoss, AllZeroWeightsRejected) {
  LossConfig cfg;
  for (double& l : cfg.lambda) l = 0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  EXPECT_THROW(total_loss(random_outputs(42), binary_mask({2, 1, 16, 16}, 43), cfg), std::invalid_argument);
  cfg.lambda[2] = -1;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(TotalLoss, EqualsHandWeightedComponents) {
  const LossConfig cfg;  // (1, 1, 0.5, 0.5)
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto out = random_outputs(50 + 2 * seed);
    const Tensor t = binary_mask({2, 1, 16, 16}, 60 + seed);
    const auto br = total_loss(out, t, cfg);
    const double cs = ohem_bce(out.coarse, t, 0.5, 256).item();
    const double rf = ohem_bce(out.refined, t, 0.5, 256).item();
    const double cb = boundary_loss(out.coarse, t, 0.3).item();
    const double rb = boundary_loss(out.refined, t, 0.3).item();
    EXPECT_EQ(br.l_cs, cs);
    EXPECT_EQ(br.l_rf, rf);
    EXPECT_EQ(br.l_cs_bd, cb);
    EXPECT_EQ(br.l_rf_bd, rb);
    EXPECT_EQ(br.total, cs + rf + 0.5 * cb + 0.5 * rb);
    EXPECT_NEAR(br.objective.item(), br.total, 1e-5 * br.total);
    for (double v : {br.l_cs, br.l_rf, br.l_cs_bd, br.l_rf_bd}) {
      EXPECT_GE(v, 0.0);
      EXPECT_TRUE(std::isfinite(v));
    }
  }
}

TEST(TotalLoss, CoarseOnlyOutputsLeaveRefinedTermsAtZero) {
  ForwardOutputs<float> out;
  out.coarse = randu({1, 1, 16, 16}, 70, 0.01, 0.99);
  const auto br = total_loss(out, binary_mask({1, 1, 16, 16}, 71), LossConfig{});
  EXPECT_EQ(br.l_rf, 0.0);
  EXPECT_EQ(br.l_rf_bd, 0.0);
  EXPECT_EQ(br.total, br.l_cs + 0.5 * br.l_cs_bd);
}

TEST(PolyLr, Examples) {
  OptimizerConfig cfg;
  cfg.base_lr = 0.02;
  cfg.max_iter = 1000;
  EXPECT_EQ(poly_lr(0, cfg), 0.02);
  EXPECT_EQ(poly_lr(1000, cfg), 0.0);
  EXPECT_EQ(poly_lr(1500, cfg), 0.0);
  EXPECT_NEAR(poly_lr(500, cfg), 0.02 * std::exp(0.9 * std::log(0.5)), 1e-15);
  for (int i = 1; i <= 1000; ++i) EXPECT_LE(poly_lr(i, cfg), poly_lr(i - 1, cfg));
}

TEST(Sgd, PlainGradientStep) {
  ParameterSet<double> ps(0);
  ps.add("w", BasicTensor<double>({3}, {1.0, -2.0, 0.5}));
  ps["w"].grad_buffer();
  ps["w"].grad()[0] = 0.5;
  ps["w"].grad()[1] = -1.0;
  ps["w"].grad()[2] = 2.0;
  sgd_update(ps, 0.1, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(ps["w"][0], 0.95);
  EXPECT_DOUBLE_EQ(ps["w"][1], -1.9);
  EXPECT_DOUBLE_EQ(ps["w"][2], 0.3);
  for (double g : ps["w"].grad()) EXPECT_EQ(g, 0.0);
}

TEST(Sgd, ZeroGradientIsAFixedPointFromRest) {
  ParameterSet<double> ps(0);
  ps.add("w", BasicTensor<double>({2}, {0.7, -0.3}));
  for (int i = 0; i < 5; ++i) {
    ps["w"].grad_buffer();
    sgd_update(ps, 0.1, 0.9, 0.0);
  }
  EXPECT_EQ(ps["w"][0], 0.7);
  EXPECT_EQ(ps["w"][1], -0.3);
}

TEST(Sgd, MissingGradientRejected) {
  ParameterSet<double> ps(0);
  ps.add("w", BasicTensor<double>({2}));
  EXPECT_THROW(sgd_update(ps, 0.1, 0.9, 0.0), std::logic_error);
}

TEST(Sgd, HeavyBallRecurrenceOnAQuadratic) {
  // f(w) = a/2 w^2, g = a w.
  const double a = 3.0, lr = 0.05, m = 0.9, wd = 1e-3;
  ParameterSet<double> ps(0);
  ps.add("w", BasicTensor<double>({1}, {2.0}));
  double w = 2.0, v = 0.0;
  for (int step = 0; step < 5; ++step) {
    auto loss = scale(mul(ps["w"], ps["w"]), a / 2);
    backward(sum(loss));
    sgd_update(ps, lr, m, wd);
    v = m * v + (a * w + wd * w);
    w -= lr * v;
    EXPECT_NEAR(ps["w"][0], w, 1e-14) << "step " << step;
  }
}

TEST(Overfit, TwoHundredStepsOnAFixedBatchCutTheLossTenfold) {
  const Dataset& ds = test::tiny_dataset();
  std::vector<Sample> items;
  for (int i = 0; i < 4; ++i) items.push_back(normalized(ds.samples[i], ds.stats.mean));
  const Batch batch = stack_batch(items);

  RunConfig cfg = test::small_run(200);
  auto params = build_parameters<float>(cfg.model, cfg.seed);
  double first = 0, last = 0;
  for (int iter = 0; iter < 200; ++iter) {
    auto br = total_loss(model_forward(batch.images, cfg.model, params), batch.masks, cfg.loss);
    if (iter == 0) first = br.total;
    last = br.total;
    backward(br.objective);
    fill_missing_grads(params);
    sgd_update(params, poly_lr(iter, cfg.optim), cfg.optim.momentum, cfg.optim.weight_decay);
  }
  RecordProperty("first_loss", std::to_string(first));
  RecordProperty("last_loss", std::to_string(last));
  // The 4x4 coarse head cannot draw a 64x64 mask; its OHEM and boundary terms alone stay near 0.37.
  std::printf("overfit: step 0 loss %.4f, step 199 loss %.4f, ratio %.2f\n", first, last, first / last);
  EXPECT_LE(last * 10, first);
}
