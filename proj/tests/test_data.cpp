#include <cmath>
#include <fstream>

#include "test_util.hpp"

using namespace lcanet;
namespace fs = std::filesystem;

namespace {

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out << bytes;
}

Tensor quantised_image(int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed, 0);
  Tensor t({c, h, w});
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform_int(0, 255)) / 255.0f;
  return t;
}

bool is_binary(const Tensor& t) {
  for (float v : t.data())
    if (v != 0.0f && v != 1.0f) return false;
  return true;
}

}  // namespace

TEST(Netpbm, HandDecodedTwoByTwoFixture) {
  const std::string header = "P6\n2 2\n255\n";
  const unsigned char px[] = {0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0, 255};
  const Tensor img = decode_ppm(header + std::string(reinterpret_cast<const char*>(px), sizeof px));
  ASSERT_EQ(img.shape(), (Shape{3, 2, 2}));
  // channel-major: R plane, G plane, B plane
  const std::vector<float> expect{0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
  EXPECT_EQ(test::values(img), expect);
}

TEST(Netpbm, HeaderCommentsAndLowMaxval) {
  const std::string bytes = std::string("P5\n# made by hand\n3 1\n# another\n4\n") + '\0' + '\2' + '\4';
  const Tensor m = decode_pgm(bytes);
  EXPECT_EQ(test::values(m), (std::vector<float>{0.0f, 0.5f, 1.0f}));
}

TEST(Netpbm, TruncatedPayloadIsAParseErrorWithOffset) {
  const std::string bytes = "P6\n4 4\n255\n" + std::string(20, 'x');
  try {
    decode_ppm(bytes);
    FAIL() << "no error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), bytes.size());
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  const fs::path p = test::scratch_dir() / "short.ppm";
  write_bytes(p, "P6\n4 4\n25");
  EXPECT_THROW(read_ppm(p), ParseError);
}

TEST(Netpbm, MalformedHeadersRejected) {
  EXPECT_THROW(decode_ppm("P5\n1 1\n255\n\x01"), ParseError);
  EXPECT_THROW(decode_pgm("P5\nx 1\n255\n\x01"), ParseError);
  EXPECT_THROW(decode_pgm("P5\n1 1\n65535\n\x01\x01"), ParseError);
  EXPECT_THROW(decode_pgm(""), ParseError);
}

TEST(Netpbm, RoundTripsAreExact) {
  const fs::path dir = test::scratch_dir();
  const Tensor img = quantised_image(3, 7, 5, 1);
  write_ppm(dir / "a.ppm", img);
  EXPECT_TRUE(test::bit_equal(read_ppm(dir / "a.ppm"), img));
  const Tensor map = quantised_image(1, 4, 9, 2);
  write_pgm(dir / "a.pgm", map);
  EXPECT_TRUE(test::bit_equal(read_pgm(dir / "a.pgm"), map));
  EXPECT_EQ(fs::file_size(dir / "a.ppm"), std::string("P6\n5 7\n255\n").size() + 3 * 35);
}

TEST(Netpbm, LoadSampleBinarisesTheMask) {
  const fs::path dir = test::scratch_dir();
  const Tensor img = quantised_image(3, 4, 4, 3);
  Tensor mask({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) mask[i] = static_cast<float>(i) / 15.0f;
  write_ppm(dir / "x7.ppm", img);
  write_pgm(dir / "x7.pgm", mask);
  const Sample s = load_sample(dir / "x7.ppm", dir / "x7.pgm");
  EXPECT_EQ(s.id, "x7");
  EXPECT_TRUE(test::bit_equal(s.image, img));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(s.mask[i], i >= 8 ? 1.0f : 0.0f) << i;
  write_pgm(dir / "bad.pgm", Tensor({1, 3, 4}));
  EXPECT_THROW(load_sample(dir / "x7.ppm", dir / "bad.pgm"), ShapeError);
}

TEST(TensorFile, RoundTripAndByteCount) {
  const fs::path dir = test::scratch_dir();
  for (const Shape& s : {Shape{17}, Shape{2, 3, 4}}) {
    const Tensor t = test::randn(s, 4);
    write_tensor_file(dir / "t.ten", t);
    EXPECT_TRUE(test::bit_equal(read_tensor_file(dir / "t.ten"), t));
    EXPECT_EQ(fs::file_size(dir / "t.ten"), 4 + 4 + 4 * s.size() + 4 * t.numel());
  }
  write_bytes(dir / "bad.ten", "XXXX\0\0\0\0");
  EXPECT_THROW(read_tensor_file(dir / "bad.ten"), FormatError);
}

TEST(Generator, SameSeedGivesByteIdenticalFiles) {
  const fs::path a = test::scratch_dir() / "a", b = test::scratch_dir() / "b";
  gen_synthetic(a, 6, 64, 99);
  gen_synthetic(b, 6, 64, 99);
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path other = b / fs::relative(entry.path(), a);
    ASSERT_TRUE(fs::exists(other)) << other;
    EXPECT_EQ(test::slurp(entry.path()), test::slurp(other)) << entry.path();
  }
  std::ifstream manifest(a / "manifest.txt");
  int lines = 0;
  for (std::string l; std::getline(manifest, l);) lines += !l.empty();
  EXPECT_EQ(lines, 6);
}

TEST(Generator, SampleDependsOnlyOnSeedAndIndex) {
  const Sample direct = synth_sample(99, 4, 64);
  const fs::path dir = test::scratch_dir();
  gen_synthetic(dir, 5, 64, 99);
  const Sample loaded = load_sample(dir / "images" / "000004.ppm", dir / "masks" / "000004.pgm");
  EXPECT_TRUE(test::bit_equal(loaded.mask, direct.mask));
  EXPECT_FALSE(test::bit_equal(synth_sample(100, 4, 64).mask, direct.mask));
}

TEST(Generator, MasksAreBalancedAndBinary) {
  for (int i = 0; i < 60; ++i) {
    const Sample s = synth_sample(7, i, 64);
    EXPECT_TRUE(is_binary(s.mask)) << i;
    const std::size_t pos = count_positive(s.mask);
    EXPECT_GE(pos, 64u) << i;
    EXPECT_GE(s.mask.numel() - pos, 64u) << i;
  }
}

TEST(Generator, ReReadSamplesHaveColourContrast) {
  const fs::path dir = test::scratch_dir();
  gen_synthetic(dir, 40, 64, 5);
  const Dataset ds = load_dataset(dir);
  ASSERT_EQ(ds.size(), 40u);
  for (const auto& s : ds.samples) {
    double fg[3] = {0, 0, 0}, bg[3] = {0, 0, 0}, nf = 0, nb = 0;
    for (std::size_t i = 0; i < 64 * 64; ++i) {
      const bool f = s.mask[i] > 0.5f;
      (f ? nf : nb) += 1;
      for (int c = 0; c < 3; ++c) (f ? fg : bg)[c] += s.image[c * 4096 + i];
    }
    double best = 0;
    for (int c = 0; c < 3; ++c) best = std::max(best, std::abs(fg[c] / nf - bg[c] / nb));
    EXPECT_GE(best, 0.2) << s.id;
  }
}

TEST(Generator, RejectsBadSizes) {
  EXPECT_THROW(synth_sample(1, 0, 48), std::invalid_argument);
  EXPECT_THROW(gen_synthetic(test::scratch_dir(), 0, 64, 1), std::invalid_argument);
}

TEST(Stats, MeanMatchesNaiveAverageAndFileRoundTrip) {
  const Dataset& ds = test::tiny_dataset();
  double m[3] = {0, 0, 0}, n = 0;
  for (const auto& s : ds.samples) {
    for (std::size_t i = 0; i < s.mask.numel(); ++i)
      for (int c = 0; c < 3; ++c) m[c] += s.image[c * s.mask.numel() + i];
    n += s.mask.numel();
  }
  const DatasetStats st = compute_stats(ds.samples);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(st.mean[c], m[c] / n, 1e-9);
    EXPECT_NEAR(ds.stats.mean[c], st.mean[c], 1e-9);
  }
}

TEST(Augment, FlipIsAnInvolutionAndMirrorsColumns) {
  const Tensor t = quantised_image(3, 5, 6, 8);
  EXPECT_TRUE(test::bit_equal(hflip(hflip(t)), t));
  const Tensor f = hflip(t);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 6; ++x) EXPECT_EQ(f[(c * 5 + y) * 6 + x], t[(c * 5 + y) * 6 + 5 - x]);
}

TEST(Augment, ForcedFlipsTwiceRestoreTheSample) {
  const Sample& s = test::tiny_dataset().samples[0];
  AugmentConfig cfg;
  cfg.flip_prob = 1.0;
  cfg.scale_lo = cfg.scale_hi = 1.0;
  Rng rng(1, 0);
  const Sample once = augment(s, cfg, rng);
  const Sample twice = augment(once, cfg, rng);
  EXPECT_TRUE(test::bit_equal(twice.image, s.image));
  EXPECT_TRUE(test::bit_equal(twice.mask, s.mask));
  EXPECT_TRUE(test::bit_equal(once.mask, hflip(s.mask)));
}

TEST(Augment, IdentitySettingsOnlySubtractTheMean) {
  const Sample& s = test::tiny_dataset().samples[1];
  AugmentConfig cfg;
  cfg.flip_prob = 0.0;
  cfg.scale_lo = cfg.scale_hi = 1.0;
  cfg.mean = {0.25, 0.5, 0.125};
  Rng rng(2, 0);
  const Sample out = augment(s, cfg, rng);
  EXPECT_TRUE(test::bit_equal(out.mask, s.mask));
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 4096; ++i)
      EXPECT_EQ(out.image[c * 4096 + i], s.image[c * 4096 + i] - static_cast<float>(cfg.mean[c]));
}

TEST(Augment, CropsRetainHalfTheObjectOverAThousandDraws) {
  const Dataset& ds = test::tiny_dataset();
  Rng pick(3, 0);
  int worst_index = -1;
  double worst = 1.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const Sample& s = ds.samples[draw % ds.size()];
    AugmentConfig cfg;
    cfg.flip_prob = 0.5;
    cfg.scale_lo = cfg.scale_hi = pick.uniform(0.8, 1.2);
    Rng rng(1000 + draw, 0);
    const Sample out = augment(s, cfg, rng);
    ASSERT_EQ(out.mask.shape(), (Shape{1, 64, 64}));
    ASSERT_TRUE(is_binary(out.mask)) << draw;
    // Positive pixels of the rescaled, re-binarised mask before cropping.
    const int side = static_cast<int>(std::lround(64 * cfg.scale_lo));
    const Tensor scaled = bilinear_resize(reshape(s.mask, {1, 1, 64, 64}), side, side);
    std::size_t before = 0;
    for (float v : scaled.data()) before += v >= 0.5f;
    const double retention = static_cast<double>(count_positive(out.mask)) / static_cast<double>(before);
    if (retention < worst) {
      worst = retention;
      worst_index = draw;
    }
  }
  EXPECT_GE(worst, 0.5) << "draw " << worst_index;
}

TEST(Augment, ConfigValidation) {
  AugmentConfig cfg;
  cfg.scale_lo = 1.3;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = AugmentConfig{};
  cfg.flip_prob = 1.5;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Sampler, FixedSeedReproducesTheBatchSequence) {
  const Dataset& ds = test::tiny_dataset();
  BatchSampler a(ds, AugmentConfig{}, 42), b(ds, AugmentConfig{}, 42), c(ds, AugmentConfig{}, 43);
  bool any_difference = false;
  for (int step = 0; step < 6; ++step) {
    const Batch ba = a.next(3), bb = b.next(3), bc = c.next(3);
    EXPECT_EQ(ba.ids, bb.ids);
    EXPECT_TRUE(test::bit_equal(ba.images, bb.images));
    EXPECT_TRUE(test::bit_equal(ba.masks, bb.masks));
    EXPECT_TRUE(is_binary(ba.masks));
    any_difference = any_difference || !test::bit_equal(ba.images, bc.images);
  }
  EXPECT_TRUE(any_difference);
}

TEST(Sampler, EpochsVisitEverySampleOnce) {
  const Dataset& ds = test::tiny_dataset();
  BatchSampler s(ds, AugmentConfig{}, 5, false);
  std::vector<std::string> seen;
  for (int i = 0; i < 4; ++i)
    for (const auto& id : s.next(2).ids) seen.push_back(id);
  std::sort(seen.begin(), seen.end());
  std::vector<std::string> all;
  for (const auto& x : ds.samples) all.push_back(x.id);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(seen, all);
}

TEST(Sampler, StackBatchRejectsMixedSizes) {
  const Sample a{Tensor({3, 8, 8}), Tensor({1, 8, 8}), "a"}, b{Tensor({3, 8, 16}), Tensor({1, 8, 16}), "b"};
  EXPECT_THROW(stack_batch({a, b}), ShapeError);
  EXPECT_THROW(stack_batch({}), std::invalid_argument);
}
