#pragma once

// Synthetic saliency samples, PPM/PGM image I/O, training augmentation and
// batch assembly.
//
// Dataset directory layout:
//   images/<id>.ppm   binary P6, maxval 255
//   masks/<id>.pgm    binary P5, 0 or 255
//   manifest.txt      one id per line
//   stats.txt         "mean r g b" over all image pixels

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "lcanet/ops.hpp"
#include "lcanet/random.hpp"
#include "lcanet/serialize.hpp"
#include "lcanet/tensor.hpp"

namespace lcanet {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct Sample {
  Tensor image;  // 3 x H x W in [0, 1]
  Tensor mask;   // 1 x H x W, exactly 0 or 1
  std::string id;
};

inline constexpr std::size_t kMinMaskPixels = 64;

inline std::size_t count_positive(const Tensor& mask) {
  return static_cast<std::size_t>(std::count_if(mask.data().begin(), mask.data().end(), [](float v) { return v > 0.5f; }));
}

/// At least kMinMaskPixels positive and negative pixels.
inline bool mask_is_balanced(const Tensor& mask) {
  const std::size_t pos = count_positive(mask);
  return pos >= kMinMaskPixels && mask.numel() - pos >= kMinMaskPixels;
}

// ---------------------------------------------------------------------------
// Netpbm

namespace detail {

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

struct PnmHeader {
  int width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::string& bytes, const char* magic) {
  PnmHeader h;
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0)
    throw ParseError(std::string("expected magic ") + magic, 0);
  pos = 2;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_int = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    long v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos])) && v < 1'000'000)
      v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw ParseError(std::string("expected ") + what, start);
    if (v < 1) throw ParseError(std::string(what) + " must be positive", start);
    return static_cast<int>(v);
  };
  h.width = read_int("width");
  h.height = read_int("height");
  h.maxval = read_int("maxval");
  if (h.maxval > 255) throw ParseError("only 8-bit maxval is supported", pos);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw ParseError("expected whitespace after maxval", pos);
  h.data_offset = pos + 1;
  return h;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Tensor decode_pnm(const std::string& bytes, const char* magic, int channels) {
  const PnmHeader h = parse_pnm_header(bytes, magic);
  const std::size_t plane = static_cast<std::size_t>(h.width) * h.height;
  const std::size_t need = plane * channels;
  if (bytes.size() - h.data_offset < need)
    throw ParseError("truncated payload: expected " + std::to_string(need) + " bytes", bytes.size());
  Tensor out({channels, h.height, h.width});
  auto d = out.data();
  const auto* px = reinterpret_cast<const unsigned char*>(bytes.data() + h.data_offset);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < channels; ++c) d[c * plane + i] = static_cast<float>(px[i * channels + c]) / h.maxval;
  return out;
}

inline void write_pnm(const std::filesystem::path& path, const Tensor& t, const char* magic, int channels) {
  if (t.rank() != 3 || t.dim(0) != channels)
    throw ShapeError(std::string("write ") + magic + ": expected " + std::to_string(channels) + "xHxW, got " +
                     shape_str(t.shape()));
  const int h = t.dim(1), w = t.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::string bytes = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  const std::size_t header = bytes.size();
  bytes.resize(header + plane * channels);
  auto d = t.data();
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < channels; ++c) bytes[header + i * channels + c] = static_cast<char>(to_byte(d[c * plane + i]));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace detail

inline Tensor decode_ppm(const std::string& bytes) { return detail::decode_pnm(bytes, "P6", 3); }
inline Tensor decode_pgm(const std::string& bytes) { return detail::decode_pnm(bytes, "P5", 1); }
inline Tensor read_ppm(const std::filesystem::path& path) { return decode_ppm(detail::read_file(path)); }
inline Tensor read_pgm(const std::filesystem::path& path) { return decode_pgm(detail::read_file(path)); }

/// 3 x H x W in [0, 1], quantised to 8 bits.
inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  detail::write_pnm(path, image, "P6", 3);
}

/// 1 x H x W (or H x W) in [0, 1], quantised to 8 bits.
inline void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  if (map.rank() == 2) {
    NoGradGuard guard;
    return detail::write_pnm(path, reshape(map.detach(), {1, map.dim(0), map.dim(1)}), "P5", 1);
  }
  detail::write_pnm(path, map, "P5", 1);
}

inline Sample load_sample(const std::filesystem::path& image_path, const std::filesystem::path& mask_path) {
  Sample s;
  s.image = read_ppm(image_path);
  s.mask = read_pgm(mask_path);
  if (s.mask.dim(1) != s.image.dim(1) || s.mask.dim(2) != s.image.dim(2))
    throw ShapeError("load_sample: mask " + shape_str(s.mask.shape()) + " does not match image " +
                     shape_str(s.image.shape()));
  for (auto& v : s.mask.data()) v = v >= 0.5f ? 1.0f : 0.0f;
  s.id = image_path.stem().string();
  return s;
}

/// Tensor file I/O in the ".ten" format.
inline void write_tensor_file(const std::filesystem::path& path, const Tensor& t) { save_tensor(path, t); }
inline Tensor read_tensor_file(const std::filesystem::path& path) { return load_tensor<float>(path); }

// ---------------------------------------------------------------------------
// Synthetic generator

namespace detail {

/// g x g random colours bilinearly upsampled to H x W, per channel.
inline std::vector<double> low_frequency(Rng& rng, int h, int w, int g) {
  std::vector<double> base(3 * g * g);
  for (auto& v : base) v = rng.uniform();
  const AxisTaps ty = make_taps(0, g - 1, h), tx = make_taps(0, g - 1, w);
  std::vector<double> out(3 * h * w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        auto at = [&](int r, int k) { return base[(c * g + r) * g + k]; };
        const double fy = ty.frac[y], fx = tx.frac[x];
        const double top = at(ty.first[y], tx.first[x]) * (1 - fx) + at(ty.first[y], tx.second[x]) * fx;
        const double bot = at(ty.second[y], tx.first[x]) * (1 - fx) + at(ty.second[y], tx.second[x]) * fx;
        out[(c * h + y) * w + x] = top * (1 - fy) + bot * fy;
      }
  return out;
}

inline std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& m, int h, int w) {
  std::vector<std::uint8_t> d = m;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!m[y * w + x]) continue;
      if (y > 0) d[(y - 1) * w + x] = 1;
      if (y + 1 < h) d[(y + 1) * w + x] = 1;
      if (x > 0) d[y * w + x - 1] = 1;
      if (x + 1 < w) d[y * w + x + 1] = 1;
    }
  return d;
}

/// Largest per-channel |mean(fg) - mean(bg)|.
inline double max_contrast(const Tensor& image, const Tensor& mask) {
  const std::size_t plane = mask.numel();
  double best = 0.0;
  for (int c = 0; c < 3; ++c) {
    double fg = 0, bg = 0;
    std::size_t nf = 0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = image.data()[c * plane + i];
      if (mask.data()[i] > 0.5f) {
        fg += v;
        ++nf;
      } else {
        bg += v;
      }
    }
    if (nf == 0 || nf == plane) return 0.0;
    best = std::max(best, std::abs(fg / nf - bg / (plane - nf)));
  }
  return best;
}

}  // namespace detail

inline constexpr double kMinContrast = 0.2;

/**
 * One synthetic sample, a pure function of (seed, index): smooth noisy
 * background plus 1-3 non-overlapping textured ellipses, rectangles or
 * three-lobed blobs whose colour is pushed away from the local background.
 * Draws that come out too small, too large or too low in contrast are redrawn.
 */
inline Sample synth_sample(std::uint64_t seed, int index, int size) {
  if (size < 32 || size % 32 != 0) throw std::invalid_argument("gen_synthetic: size must be a positive multiple of 32");
  Rng rng(seed, static_cast<std::uint64_t>(index));
  const int h = size, w = size;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const double margin = size * 10.0 / 64.0, rmin = size * 5.0 / 64.0, rmax = size * 16.0 / 64.0;
  char id[32];
  std::snprintf(id, sizeof id, "%06d", index);
  for (;;) {
    std::vector<double> bg = detail::low_frequency(rng, h, w, 4);
    for (auto& v : bg) v = 0.25 + 0.3 * v + rng.normal(0.0, 0.03);
    std::vector<double> img = bg;
    std::vector<std::uint8_t> mask(plane, 0);
    const int shapes = rng.uniform_int(1, 3);
    for (int s = 0; s < shapes; ++s) {
      std::vector<std::uint8_t> m(plane, 0);
      bool placed = false;
      for (int attempt = 0; attempt < 20 && !placed; ++attempt) {
        const int kind = rng.uniform_int(0, 2);
        const double cy = rng.uniform(margin, h - margin), cx = rng.uniform(margin, w - margin);
        const double ry = rng.uniform(rmin, rmax), rx = rng.uniform(rmin, rmax);
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const double dy = (y - cy) / ry, dx = (x - cx) / rx;
            bool in = false;
            if (kind == 0) {
              in = dy * dy + dx * dx <= 1.0;
            } else if (kind == 1) {
              in = std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
            } else {
              const double ang = std::atan2(y - cy, x - cx);
              in = std::sqrt(dy * dy + dx * dx) <= 1.0 + 0.25 * std::sin(3.0 * ang + phase);
            }
            m[y * w + x] = in;
          }
        const auto grown = detail::dilate(mask, h, w);
        placed = true;
        for (std::size_t i = 0; i < plane && placed; ++i) placed = !(m[i] && grown[i]);
      }
      if (!placed) continue;
      std::size_t area = 0;
      double local[3] = {0, 0, 0};
      for (std::size_t i = 0; i < plane; ++i)
        if (m[i]) {
          ++area;
          for (int c = 0; c < 3; ++c) local[c] += bg[c * plane + i];
        }
      if (area == 0) continue;
      double color[3];
      for (int c = 0; c < 3; ++c) {
        local[c] /= area;
        const double shift = rng.uniform(0.3, 0.5);
        color[c] = std::clamp(local[c] > 0.5 ? local[c] - shift : local[c] + shift, 0.0, 1.0);
      }
      const int texture = rng.uniform_int(0, 2);
      const double freq = rng.uniform(0.3, 0.8), dir = rng.uniform(0.0, M_PI);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const std::size_t i = static_cast<std::size_t>(y) * w + x;
          if (!m[i]) continue;
          double tex;
          if (texture == 0) tex = 0.1 * std::sin(freq * (x * std::cos(dir) + y * std::sin(dir)));
          else if (texture == 1) tex = ((x / 3 + y / 3) % 2) ? 0.1 : -0.1;
          else tex = rng.normal(0.0, 0.08);
          for (int c = 0; c < 3; ++c) img[c * plane + i] = color[c] + tex;
          mask[i] = 1;
        }
    }
    Sample sample;
    sample.id = id;
    sample.image = Tensor({3, h, w});
    sample.mask = Tensor({1, h, w});
    // Quantise here so the in-memory sample equals what the files hold.
    for (std::size_t i = 0; i < 3 * plane; ++i)
      sample.image.data()[i] = detail::to_byte(static_cast<float>(img[i])) / 255.0f;
    for (std::size_t i = 0; i < plane; ++i) sample.mask.data()[i] = mask[i];
    if (mask_is_balanced(sample.mask) && detail::max_contrast(sample.image, sample.mask) >= kMinContrast)
      return sample;
  }
}

struct DatasetStats {
  std::array<double, 3> mean{0, 0, 0};
};

inline DatasetStats compute_stats(const std::vector<Sample>& samples) {
  DatasetStats st;
  double count = 0;
  for (const auto& s : samples) {
    const std::size_t plane = s.mask.numel();
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) st.mean[c] += s.image.data()[c * plane + i];
    count += static_cast<double>(plane);
  }
  if (count > 0)
    for (auto& m : st.mean) m /= count;
  return st;
}

inline void write_stats(const std::filesystem::path& path, const DatasetStats& st) {
  std::ofstream out(path);
  char buf[128];
  std::snprintf(buf, sizeof buf, "mean %.9g %.9g %.9g\n", st.mean[0], st.mean[1], st.mean[2]);
  out << buf;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

inline DatasetStats read_stats(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::string key;
  DatasetStats st;
  if (!(in >> key >> st.mean[0] >> st.mean[1] >> st.mean[2]) || key != "mean")
    throw std::runtime_error("malformed stats file " + path.string());
  return st;
}

/// Writes `count` samples plus manifest and stats into `dir`; returns the ids.
inline std::vector<std::string> gen_synthetic(const std::filesystem::path& dir, int count, int size,
                                              std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (count < 1) throw std::invalid_argument("gen_synthetic: count must be positive");
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + dir.string() + ": " + ec.message());
  std::vector<Sample> samples;
  std::vector<std::string> ids;
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  for (int i = 0; i < count; ++i) {
    Sample s = synth_sample(seed, i, size);
    write_ppm(dir / "images" / (s.id + ".ppm"), s.image);
    write_pgm(dir / "masks" / (s.id + ".pgm"), s.mask);
    manifest << s.id << '\n';
    ids.push_back(s.id);
    samples.push_back(std::move(s));
  }
  write_stats(dir / "stats.txt", compute_stats(samples));
  return ids;
}

struct Dataset {
  std::filesystem::path dir;
  std::vector<Sample> samples;
  DatasetStats stats;

  std::size_t size() const { return samples.size(); }
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.dir = dir;
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("missing " + (dir / "manifest.txt").string());
  std::string id;
  while (std::getline(manifest, id)) {
    if (id.empty()) continue;
    ds.samples.push_back(load_sample(dir / "images" / (id + ".ppm"), dir / "masks" / (id + ".pgm")));
    ds.samples.back().id = id;
  }
  if (ds.samples.empty()) throw std::runtime_error("empty dataset " + dir.string());
  ds.stats = std::filesystem::exists(dir / "stats.txt") ? read_stats(dir / "stats.txt") : compute_stats(ds.samples);
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double flip_prob = 0.5;
  double scale_lo = 0.8, scale_hi = 1.2;
  int crop_h = 64, crop_w = 64;
  std::array<double, 3> mean{0, 0, 0};
  double min_retention = 0.5;
  int crop_tries = 10;

  void validate() const {
    if (!(flip_prob >= 0 && flip_prob <= 1)) throw std::invalid_argument("augment.flip_prob must be in [0, 1]");
    if (!(scale_lo > 0 && scale_lo <= scale_hi)) throw std::invalid_argument("augment.scale_range must be 0 < lo <= hi");
    if (crop_h < 1 || crop_w < 1) throw std::invalid_argument("augment.crop must be positive");
  }
};

inline Tensor hflip(const Tensor& t) {
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor out({c, h, w});
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.data()[(static_cast<std::size_t>(k) * h + y) * w + x] = t.data()[(static_cast<std::size_t>(k) * h + y) * w + (w - 1 - x)];
  return out;
}

/// In-place per-channel mean subtraction on a C x H x W image.
inline void subtract_mean(Tensor& image, const std::array<double, 3>& mean) {
  const std::size_t plane = static_cast<std::size_t>(image.dim(1)) * image.dim(2);
  for (int c = 0; c < image.dim(0); ++c)
    for (std::size_t i = 0; i < plane; ++i) image.data()[c * plane + i] -= static_cast<float>(mean[c]);
}

namespace detail {

inline Tensor resize_chw(const Tensor& t, int h, int w) {
  NoGradGuard guard;
  if (t.dim(1) == h && t.dim(2) == w) return t.clone();
  const auto batched = reshape(t.detach(), {1, t.dim(0), t.dim(1), t.dim(2)});
  return reshape(bilinear_resize(batched, h, w), {t.dim(0), h, w}).detach();
}

/// Copies the window at (top, left) of `src` into a c x oh x ow tensor; outside pixels get `fill[c]`.
inline Tensor window(const Tensor& src, int top, int left, int oh, int ow, const std::vector<float>& fill) {
  const int c = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor out({c, oh, ow});
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const int sy = top + y, sx = left + x;
        const bool inside = sy >= 0 && sy < h && sx >= 0 && sx < w;
        out.data()[(static_cast<std::size_t>(k) * oh + y) * ow + x] =
            inside ? src.data()[(static_cast<std::size_t>(k) * h + sy) * w + sx] : fill[k];
      }
  return out;
}

/// Positive mask pixels inside every window position, via a summed-area table.
class WindowCounter {
 public:
  explicit WindowCounter(const Tensor& mask) : h_(mask.dim(1)), w_(mask.dim(2)), sat_((h_ + 1) * (w_ + 1), 0) {
    for (int y = 0; y < h_; ++y)
      for (int x = 0; x < w_; ++x)
        sat_[(y + 1) * (w_ + 1) + x + 1] = (mask.data()[y * w_ + x] > 0.5f) + sat_[y * (w_ + 1) + x + 1] +
                                           sat_[(y + 1) * (w_ + 1) + x] - sat_[y * (w_ + 1) + x];
  }
  long total() const { return sat_.back(); }
  long count(int top, int left, int oh, int ow) const {
    const int y0 = std::clamp(top, 0, h_), y1 = std::clamp(top + oh, 0, h_);
    const int x0 = std::clamp(left, 0, w_), x1 = std::clamp(left + ow, 0, w_);
    return sat_[y1 * (w_ + 1) + x1] - sat_[y0 * (w_ + 1) + x1] - sat_[y1 * (w_ + 1) + x0] + sat_[y0 * (w_ + 1) + x0];
  }

 private:
  int h_, w_;
  std::vector<long> sat_;
};

}  // namespace detail

/**
 * Random horizontal flip, random rescale, then a crop to crop_h x crop_w that
 * keeps at least min_retention of the positive pixels: up to crop_tries random
 * windows, then the window with the highest retention. Scaled images smaller
 * than the crop are padded with the mean colour (zero after subtraction).
 */
inline Sample augment(const Sample& in, const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  Sample s{in.image, in.mask, in.id};
  if (rng.bernoulli(cfg.flip_prob)) {
    s.image = hflip(s.image);
    s.mask = hflip(s.mask);
  }
  const double factor = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  const int sh = std::max(1, static_cast<int>(std::lround(s.image.dim(1) * factor)));
  const int sw = std::max(1, static_cast<int>(std::lround(s.image.dim(2) * factor)));
  s.image = detail::resize_chw(s.image, sh, sw);
  s.mask = detail::resize_chw(s.mask, sh, sw);
  for (auto& v : s.mask.data()) v = v >= 0.5f ? 1.0f : 0.0f;

  const detail::WindowCounter counter(s.mask);
  const int ch = cfg.crop_h, cw = cfg.crop_w;
  const int top_lo = std::min(0, sh - ch), top_hi = std::max(0, sh - ch);
  const int left_lo = std::min(0, sw - cw), left_hi = std::max(0, sw - cw);
  auto retention = [&](int top, int left) {
    return counter.total() == 0 ? 1.0 : static_cast<double>(counter.count(top, left, ch, cw)) / counter.total();
  };
  int top = 0, left = 0;
  bool found = false;
  for (int t = 0; t < cfg.crop_tries && !found; ++t) {
    top = rng.uniform_int(top_lo, top_hi);
    left = rng.uniform_int(left_lo, left_hi);
    found = retention(top, left) >= cfg.min_retention;
  }
  if (!found) {
    double best = -1.0;
    for (int y = top_lo; y <= top_hi; ++y)
      for (int x = left_lo; x <= left_hi; ++x)
        if (const double r = retention(y, x); r > best) {
          best = r;
          top = y;
          left = x;
        }
  }
  const std::vector<float> mean_fill{static_cast<float>(cfg.mean[0]), static_cast<float>(cfg.mean[1]),
                                     static_cast<float>(cfg.mean[2])};
  s.image = detail::window(s.image, top, left, ch, cw, mean_fill);
  s.mask = detail::window(s.mask, top, left, ch, cw, {0.0f});
  subtract_mean(s.image, cfg.mean);
  return s;
}

struct Batch {
  Tensor images;  // N x 3 x H x W, mean subtracted
  Tensor masks;   // N x 1 x H x W
  std::vector<std::string> ids;
};

/// Stacks rank-3 samples into a batch; images are taken as-is.
inline Batch stack_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("stack_batch: no samples");
  const int h = samples[0].image.dim(1), w = samples[0].image.dim(2);
  const int n = static_cast<int>(samples.size());
  Batch b{Tensor({n, 3, h, w}), Tensor({n, 1, h, w}), {}};
  const std::size_t img = 3ul * h * w, msk = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    const auto& s = samples[i];
    if (s.image.dim(1) != h || s.image.dim(2) != w)
      throw ShapeError("stack_batch: sample " + s.id + " has shape " + shape_str(s.image.shape()));
    std::copy(s.image.data().begin(), s.image.data().end(), b.images.data().begin() + i * img);
    std::copy(s.mask.data().begin(), s.mask.data().end(), b.masks.data().begin() + i * msk);
    b.ids.push_back(s.id);
  }
  return b;
}

/// Mean-subtracted, unaugmented copy of a sample (evaluation input).
inline Sample normalized(const Sample& s, const std::array<double, 3>& mean) {
  Sample out{s.image.clone(), s.mask, s.id};
  subtract_mean(out.image, mean);
  return out;
}

/**
 * Seeded epoch sampler: each epoch is a fresh permutation of the dataset, and
 * each drawn sample is augmented with the same generator, so a fixed seed
 * reproduces the whole batch sequence.
 */
class BatchSampler {
 public:
  BatchSampler(const Dataset& ds, AugmentConfig cfg, std::uint64_t seed, bool augment_samples = true)
      : ds_(ds), cfg_(cfg), rng_(seed, 0x5a4d'b1e5ull), augment_(augment_samples) {}

  Batch next(int batch_size) {
    std::vector<Sample> items;
    for (int i = 0; i < batch_size; ++i) {
      if (cursor_ >= order_.size()) reshuffle();
      const Sample& s = ds_.samples[order_[cursor_++]];
      items.push_back(augment_ ? augment(s, cfg_, rng_) : normalized(s, cfg_.mean));
    }
    return stack_batch(items);
  }

 private:
  void reshuffle() {
    order_.resize(ds_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    for (std::size_t i = order_.size(); i > 1; --i)
      std::swap(order_[i - 1], order_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(i) - 1))]);
    cursor_ = 0;
  }

  const Dataset& ds_;
  AugmentConfig cfg_;
  Rng rng_;
  bool augment_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

}  // namespace lcanet
