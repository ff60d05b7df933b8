// Copyright (c) 2026 the tan authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tan/boxes.hpp"
#include "tan/common.hpp"

namespace tan {

/// 8-bit image, HWC layout, 1 or 3 channels.
struct Image {
  int h = 0, w = 0, c = 1;
  std::vector<uint8_t> px;

  Image() = default;
  Image(int h_, int w_, int c_, uint8_t fill = 0)
      : h(h_), w(w_), c(c_), px(size_t(h_) * w_ * c_, fill) {}
  uint8_t& at(int y, int x, int ch) { return px[(size_t(y) * w + x) * c + ch]; }
  uint8_t at(int y, int x, int ch) const { return px[(size_t(y) * w + x) * c + ch]; }
};

struct LabeledImage {
  Image image;
  std::vector<BoundingBox> boxes;
  std::string source_id;
};

enum class Complexity { kSimple, kComplex };

inline std::string to_string(Complexity c) {
  return c == Complexity::kSimple ? "simple" : "complex";
}
inline Complexity complexity_from_string(const std::string& s) {
  if (s == "simple") return Complexity::kSimple;
  if (s == "complex") return Complexity::kComplex;
  throw Error("unknown complexity: " + s);
}

/// Parameters of a synthetic crater domain. The two built-in profiles mirror
/// the lunar/martian contrast: many small craters on clean ground versus
/// fewer large ones under noise and weathering.
struct DomainProfile {
  std::string name = "custom";
  int crater_count_min = 1, crater_count_max = 5;
  double radius_min = 0.03, radius_max = 0.10;  // fractions of image size
  double background_noise_level = 0.2;          // in [0,1]
  bool weathering_artifacts = false;
  Complexity complexity = Complexity::kSimple;

  void validate() const {
    TAN_CHECK(crater_count_min >= 0 && crater_count_max >= crater_count_min,
              "profile: empty crater count range");
    TAN_CHECK(radius_min > 0.0 && radius_max >= radius_min,
              "profile: empty radius range");
    TAN_CHECK(background_noise_level >= 0.0 && background_noise_level <= 1.0,
              "profile: noise level out of [0,1]");
  }

  static DomainProfile lunar_like() {
    DomainProfile p;
    p.name = "lunar-like";
    p.crater_count_min = 5;
    p.crater_count_max = 12;
    p.radius_min = 0.020;
    p.radius_max = 0.070;
    p.background_noise_level = 0.15;
    p.weathering_artifacts = false;
    p.complexity = Complexity::kSimple;
    return p;
  }
  static DomainProfile mars_like() {
    DomainProfile p;
    p.name = "mars-like";
    p.crater_count_min = 2;
    p.crater_count_max = 6;
    p.radius_min = 0.050;
    p.radius_max = 0.160;
    p.background_noise_level = 0.55;
    p.weathering_artifacts = true;
    p.complexity = Complexity::kComplex;
    return p;
  }
};

struct DatasetSplit {
  std::vector<LabeledImage> train;
  std::vector<LabeledImage> val;
  double ratio = 0.8;
};

/// Deterministic shuffle + partition; floor(n * ratio) images go to train.
inline DatasetSplit split_dataset(const std::vector<LabeledImage>& images,
                                  double ratio, uint64_t seed) {
  TAN_CHECK(!images.empty(), "split_dataset: empty image list");
  TAN_CHECK(ratio > 0.0 && ratio < 1.0, "split_dataset: ratio must be in (0,1)");
  std::vector<size_t> idx(images.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed);
  rng.shuffle(idx);
  size_t n_train = size_t(std::floor(double(images.size()) * ratio));
  DatasetSplit s;
  s.ratio = ratio;
  for (size_t i = 0; i < idx.size(); ++i)
    (i < n_train ? s.train : s.val).push_back(images[idx[i]]);
  return s;
}

namespace detail {

struct SmoothField {
  // a handful of random cosine waves; cheap stand-in for low-frequency noise
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> waves;
  static SmoothField make(Rng& rng, int n_waves, double max_freq) {
    SmoothField f;
    for (int i = 0; i < n_waves; ++i) {
      double ang = rng.uniform(0, 2 * M_PI);
      double freq = rng.uniform(0.5, max_freq);
      f.waves.push_back({freq * std::cos(ang), freq * std::sin(ang),
                         rng.uniform(0, 2 * M_PI), rng.uniform(0.5, 1.0)});
    }
    return f;
  }
  double at(double u, double v) const {  // u,v in [0,1]
    double s = 0;
    for (const auto& w : waves)
      s += w.amp * std::cos(2 * M_PI * (w.fx * u + w.fy * v) + w.phase);
    return waves.empty() ? 0.0 : s / double(waves.size());
  }
};

}  // namespace detail

/// Deterministic synthetic crater-field generator. Craters render as a
/// bright rim ring around a shadowed bowl; the ground truth box tightly
/// encloses the rendered rim.
inline std::vector<LabeledImage> generate_synthetic_domain(
    const DomainProfile& profile, int n, int image_size, uint64_t seed) {
  profile.validate();
  TAN_CHECK(n > 0, "generate_synthetic_domain: n must be positive");
  TAN_CHECK(image_size >= 64, "generate_synthetic_domain: image_size >= 64");
  TAN_CHECK(profile.radius_max <= 0.40,
            "generate_synthetic_domain: radius_range exceeds image bounds");

  constexpr double kRimExtent = 1.18;  // box half-extent in crater radii
  std::vector<LabeledImage> out;
  out.reserve(size_t(n));
  Rng root(seed);
  const double S = double(image_size);

  for (int i = 0; i < n; ++i) {
    Rng rng = root.fork(uint64_t(i));
    LabeledImage li;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%s-%06d", profile.name.c_str(), i);
    li.source_id = buf;
    li.image = Image(image_size, image_size, 1);

    double base = rng.uniform(100.0, 140.0);
    auto bg = detail::SmoothField::make(rng, 4, 3.0);
    double bg_amp = profile.background_noise_level * 26.0;
    detail::SmoothField weather;
    double weather_amp = 0.0;
    if (profile.weathering_artifacts) {
      weather = detail::SmoothField::make(rng, 5, 6.0);
      weather_amp = 0.35;
    }
    double noise_sigma = profile.background_noise_level * 16.0;

    // place craters first so pixels can be rendered in one pass
    struct Crater {
      double cx, cy, r, rim_amp, depth_amp;
    };
    std::vector<Crater> craters;
    std::vector<BoundingBox> placed;
    int count = int(rng.uniform_int(profile.crater_count_min, profile.crater_count_max));
    double light_ang = rng.uniform(0, 2 * M_PI);
    double lx = std::cos(light_ang), ly = std::sin(light_ang);
    for (int k = 0; k < count; ++k) {
      double best_overlap = 2.0;
      Crater best{};
      BoundingBox best_box;
      for (int attempt = 0; attempt < 200; ++attempt) {
        double rf = rng.uniform(profile.radius_min, profile.radius_max);
        double r = rf * S;
        double half = kRimExtent * r;
        double margin = std::min(half + 1.0, S / 2 - 1.0);
        double cx = rng.uniform(margin, S - margin);
        double cy = rng.uniform(margin, S - margin);
        BoundingBox box;
        box.cx = cx / S;
        box.cy = cy / S;
        box.w = std::min(1.0, 2 * half / S);
        box.h = box.w;
        double worst = 0.0;
        for (const auto& pb : placed) worst = std::max(worst, iou(box, pb));
        if (worst < best_overlap) {
          best_overlap = worst;
          best = {cx, cy, r, rng.uniform(30.0, 55.0), rng.uniform(28.0, 50.0)};
          best_box = box;
        }
        if (worst <= 0.5) break;  // acceptable overlap, stop resampling
      }
      craters.push_back(best);
      placed.push_back(best_box);
    }

    for (int y = 0; y < image_size; ++y) {
      for (int x = 0; x < image_size; ++x) {
        double u = (x + 0.5) / S, v = (y + 0.5) / S;
        double val = base + bg_amp * bg.at(u, v) + rng.normal(0.0, noise_sigma);
        for (const auto& cr : craters) {
          double dx = x + 0.5 - cr.cx, dy = y + 0.5 - cr.cy;
          double dist = std::sqrt(dx * dx + dy * dy);
          double d = dist / cr.r;
          if (d > 1.35) continue;
          double rim = std::exp(-((d - 1.0) * (d - 1.0)) / (2 * 0.10 * 0.10));
          val += cr.rim_amp * rim;
          if (d < 1.0) {
            double dirfac = dist > 1e-9 ? (dx * lx + dy * ly) / dist : 0.0;
            double bowl = 1.0 - d * d;
            val -= cr.depth_amp * bowl * (0.55 - 0.45 * dirfac);
          }
        }
        if (weather_amp > 0.0)
          val *= 1.0 + weather_amp * weather.at(u, v);
        li.image.at(y, x, 0) = uint8_t(clampv(std::lround(val), 0l, 255l));
      }
    }
    li.boxes = placed;
    out.push_back(std::move(li));
  }
  return out;
}

/// Geometry of a letterbox resize: uniform scale plus symmetric padding.
struct LetterboxTransform {
  int src_w = 0, src_h = 0, target = 0;
  int new_w = 0, new_h = 0, pad_x = 0, pad_y = 0;

  static LetterboxTransform make(int src_h, int src_w, int target) {
    TAN_CHECK(target > 0, "letterbox: target must be positive");
    LetterboxTransform t;
    t.src_w = src_w;
    t.src_h = src_h;
    t.target = target;
    double s = double(target) / double(std::max(src_w, src_h));
    t.new_w = std::max(1, int(std::lround(src_w * s)));
    t.new_h = std::max(1, int(std::lround(src_h * s)));
    t.pad_x = (target - t.new_w) / 2;
    t.pad_y = (target - t.new_h) / 2;
    return t;
  }
  BoundingBox apply(const BoundingBox& b) const {
    BoundingBox o = b;
    o.cx = (b.cx * new_w + pad_x) / target;
    o.cy = (b.cy * new_h + pad_y) / target;
    o.w = b.w * new_w / target;
    o.h = b.h * new_h / target;
    return o;
  }
  BoundingBox invert(const BoundingBox& b) const {
    BoundingBox o = b;
    o.cx = (b.cx * target - pad_x) / new_w;
    o.cy = (b.cy * target - pad_y) / new_h;
    o.w = b.w * target / new_w;
    o.h = b.h * target / new_h;
    return o;
  }
};

/// Bilinear resize (HWC, uint8).
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
  TAN_CHECK(out_h > 0 && out_w > 0, "resize: empty target");
  Image dst(out_h, out_w, src.c);
  double sy = double(src.h) / out_h, sx = double(src.w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = int(std::floor(fy));
    double wy = fy - y0;
    int y0c = clampv(y0, 0, src.h - 1), y1c = clampv(y0 + 1, 0, src.h - 1);
    for (int x = 0; x < out_w; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = int(std::floor(fx));
      double wx = fx - x0;
      int x0c = clampv(x0, 0, src.w - 1), x1c = clampv(x0 + 1, 0, src.w - 1);
      for (int ch = 0; ch < src.c; ++ch) {
        double v = (1 - wy) * ((1 - wx) * src.at(y0c, x0c, ch) + wx * src.at(y0c, x1c, ch)) +
                   wy * ((1 - wx) * src.at(y1c, x0c, ch) + wx * src.at(y1c, x1c, ch));
        dst.at(y, x, ch) = uint8_t(clampv(std::lround(v), 0l, 255l));
      }
    }
  }
  return dst;
}

constexpr uint8_t kPadGray = 114;

/// Aspect-preserving resize to target x target with symmetric gray padding;
/// boxes are remapped consistently.
inline LabeledImage letterbox_resize(const LabeledImage& src, int target) {
  auto t = LetterboxTransform::make(src.image.h, src.image.w, target);
  LabeledImage out;
  out.source_id = src.source_id;
  out.image = Image(target, target, src.image.c, kPadGray);
  Image scaled = (t.new_w == src.image.w && t.new_h == src.image.h)
                     ? src.image
                     : resize_bilinear(src.image, t.new_h, t.new_w);
  for (int y = 0; y < t.new_h; ++y)
    for (int x = 0; x < t.new_w; ++x)
      for (int ch = 0; ch < src.image.c; ++ch)
        out.image.at(y + t.pad_y, x + t.pad_x, ch) = scaled.at(y, x, ch);
  for (const auto& b : src.boxes) out.boxes.push_back(t.apply(b));
  return out;
}

// ---------------------------------------------------------------------------
// label text format: one box per line, "class cx cy w h", normalized
// ---------------------------------------------------------------------------

/// Guard against reading ground-truth labels from directories that must stay
/// unlabelled (the SPF target domain). Reads under a banned prefix throw.
class LabelReadGuard {
 public:
  static LabelReadGuard& instance() {
    static LabelReadGuard g;
    return g;
  }
  void ban(const std::string& dir_prefix) { banned_.push_back(dir_prefix); }
  void lift(const std::string& dir_prefix) {
    banned_.erase(std::remove(banned_.begin(), banned_.end(), dir_prefix),
                  banned_.end());
  }
  void check(const std::string& path) const {
    for (const auto& b : banned_)
      if (path.rfind(b, 0) == 0)
        throw Error("label read blocked (unlabelled domain): " + path);
  }
  int64_t reads = 0;

 private:
  std::vector<std::string> banned_;
};

/// RAII ban on label reads under a directory prefix.
class ScopedLabelBan {
 public:
  explicit ScopedLabelBan(std::string dir) : dir_(std::move(dir)) {
    LabelReadGuard::instance().ban(dir_);
  }
  ~ScopedLabelBan() { LabelReadGuard::instance().lift(dir_); }
  ScopedLabelBan(const ScopedLabelBan&) = delete;
  ScopedLabelBan& operator=(const ScopedLabelBan&) = delete;

 private:
  std::string dir_;
};

inline BoundingBox parse_label_line(const std::string& line) {
  std::istringstream is(line);
  BoundingBox b;
  if (!(is >> b.class_id >> b.cx >> b.cy >> b.w >> b.h))
    throw Error("malformed label line: '" + line + "'");
  std::string extra;
  if (is >> extra) throw Error("trailing fields in label line: '" + line + "'");
  TAN_CHECK(b.valid(), "label box out of range: '" << line << "'");
  return b;
}

inline std::vector<BoundingBox> read_label_file(const std::string& path) {
  LabelReadGuard::instance().check(path);
  LabelReadGuard::instance().reads++;
  std::ifstream in(path);
  TAN_CHECK(in.good(), "cannot open label file: " << path);
  std::vector<BoundingBox> boxes;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    // tolerate trailing whitespace / blank lines
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    try {
      boxes.push_back(parse_label_line(line));
    } catch (const Error& e) {
      throw Error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return boxes;
}

inline void write_label_file(const std::string& path,
                             const std::vector<BoundingBox>& boxes) {
  std::ofstream out(path);
  TAN_CHECK(out.good(), "cannot write label file: " << path);
  char buf[160];
  for (const auto& b : boxes) {
    std::snprintf(buf, sizeof(buf), "%d %.9f %.9f %.9f %.9f\n", b.class_id,
                  b.cx, b.cy, b.w, b.h);
    out << buf;
  }
}

}  // namespace tan
