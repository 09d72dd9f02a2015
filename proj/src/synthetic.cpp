#include "capsnet/synthetic.hpp"

#include <algorithm>
#include <cmath>

namespace capsnet {

namespace {

// segment layout of a standard seven-segment digit:
//   0: top, 1: top-left, 2: top-right, 3: middle, 4: bottom-left,
//   5: bottom-right, 6: bottom
constexpr unsigned char kDigitSegments[10] = {
    0b1110111,  // 0
    0b0100100,  // 1
    0b1011101,  // 2
    0b1101101,  // 3
    0b0101110,  // 4
    0b1101011,  // 5
    0b1111011,  // 6
    0b0100101,  // 7
    0b1111111,  // 8
    0b1101111,  // 9
};

struct Box {
  double y0, x0, y1, x1;
};

// segment rectangles in unit coordinates of the glyph box
Box segment_box(int seg) {
  constexpr double t = 0.18;  // stroke thickness
  switch (seg) {
    case 0: return {0.0, 0.0, t, 1.0};             // top
    case 1: return {0.0, 0.0, 0.5, t};             // top-left
    case 2: return {0.0, 1.0 - t, 0.5, 1.0};       // top-right
    case 3: return {0.5 - t / 2, 0.0, 0.5 + t / 2, 1.0};  // middle
    case 4: return {0.5, 0.0, 1.0, t};             // bottom-left
    case 5: return {0.5, 1.0 - t, 1.0, 1.0};       // bottom-right
    default: return {1.0 - t, 0.0, 1.0, 1.0};      // bottom
  }
}

void render_glyph(real* img, int h, int w, int digit, Rng& rng) {
  const double box_h = 0.62 * h;
  const double box_w = 0.45 * w;
  const double jitter_y = rng.uniform(-0.08, 0.08) * h;
  const double jitter_x = rng.uniform(-0.10, 0.10) * w;
  const double top = (h - box_h) / 2 + jitter_y;
  const double left = (w - box_w) / 2 + jitter_x;
  const unsigned char mask = kDigitSegments[digit % 10];

  for (int seg = 0; seg < 7; ++seg) {
    if (!(mask >> seg & 1)) continue;
    const Box b = segment_box(seg);
    const double intensity = rng.uniform(0.65, 1.0);
    const int y0 = static_cast<int>(std::floor(top + b.y0 * box_h));
    const int y1 = static_cast<int>(std::ceil(top + b.y1 * box_h));
    const int x0 = static_cast<int>(std::floor(left + b.x0 * box_w));
    const int x1 = static_cast<int>(std::ceil(left + b.x1 * box_w));
    for (int y = std::max(0, y0); y < std::min(h, y1); ++y)
      for (int x = std::max(0, x0); x < std::min(w, x1); ++x) {
        real& px = img[static_cast<int64_t>(y) * w + x];
        px = std::max(px, static_cast<real>(intensity));
      }
  }
  for (int64_t i = 0; i < static_cast<int64_t>(h) * w; ++i) {
    const double noisy = img[i] + 0.06 * rng.normal();
    img[i] = static_cast<real>(std::clamp(noisy, 0.0, 1.0));
  }
}

}  // namespace

Dataset make_glyph_dataset(int n, int class_count, int h, int w, uint64_t seed) {
  if (class_count < 2) throw ConfigError("glyph dataset needs at least 2 classes");
  Dataset ds;
  ds.images = Tensor({n, 1, h, w});
  ds.labels.resize(static_cast<size_t>(n));
  ds.class_count = class_count;
  Rng rng(seed);
  const int64_t px = static_cast<int64_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    const int label = static_cast<int>(rng.next_below(static_cast<uint64_t>(class_count)));
    ds.labels[static_cast<size_t>(i)] = label;
    render_glyph(ds.images.ptr() + static_cast<int64_t>(i) * px, h, w, label, rng);
  }
  return ds;
}

Dataset make_blob_dataset(int n, int h, int w, uint64_t seed) {
  Dataset ds;
  ds.images = Tensor({n, 1, h, w});
  ds.labels.resize(static_cast<size_t>(n));
  ds.class_count = 2;
  Rng rng(seed);
  const int64_t px = static_cast<int64_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    const int label = static_cast<int>(rng.next_below(2));
    ds.labels[static_cast<size_t>(i)] = label;
    const double cy = (label == 0 ? 0.3 : 0.7) * h + rng.uniform(-1.0, 1.0);
    const double cx = (label == 0 ? 0.3 : 0.7) * w + rng.uniform(-1.0, 1.0);
    const double sigma = 0.12 * std::min(h, w) * rng.uniform(0.9, 1.1);
    real* img = ds.images.ptr() + static_cast<int64_t>(i) * px;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
        const double v = std::exp(-d2 / (2 * sigma * sigma)) + 0.03 * rng.normal();
        img[static_cast<int64_t>(y) * w + x] = static_cast<real>(std::clamp(v, 0.0, 1.0));
      }
  }
  return ds;
}

}  // namespace capsnet
