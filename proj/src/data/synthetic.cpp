#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

#include "equirobust/data.hpp"
#include "equirobust/ops.hpp"

namespace equirobust {

namespace {

struct Palette {
  std::vector<double> fg, bg;
};

Palette draw_palette(std::mt19937_64& rng, std::size_t channels) {
  std::uniform_real_distribution<double> fg(0.55, 1.0), bg(0.0, 0.35);
  Palette p;
  for (std::size_t c = 0; c < channels; ++c) {
    p.fg.push_back(fg(rng));
    p.bg.push_back(bg(rng));
  }
  return p;
}

// Writes alpha-blended colour plus Gaussian noise into one (C, S, S) image.
void paint(std::span<double> img, const std::vector<double>& alpha, const Palette& p, std::mt19937_64& rng,
           std::size_t channels, std::size_t pixels) {
  std::normal_distribution<double> noise(0.0, 0.03);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < pixels; ++i) {
      const double v = p.bg[c] + alpha[i] * (p.fg[c] - p.bg[c]) + noise(rng);
      img[c * pixels + i] = std::clamp(v, 0.0, 1.0);
    }
}

// Half-line bar starting near the centre, pointing along angle_deg
// (counter-clockwise from +x with y up).
std::vector<double> bar_alpha(std::size_t S, double angle_deg, double length, double half_width, double ox,
                              double oy) {
  const double t = angle_deg * std::numbers::pi / 180.0;
  const double dx = std::cos(t), dy = std::sin(t);
  const double c = (static_cast<double>(S) - 1.0) / 2.0;
  std::vector<double> a(S * S);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) {
      const double u = static_cast<double>(j) - (c + ox);
      const double v = (c + oy) - static_cast<double>(i);
      const double s = u * dx + v * dy;
      const double perp = std::abs(-u * dy + v * dx);
      double d = perp;
      if (s < 0) d = std::hypot(s, perp);
      else if (s > length) d = std::hypot(s - length, perp);
      a[i * S + j] = std::clamp(1.0 - (d - half_width), 0.0, 1.0);
    }
  return a;
}

std::vector<double> disk_alpha(std::size_t S, double radius, double cx, double cy) {
  std::vector<double> a(S * S);
  for (std::size_t i = 0; i < S; ++i)
    for (std::size_t j = 0; j < S; ++j) {
      const double d = std::hypot(static_cast<double>(i) - cy, static_cast<double>(j) - cx);
      a[i * S + j] = std::clamp(radius + 0.5 - d, 0.0, 1.0);
    }
  return a;
}

std::mt19937_64 image_rng(std::uint64_t seed, std::size_t i) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

std::string to_string(SyntheticKind k) {
  return k == SyntheticKind::oriented_bars ? "oriented_bars" : "scaled_blobs";
}

SyntheticKind synthetic_from_string(const std::string& s) {
  if (s == "oriented_bars") return SyntheticKind::oriented_bars;
  if (s == "scaled_blobs") return SyntheticKind::scaled_blobs;
  throw std::invalid_argument("unknown synthetic dataset '" + s + "' (known: oriented_bars, scaled_blobs)");
}

Dataset make_synthetic(SyntheticKind kind, std::size_t n, std::size_t image_size, std::size_t num_classes,
                       std::uint64_t seed, std::size_t channels) {
  if (n == 0) throw std::invalid_argument("make_synthetic: n must be positive");
  if (num_classes < 2) throw std::invalid_argument("make_synthetic: need at least 2 classes");
  if (image_size < 8) throw std::invalid_argument("make_synthetic: image_size must be at least 8");
  if (channels == 0) throw std::invalid_argument("make_synthetic: channels must be positive");
  const std::size_t S = image_size, pixels = S * S, per = channels * pixels;
  const double Sd = static_cast<double>(S);

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % num_classes);
  const auto order = shuffled_indices(n, seed ^ 0x5bd1e995ull);
  std::vector<int> permuted(n);
  for (std::size_t i = 0; i < n; ++i) permuted[i] = labels[order[i]];
  labels = std::move(permuted);

  std::vector<double> px(n * per);
  const bool quarter = num_classes % 4 == 0;
  const double step = 360.0 / static_cast<double>(num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = image_rng(seed, i);
    const std::size_t c = static_cast<std::size_t>(labels[i]);
    std::span<double> img(px.data() + i * per, per);
    if (kind == SyntheticKind::oriented_bars) {
      std::uniform_real_distribution<double> jitter(-0.15 * step, 0.15 * step);
      std::uniform_real_distribution<double> len(0.3 * Sd, 0.45 * Sd), hw(0.6, 1.2), off(-0.04 * Sd, 0.04 * Sd);
      const double phi = jitter(rng), L = len(rng), w = hw(rng), ox = off(rng), oy = off(rng);
      const Palette pal = draw_palette(rng, channels);
      const std::size_t q = quarter ? num_classes / 4 : num_classes;
      const std::size_t base = c % q, turns = quarter ? c / q : 0;
      paint(img, bar_alpha(S, static_cast<double>(base) * step + phi, L, w, ox, oy), pal, rng, channels, pixels);
      if (turns) {
        // Exact quarter turns keep the class relation under rot90 exact.
        Tensor t = ops::rot90(Tensor({1, channels, S, S}, std::vector<double>(img.begin(), img.end())),
                              static_cast<int>(turns));
        std::copy(t.data().begin(), t.data().end(), img.begin());
      }
    } else {
      const double r_min = 0.1 * Sd, r_max = 0.4 * Sd;
      const double frac = static_cast<double>(c) / static_cast<double>(num_classes - 1);
      std::uniform_real_distribution<double> jit(0.95, 1.05);
      const double r = r_min * std::pow(r_max / r_min, frac) * jit(rng);
      const double lo = std::min(r, Sd / 2 - 1), hi = std::max(Sd - 1 - r, Sd / 2);
      std::uniform_real_distribution<double> pos(lo, hi);
      const double cx = pos(rng), cy = pos(rng);
      const Palette pal = draw_palette(rng, channels);
      paint(img, disk_alpha(S, r, cx, cy), pal, rng, channels, pixels);
    }
  }

  Dataset ds;
  ds.images = Tensor({n, channels, S, S}, std::move(px));
  ds.labels = std::move(labels);
  ds.num_classes = num_classes;
  ds.split = "synthetic";
  ds.provenance = to_string(kind) + " n=" + std::to_string(n) + " size=" + std::to_string(S) +
                  " k=" + std::to_string(num_classes) + " seed=" + std::to_string(seed);
  return ds;
}

}  // namespace equirobust
