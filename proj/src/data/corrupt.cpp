#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "equirobust/data.hpp"

namespace equirobust {

namespace {

struct KindName {
  CorruptionKind kind;
  const char* name;
};

constexpr KindName kNames[] = {
    {CorruptionKind::gaussian_noise, "gaussian_noise"}, {CorruptionKind::shot_noise, "shot_noise"},
    {CorruptionKind::impulse_noise, "impulse_noise"},   {CorruptionKind::brightness, "brightness"},
    {CorruptionKind::contrast, "contrast"},             {CorruptionKind::saturate, "saturate"},
    {CorruptionKind::pixelate, "pixelate"},             {CorruptionKind::defocus_blur, "defocus_blur"},
};

// Mirror padding without repeating the edge pixel.
std::size_t reflect(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - i);
}

void defocus(std::span<const double> in, std::span<double> out, std::size_t C, std::size_t H, std::size_t W,
             double radius) {
  const long r = static_cast<long>(std::ceil(radius));
  std::vector<std::pair<long, long>> taps;
  for (long di = -r; di <= r; ++di)
    for (long dj = -r; dj <= r; ++dj)
      if (static_cast<double>(di * di + dj * dj) <= radius * radius) taps.emplace_back(di, dj);
  const double w = 1.0 / static_cast<double>(taps.size());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        double acc = 0.0;
        for (auto [di, dj] : taps) {
          const std::size_t ii = reflect(static_cast<long>(i) + di, static_cast<long>(H));
          const std::size_t jj = reflect(static_cast<long>(j) + dj, static_cast<long>(W));
          acc += in[(c * H + ii) * W + jj];
        }
        out[(c * H + i) * W + j] = acc * w;
      }
}

}  // namespace

std::string to_string(CorruptionKind k) {
  for (const auto& e : kNames)
    if (e.kind == k) return e.name;
  return "unknown";
}

CorruptionKind corruption_from_string(const std::string& s) {
  std::string known;
  for (const auto& e : kNames) {
    if (s == e.name) return e.kind;
    known += (known.empty() ? "" : ", ") + std::string(e.name);
  }
  throw std::invalid_argument("unknown corruption '" + s + "' (known: " + known + ")");
}

const std::array<double, 5>& severity_table(CorruptionKind k) {
  static const std::array<double, 5> gaussian{0.04, 0.06, 0.08, 0.09, 0.10};
  static const std::array<double, 5> shot{500, 250, 100, 75, 50};
  static const std::array<double, 5> impulse{0.01, 0.02, 0.03, 0.05, 0.07};
  static const std::array<double, 5> bright{0.05, 0.1, 0.15, 0.2, 0.3};
  static const std::array<double, 5> contrast{0.75, 0.5, 0.4, 0.3, 0.15};
  static const std::array<double, 5> saturate{0.2, 0.4, 0.6, 0.8, 1.0};
  static const std::array<double, 5> pixelate{2, 3, 4, 5, 6};
  static const std::array<double, 5> defocus{1, 1.5, 2, 2.5, 3};
  switch (k) {
    case CorruptionKind::gaussian_noise: return gaussian;
    case CorruptionKind::shot_noise: return shot;
    case CorruptionKind::impulse_noise: return impulse;
    case CorruptionKind::brightness: return bright;
    case CorruptionKind::contrast: return contrast;
    case CorruptionKind::saturate: return saturate;
    case CorruptionKind::pixelate: return pixelate;
    case CorruptionKind::defocus_blur: return defocus;
  }
  throw std::invalid_argument("severity_table: bad corruption kind");
}

double corruption_parameter(const CorruptionSpec& spec) {
  if (spec.parameter) return *spec.parameter;
  if (spec.severity < 1 || spec.severity > 5) {
    throw std::invalid_argument("corruption severity must be in 1..5, got " + std::to_string(spec.severity));
  }
  return severity_table(spec.kind)[static_cast<std::size_t>(spec.severity - 1)];
}

Dataset corrupt(const Dataset& ds, const CorruptionSpec& spec) {
  const double p = corruption_parameter(spec);
  const std::size_t N = ds.size(), C = ds.channels(), H = ds.height(), W = ds.width();
  const std::size_t plane = H * W, per = C * plane;
  switch (spec.kind) {
    case CorruptionKind::gaussian_noise:
    case CorruptionKind::brightness:
      if (p < 0) throw std::invalid_argument(to_string(spec.kind) + ": parameter must be non-negative");
      break;
    case CorruptionKind::shot_noise:
    case CorruptionKind::pixelate:
    case CorruptionKind::defocus_blur:
      if (!(p > 0)) throw std::invalid_argument(to_string(spec.kind) + ": parameter must be positive");
      break;
    case CorruptionKind::impulse_noise:
    case CorruptionKind::saturate:
      if (p < 0 || p > 1) throw std::invalid_argument(to_string(spec.kind) + ": parameter must be in [0, 1]");
      break;
    case CorruptionKind::contrast:
      if (p < 0) throw std::invalid_argument("contrast: parameter must be non-negative");
      break;
  }

  auto src = ds.images.data();
  std::vector<double> out(src.begin(), src.end());
  for (std::size_t n = 0; n < N; ++n) {
    std::mt19937_64 rng(spec.seed + n);
    std::span<const double> in(src.data() + n * per, per);
    std::span<double> img(out.data() + n * per, per);
    switch (spec.kind) {
      case CorruptionKind::gaussian_noise: {
        std::normal_distribution<double> g(0.0, 1.0);
        for (double& v : img) v += p * g(rng);
        break;
      }
      case CorruptionKind::shot_noise:
        for (double& v : img) {
          std::poisson_distribution<long> pois(std::max(v, 0.0) * p);
          v = static_cast<double>(pois(rng)) / p;
        }
        break;
      case CorruptionKind::impulse_noise: {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (double& v : img) {
          const double a = u(rng), b = u(rng);
          if (a < p) v = b < 0.5 ? 0.0 : 1.0;
        }
        break;
      }
      case CorruptionKind::brightness:
        for (double& v : img) v += p;
        break;
      case CorruptionKind::contrast:
        for (std::size_t c = 0; c < C; ++c) {
          double m = 0.0;
          for (std::size_t i = 0; i < plane; ++i) m += in[c * plane + i];
          m /= static_cast<double>(plane);
          for (std::size_t i = 0; i < plane; ++i) img[c * plane + i] = (in[c * plane + i] - m) * p + m;
        }
        break;
      case CorruptionKind::saturate:
        for (double& v : img) v = (1.0 - p) * v + p * v * v * (3.0 - 2.0 * v);
        break;
      case CorruptionKind::pixelate: {
        const std::size_t d = static_cast<std::size_t>(std::lround(p));
        if (d == 0) throw std::invalid_argument("pixelate: block size rounds to zero");
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j)
              img[(c * H + i) * W + j] = in[(c * H + (i / d) * d) * W + (j / d) * d];
        break;
      }
      case CorruptionKind::defocus_blur:
        defocus(in, img, C, H, W, p);
        break;
    }
    for (double& v : img) v = std::clamp(v, 0.0, 1.0);
  }

  Dataset res = ds;
  res.images = Tensor(ds.images.shape(), std::move(out));
  res.provenance = ds.provenance + " | " + to_string(spec.kind) + " p=" + std::to_string(p) +
                   " seed=" + std::to_string(spec.seed);
  return res;
}

}  // namespace equirobust
