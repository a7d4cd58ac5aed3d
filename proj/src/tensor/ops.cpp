#include "equirobust/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace equirobust::ops {

namespace {

using detail::make_result;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

[[noreturn]] void shape_fail(const char* op, const std::string& what,
                             std::initializer_list<const Tensor*> operands) {
  std::string msg = std::string(op) + ": " + what + "; operand shapes";
  for (const Tensor* t : operands) msg += " " + shape_str(t->shape());
  throw ShapeError(msg);
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, "shapes differ", {&a, &b});
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.dim() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank), {&a});
  }
}

std::vector<double> copy_data(const Tensor& t) {
  auto d = t.data();
  return {d.begin(), d.end()};
}

// Splits a shape around `axis` into (outer, extent, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same("add", a, b);
  auto out = copy_data(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return make_result(a.shape(), std::move(out), "add", {&a, &b},
                     [n = out.size()](std::span<const double> g, const std::vector<double*>& gi) {
                       for (double* s : gi)
                         if (s)
                           for (std::size_t i = 0; i < n; ++i) s[i] += g[i];
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  auto out = copy_data(a);
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return make_result(a.shape(), std::move(out), "sub", {&a, &b},
                     [n = out.size()](std::span<const double> g, const std::vector<double*>& gi) {
                       if (gi[0])
                         for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i];
                       if (gi[1])
                         for (std::size_t i = 0; i < n; ++i) gi[1][i] -= g[i];
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_result(a.shape(), std::move(out), "mul", {&a, &b},
                     [ai = a.impl(), bi = b.impl()](std::span<const double> g,
                                                     const std::vector<double*>& gi) {
                       const std::size_t n = g.size();
                       if (gi[0])
                         for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i] * bi->data[i];
                       if (gi[1])
                         for (std::size_t i = 0; i < n; ++i) gi[1][i] += g[i] * ai->data[i];
                     });
}

Tensor scale(const Tensor& a, double factor) {
  auto out = copy_data(a);
  for (double& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), "scale", {&a},
                     [factor](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * factor;
                     });
}

Tensor add_scalar(const Tensor& a, double value) {
  auto out = copy_data(a);
  for (double& v : out) v += value;
  return make_result(a.shape(), std::move(out), "add_scalar", {&a},
                     [](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

Tensor square(const Tensor& a) {
  auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * ad[i];
  return make_result(a.shape(), std::move(out), "square", {&a},
                     [ai = a.impl()](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         gi[0][i] += 2.0 * ai->data[i] * g[i];
                     });
}

Tensor relu(const Tensor& a) {
  auto out = copy_data(a);
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_result(a.shape(), std::move(out), "relu", {&a},
                     [ai = a.impl()](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (ai->data[i] > 0.0) gi[0][i] += g[i];
                     });
}

Tensor sum(const Tensor& a) {
  auto ad = a.data();
  const double s = std::accumulate(ad.begin(), ad.end(), 0.0);
  return make_result(Shape{}, {s}, "sum", {&a},
                     [n = ad.size()](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
                     });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) shape_fail("mean", "empty tensor", {&a});
  auto ad = a.data();
  const double n = static_cast<double>(ad.size());
  const double s = std::accumulate(ad.begin(), ad.end(), 0.0) / n;
  return make_result(Shape{}, {s}, "mean", {&a},
                     [cnt = ad.size(), n](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t i = 0; i < cnt; ++i) gi[0][i] += g[0] / n;
                     });
}

Tensor weighted_reduce(const Tensor& a, const std::vector<double>& weights) {
  if (weights.size() != a.numel()) {
    shape_fail("weighted_reduce",
               "weight count " + std::to_string(weights.size()) + " does not match", {&a});
  }
  auto ad = a.data();
  double s = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) s += ad[i] * weights[i];
  return make_result(Shape{}, {s}, "weighted_reduce", {&a},
                     [weights](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t i = 0; i < weights.size(); ++i) gi[0][i] += g[0] * weights[i];
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    shape_fail("reshape", "cannot view as " + shape_str(shape), {&a});
  }
  return make_result(std::move(shape), copy_data(a), "reshape", {&a},
                     [](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    shape_fail("matmul", "inner dimensions must agree", {&a, &b});
  }
  const auto m = static_cast<Eigen::Index>(a.size(0));
  const auto k = static_cast<Eigen::Index>(a.size(1));
  const auto n = static_cast<Eigen::Index>(b.size(1));
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  return make_result(Shape{a.size(0), b.size(1)}, std::move(out), "matmul", {&a, &b},
                     [ai = a.impl(), bi = b.impl(), m, k, n](std::span<const double> g,
                                                             const std::vector<double*>& gi) {
                       ConstMap G(g.data(), m, n);
                       if (gi[0]) MutMap(gi[0], m, k).noalias() += G * ConstMap(bi->data.data(), k, n).transpose();
                       if (gi[1]) MutMap(gi[1], k, n).noalias() += ConstMap(ai->data.data(), m, k).transpose() * G;
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.dim() != 2 || w.dim() != 2 || x.size(1) != w.size(1)) {
    shape_fail("linear", "expected x (N, F) and w (O, F)", {&x, &w});
  }
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != w.size(0))) {
    shape_fail("linear", "bias must have one entry per output", {&w, &bias});
  }
  const auto nb = static_cast<Eigen::Index>(x.size(0));
  const auto f = static_cast<Eigen::Index>(x.size(1));
  const auto o = static_cast<Eigen::Index>(w.size(0));
  std::vector<double> out(static_cast<std::size_t>(nb * o));
  MutMap Y(out.data(), nb, o);
  Y.noalias() = ConstMap(x.data().data(), nb, f) * ConstMap(w.data().data(), o, f).transpose();
  if (bias.defined()) {
    auto bd = bias.data();
    for (Eigen::Index r = 0; r < nb; ++r)
      for (Eigen::Index c = 0; c < o; ++c) Y(r, c) += bd[static_cast<std::size_t>(c)];
  }
  auto fn = [xi = x.impl(), wi = w.impl(), nb, f, o](std::span<const double> g,
                                                     const std::vector<double*>& gi) {
    ConstMap G(g.data(), nb, o);
    if (gi[0]) MutMap(gi[0], nb, f).noalias() += G * ConstMap(wi->data.data(), o, f);
    if (gi[1]) MutMap(gi[1], o, f).noalias() += G.transpose() * ConstMap(xi->data.data(), nb, f);
    if (gi.size() > 2 && gi[2]) {
      for (Eigen::Index r = 0; r < nb; ++r)
        for (Eigen::Index c = 0; c < o; ++c) gi[2][c] += G(r, c);
    }
  };
  if (bias.defined()) {
    return make_result(Shape{x.size(0), w.size(0)}, std::move(out), "linear", {&x, &w, &bias}, fn);
  }
  return make_result(Shape{x.size(0), w.size(0)}, std::move(out), "linear", {&x, &w}, fn);
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.dim() < 2 || bias.dim() != 1 || bias.size(0) != x.size(1)) {
    shape_fail("add_channel_bias", "bias must have one entry per channel (axis 1)", {&x, &bias});
  }
  const AxisSplit sp = split_at(x.shape(), 1);
  auto out = copy_data(x);
  auto bd = bias.data();
  for (std::size_t n = 0; n < sp.outer; ++n)
    for (std::size_t c = 0; c < sp.extent; ++c) {
      double* p = out.data() + (n * sp.extent + c) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) p[i] += bd[c];
    }
  return make_result(x.shape(), std::move(out), "add_channel_bias", {&x, &bias},
                     [sp](std::span<const double> g, const std::vector<double*>& gi) {
                       if (gi[0])
                         for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
                       if (gi[1])
                         for (std::size_t n = 0; n < sp.outer; ++n)
                           for (std::size_t c = 0; c < sp.extent; ++c) {
                             const double* p = g.data() + (n * sp.extent + c) * sp.inner;
                             double acc = 0.0;
                             for (std::size_t i = 0; i < sp.inner; ++i) acc += p[i];
                             gi[1][c] += acc;
                           }
                     });
}

// ---------------------------------------------------------------------------
// Convolution via im2col + GEMM, processed in batch chunks.

namespace {

struct ConvGeom {
  std::size_t n, c, h, w, o, kh, kw, pad, ho, wo;
  std::size_t k() const { return c * kh * kw; }
  std::size_t p() const { return ho * wo; }
};

// col is K x (nb * P), row-major.
void im2col(const double* x, const ConvGeom& g, std::size_t n0, std::size_t nb, double* col) {
  const std::size_t P = g.p();
  const std::size_t cols = nb * P;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t n = 0; n < nb; ++n) {
          const double* img = x + ((n0 + n) * g.c + c) * g.h * g.w;
          double* dst = row + n * P;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy + ki) - static_cast<long>(g.pad);
            double* d = dst + oy * g.wo;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill(d, d + g.wo, 0.0);
              continue;
            }
            const double* src = img + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox + kj) - static_cast<long>(g.pad);
              d[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? 0.0 : src[ix];
            }
          }
        }
      }
}

void col2im(const double* col, const ConvGeom& g, std::size_t n0, std::size_t nb, double* gx) {
  const std::size_t P = g.p();
  const std::size_t cols = nb * P;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t n = 0; n < nb; ++n) {
          double* img = gx + ((n0 + n) * g.c + c) * g.h * g.w;
          const double* src = row + n * P;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy + ki) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            double* dst = img + static_cast<std::size_t>(iy) * g.w;
            const double* s = src + oy * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox + kj) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += s[ox];
            }
          }
        }
      }
}

std::size_t chunk_images(const ConvGeom& g) {
  constexpr std::size_t kBudget = std::size_t{1} << 22;  // doubles per col buffer
  const std::size_t per = std::max<std::size_t>(1, g.k() * g.p());
  return std::clamp<std::size_t>(kBudget / per, 1, std::max<std::size_t>(g.n, 1));
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t padding) {
  if (x.dim() != 4 || w.dim() != 4 || x.size(1) != w.size(1)) {
    shape_fail("conv2d", "expected x (N, C, H, W) and w (O, C, kh, kw) with matching C", {&x, &w});
  }
  if (bias.defined() && (bias.dim() != 1 || bias.size(0) != w.size(0))) {
    shape_fail("conv2d", "bias must have one entry per output channel", {&w, &bias});
  }
  ConvGeom g{x.size(0), x.size(1), x.size(2), x.size(3), w.size(0), w.size(2), w.size(3), padding, 0, 0};
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    shape_fail("conv2d", "kernel larger than padded input", {&x, &w});
  }
  g.ho = g.h + 2 * padding - g.kh + 1;
  g.wo = g.w + 2 * padding - g.kw + 1;
  const std::size_t K = g.k(), P = g.p(), O = g.o;
  const std::size_t chunk = chunk_images(g);

  std::vector<double> out(g.n * O * P);
  std::vector<double> col, tmp;
  ConstMap W(w.data().data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(K));
  const double* bd = bias.defined() ? bias.data().data() : nullptr;
  for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
    const std::size_t nb = std::min(chunk, g.n - n0);
    col.resize(K * nb * P);
    tmp.resize(O * nb * P);
    im2col(x.data().data(), g, n0, nb, col.data());
    const auto cols = static_cast<Eigen::Index>(nb * P);
    MutMap(tmp.data(), static_cast<Eigen::Index>(O), cols).noalias() =
        W * ConstMap(col.data(), static_cast<Eigen::Index>(K), cols);
    for (std::size_t n = 0; n < nb; ++n)
      for (std::size_t o = 0; o < O; ++o) {
        const double* src = tmp.data() + o * nb * P + n * P;
        double* dst = out.data() + ((n0 + n) * O + o) * P;
        const double b = bd ? bd[o] : 0.0;
        for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + b;
      }
  }

  auto fn = [xi = x.impl(), wi = w.impl(), g, chunk](std::span<const double> gout,
                                                     const std::vector<double*>& gi) {
    const std::size_t K = g.k(), P = g.p(), O = g.o;
    double* gx = gi[0];
    double* gw = gi[1];
    double* gb = gi.size() > 2 ? gi[2] : nullptr;
    ConstMap W(wi->data.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(K));
    std::vector<double> col, G, dcol;
    for (std::size_t n0 = 0; n0 < g.n; n0 += chunk) {
      const std::size_t nb = std::min(chunk, g.n - n0);
      const auto cols = static_cast<Eigen::Index>(nb * P);
      G.resize(O * nb * P);
      for (std::size_t n = 0; n < nb; ++n)
        for (std::size_t o = 0; o < O; ++o) {
          const double* src = gout.data() + ((n0 + n) * O + o) * P;
          std::copy(src, src + P, G.data() + o * nb * P + n * P);
        }
      ConstMap Gm(G.data(), static_cast<Eigen::Index>(O), cols);
      if (gw) {
        col.resize(K * nb * P);
        im2col(xi->data.data(), g, n0, nb, col.data());
        MutMap(gw, static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(K)).noalias() +=
            Gm * ConstMap(col.data(), static_cast<Eigen::Index>(K), cols).transpose();
      }
      if (gx) {
        dcol.resize(K * nb * P);
        MutMap(dcol.data(), static_cast<Eigen::Index>(K), cols).noalias() = W.transpose() * Gm;
        col2im(dcol.data(), g, n0, nb, gx);
      }
      if (gb) {
        for (std::size_t o = 0; o < O; ++o) {
          const double* r = G.data() + o * nb * P;
          double acc = 0.0;
          for (std::size_t i = 0; i < nb * P; ++i) acc += r[i];
          gb[o] += acc;
        }
      }
    }
  };
  Shape shape{g.n, O, g.ho, g.wo};
  if (bias.defined()) return make_result(std::move(shape), std::move(out), "conv2d", {&x, &w, &bias}, fn);
  return make_result(std::move(shape), std::move(out), "conv2d", {&x, &w}, fn);
}

Tensor pad2d(const Tensor& x, std::size_t padding, PadMode mode) {
  if (x.dim() < 2) shape_fail("pad2d", "need at least two axes", {&x});
  const std::size_t H = x.size(x.dim() - 2), W = x.size(x.dim() - 1);
  if (mode == PadMode::reflect && (padding >= H || padding >= W)) {
    shape_fail("pad2d", "reflection padding must be smaller than the spatial size", {&x});
  }
  const std::size_t Hp = H + 2 * padding, Wp = W + 2 * padding;
  const std::size_t planes = x.numel() / (H * W);
  // src[i] = flat source index for padded position i, or npos for zero.
  constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  auto reflect = [](long i, long n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * (n - 1) - i;
    return i;
  };
  std::vector<std::size_t> src(Hp * Wp);
  for (std::size_t i = 0; i < Hp; ++i)
    for (std::size_t j = 0; j < Wp; ++j) {
      long y = static_cast<long>(i) - static_cast<long>(padding);
      long z = static_cast<long>(j) - static_cast<long>(padding);
      if (mode == PadMode::reflect) {
        y = reflect(y, static_cast<long>(H));
        z = reflect(z, static_cast<long>(W));
      }
      const bool inside = y >= 0 && y < static_cast<long>(H) && z >= 0 && z < static_cast<long>(W);
      src[i * Wp + j] = inside ? static_cast<std::size_t>(y) * W + static_cast<std::size_t>(z) : npos;
    }
  auto xd = x.data();
  std::vector<double> out(planes * Hp * Wp, 0.0);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < Hp * Wp; ++i)
      if (src[i] != npos) out[p * Hp * Wp + i] = xd[p * H * W + src[i]];
  Shape shape = x.shape();
  shape[shape.size() - 2] = Hp;
  shape[shape.size() - 1] = Wp;
  return make_result(std::move(shape), std::move(out), "pad2d", {&x},
                     [src = std::move(src), planes, HW = H * W, HWp = Hp * Wp](
                         std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t p = 0; p < planes; ++p)
                         for (std::size_t i = 0; i < HWp; ++i)
                           if (src[i] != npos) gi[0][p * HW + src[i]] += g[p * HWp + i];
                     });
}

Tensor max_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_rank("max_pool2d", x, 4);
  const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (H < kernel || W < kernel || kernel == 0 || stride == 0) {
    shape_fail("max_pool2d", "window does not fit", {&x});
  }
  const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  auto xd = x.data();
  std::vector<double> out(N * C * Ho * Wo);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t pl = 0; pl < N * C; ++pl)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        std::size_t best = pl * H * W + (i * stride) * W + j * stride;
        for (std::size_t a = 0; a < kernel; ++a)
          for (std::size_t b = 0; b < kernel; ++b) {
            const std::size_t idx = pl * H * W + (i * stride + a) * W + (j * stride + b);
            if (xd[idx] > xd[best]) best = idx;
          }
        const std::size_t o = (pl * Ho + i) * Wo + j;
        out[o] = xd[best];
        arg[o] = best;
      }
  return make_result(Shape{N, C, Ho, Wo}, std::move(out), "max_pool2d", {&x},
                     [arg = std::move(arg)](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t o = 0; o < arg.size(); ++o) gi[0][arg[o]] += g[o];
                     });
}

Tensor avg_pool2d(const Tensor& x, std::size_t kernel, std::size_t stride) {
  require_rank("avg_pool2d", x, 4);
  const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (H < kernel || W < kernel || kernel == 0 || stride == 0) {
    shape_fail("avg_pool2d", "window does not fit", {&x});
  }
  const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  const double inv = 1.0 / static_cast<double>(kernel * kernel);
  auto xd = x.data();
  std::vector<double> out(N * C * Ho * Wo, 0.0);
  for (std::size_t pl = 0; pl < N * C; ++pl)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double acc = 0.0;
        for (std::size_t a = 0; a < kernel; ++a)
          for (std::size_t b = 0; b < kernel; ++b) acc += xd[pl * H * W + (i * stride + a) * W + (j * stride + b)];
        out[(pl * Ho + i) * Wo + j] = acc * inv;
      }
  return make_result(Shape{N, C, Ho, Wo}, std::move(out), "avg_pool2d", {&x},
                     [=](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t pl = 0; pl < N * C; ++pl)
                         for (std::size_t i = 0; i < Ho; ++i)
                           for (std::size_t j = 0; j < Wo; ++j) {
                             const double v = g[(pl * Ho + i) * Wo + j] * inv;
                             for (std::size_t a = 0; a < kernel; ++a)
                               for (std::size_t b = 0; b < kernel; ++b)
                                 gi[0][pl * H * W + (i * stride + a) * W + (j * stride + b)] += v;
                           }
                     });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank("global_avg_pool", x, 4);
  const std::size_t N = x.size(0), C = x.size(1), S = x.size(2) * x.size(3);
  if (S == 0) shape_fail("global_avg_pool", "empty spatial extent", {&x});
  auto xd = x.data();
  std::vector<double> out(N * C);
  for (std::size_t pl = 0; pl < N * C; ++pl) {
    double acc = 0.0;
    for (std::size_t i = 0; i < S; ++i) acc += xd[pl * S + i];
    out[pl] = acc / static_cast<double>(S);
  }
  return make_result(Shape{N, C}, std::move(out), "global_avg_pool", {&x},
                     [S, NC = N * C](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t pl = 0; pl < NC; ++pl) {
                         const double v = g[pl] / static_cast<double>(S);
                         for (std::size_t i = 0; i < S; ++i) gi[0][pl * S + i] += v;
                       }
                     });
}

Tensor reduce_axis(const Tensor& x, std::size_t axis, Reduce mode) {
  if (axis >= x.dim()) shape_fail("reduce_axis", "axis " + std::to_string(axis) + " out of range", {&x});
  const AxisSplit sp = split_at(x.shape(), axis);
  if (sp.extent == 0) shape_fail("reduce_axis", "empty axis", {&x});
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<long>(axis));
  auto xd = x.data();
  std::vector<double> out(sp.outer * sp.inner);
  std::vector<std::size_t> arg;
  if (mode == Reduce::max) arg.resize(out.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      if (mode == Reduce::max) {
        std::size_t best = base;
        for (std::size_t a = 1; a < sp.extent; ++a)
          if (xd[base + a * sp.inner] > xd[best]) best = base + a * sp.inner;
        out[o * sp.inner + i] = xd[best];
        arg[o * sp.inner + i] = best;
      } else {
        double acc = 0.0;
        for (std::size_t a = 0; a < sp.extent; ++a) acc += xd[base + a * sp.inner];
        out[o * sp.inner + i] = acc / static_cast<double>(sp.extent);
      }
    }
  if (mode == Reduce::max) {
    return make_result(std::move(shape), std::move(out), "reduce_max", {&x},
                       [arg = std::move(arg)](std::span<const double> g, const std::vector<double*>& gi) {
                         for (std::size_t o = 0; o < arg.size(); ++o) gi[0][arg[o]] += g[o];
                       });
  }
  return make_result(std::move(shape), std::move(out), "reduce_mean", {&x},
                     [sp](std::span<const double> g, const std::vector<double*>& gi) {
                       const double inv = 1.0 / static_cast<double>(sp.extent);
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t i = 0; i < sp.inner; ++i) {
                           const double v = g[o * sp.inner + i] * inv;
                           const std::size_t base = o * sp.extent * sp.inner + i;
                           for (std::size_t a = 0; a < sp.extent; ++a) gi[0][base + a * sp.inner] += v;
                         }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == ref[d];
    if (!ok) {
      std::string msg = "concat: operands disagree off axis " + std::to_string(axis) + "; operand shapes";
      for (const Tensor& q : parts) msg += " " + shape_str(q.shape());
      throw ShapeError(msg);
    }
    total += s[axis];
  }
  Shape shape = ref;
  shape[axis] = total;
  const AxisSplit sp = split_at(shape, axis);
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(off);
    const std::size_t e = p.size(axis);
    auto pd = p.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy(pd.begin() + static_cast<long>(o * e * sp.inner),
                pd.begin() + static_cast<long>((o + 1) * e * sp.inner),
                out.begin() + static_cast<long>((o * total + off) * sp.inner));
    off += e;
  }
  std::vector<std::size_t> extents;
  for (const Tensor& p : parts) extents.push_back(p.size(axis));
  return make_result(std::move(shape), std::move(out), "concat", parts,
                     [sp, total, offsets, extents](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t k = 0; k < gi.size(); ++k) {
                         if (!gi[k]) continue;
                         const std::size_t e = extents[k];
                         for (std::size_t o = 0; o < sp.outer; ++o) {
                           const double* src = g.data() + (o * total + offsets[k]) * sp.inner;
                           double* dst = gi[k] + o * e * sp.inner;
                           for (std::size_t i = 0; i < e * sp.inner; ++i) dst[i] += src[i];
                         }
                       }
                     });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  bool training) {
  if (x.dim() < 2) shape_fail("batch_norm", "need a channel axis", {&x});
  const AxisSplit sp = split_at(x.shape(), 1);
  const std::size_t C = sp.extent;
  auto check = [&](const Tensor& t, const char* what) {
    if (t.defined() && (t.dim() != 1 || t.size(0) != C)) {
      shape_fail("batch_norm", std::string(what) + " must have one entry per channel", {&x, &t});
    }
  };
  check(gamma, "gamma");
  check(beta, "beta");
  check(state.running_mean, "running_mean");
  check(state.running_var, "running_var");
  const std::size_t M = sp.outer * sp.inner;
  if (training && M == 0) shape_fail("batch_norm", "empty batch", {&x});
  auto xd = x.data();
  std::vector<double> mu(C), invstd(C);
  if (training) {
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < sp.outer; ++n) {
        const double* p = xd.data() + (n * C + c) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(M);
      double v = 0.0;
      for (std::size_t n = 0; n < sp.outer; ++n) {
        const double* p = xd.data() + (n * C + c) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= static_cast<double>(M);
      mu[c] = m;
      invstd[c] = 1.0 / std::sqrt(v + state.eps);
      if (state.running_mean.defined()) {
        auto rm = state.running_mean.mutable_data();
        auto rv = state.running_var.mutable_data();
        const double unbiased = M > 1 ? v * static_cast<double>(M) / static_cast<double>(M - 1) : v;
        rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * m;
        rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * unbiased;
      }
    }
  } else {
    if (!state.running_mean.defined()) throw std::logic_error("batch_norm: eval mode needs running statistics");
    auto rm = state.running_mean.data();
    auto rv = state.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = rm[c];
      invstd[c] = 1.0 / std::sqrt(rv[c] + state.eps);
    }
  }
  std::vector<double> gam(C, 1.0), bet(C, 0.0);
  if (gamma.defined()) std::copy(gamma.data().begin(), gamma.data().end(), gam.begin());
  if (beta.defined()) std::copy(beta.data().begin(), beta.data().end(), bet.begin());
  std::vector<double> xhat(xd.size()), out(xd.size());
  for (std::size_t n = 0; n < sp.outer; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const double h = (xd[base + i] - mu[c]) * invstd[c];
        xhat[base + i] = h;
        out[base + i] = gam[c] * h + bet[c];
      }
    }
  auto fn = [sp, C, M, training, invstd, gam, xhat = std::move(xhat)](std::span<const double> g,
                                                                       const std::vector<double*>& gi) {
    double* gx = gi[0];
    double* gg = gi.size() > 1 ? gi[1] : nullptr;
    double* gb = gi.size() > 2 ? gi[2] : nullptr;
    for (std::size_t c = 0; c < C; ++c) {
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t n = 0; n < sp.outer; ++n) {
        const std::size_t base = (n * C + c) * sp.inner;
        for (std::size_t i = 0; i < sp.inner; ++i) {
          sum_g += g[base + i];
          sum_gx += g[base + i] * xhat[base + i];
        }
      }
      if (gg) gg[c] += sum_gx;
      if (gb) gb[c] += sum_g;
      if (!gx) continue;
      const double k = gam[c] * invstd[c];
      if (training) {
        // d/dx of gamma * (x - mean) / std with batch statistics.
        const double mg = sum_g / static_cast<double>(M);
        const double mgx = sum_gx / static_cast<double>(M);
        for (std::size_t n = 0; n < sp.outer; ++n) {
          const std::size_t base = (n * C + c) * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i)
            gx[base + i] += k * (g[base + i] - mg - xhat[base + i] * mgx);
        }
      } else {
        for (std::size_t n = 0; n < sp.outer; ++n) {
          const std::size_t base = (n * C + c) * sp.inner;
          for (std::size_t i = 0; i < sp.inner; ++i) gx[base + i] += k * g[base + i];
        }
      }
    }
  };
  // Undefined affine parameters are replaced by constants so the sink
  // positions (x, gamma, beta) stay fixed.
  const Tensor g_op = gamma.defined() ? gamma : Tensor(Shape{C}, 1.0);
  const Tensor b_op = beta.defined() ? beta : Tensor(Shape{C}, 0.0);
  return make_result(x.shape(), std::move(out), "batch_norm", {&x, &g_op, &b_op}, std::move(fn));
}

Tensor softmax(const Tensor& x) {
  if (x.dim() == 0) shape_fail("softmax", "need at least one axis", {&x});
  const std::size_t L = x.size(x.dim() - 1);
  const std::size_t rows = L ? x.numel() / L : 0;
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * L;
    double* o = out.data() + r * L;
    const double mx = *std::max_element(in, in + L);
    double z = 0.0;
    for (std::size_t i = 0; i < L; ++i) z += (o[i] = std::exp(in[i] - mx));
    for (std::size_t i = 0; i < L; ++i) o[i] /= z;
  }
  auto probs = out;
  return make_result(x.shape(), std::move(out), "softmax", {&x},
                     [probs = std::move(probs), rows, L](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* s = probs.data() + r * L;
                         const double* gr = g.data() + r * L;
                         double dot = 0.0;
                         for (std::size_t i = 0; i < L; ++i) dot += gr[i] * s[i];
                         for (std::size_t i = 0; i < L; ++i) gi[0][r * L + i] += s[i] * (gr[i] - dot);
                       }
                     });
}

Tensor weighted_sum(const std::vector<Tensor>& branches, const Tensor& weights) {
  if (branches.empty()) throw ShapeError("weighted_sum: no branches");
  if (weights.dim() != 1 || weights.size(0) != branches.size()) {
    throw ShapeError("weighted_sum: weights " + shape_str(weights.shape()) + " for " +
                     std::to_string(branches.size()) + " branches");
  }
  for (const Tensor& b : branches) {
    if (b.shape() != branches.front().shape()) {
      std::string msg = "weighted_sum: branch shapes differ; operand shapes";
      for (const Tensor& q : branches) msg += " " + shape_str(q.shape());
      throw ShapeError(msg);
    }
  }
  auto wd = weights.data();
  std::vector<double> out(branches.front().numel(), 0.0);
  for (std::size_t k = 0; k < branches.size(); ++k) {
    auto bd = branches[k].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wd[k] * bd[i];
  }
  std::vector<Tensor> inputs = branches;
  inputs.push_back(weights);
  std::vector<std::shared_ptr<detail::TensorImpl>> impls;
  for (const Tensor& t : inputs) impls.push_back(t.impl());
  const std::size_t B = branches.size();
  return make_result(branches.front().shape(), std::move(out), "weighted_sum", inputs,
                     [impls, B](std::span<const double> g, const std::vector<double*>& gi) {
                       const auto& w = impls[B]->data;
                       for (std::size_t k = 0; k < B; ++k) {
                         if (gi[k])
                           for (std::size_t i = 0; i < g.size(); ++i) gi[k][i] += w[k] * g[i];
                         if (gi[B]) {
                           const auto& bd = impls[k]->data;
                           double acc = 0.0;
                           for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * bd[i];
                           gi[B][k] += acc;
                         }
                       }
                     });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels, Reduction reduction) {
  if (logits.dim() != 2 || logits.size(0) != labels.size()) {
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t N = logits.size(0), K = logits.size(1);
  if (N == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  auto ld = logits.data();
  std::vector<double> probs(N * K);
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " outside [0, " +
                              std::to_string(K) + ")");
    }
    const double* z = ld.data() + n * K;
    const double mx = *std::max_element(z, z + K);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += (probs[n * K + k] = std::exp(z[k] - mx));
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] /= s;
    total += (std::log(s) + mx) - z[y];
  }
  const double denom = reduction == Reduction::mean ? static_cast<double>(N) : 1.0;
  return make_result(Shape{}, {total / denom}, "softmax_cross_entropy", {&logits},
                     [probs = std::move(probs), labels, N, K, denom](std::span<const double> g,
                                                                    const std::vector<double*>& gi) {
                       const double s = g[0] / denom;
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t k = 0; k < K; ++k) {
                           const double t = static_cast<int>(k) == labels[n] ? 1.0 : 0.0;
                           gi[0][n * K + k] += s * (probs[n * K + k] - t);
                         }
                     });
}

// ---------------------------------------------------------------------------
// Spatial resampling and permutations.

namespace {

struct Tap {
  std::size_t i0, i1;
  double w0, w1;
};

std::vector<Tap> taps(std::size_t in, std::size_t out, Interp mode) {
  std::vector<Tap> t(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    if (mode == Interp::nearest) {
      auto i = static_cast<std::size_t>(std::floor((static_cast<double>(o) + 0.5) * ratio));
      i = std::min(i, in - 1);
      t[o] = {i, i, 1.0, 0.0};
      continue;
    }
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    src = std::max(src, 0.0);
    auto i0 = static_cast<std::size_t>(std::floor(src));
    i0 = std::min(i0, in - 1);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const double l = src - static_cast<double>(i0);
    t[o] = {i0, i1, 1.0 - l, l};
  }
  return t;
}

// Applies a gather permutation (out[i] = x[perm[i]] per plane) to the last two axes.
Tensor permute_planes(const Tensor& x, Shape shape, std::vector<std::size_t> perm, const char* op) {
  const std::size_t plane_in = x.size(x.dim() - 2) * x.size(x.dim() - 1);
  const std::size_t plane_out = perm.size();
  const std::size_t planes = plane_in ? x.numel() / plane_in : 0;
  auto xd = x.data();
  std::vector<double> out(planes * plane_out);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i = 0; i < plane_out; ++i) out[p * plane_out + i] = xd[p * plane_in + perm[i]];
  return make_result(std::move(shape), std::move(out), op, {&x},
                     [perm = std::move(perm), planes, plane_in](std::span<const double> g,
                                                               const std::vector<double*>& gi) {
                       const std::size_t plane_out = perm.size();
                       for (std::size_t p = 0; p < planes; ++p)
                         for (std::size_t i = 0; i < plane_out; ++i)
                           gi[0][p * plane_in + perm[i]] += g[p * plane_out + i];
                     });
}

}  // namespace

Tensor resize(const Tensor& x, std::size_t out_h, std::size_t out_w, Interp mode) {
  require_rank("resize", x, 4);
  const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (out_h == 0 || out_w == 0 || H == 0 || W == 0) shape_fail("resize", "empty spatial size", {&x});
  const auto ty = taps(H, out_h, mode);
  const auto tx = taps(W, out_w, mode);
  auto xd = x.data();
  std::vector<double> out(N * C * out_h * out_w);
  for (std::size_t pl = 0; pl < N * C; ++pl) {
    const double* src = xd.data() + pl * H * W;
    double* dst = out.data() + pl * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const Tap& a = ty[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const Tap& b = tx[j];
        dst[i * out_w + j] = a.w0 * (b.w0 * src[a.i0 * W + b.i0] + b.w1 * src[a.i0 * W + b.i1]) +
                             a.w1 * (b.w0 * src[a.i1 * W + b.i0] + b.w1 * src[a.i1 * W + b.i1]);
      }
    }
  }
  return make_result(Shape{N, C, out_h, out_w}, std::move(out), "resize", {&x},
                     [ty, tx, NC = N * C, H, W](std::span<const double> g, const std::vector<double*>& gi) {
                       const std::size_t oh = ty.size(), ow = tx.size();
                       for (std::size_t pl = 0; pl < NC; ++pl) {
                         double* dst = gi[0] + pl * H * W;
                         const double* src = g.data() + pl * oh * ow;
                         for (std::size_t i = 0; i < oh; ++i)
                           for (std::size_t j = 0; j < ow; ++j) {
                             const double v = src[i * ow + j];
                             const Tap& a = ty[i];
                             const Tap& b = tx[j];
                             dst[a.i0 * W + b.i0] += a.w0 * b.w0 * v;
                             dst[a.i0 * W + b.i1] += a.w0 * b.w1 * v;
                             dst[a.i1 * W + b.i0] += a.w1 * b.w0 * v;
                             dst[a.i1 * W + b.i1] += a.w1 * b.w1 * v;
                           }
                       }
                     });
}

Tensor rot90(const Tensor& x, int times) {
  if (x.dim() < 2) shape_fail("rot90", "need at least two axes", {&x});
  const int k = ((times % 4) + 4) % 4;
  std::size_t H = x.size(x.dim() - 2), W = x.size(x.dim() - 1);
  // idx holds source offsets laid out in the current (rotated) frame.
  std::vector<std::size_t> idx(H * W);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (int r = 0; r < k; ++r) {
    // Counter-clockwise quarter turn: out[i][j] = in[j][W - 1 - i], out is W x H.
    std::vector<std::size_t> next(H * W);
    for (std::size_t i = 0; i < W; ++i)
      for (std::size_t j = 0; j < H; ++j) next[i * H + j] = idx[j * W + (W - 1 - i)];
    idx = std::move(next);
    std::swap(H, W);
  }
  Shape shape = x.shape();
  shape[shape.size() - 2] = H;
  shape[shape.size() - 1] = W;
  return permute_planes(x, std::move(shape), std::move(idx), "rot90");
}

Tensor roll(const Tensor& x, std::size_t axis, int shift) {
  if (axis >= x.dim()) shape_fail("roll", "axis " + std::to_string(axis) + " out of range", {&x});
  const AxisSplit sp = split_at(x.shape(), axis);
  const long n = static_cast<long>(sp.extent);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  std::vector<std::size_t> src_of(sp.extent);
  for (long i = 0; i < n; ++i) src_of[static_cast<std::size_t>(i)] = static_cast<std::size_t>(((i - shift) % n + n) % n);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t a = 0; a < sp.extent; ++a) {
      const double* s = xd.data() + (o * sp.extent + src_of[a]) * sp.inner;
      std::copy(s, s + sp.inner, out.data() + (o * sp.extent + a) * sp.inner);
    }
  return make_result(x.shape(), std::move(out), "roll", {&x},
                     [sp, src_of = std::move(src_of)](std::span<const double> g, const std::vector<double*>& gi) {
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t a = 0; a < sp.extent; ++a) {
                           const double* s = g.data() + (o * sp.extent + a) * sp.inner;
                           double* d = gi[0] + (o * sp.extent + src_of[a]) * sp.inner;
                           for (std::size_t i = 0; i < sp.inner; ++i) d[i] += s[i];
                         }
                     });
}

}  // namespace equirobust::ops
