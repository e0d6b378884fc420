#include "copeft/nn.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace copeft {

namespace {

struct ConvGeom {
  std::size_t cin, h, w, cout, k, ho, wo;
};

ConvGeom check_conv(const Tensor& x, const Tensor& w, int stride, int padding) {
  if (x.rank() != 3) throw ShapeError("conv2d: input must be [C_in,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be [C_out,C_in,k,k], got " + shape_str(w.shape()));
  if (stride < 1 || padding < 0) {
    throw ShapeError("conv2d: stride " + std::to_string(stride) + " / padding " +
                     std::to_string(padding) + " invalid");
  }
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), w.dim(0), w.dim(2), 0, 0};
  if (w.dim(1) != g.cin) {
    throw ShapeError("conv2d: weight C_in " + std::to_string(w.dim(1)) + " != input C_in " +
                     std::to_string(g.cin));
  }
  if (w.dim(3) != g.k || g.k % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square and odd, got " + shape_str(w.shape()));
  }
  const auto p2 = static_cast<std::size_t>(2 * padding);
  if (g.h + p2 < g.k || g.w + p2 < g.k) {
    throw ShapeError("conv2d: kernel " + std::to_string(g.k) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  g.ho = (g.h + p2 - g.k) / static_cast<std::size_t>(stride) + 1;
  g.wo = (g.w + p2 - g.k) / static_cast<std::size_t>(stride) + 1;
  return g;
}

// Valid output column range [lo, hi) for kernel column kx.
inline void col_range(long kx, long pad, long stride, long width, long wo, long& lo, long& hi) {
  // need 0 <= ox*stride + kx - pad < width
  long first = pad - kx;
  lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  long last = width - 1 + pad - kx;  // ox*stride <= last
  hi = last < 0 ? 0 : std::min(wo, last / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace

namespace {

// cols[(ci*k + ky)*k + kx][oy*wo + ox] = x[ci][oy*s + ky - p][ox*s + kx - p], zero outside.
std::vector<double> im2col(const Tensor& x, const ConvGeom& g, long s, long p) {
  const std::size_t plane = g.ho * g.wo;
  std::vector<double> cols(g.cin * g.k * g.k * plane, 0.0);
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w), Wo = static_cast<long>(g.wo);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const double* xc = x.ptr() + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = cols.data() + ((ci * g.k + ky) * g.k + kx) * plane;
        long lo, hi;
        col_range(static_cast<long>(kx), p, s, W, Wo, lo, hi);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy) * s + static_cast<long>(ky) - p;
          if (iy < 0 || iy >= H) continue;
          const double* xrow = xc + iy * W + static_cast<long>(kx) - p;
          double* out = row + oy * g.wo;
          for (long ox = lo; ox < hi; ++ox) out[ox] = xrow[ox * s];
        }
      }
    }
  }
  return cols;
}

void col2im_add(const std::vector<double>& cols, const ConvGeom& g, long s, long p, Tensor& dx) {
  const std::size_t plane = g.ho * g.wo;
  const long H = static_cast<long>(g.h), W = static_cast<long>(g.w), Wo = static_cast<long>(g.wo);
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    double* dxc = dx.ptr() + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = cols.data() + ((ci * g.k + ky) * g.k + kx) * plane;
        long lo, hi;
        col_range(static_cast<long>(kx), p, s, W, Wo, lo, hi);
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy) * s + static_cast<long>(ky) - p;
          if (iy < 0 || iy >= H) continue;
          double* dxrow = dxc + iy * W + static_cast<long>(kx) - p;
          const double* in = row + oy * g.wo;
          for (long ox = lo; ox < hi; ++ox) dxrow[ox * s] += in[ox];
        }
      }
    }
  }
}

// c[m][:] += sum_k a[m*lda + k*inc] * b[k][:], rows of c and b have length n.
// Four output rows share each pass over b.
void gemm_rows(std::size_t m, std::size_t kk, std::size_t n, const double* a, std::size_t lda, std::size_t inc,
               const double* b, double* c) {
  std::size_t r = 0;
  for (; r + 4 <= m; r += 4) {
    double* c0 = c + r * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t k = 0; k < kk; ++k) {
      const double w0 = a[r * lda + k * inc], w1 = a[(r + 1) * lda + k * inc];
      const double w2 = a[(r + 2) * lda + k * inc], w3 = a[(r + 3) * lda + k * inc];
      const double* bk = b + k * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double v = bk[j];
        c0[j] += w0 * v;
        c1[j] += w1 * v;
        c2[j] += w2 * v;
        c3[j] += w3 * v;
      }
    }
  }
  for (; r < m; ++r) {
    double* cr = c + r * n;
    for (std::size_t k = 0; k < kk; ++k) {
      const double wv = a[r * lda + k * inc];
      const double* bk = b + k * n;
      for (std::size_t j = 0; j < n; ++j) cr[j] += wv * bk[j];
    }
  }
}

double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    s0 += a[j] * b[j];
    s1 += a[j + 1] * b[j + 1];
    s2 += a[j + 2] * b[j + 2];
    s3 += a[j + 3] * b[j + 3];
  }
  for (; j < n; ++j) s0 += a[j] * b[j];
  return (s0 + s1) + (s2 + s3);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
  const ConvGeom g = check_conv(x, w, stride, padding);
  expect_shape(b, {g.cout}, "conv2d bias");
  Tensor y({g.cout, g.ho, g.wo});
  const std::size_t plane = g.ho * g.wo, kk = g.cin * g.k * g.k;
  for (std::size_t co = 0; co < g.cout; ++co) std::fill(y.ptr() + co * plane, y.ptr() + (co + 1) * plane, b[co]);
  const std::vector<double> cols = im2col(x, g, stride, padding);
  gemm_rows(g.cout, kk, plane, w.ptr(), kk, 1, cols.data(), y.ptr());
  return y;
}

Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& w, int stride, int padding,
                            const Tensor& dy, bool need_dx, bool need_params) {
  const ConvGeom g = check_conv(x, w, stride, padding);
  expect_shape(dy, {g.cout, g.ho, g.wo}, "conv2d_backward dy");
  Conv2dGrads out;
  const std::size_t plane = g.ho * g.wo, kk = g.cin * g.k * g.k;
  if (need_params) {
    out.dw = Tensor(w.shape());
    out.db = Tensor({g.cout});
    const std::vector<double> cols = im2col(x, g, stride, padding);
    for (std::size_t co = 0; co < g.cout; ++co) {
      const double* dyc = dy.ptr() + co * plane;
      double acc = 0.0;
      for (std::size_t i = 0; i < plane; ++i) acc += dyc[i];
      out.db[co] = acc;
      for (std::size_t k = 0; k < kk; ++k) out.dw[co * kk + k] = dot(dyc, cols.data() + k * plane, plane);
    }
  }
  if (need_dx) {
    out.dx = Tensor(x.shape());
    // dcols[k][:] = sum_co w[co][k] * dy[co][:]
    std::vector<double> dcols(kk * plane, 0.0);
    gemm_rows(kk, g.cout, plane, w.ptr(), 1, kk, dy.ptr(), dcols.data());
    col2im_add(dcols, g, stride, padding, out.dx);
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be [C_out,C_in], got " + shape_str(w.shape()));
  const std::size_t cout = w.dim(0), cin = w.dim(1);
  if (x.rank() < 1 || x.shape().back() != cin) {
    throw ShapeError("linear: input last axis " + (x.rank() ? std::to_string(x.shape().back()) : "-") +
                     " != C_in " + std::to_string(cin));
  }
  expect_shape(b, {cout}, "linear bias");
  const std::size_t rows = x.numel() / cin;
  Shape oshape = x.shape();
  oshape.back() = cout;
  Tensor y(oshape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * cin;
    for (std::size_t o = 0; o < cout; ++o) {
      const double* wr = w.ptr() + o * cin;
      double acc = b[o];
      for (std::size_t c = 0; c < cin; ++c) acc += wr[c] * xr[c];
      y[r * cout + o] = acc;
    }
  }
  return y;
}

LinearGrads linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy) {
  const std::size_t cout = w.dim(0), cin = w.dim(1);
  Shape oshape = x.shape();
  oshape.back() = cout;
  expect_shape(dy, oshape, "linear_backward dy");
  LinearGrads g{Tensor(x.shape()), Tensor(w.shape()), Tensor({cout})};
  const std::size_t rows = x.numel() / cin;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.ptr() + r * cin;
    double* dxr = g.dx.ptr() + r * cin;
    for (std::size_t o = 0; o < cout; ++o) {
      const double d = dy[r * cout + o];
      g.db[o] += d;
      const double* wr = w.ptr() + o * cin;
      double* dwr = g.dw.ptr() + o * cin;
      for (std::size_t c = 0; c < cin; ++c) {
        dwr[c] += d * xr[c];
        dxr[c] += d * wr[c];
      }
    }
  }
  return g;
}

Tensor channel_linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3) throw ShapeError("channel_linear: input must be [C,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 2 || w.dim(1) != x.dim(0)) {
    throw ShapeError("channel_linear: weight " + shape_str(w.shape()) + " vs input channels " +
                     std::to_string(x.dim(0)));
  }
  const std::size_t cout = w.dim(0), cin = w.dim(1), hw = x.dim(1) * x.dim(2);
  expect_shape(b, {cout}, "channel_linear bias");
  Tensor y({cout, x.dim(1), x.dim(2)});
  for (std::size_t o = 0; o < cout; ++o) {
    double* yo = y.ptr() + o * hw;
    std::fill(yo, yo + hw, b[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double wv = w[o * cin + c];
      const double* xc = x.ptr() + c * hw;
      for (std::size_t i = 0; i < hw; ++i) yo[i] += wv * xc[i];
    }
  }
  return y;
}

LinearGrads channel_linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy,
                                    bool need_dx, bool need_params) {
  const std::size_t cout = w.dim(0), cin = w.dim(1), hw = x.dim(1) * x.dim(2);
  expect_shape(dy, {cout, x.dim(1), x.dim(2)}, "channel_linear_backward dy");
  LinearGrads g;
  if (need_dx) g.dx = Tensor(x.shape());
  if (need_params) {
    g.dw = Tensor(w.shape());
    g.db = Tensor({cout});
  }
  for (std::size_t o = 0; o < cout; ++o) {
    const double* dyo = dy.ptr() + o * hw;
    if (need_params) {
      double acc = 0.0;
      for (std::size_t i = 0; i < hw; ++i) acc += dyo[i];
      g.db[o] = acc;
    }
    for (std::size_t c = 0; c < cin; ++c) {
      const double* xc = x.ptr() + c * hw;
      if (need_params) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += dyo[i] * xc[i];
        g.dw[o * cin + c] = acc;
      }
      if (need_dx) {
        const double wv = w[o * cin + c];
        double* dxc = g.dx.ptr() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) dxc[i] += wv * dyo[i];
      }
    }
  }
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  if (x.shape() != dy.shape()) {
    throw ShapeError("relu_backward: " + shape_str(x.shape()) + " vs " + shape_str(dy.shape()));
  }
  Tensor dx = dy;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (!(x[i] > 0.0)) dx[i] = 0.0;
  }
  return dx;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y = x;
  for (auto& v : y.data()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return y;
}

Tensor scale_shift(const Tensor& x, const Tensor& scale, const Tensor& shift) {
  if (x.rank() != 4) throw ShapeError("scale_shift: input must be [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  expect_shape(scale, {c}, "scale_shift scale");
  expect_shape(shift, {c}, "scale_shift shift");
  Tensor y(x.shape());
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xp = x.ptr() + (a * c + ch) * hw;
      double* yp = y.ptr() + (a * c + ch) * hw;
      const double sc = scale[ch], sh = shift[ch];
      for (std::size_t i = 0; i < hw; ++i) yp[i] = sc * xp[i] + sh;
    }
  }
  return y;
}

ScaleShiftGrads scale_shift_backward(const Tensor& x, const Tensor& scale, const Tensor& dy) {
  if (x.shape() != dy.shape()) {
    throw ShapeError("scale_shift_backward: " + shape_str(x.shape()) + " vs " + shape_str(dy.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  ScaleShiftGrads g{Tensor(x.shape()), Tensor({c}), Tensor({c})};
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* xp = x.ptr() + (a * c + ch) * hw;
      const double* dp = dy.ptr() + (a * c + ch) * hw;
      double* dxp = g.dx.ptr() + (a * c + ch) * hw;
      double ds = 0.0, dt = 0.0;
      for (std::size_t i = 0; i < hw; ++i) {
        ds += dp[i] * xp[i];
        dt += dp[i];
        dxp[i] = scale[ch] * dp[i];
      }
      g.dscale[ch] += ds;
      g.dshift[ch] += dt;
    }
  }
  return g;
}

Tensor agent_max_pool(const Tensor& x, std::vector<std::uint32_t>* argmax) {
  if (x.rank() != 4) throw ShapeError("agent_max_pool: input must be [N,C,H,W], got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  const std::size_t per = x.numel() / n;
  Tensor y({1, x.dim(1), x.dim(2), x.dim(3)});
  if (argmax) argmax->assign(per, 0);
  std::copy(x.ptr(), x.ptr() + per, y.ptr());
  for (std::size_t a = 1; a < n; ++a) {
    const double* xa = x.ptr() + a * per;
    for (std::size_t i = 0; i < per; ++i) {
      if (xa[i] > y[i]) {  // strict: ties stay with the lower index
        y[i] = xa[i];
        if (argmax) (*argmax)[i] = static_cast<std::uint32_t>(a);
      }
    }
  }
  return y;
}

Tensor agent_max_pool_backward(const std::vector<std::uint32_t>& argmax, std::size_t agents,
                               const Tensor& dy) {
  if (dy.rank() != 4 || dy.dim(0) != 1 || dy.numel() != argmax.size()) {
    throw ShapeError("agent_max_pool_backward: dy " + shape_str(dy.shape()) + " vs " +
                     std::to_string(argmax.size()) + " pooled elements");
  }
  Tensor dx({agents, dy.dim(1), dy.dim(2), dy.dim(3)});
  const std::size_t per = argmax.size();
  for (std::size_t i = 0; i < per; ++i) dx[argmax[i] * per + i] = dy[i];
  return dx;
}

// ---------------------------------------------------------------------------

void ParamRegistry::add(const std::string& name, Tensor value, bool trainable) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  ParamEntry e;
  e.name = name;
  e.adam_m = Tensor(value.shape());
  e.adam_v = Tensor(value.shape());
  e.value = std::move(value);
  e.trainable = trainable;
  index_.emplace(name, entries_.size());
  entries_.push_back(std::move(e));
}

const ParamEntry& ParamRegistry::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::kMissingParameter, "unknown parameter '" + name + "'");
  return entries_[it->second];
}

ParamEntry& ParamRegistry::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::kMissingParameter, "unknown parameter '" + name + "'");
  return entries_[it->second];
}

std::vector<std::string> ParamRegistry::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

void ParamRegistry::freeze_all() {
  for (auto& e : entries_) e.trainable = false;
}

void ParamRegistry::reset_optimizer_state() {
  for (auto& e : entries_) {
    e.adam_m.fill(0.0);
    e.adam_v.fill(0.0);
    e.step_count = 0;
  }
}

void GradMap::accumulate(const std::string& name, const Tensor& grad) {
  auto it = params.find(name);
  if (it == params.end()) {
    params.emplace(name, grad);
  } else {
    it->second += grad;
  }
}

const Tensor& GradMap::at(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw Error(ErrorCode::kMissingParameter, "no gradient for '" + name + "'");
  return it->second;
}

void GradMap::scale(double s) {
  for (auto& [_, g] : params) g *= s;
  if (!input.empty()) input *= s;
}

void adam_step(ParamRegistry& registry, const GradMap& grads, const AdamOptions& opt) {
  for (const auto& e : registry.entries()) {
    if (!e.trainable) continue;
    auto it = grads.params.find(e.name);
    if (it == grads.params.end()) {
      throw Error(ErrorCode::kMissingParameter, "adam_step: missing gradient for trainable parameter '" +
                                                    e.name + "'");
    }
    if (it->second.shape() != e.value.shape()) {
      throw ShapeError("adam_step: gradient for '" + e.name + "' has shape " +
                       shape_str(it->second.shape()) + ", parameter has " + shape_str(e.value.shape()));
    }
  }
  for (auto& e : registry.entries()) {
    if (!e.trainable) continue;
    const Tensor& g = grads.params.at(e.name);
    e.step_count += 1;
    const double t = static_cast<double>(e.step_count);
    const double bc1 = 1.0 - std::pow(opt.beta1, t);
    const double bc2 = 1.0 - std::pow(opt.beta2, t);
    for (std::size_t i = 0; i < e.value.numel(); ++i) {
      const double gi = g[i];
      e.adam_m[i] = opt.beta1 * e.adam_m[i] + (1.0 - opt.beta1) * gi;
      e.adam_v[i] = opt.beta2 * e.adam_v[i] + (1.0 - opt.beta2) * gi * gi;
      const double mhat = e.adam_m[i] / bc1;
      const double vhat = e.adam_v[i] / bc2;
      e.value[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
    }
    if (!e.value.all_finite()) {
      throw Error(ErrorCode::kNumeric, "adam_step: non-finite value in '" + e.name + "'");
    }
  }
}

FiniteDiffReport finite_diff_check(const ScalarFn& fn, ParamRegistry params, const GradMap& analytic,
                                   const FiniteDiffOptions& opt) {
  if (!(opt.eps > 0.0)) throw Error(ErrorCode::kInvalidArgument, "finite_diff_check: eps must be > 0");
  auto eval = [&](const ParamRegistry& p) {
    Tensor out = fn(p);
    if (out.numel() != 1) {
      throw ShapeError("finite_diff_check: function output must be scalar, got " + shape_str(out.shape()));
    }
    return out[0];
  };
  FiniteDiffReport rep;
  eval(params);  // validates the output shape even when there is nothing to check
  std::mt19937_64 rng(opt.seed);
  for (auto& e : params.entries()) {
    if (!e.trainable) continue;
    const Tensor& a = analytic.at(e.name);
    if (a.shape() != e.value.shape()) {
      throw ShapeError("finite_diff_check: analytic gradient for '" + e.name + "' has shape " +
                       shape_str(a.shape()));
    }
    std::vector<std::size_t> coords(e.value.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (opt.max_coords_per_tensor && coords.size() > opt.max_coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double orig = e.value[i];
      e.value[i] = orig + opt.eps;
      const double fp = eval(params);
      e.value[i] = orig - opt.eps;
      const double fm = eval(params);
      e.value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double diff = std::fabs(a[i] - numeric);
      const double err = diff <= opt.abs_tol ? 0.0 : diff / std::max(1e-12, std::fabs(a[i]) + std::fabs(numeric));
      ++rep.coords_checked;
      rep.max_abs_error = std::max(rep.max_abs_error, diff);
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst_param = e.name;
        rep.worst_index = i;
      }
    }
  }
  return rep;
}

}  // namespace copeft
