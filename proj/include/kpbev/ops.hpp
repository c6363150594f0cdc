#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kpbev/random.hpp"
#include "kpbev/tensor.hpp"

namespace kpbev {

/// Kaiming-uniform fan-in initialization.
template <typename T>
void kaiming_uniform(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
}

// ---------------------------------------------------------------------------
// linear: y = x W + b
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& weight,
                         const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0) ||
      bias.size() != weight.dim(1)) {
    throw ContractError("linear: shape mismatch " + shape_str(x.shape()) + " x " +
                        shape_str(weight.shape()));
  }
  const std::size_t n = x.dim(0), fin = x.dim(1), fout = weight.dim(1);
  Tensor<T> y({n, fout});
  for (std::size_t i = 0; i < n; ++i) {
    T* yr = y.row(i);
    std::copy(bias.data(), bias.data() + fout, yr);
    const T* xr = x.row(i);
    for (std::size_t a = 0; a < fin; ++a) {
      const T xv = xr[a];
      const T* wr = weight.row(a);
      for (std::size_t b = 0; b < fout; ++b) yr[b] += xv * wr[b];
    }
  }
  return y;
}

/// Returns grad_x; accumulates into grad_weight / grad_bias.
template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& weight,
                          const Tensor<T>& grad_out, Tensor<T>& grad_weight,
                          Tensor<T>& grad_bias) {
  const std::size_t n = x.dim(0), fin = x.dim(1), fout = weight.dim(1);
  Tensor<T> gx({n, fin});
  for (std::size_t i = 0; i < n; ++i) {
    const T* gr = grad_out.row(i);
    const T* xr = x.row(i);
    T* gxr = gx.row(i);
    for (std::size_t b = 0; b < fout; ++b) grad_bias[b] += gr[b];
    for (std::size_t a = 0; a < fin; ++a) {
      const T* wr = weight.row(a);
      T* gwr = grad_weight.row(a);
      const T xv = xr[a];
      T acc = 0;
      for (std::size_t b = 0; b < fout; ++b) {
        acc += gr[b] * wr[b];
        gwr[b] += xv * gr[b];
      }
      gxr[a] = acc;
    }
  }
  return gx;
}

template <typename T>
struct Linear {
  Param<T> weight;  // F_in x F_out
  Param<T> bias;    // F_out

  void init(std::size_t fin, std::size_t fout, const std::string& name, Rng& rng) {
    weight = Param<T>(name + ".weight", Tensor<T>({fin, fout}));
    bias = Param<T>(name + ".bias", Tensor<T>({fout}));
    kaiming_uniform(weight.value, fin, rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fin));
    for (std::size_t i = 0; i < bias.value.size(); ++i) {
      bias.value[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return linear_forward(x, weight.value, bias.value);
  }
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
    return linear_backward(x, weight.value, grad_out, weight.grad, bias.grad);
  }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
  Tensor<T> gx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) gx[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return gx;
}

// ---------------------------------------------------------------------------
// batch normalization over the leading (row) axis
// ---------------------------------------------------------------------------

enum class NormMode { kTrain, kEval, kIdentity };

/// Per-channel normalization of an N x C tensor over the row axis. Feature
/// maps are normalized over all cells by flattening H*W into the row axis.
/// Identity mode bypasses normalization entirely (used by gradient checks).
template <typename T>
struct BatchNorm {
  Param<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T momentum = T(0.9);
  T epsilon = T(1e-5);
  NormMode mode = NormMode::kTrain;

  struct Ctx {
    Tensor<T> x_hat;             // N x C
    std::vector<T> inv_std;      // C
    std::vector<T> batch_mean;   // C (train mode only)
    std::vector<T> batch_var;    // C
  };

  void init(std::size_t channels, const std::string& name) {
    gamma = Param<T>(name + ".gamma", Tensor<T>({channels}));
    beta = Param<T>(name + ".beta", Tensor<T>({channels}));
    gamma.value.fill(T(1));
    running_mean = Tensor<T>({channels});
    running_var = Tensor<T>({channels});
    running_var.fill(T(1));
  }

  std::size_t channels() const { return gamma.value.size(); }

  Tensor<T> forward(const Tensor<T>& x, Ctx& ctx) const {
    if (mode == NormMode::kIdentity) return x;
    const auto [n, c] = check_input(x);
    ctx.x_hat = Tensor<T>({n, c});
    ctx.inv_std.assign(c, T(0));
    Tensor<T> y({n, c});

    std::vector<T> mean(c, T(0)), var(c, T(0));
    if (mode == NormMode::kTrain) {
      if (n < 2) throw ContractError("batch_norm: train mode requires N >= 2");
      for (std::size_t i = 0; i < n; ++i) {
        const T* xr = x.row(i);
        for (std::size_t j = 0; j < c; ++j) mean[j] += xr[j];
      }
      for (std::size_t j = 0; j < c; ++j) mean[j] /= static_cast<T>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const T* xr = x.row(i);
        for (std::size_t j = 0; j < c; ++j) {
          const T d = xr[j] - mean[j];
          var[j] += d * d;
        }
      }
      for (std::size_t j = 0; j < c; ++j) var[j] /= static_cast<T>(n);
      ctx.batch_mean.assign(mean.begin(), mean.end());
      ctx.batch_var.assign(var.begin(), var.end());
    } else {  // kEval
      mean.assign(running_mean.data(), running_mean.data() + c);
      var.assign(running_var.data(), running_var.data() + c);
    }

    for (std::size_t j = 0; j < c; ++j) {
      ctx.inv_std[j] = T(1) / std::sqrt(var[j] + epsilon);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const T* xr = x.row(i);
      T* hr = ctx.x_hat.row(i);
      T* yr = y.row(i);
      for (std::size_t j = 0; j < c; ++j) {
        hr[j] = (xr[j] - mean[j]) * ctx.inv_std[j];
        yr[j] = gamma.value[j] * hr[j] + beta.value[j];
      }
    }
    return y;
  }

  Tensor<T> backward(const Ctx& ctx, const Tensor<T>& grad_out) {
    if (mode == NormMode::kIdentity) return grad_out;
    const std::size_t n = grad_out.dim(0), c = grad_out.dim(1);
    Tensor<T> gx({n, c});
    std::vector<T> sum_g(c, T(0)), sum_gh(c, T(0));
    for (std::size_t i = 0; i < n; ++i) {
      const T* gr = grad_out.row(i);
      const T* hr = ctx.x_hat.row(i);
      for (std::size_t j = 0; j < c; ++j) {
        sum_g[j] += gr[j];
        sum_gh[j] += gr[j] * hr[j];
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      beta.grad[j] += sum_g[j];
      gamma.grad[j] += sum_gh[j];
    }
    if (mode == NormMode::kEval) {
      for (std::size_t i = 0; i < n; ++i) {
        const T* gr = grad_out.row(i);
        T* gxr = gx.row(i);
        for (std::size_t j = 0; j < c; ++j) {
          gxr[j] = gr[j] * gamma.value[j] * ctx.inv_std[j];
        }
      }
      return gx;
    }
    const T inv_n = T(1) / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T* gr = grad_out.row(i);
      const T* hr = ctx.x_hat.row(i);
      T* gxr = gx.row(i);
      for (std::size_t j = 0; j < c; ++j) {
        gxr[j] = gamma.value[j] * ctx.inv_std[j] *
                 (gr[j] - sum_g[j] * inv_n - hr[j] * sum_gh[j] * inv_n);
      }
    }
    return gx;
  }

  /// Fold the batch statistics recorded in ctx into the running estimates.
  /// Kept separate from forward so parallel forwards stay read-only.
  void update_running(const Ctx& ctx) {
    if (ctx.batch_mean.empty()) return;
    for (std::size_t j = 0; j < channels(); ++j) {
      running_mean[j] = momentum * running_mean[j] + (T(1) - momentum) * ctx.batch_mean[j];
      running_var[j] = momentum * running_var[j] + (T(1) - momentum) * ctx.batch_var[j];
    }
  }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

 private:
  std::pair<std::size_t, std::size_t> check_input(const Tensor<T>& x) const {
    if (x.rank() != 2 || x.dim(1) != channels()) {
      throw ContractError("batch_norm: expected N x " + std::to_string(channels()) +
                          " input, got " + shape_str(x.shape()));
    }
    return {x.dim(0), x.dim(1)};
  }
};

// ---------------------------------------------------------------------------
// segment max pooling
// ---------------------------------------------------------------------------

/// Elementwise max over rows sharing a segment id. Empty segments yield zero
/// rows. argmax records, per (segment, channel), the first maximizing row.
template <typename T>
Tensor<T> segment_max_forward(const Tensor<T>& x,
                              std::span<const std::int32_t> segment_ids,
                              std::size_t n_segments,
                              std::vector<std::int32_t>* argmax = nullptr) {
  if (x.rank() != 2 || segment_ids.size() != x.dim(0)) {
    throw ContractError("segment_max: ids/rows mismatch");
  }
  const std::size_t n = x.dim(0), f = x.dim(1);
  Tensor<T> out({n_segments, f});
  std::vector<std::int32_t> arg(n_segments * f, -1);
  out.fill(-std::numeric_limits<T>::infinity());
  for (std::size_t i = 0; i < n; ++i) {
    const std::int32_t s = segment_ids[i];
    if (s < 0 || static_cast<std::size_t>(s) >= n_segments) {
      throw ContractError("segment_max: segment id out of range");
    }
    const T* xr = x.row(i);
    T* orow = out.row(s);
    std::int32_t* arow = arg.data() + static_cast<std::size_t>(s) * f;
    for (std::size_t j = 0; j < f; ++j) {
      if (xr[j] > orow[j]) {  // strict: ties keep the lowest row index
        orow[j] = xr[j];
        arow[j] = static_cast<std::int32_t>(i);
      }
    }
  }
  for (std::size_t s = 0; s < n_segments; ++s) {
    T* orow = out.row(s);
    const std::int32_t* arow = arg.data() + s * f;
    for (std::size_t j = 0; j < f; ++j) {
      if (arow[j] < 0) orow[j] = T(0);
    }
  }
  if (argmax) *argmax = std::move(arg);
  return out;
}

template <typename T>
Tensor<T> segment_max_backward(const std::vector<std::int32_t>& argmax,
                               const Tensor<T>& grad_out, std::size_t n_rows) {
  const std::size_t s_count = grad_out.dim(0), f = grad_out.dim(1);
  Tensor<T> gx({n_rows, f});
  for (std::size_t s = 0; s < s_count; ++s) {
    const T* gr = grad_out.row(s);
    const std::int32_t* arow = argmax.data() + s * f;
    for (std::size_t j = 0; j < f; ++j) {
      if (arow[j] >= 0) gx(static_cast<std::size_t>(arow[j]), j) += gr[j];
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// conv2d (same padding, stride 1 or 2) on H x W x C maps
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& kernel, int stride,
                         const Tensor<T>* bias = nullptr) {
  if (x.rank() != 3 || kernel.rank() != 4) {
    throw ContractError("conv2d: expected HxWxC input and khxkwxCixCo kernel");
  }
  const std::size_t h = x.dim(0), w = x.dim(1), ci_n = x.dim(2);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const std::size_t co_n = kernel.dim(3);
  if (kernel.dim(2) != ci_n) throw ContractError("conv2d: channel mismatch");
  if (kh != kw || kh % 2 == 0) throw ContractError("conv2d: kernel must be odd square");
  if (stride != 1 && stride != 2) throw ContractError("conv2d: stride must be 1 or 2");
  if (h % stride != 0 || w % stride != 0) {
    throw ContractError("conv2d: spatial dims must be divisible by stride");
  }
  const int pad = static_cast<int>(kh) / 2;
  const std::size_t oh = h / stride, ow = w / stride;
  Tensor<T> out({oh, ow, co_n});

  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      T* op = &out(oy, ox, 0);
      if (bias) std::copy(bias->data(), bias->data() + co_n, op);
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const std::int64_t iy = static_cast<std::int64_t>(oy) * stride + ky - pad;
        if (iy < 0 || iy >= static_cast<std::int64_t>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::int64_t ix = static_cast<std::int64_t>(ox) * stride + kx - pad;
          if (ix < 0 || ix >= static_cast<std::int64_t>(w)) continue;
          const T* xp = &x(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
          const T* kp = &kernel(ky, kx, 0, 0);
          for (std::size_t ci = 0; ci < ci_n; ++ci) {
            const T xv = xp[ci];
            const T* kr = kp + ci * co_n;
            for (std::size_t co = 0; co < co_n; ++co) op[co] += xv * kr[co];
          }
        }
      }
    }
  }
  return out;
}

/// Returns grad_x; accumulates into grad_kernel (and grad_bias when given).
/// Works from a (co, ci)-transposed kernel copy so both accumulation passes
/// run as broadcast-FMA over contiguous rows.
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& kernel, int stride,
                          const Tensor<T>& grad_out, Tensor<T>& grad_kernel,
                          Tensor<T>* grad_bias = nullptr) {
  const std::size_t h = x.dim(0), w = x.dim(1), ci_n = x.dim(2);
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
  const std::size_t co_n = kernel.dim(3);
  const int pad = static_cast<int>(kh) / 2;
  const std::size_t oh = grad_out.dim(0), ow = grad_out.dim(1);
  Tensor<T> gx({h, w, ci_n});

  std::vector<T> kernel_t(kernel.size());  // (ky, kx, co, ci)
  for (std::size_t ky = 0; ky < kh; ++ky)
    for (std::size_t kx = 0; kx < kw; ++kx)
      for (std::size_t ci = 0; ci < ci_n; ++ci)
        for (std::size_t co = 0; co < co_n; ++co)
          kernel_t[((ky * kw + kx) * co_n + co) * ci_n + ci] = kernel(ky, kx, ci, co);

  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const T* gp = &grad_out(oy, ox, 0);
      if (grad_bias) {
        T* gb = grad_bias->data();
        for (std::size_t co = 0; co < co_n; ++co) gb[co] += gp[co];
      }
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const std::int64_t iy = static_cast<std::int64_t>(oy) * stride + ky - pad;
        if (iy < 0 || iy >= static_cast<std::int64_t>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::int64_t ix = static_cast<std::int64_t>(ox) * stride + kx - pad;
          if (ix < 0 || ix >= static_cast<std::int64_t>(w)) continue;
          const T* xp = &x(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
          T* gxp = &gx(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
          T* gkp = &grad_kernel(ky, kx, 0, 0);
          const T* ktp = kernel_t.data() + (ky * kw + kx) * ci_n * co_n;
          for (std::size_t ci = 0; ci < ci_n; ++ci) {
            const T xv = xp[ci];
            T* gkr = gkp + ci * co_n;
            for (std::size_t co = 0; co < co_n; ++co) gkr[co] += xv * gp[co];
          }
          for (std::size_t co = 0; co < co_n; ++co) {
            const T gv = gp[co];
            const T* ktr = ktp + co * ci_n;
            for (std::size_t ci = 0; ci < ci_n; ++ci) gxp[ci] += gv * ktr[ci];
          }
        }
      }
    }
  }
  return gx;
}

template <typename T>
struct Conv2d {
  Param<T> kernel;  // kh x kw x Ci x Co
  Param<T> bias;    // Co, only when has_bias
  int stride = 1;
  bool has_bias = false;

  void init(std::size_t ksize, std::size_t ci, std::size_t co, int stride_,
            const std::string& name, Rng& rng, bool with_bias = false) {
    stride = stride_;
    has_bias = with_bias;
    kernel = Param<T>(name + ".kernel", Tensor<T>({ksize, ksize, ci, co}));
    kaiming_uniform(kernel.value, ksize * ksize * ci, rng);
    if (with_bias) {
      bias = Param<T>(name + ".bias", Tensor<T>({co}));
      const double bound = 1.0 / std::sqrt(static_cast<double>(ksize * ksize * ci));
      for (std::size_t i = 0; i < co; ++i) {
        bias.value[i] = static_cast<T>(rng.uniform(-bound, bound));
      }
    }
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return conv2d_forward(x, kernel.value, stride, has_bias ? &bias.value : nullptr);
  }
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& grad_out) {
    return conv2d_backward(x, kernel.value, stride, grad_out, kernel.grad,
                           has_bias ? &bias.grad : nullptr);
  }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&kernel);
    if (has_bias) out.push_back(&bias);
  }
};

// ---------------------------------------------------------------------------
// channel concatenation / split (last axis), nearest-neighbor upsampling
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.rank() < 2) {
    throw ContractError("concat_channels: rank mismatch");
  }
  for (std::size_t d = 0; d + 1 < a.rank(); ++d) {
    if (a.dim(d) != b.dim(d)) {
      throw ContractError("concat_channels: leading dims differ: " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
  }
  const std::size_t ca = a.dim(a.rank() - 1), cb = b.dim(b.rank() - 1);
  std::vector<std::size_t> shape = a.shape();
  shape.back() = ca + cb;
  Tensor<T> out(shape);
  const std::size_t rows = a.size() / ca;
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy(a.data() + i * ca, a.data() + (i + 1) * ca, out.data() + i * (ca + cb));
    std::copy(b.data() + i * cb, b.data() + (i + 1) * cb,
              out.data() + i * (ca + cb) + ca);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x, std::size_t ca) {
  const std::size_t c = x.dim(x.rank() - 1);
  const std::size_t cb = c - ca;
  std::vector<std::size_t> sa = x.shape(), sb = x.shape();
  sa.back() = ca;
  sb.back() = cb;
  Tensor<T> a(sa), b(sb);
  const std::size_t rows = x.size() / c;
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy(x.data() + i * c, x.data() + i * c + ca, a.data() + i * ca);
    std::copy(x.data() + i * c + ca, x.data() + (i + 1) * c, b.data() + i * cb);
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
Tensor<T> upsample2x_forward(const Tensor<T>& x) {
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor<T> out({h * 2, w * 2, c});
  for (std::size_t oy = 0; oy < h * 2; ++oy) {
    for (std::size_t ox = 0; ox < w * 2; ++ox) {
      const T* src = &x(oy / 2, ox / 2, 0);
      std::copy(src, src + c, &out(oy, ox, 0));
    }
  }
  return out;
}

template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& grad_out) {
  const std::size_t oh = grad_out.dim(0), ow = grad_out.dim(1), c = grad_out.dim(2);
  Tensor<T> gx({oh / 2, ow / 2, c});
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const T* gp = &grad_out(oy, ox, 0);
      T* gxp = &gx(oy / 2, ox / 2, 0);
      for (std::size_t j = 0; j < c; ++j) gxp[j] += gp[j];
    }
  }
  return gx;
}

/// Flatten an H x W x C map into (H*W) x C rows for per-channel batch norm.
template <typename T>
Tensor<T> map_to_rows(const Tensor<T>& x) {
  return Tensor<T>({x.dim(0) * x.dim(1), x.dim(2)}, x.raw());
}

template <typename T>
Tensor<T> rows_to_map(const Tensor<T>& x, std::size_t h, std::size_t w) {
  return Tensor<T>({h, w, x.dim(1)}, x.raw());
}

}  // namespace kpbev
