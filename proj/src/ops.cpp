#include "fssi/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fssi/errors.hpp"

namespace fssi::ops {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

std::string describe(const char* op, const Shape& a, const Shape& b) {
  return std::string(op) + ": incompatible shapes " + shape_to_string(a) +
         " and " + shape_to_string(b);
}

// [C, H, W] or [N, C, H, W] viewed as batch, channels, height, width.
struct ImageDims {
  std::size_t n, c, h, w;
  bool batched;
};

ImageDims image_dims(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " +
                   shape_to_string(s));
}

Shape image_shape(const ImageDims& d, std::size_t c, std::size_t h, std::size_t w) {
  if (d.batched) return {d.n, c, h, w};
  return {c, h, w};
}

struct OutputPlane {
  std::size_t h, w;
};

OutputPlane conv_plane(const ImageDims& in, std::size_t kh, std::size_t kw,
                       const Conv2dGeometry& g, const char* op, const Shape& input,
                       const Shape& kernels) {
  if (g.stride_h == 0 || g.stride_w == 0) {
    throw ShapeError(std::string(op) + ": stride must be positive");
  }
  if (kh > in.h + 2 * g.pad_h || kw > in.w + 2 * g.pad_w) {
    throw ShapeError(describe(op, input, kernels) + " (kernel exceeds padded input)");
  }
  return {conv_output_extent(in.h, kh, g.stride_h, g.pad_h),
          conv_output_extent(in.w, kw, g.stride_w, g.pad_w)};
}

// Column matrix [C*kh*kw, Ho*Wo] for one image.
void im2col(const double* image, const ImageDims& d, std::size_t kh, std::size_t kw,
            const Conv2dGeometry& g, OutputPlane out, double* col) {
  const std::size_t plane = out.h * out.w;
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        double* row = col + ((c * kh + i) * kw + j) * plane;
        for (std::size_t oh = 0; oh < out.h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride_h + i) - static_cast<long>(g.pad_h);
          double* dst = row + oh * out.w;
          if (ih < 0 || ih >= static_cast<long>(d.h)) {
            std::fill(dst, dst + out.w, 0.0);
            continue;
          }
          const double* src = image + (c * d.h + static_cast<std::size_t>(ih)) * d.w;
          for (std::size_t ow = 0; ow < out.w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride_w + j) - static_cast<long>(g.pad_w);
            dst[ow] = (iw < 0 || iw >= static_cast<long>(d.w)) ? 0.0 : src[iw];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ImageDims& d, std::size_t kh, std::size_t kw,
                const Conv2dGeometry& g, OutputPlane out, double* image) {
  const std::size_t plane = out.h * out.w;
  for (std::size_t c = 0; c < d.c; ++c) {
    for (std::size_t i = 0; i < kh; ++i) {
      for (std::size_t j = 0; j < kw; ++j) {
        const double* row = col + ((c * kh + i) * kw + j) * plane;
        for (std::size_t oh = 0; oh < out.h; ++oh) {
          const long ih = static_cast<long>(oh * g.stride_h + i) - static_cast<long>(g.pad_h);
          if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
          double* dst = image + (c * d.h + static_cast<std::size_t>(ih)) * d.w;
          const double* src = row + oh * out.w;
          for (std::size_t ow = 0; ow < out.w; ++ow) {
            const long iw = static_cast<long>(ow * g.stride_w + j) - static_cast<long>(g.pad_w);
            if (iw >= 0 && iw < static_cast<long>(d.w)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

// Range of output columns whose input column ow*stride - pad + j is in [0, w).
struct ColumnRange {
  std::size_t begin, end;
};

ColumnRange valid_columns(std::size_t j, std::size_t w, std::size_t out_w,
                          std::size_t stride, std::size_t pad) {
  std::size_t begin = 0;
  if (pad > j) begin = (pad - j + stride - 1) / stride;
  // largest ow with ow*stride + j - pad <= w - 1
  const long limit = static_cast<long>(w) - 1 + static_cast<long>(pad) - static_cast<long>(j);
  if (limit < 0) return {0, 0};
  std::size_t end = std::min(out_w, static_cast<std::size_t>(limit) / stride + 1);
  if (begin > end) begin = end;
  return {begin, end};
}

// Split a shape into (outer, channels, inner) around axis 1 for BN.
struct ChannelLayout {
  std::size_t outer, channels, inner;
};

ChannelLayout channel_layout(const Shape& s) {
  if (s.size() < 2) {
    throw ShapeError("batch_norm: expected [N, C, ...], got " + shape_to_string(s));
  }
  std::size_t inner = 1;
  for (std::size_t a = 2; a < s.size(); ++a) inner *= s[a];
  return {s[0], s[1], inner};
}

Shape drop_last(const Shape& s) {
  if (s.size() < 2) {
    throw ShapeError("time reduction needs rank >= 2, got " + shape_to_string(s));
  }
  return Shape(s.begin(), s.end() - 1);
}

}  // namespace

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride,
                               std::size_t pad) {
  return (input + 2 * pad - kernel) / stride + 1;
}

Var conv2d_standard(Var input, Var kernels, const Conv2dGeometry& g) {
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  const ImageDims d = image_dims(x.shape(), "conv2d_standard");
  if (k.rank() != 4 || k.dim(1) != d.c) {
    throw ShapeError(describe("conv2d_standard", x.shape(), k.shape()));
  }
  const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const OutputPlane out = conv_plane(d, kh, kw, g, "conv2d_standard", x.shape(), k.shape());
  const std::size_t patch = d.c * kh * kw;
  const std::size_t plane = out.h * out.w;

  Tensor y(image_shape(d, cout, out.h, out.w));
  std::vector<double> col(patch * plane);
  ConstMatrixMap kmat(k.raw(), cout, patch);
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(x.raw() + n * d.c * d.h * d.w, d, kh, kw, g, out, col.data());
    MatrixMap(y.raw() + n * cout * plane, cout, plane).noalias() =
        kmat * ConstMatrixMap(col.data(), patch, plane);
  }

  return input.tape->record(std::move(y), {input, kernels},
                            [d, g, out, cout, kh, kw, patch, plane](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    const Tensor& xv = ctx.input(0);
    const Tensor& kv = ctx.input(1);
    Tensor* dx = ctx.input_grad(0);
    Tensor* dk = ctx.input_grad(1);
    std::vector<double> col(patch * plane);
    ConstMatrixMap kmat(kv.raw(), cout, patch);
    for (std::size_t n = 0; n < d.n; ++n) {
      ConstMatrixMap dyn(dy.raw() + n * cout * plane, cout, plane);
      if (dk != nullptr) {
        im2col(xv.raw() + n * d.c * d.h * d.w, d, kh, kw, g, out, col.data());
        MatrixMap(dk->raw(), cout, patch).noalias() +=
            dyn * ConstMatrixMap(col.data(), patch, plane).transpose();
      }
      if (dx != nullptr) {
        MatrixMap(col.data(), patch, plane).noalias() = kmat.transpose() * dyn;
        col2im_add(col.data(), d, kh, kw, g, out, dx->raw() + n * d.c * d.h * d.w);
      }
    }
  });
}

Var conv2d_depthwise(Var input, Var kernels, const Conv2dGeometry& g) {
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  const ImageDims d = image_dims(x.shape(), "conv2d_depthwise");
  if (k.rank() != 3 || k.dim(0) != d.c) {
    throw ShapeError(describe("conv2d_depthwise", x.shape(), k.shape()) +
                     " (need one kernel per input channel)");
  }
  const std::size_t kh = k.dim(1), kw = k.dim(2);
  const OutputPlane out = conv_plane(d, kh, kw, g, "conv2d_depthwise", x.shape(), k.shape());

  Tensor y(image_shape(d, d.c, out.h, out.w));
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const double* src = x.raw() + (n * d.c + c) * d.h * d.w;
      double* dst = y.raw() + (n * d.c + c) * out.h * out.w;
      const double* kern = k.raw() + c * kh * kw;
      for (std::size_t i = 0; i < kh; ++i) {
        for (std::size_t j = 0; j < kw; ++j) {
          const double weight = kern[i * kw + j];
          const ColumnRange cols = valid_columns(j, d.w, out.w, g.stride_w, g.pad_w);
          for (std::size_t oh = 0; oh < out.h; ++oh) {
            const long ih = static_cast<long>(oh * g.stride_h + i) - static_cast<long>(g.pad_h);
            if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
            const double* srow = src + static_cast<std::size_t>(ih) * d.w;
            double* drow = dst + oh * out.w;
            for (std::size_t ow = cols.begin; ow < cols.end; ++ow) {
              drow[ow] += weight * srow[ow * g.stride_w + j - g.pad_w];
            }
          }
        }
      }
    }
  }

  return input.tape->record(std::move(y), {input, kernels},
                            [d, g, out, kh, kw](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    const Tensor& xv = ctx.input(0);
    const Tensor& kv = ctx.input(1);
    Tensor* dx = ctx.input_grad(0);
    Tensor* dk = ctx.input_grad(1);
    for (std::size_t n = 0; n < d.n; ++n) {
      for (std::size_t c = 0; c < d.c; ++c) {
        const std::size_t in_off = (n * d.c + c) * d.h * d.w;
        const double* grad = dy.raw() + (n * d.c + c) * out.h * out.w;
        for (std::size_t i = 0; i < kh; ++i) {
          for (std::size_t j = 0; j < kw; ++j) {
            const double weight = kv[(c * kh + i) * kw + j];
            const ColumnRange cols = valid_columns(j, d.w, out.w, g.stride_w, g.pad_w);
            double wsum = 0.0;
            for (std::size_t oh = 0; oh < out.h; ++oh) {
              const long ih = static_cast<long>(oh * g.stride_h + i) - static_cast<long>(g.pad_h);
              if (ih < 0 || ih >= static_cast<long>(d.h)) continue;
              const std::size_t row = in_off + static_cast<std::size_t>(ih) * d.w;
              const double* grow = grad + oh * out.w;
              for (std::size_t ow = cols.begin; ow < cols.end; ++ow) {
                const std::size_t idx = row + ow * g.stride_w + j - g.pad_w;
                if (dx != nullptr) (*dx)[idx] += weight * grow[ow];
                wsum += xv[idx] * grow[ow];
              }
            }
            if (dk != nullptr) (*dk)[(c * kh + i) * kw + j] += wsum;
          }
        }
      }
    }
  });
}

Var conv_pointwise(Var input, Var kernels) {
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  const ImageDims d = image_dims(x.shape(), "conv_pointwise");
  if (k.rank() != 2 || k.dim(1) != d.c) {
    throw ShapeError(describe("conv_pointwise", x.shape(), k.shape()));
  }
  const std::size_t cout = k.dim(0);
  const std::size_t plane = d.h * d.w;

  Tensor y(image_shape(d, cout, d.h, d.w));
  ConstMatrixMap kmat(k.raw(), cout, d.c);
  for (std::size_t n = 0; n < d.n; ++n) {
    MatrixMap(y.raw() + n * cout * plane, cout, plane).noalias() =
        kmat * ConstMatrixMap(x.raw() + n * d.c * plane, d.c, plane);
  }

  return input.tape->record(std::move(y), {input, kernels},
                            [d, cout, plane](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    const Tensor& xv = ctx.input(0);
    const Tensor& kv = ctx.input(1);
    Tensor* dx = ctx.input_grad(0);
    Tensor* dk = ctx.input_grad(1);
    ConstMatrixMap kmat(kv.raw(), cout, d.c);
    for (std::size_t n = 0; n < d.n; ++n) {
      ConstMatrixMap dyn(dy.raw() + n * cout * plane, cout, plane);
      if (dk != nullptr) {
        MatrixMap(dk->raw(), cout, d.c).noalias() +=
            dyn * ConstMatrixMap(xv.raw() + n * d.c * plane, d.c, plane).transpose();
      }
      if (dx != nullptr) {
        MatrixMap(dx->raw() + n * d.c * plane, d.c, plane).noalias() += kmat.transpose() * dyn;
      }
    }
  });
}

Var batch_norm(Var input, Var gamma, Var beta, BatchNormState& state, Mode mode) {
  const Tensor& x = input.value();
  const ChannelLayout L = channel_layout(x.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  if (gv.size() != L.channels || bv.size() != L.channels ||
      state.running_mean.size() != L.channels || state.running_var.size() != L.channels) {
    throw ShapeError(describe("batch_norm", x.shape(), gv.shape()) +
                     " (per-channel parameters must match channel extent)");
  }
  const std::size_t count = L.outer * L.inner;
  if (mode == Mode::kTrain && count < 2) {
    throw ShapeError("batch_norm: train mode needs at least 2 values per channel, got " +
                     shape_to_string(x.shape()));
  }

  std::vector<double> mean(L.channels), inv_std(L.channels);
  for (std::size_t c = 0; c < L.channels; ++c) {
    if (mode == Mode::kTrain) {
      double s = 0.0;
      for (std::size_t o = 0; o < L.outer; ++o) {
        const double* p = x.raw() + (o * L.channels + c) * L.inner;
        for (std::size_t i = 0; i < L.inner; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t o = 0; o < L.outer; ++o) {
        const double* p = x.raw() + (o * L.channels + c) * L.inner;
        for (std::size_t i = 0; i < L.inner; ++i) ss += (p[i] - mu) * (p[i] - mu);
      }
      const double var = ss / static_cast<double>(count);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + kBatchNormEpsilon);
      state.running_mean[c] =
          (1.0 - kBatchNormMomentum) * state.running_mean[c] + kBatchNormMomentum * mu;
      state.running_var[c] =
          (1.0 - kBatchNormMomentum) * state.running_var[c] + kBatchNormMomentum * var;
    } else {
      mean[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + kBatchNormEpsilon);
    }
  }

  Tensor y(x.shape());
  for (std::size_t o = 0; o < L.outer; ++o) {
    for (std::size_t c = 0; c < L.channels; ++c) {
      const std::size_t off = (o * L.channels + c) * L.inner;
      const double scale = gv[c] * inv_std[c];
      const double shift = bv[c] - mean[c] * scale;
      for (std::size_t i = 0; i < L.inner; ++i) y[off + i] = x[off + i] * scale + shift;
    }
  }

  const bool train = mode == Mode::kTrain;
  return input.tape->record(
      std::move(y), {input, gamma, beta},
      [L, count, train, mean = std::move(mean), inv_std = std::move(inv_std)](
          const BackwardContext& ctx) {
        const Tensor& dy = ctx.out_grad();
        const Tensor& xv = ctx.input(0);
        const Tensor& gv = ctx.input(1);
        Tensor* dx = ctx.input_grad(0);
        Tensor* dgamma = ctx.input_grad(1);
        Tensor* dbeta = ctx.input_grad(2);
        for (std::size_t c = 0; c < L.channels; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t o = 0; o < L.outer; ++o) {
            const std::size_t off = (o * L.channels + c) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) {
              const double xhat = (xv[off + i] - mean[c]) * inv_std[c];
              sum_dy += dy[off + i];
              sum_dy_xhat += dy[off + i] * xhat;
            }
          }
          if (dgamma != nullptr) (*dgamma)[c] += sum_dy_xhat;
          if (dbeta != nullptr) (*dbeta)[c] += sum_dy;
          if (dx == nullptr) continue;
          const double scale = gv[c] * inv_std[c];
          const double m = static_cast<double>(count);
          for (std::size_t o = 0; o < L.outer; ++o) {
            const std::size_t off = (o * L.channels + c) * L.inner;
            for (std::size_t i = 0; i < L.inner; ++i) {
              if (train) {
                const double xhat = (xv[off + i] - mean[c]) * inv_std[c];
                (*dx)[off + i] += scale * (dy[off + i] - sum_dy / m - xhat * sum_dy_xhat / m);
              } else {
                (*dx)[off + i] += scale * dy[off + i];
              }
            }
          }
        }
      });
}

Var relu(Var input) {
  const Tensor& x = input.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  return input.tape->record(std::move(y), {input}, [](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    const Tensor& xv = ctx.input(0);
    Tensor* dx = ctx.input_grad(0);
    for (std::size_t i = 0; i < xv.size(); ++i) {
      if (xv[i] > 0.0) (*dx)[i] += dy[i];
    }
  });
}

Var sigmoid(Var input) {
  const Tensor& x = input.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    // Branches keep exp() from overflowing for large |x|.
    if (x[i] >= 0.0) {
      y[i] = 1.0 / (1.0 + std::exp(-x[i]));
    } else {
      const double e = std::exp(x[i]);
      y[i] = e / (1.0 + e);
    }
  }
  return input.tape->record(std::move(y), {input}, [](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    const Tensor& s = ctx.output();
    Tensor* dx = ctx.input_grad(0);
    for (std::size_t i = 0; i < s.size(); ++i) (*dx)[i] += dy[i] * s[i] * (1.0 - s[i]);
  });
}

Var mean_over_time(Var input) {
  const Tensor& x = input.value();
  Tensor y(drop_last(x.shape()));
  const std::size_t t = x.shape().back();
  for (std::size_t r = 0; r < y.size(); ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < t; ++i) s += x[r * t + i];
    y[r] = s / static_cast<double>(t);
  }
  return input.tape->record(std::move(y), {input}, [t](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    Tensor* dx = ctx.input_grad(0);
    const double inv = 1.0 / static_cast<double>(t);
    for (std::size_t r = 0; r < dy.size(); ++r) {
      for (std::size_t i = 0; i < t; ++i) (*dx)[r * t + i] += dy[r] * inv;
    }
  });
}

Var max_over_time(Var input) {
  const Tensor& x = input.value();
  Tensor y(drop_last(x.shape()));
  const std::size_t t = x.shape().back();
  std::vector<std::size_t> argmax(y.size());
  for (std::size_t r = 0; r < y.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < t; ++i) {
      if (x[r * t + i] > x[r * t + best]) best = i;
    }
    argmax[r] = best;
    y[r] = x[r * t + best];
  }
  return input.tape->record(std::move(y), {input},
                            [t, argmax = std::move(argmax)](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    Tensor* dx = ctx.input_grad(0);
    for (std::size_t r = 0; r < dy.size(); ++r) (*dx)[r * t + argmax[r]] += dy[r];
  });
}

Var mean_over_axis(Var input, std::size_t axis) {
  const Tensor& x = input.value();
  const Shape& s = x.shape();
  if (axis >= s.size() || s.size() < 2) {
    throw ShapeError("mean_over_axis: axis " + std::to_string(axis) +
                     " invalid for shape " + shape_to_string(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a) inner *= s[a];
  const std::size_t extent = s[axis];
  Shape out_shape = s;
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  Tensor y(out_shape);
  const double inv = 1.0 / static_cast<double>(extent);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      const double* src = x.raw() + (o * extent + e) * inner;
      double* dst = y.raw() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
    for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] *= inv;
  }
  return input.tape->record(std::move(y), {input},
                            [outer, inner, extent, inv](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    Tensor* dx = ctx.input_grad(0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t e = 0; e < extent; ++e) {
        double* dst = dx->raw() + (o * extent + e) * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += dy[o * inner + i] * inv;
      }
    }
  });
}

Var fully_connected(Var input, Var weights, Var bias) {
  const Tensor& x = input.value();
  const Tensor& w = weights.value();
  const Tensor& b = bias.value();
  if (x.rank() > 2 || w.rank() != 2 || w.dim(1) != x.shape().back() || b.size() != w.dim(0)) {
    throw ShapeError(describe("fully_connected", x.shape(), w.shape()));
  }
  const bool batched = x.rank() == 2;
  const std::size_t rows = batched ? x.dim(0) : 1;
  const std::size_t in = w.dim(1), out = w.dim(0);
  Tensor y(batched ? Shape{rows, out} : Shape{out});
  MatrixMap ymat(y.raw(), rows, out);
  ymat.noalias() = ConstMatrixMap(x.raw(), rows, in) * ConstMatrixMap(w.raw(), out, in).transpose();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < out; ++o) ymat(r, o) += b[o];
  }
  return input.tape->record(std::move(y), {input, weights, bias},
                            [rows, in, out](const BackwardContext& ctx) {
    ConstMatrixMap dy(ctx.out_grad().raw(), rows, out);
    Tensor* dx = ctx.input_grad(0);
    Tensor* dw = ctx.input_grad(1);
    Tensor* db = ctx.input_grad(2);
    if (dx != nullptr) {
      MatrixMap(dx->raw(), rows, in).noalias() += dy * ConstMatrixMap(ctx.input(1).raw(), out, in);
    }
    if (dw != nullptr) {
      MatrixMap(dw->raw(), out, in).noalias() +=
          dy.transpose() * ConstMatrixMap(ctx.input(0).raw(), rows, in);
    }
    if (db != nullptr) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) (*db)[o] += dy(r, o);
      }
    }
  });
}

Var add(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  if (x.shape() != z.shape()) throw ShapeError(describe("add", x.shape(), z.shape()));
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] + z[i];
  return a.tape->record(std::move(y), {a, b}, [](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = ctx.input_grad(k)) {
        for (std::size_t i = 0; i < dy.size(); ++i) (*g)[i] += dy[i];
      }
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& x = a.value();
  const Tensor& z = b.value();
  if (x.shape() != z.shape()) throw ShapeError(describe("mul", x.shape(), z.shape()));
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * z[i];
  return a.tape->record(std::move(y), {a, b}, [](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    if (Tensor* ga = ctx.input_grad(0)) {
      for (std::size_t i = 0; i < dy.size(); ++i) (*ga)[i] += dy[i] * ctx.input(1)[i];
    }
    if (Tensor* gb = ctx.input_grad(1)) {
      for (std::size_t i = 0; i < dy.size(); ++i) (*gb)[i] += dy[i] * ctx.input(0)[i];
    }
  });
}

Var sum(Var input) {
  const Tensor& x = input.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return input.tape->record(Tensor::scalar(s), {input}, [](const BackwardContext& ctx) {
    const double g = ctx.out_grad()[0];
    Tensor* dx = ctx.input_grad(0);
    for (double& v : dx->data()) v += g;
  });
}

Var reshape(Var input, Shape shape) {
  Tensor y = input.value().reshaped(std::move(shape));
  return input.tape->record(std::move(y), {input}, [](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    Tensor* dx = ctx.input_grad(0);
    for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i];
  });
}

Var scale_channels(Var input, Var coeff) {
  const Tensor& x = input.value();
  const Tensor& a = coeff.value();
  if (a.shape() != drop_last(x.shape())) {
    throw ShapeError(describe("scale_channels", x.shape(), a.shape()));
  }
  const std::size_t t = x.shape().back();
  Tensor y(x.shape());
  for (std::size_t r = 0; r < a.size(); ++r) {
    for (std::size_t i = 0; i < t; ++i) y[r * t + i] = a[r] * x[r * t + i];
  }
  return input.tape->record(std::move(y), {input, coeff}, [t](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    const Tensor& xv = ctx.input(0);
    const Tensor& av = ctx.input(1);
    Tensor* dx = ctx.input_grad(0);
    Tensor* da = ctx.input_grad(1);
    for (std::size_t r = 0; r < av.size(); ++r) {
      double acc = 0.0;
      for (std::size_t i = 0; i < t; ++i) {
        if (dx != nullptr) (*dx)[r * t + i] += av[r] * dy[r * t + i];
        acc += xv[r * t + i] * dy[r * t + i];
      }
      if (da != nullptr) (*da)[r] += acc;
    }
  });
}

Var gather_rows(Var input, std::span<const std::size_t> rows) {
  const Tensor& x = input.value();
  if (x.rank() != 2 || rows.empty()) {
    throw ShapeError("gather_rows: expected [R, D] and a non-empty row list, got " +
                     shape_to_string(x.shape()));
  }
  const std::size_t width = x.dim(1);
  std::vector<std::size_t> index(rows.begin(), rows.end());
  Tensor y({index.size(), width});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= x.dim(0)) throw ShapeError("gather_rows: row index out of range");
    std::copy_n(x.raw() + index[r] * width, width, y.raw() + r * width);
  }
  return input.tape->record(std::move(y), {input},
                            [width, index = std::move(index)](const BackwardContext& ctx) {
    const Tensor& dy = ctx.out_grad();
    Tensor* dx = ctx.input_grad(0);
    for (std::size_t r = 0; r < index.size(); ++r) {
      for (std::size_t j = 0; j < width; ++j) (*dx)[index[r] * width + j] += dy[r * width + j];
    }
  });
}

Var segment_mean(Var input, std::span<const std::size_t> segment_ids, std::size_t count) {
  const Tensor& x = input.value();
  if (x.rank() != 2 || segment_ids.size() != x.dim(0)) {
    throw ShapeError("segment_mean: need one segment id per row of " +
                     shape_to_string(x.shape()));
  }
  if (count == 0) throw ShapeError("segment_mean: segment count must be positive");
  const std::size_t width = x.dim(1);
  std::vector<std::size_t> ids(segment_ids.begin(), segment_ids.end());
  std::vector<double> members(count, 0.0);
  for (std::size_t id : ids) {
    if (id >= count) throw ShapeError("segment_mean: segment id out of range");
    members[id] += 1.0;
  }
  for (std::size_t s = 0; s < count; ++s) {
    if (members[s] == 0.0) {
      throw ShapeError("segment_mean: segment " + std::to_string(s) + " is empty");
    }
  }
  Tensor y({count, width});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    for (std::size_t j = 0; j < width; ++j) y[ids[r] * width + j] += x[r * width + j];
  }
  for (std::size_t s = 0; s < count; ++s) {
    for (std::size_t j = 0; j < width; ++j) y[s * width + j] /= members[s];
  }
  return input.tape->record(
      std::move(y), {input},
      [width, ids = std::move(ids), members = std::move(members)](const BackwardContext& ctx) {
        const Tensor& dy = ctx.out_grad();
        Tensor* dx = ctx.input_grad(0);
        for (std::size_t r = 0; r < ids.size(); ++r) {
          for (std::size_t j = 0; j < width; ++j) {
            (*dx)[r * width + j] += dy[ids[r] * width + j] / members[ids[r]];
          }
        }
      });
}

}  // namespace fssi::ops
