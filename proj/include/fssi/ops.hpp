#pragma once

#include <cstddef>
#include <span>

#include "fssi/autodiff.hpp"
#include "fssi/tensor.hpp"

// Differentiable primitives. Every function records one node on the tape of
// its first argument. Convolutions take [C, H, W] or batched [N, C, H, W]
// inputs; the output keeps the input's rank.
namespace fssi::ops {

enum class Mode { kTrain, kInfer };

inline constexpr double kBatchNormEpsilon = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Explicit symmetric zero padding; callers compute "same" sizing themselves.
struct Conv2dGeometry {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;
};

std::size_t conv_output_extent(std::size_t input, std::size_t kernel,
                               std::size_t stride, std::size_t pad);

// Full cross-channel correlation. kernels: [Cout, Cin, kh, kw].
Var conv2d_standard(Var input, Var kernels, const Conv2dGeometry& geometry);

// One spatial kernel per channel, no cross-channel sum. kernels: [C, kh, kw].
Var conv2d_depthwise(Var input, Var kernels, const Conv2dGeometry& geometry);

// 1x1 convolution. kernels: [Cout, C].
Var conv_pointwise(Var input, Var kernels);

// Running statistics owned by the model; updated in place by train-mode calls.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
};

// Per-channel normalization over every axis except axis 1 ([N, C, ...]).
// Train mode uses biased batch statistics and updates `state` with momentum
// kBatchNormMomentum; infer mode reads `state` only.
Var batch_norm(Var input, Var gamma, Var beta, BatchNormState& state, Mode mode);

Var relu(Var input);
Var sigmoid(Var input);

// Reductions over the last (time) axis. Max routes its gradient to the
// first index attaining the maximum.
Var mean_over_time(Var input);
Var max_over_time(Var input);

Var mean_over_axis(Var input, std::size_t axis);

// W x + b for x: [n] or batched [N, n]; weights: [m, n]; bias: [m].
Var fully_connected(Var input, Var weights, Var bias);

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var sum(Var input);
Var reshape(Var input, Shape shape);

// x: [..., T], coeff: x's shape without the last axis; broadcasts over T.
Var scale_channels(Var input, Var coeff);

// Rows of a [R, D] tensor, in the given order.
Var gather_rows(Var input, std::span<const std::size_t> rows);

// Mean of the rows of [R, D] sharing a segment id; returns [count, D].
Var segment_mean(Var input, std::span<const std::size_t> segment_ids,
                 std::size_t count);

}  // namespace fssi::ops
