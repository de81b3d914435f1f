#pragma once

#include "qcnn/graph.hpp"
#include "qcnn/tensor.hpp"

#include <functional>
#include <span>
#include <vector>

namespace qcnn {

// Differentiable ops. Each takes the active Graph; when the graph records and
// any input requires a gradient, a backward node is appended.

// input [N,C,H,W], kernel [F,C,kH,kW], bias [F] or null. Zero padding.
// Output extent is floor((H + 2p - kH) / stride) + 1. A remainder wider than
// the trailing padding plus (stride - kH) is a configuration error.
TensorPtr conv2d(Graph& g, const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, int stride, int padding);

// input [N,D], weight [K,D], bias [K] or null.
TensorPtr linear(Graph& g, const TensorPtr& input, const TensorPtr& weight,
                 const TensorPtr& bias);

TensorPtr add(Graph& g, const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(Graph& g, const TensorPtr& a, const TensorPtr& b);
TensorPtr sum(Graph& g, const TensorPtr& x);

// Multiplies axis-1 channel c by scale[c]; the scales are constants.
TensorPtr scale_channels(Graph& g, const TensorPtr& x, const ArrayXs& scale);
// Adds bias[c] (a parameter) along axis 1.
TensorPtr add_channel_bias(Graph& g, const TensorPtr& x, const TensorPtr& bias);

TensorPtr relu(Graph& g, const TensorPtr& x);
TensorPtr hardtanh(Graph& g, const TensorPtr& x);

// Forward values are supplied by the caller; backward multiplies the upstream
// gradient by `derivative` elementwise. Building block for every quantizer.
TensorPtr elementwise_map(Graph& g, const TensorPtr& x, ArrayXs values, ArrayXs derivative,
                          const char* op_name = "map");

// Straight-through estimator: output = forward_fn(x); backward passes the
// upstream gradient where clip_lo <= x <= clip_hi and zeroes it elsewhere.
TensorPtr ste_identity(Graph& g, const TensorPtr& x,
                       const std::function<ArrayXs(const ArrayXs&)>& forward_fn,
                       Scalar clip_lo, Scalar clip_hi);

enum class PoolKind { Max, Avg };

TensorPtr pool2d(Graph& g, const TensorPtr& x, PoolKind kind, int kernel, int stride);
TensorPtr global_avg_pool(Graph& g, const TensorPtr& x);
TensorPtr flatten(Graph& g, const TensorPtr& x);

struct BatchNormBuffers {
  TensorPtr gamma, beta;             // parameters [C]
  TensorPtr running_mean, running_var;  // buffers [C]
  Scalar epsilon = Scalar(1e-5);
  Scalar momentum = Scalar(0.1);
};

// Works on [N,C] and [N,C,H,W]. Training mode uses batch statistics and
// updates the running estimates; eval mode uses the running estimates.
TensorPtr batch_norm(Graph& g, const TensorPtr& x, const BatchNormBuffers& bn, bool training);

// Mean softmax cross-entropy over the batch; logits [N,K].
TensorPtr softmax_cross_entropy(Graph& g, const TensorPtr& logits, std::span<const int> labels);

}  // namespace qcnn
