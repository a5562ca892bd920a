#ifndef RACNET_LAYERS_HPP
#define RACNET_LAYERS_HPP

#include <string>
#include <variant>

#include "racnet/tensor.hpp"

namespace racnet {

// Weight layout: (out_ch) x (in_ch * k * k), one row per output channel.
struct Conv2d {
  Index in_ch = 0, out_ch = 0, ksize = 3, stride = 1, pad = 1;
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
};

// Per-channel affine with stored running statistics; forward always
// normalizes with the running stats, training updates them on the side.
struct BatchNorm {
  Eigen::VectorXd gamma, beta, running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.05;
};

struct Relu {};

struct MaxPool {
  Index ksize = 2, stride = 2;
};

struct AvgPool {
  Index ksize = 2, stride = 2;
};

struct Flatten {};

// Weight layout: (out) x (in).
struct Dense {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
};

using Layer = std::variant<Conv2d, BatchNorm, Relu, MaxPool, AvgPool, Flatten, Dense>;

const char* layer_kind(const Layer& l);

/// Static shape inference; throws on incompatible input shape.
Shape output_shape(const Layer& l, const Shape& in);

/// Inference-mode forward of a single layer.
Tensor apply(const Layer& l, const Tensor& x);

/// Gradients for one layer's parameters; empty blocks where not applicable.
struct LayerGrads {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;
  Eigen::VectorXd gamma, beta;
};

/// Backward pass of one layer: given the cached input `x` and the gradient
/// w.r.t. the layer output, returns the gradient w.r.t. `x` and (optionally)
/// accumulates parameter gradients into `grads`.
Tensor backward(const Layer& l, const Tensor& x, const Tensor& grad_out,
                LayerGrads* grads);

/// FLOPs for one layer at the given input shape.
/// Conventions: conv = 2*Cout*Hout*Wout*Cin*K^2 + Cout*Hout*Wout,
/// dense = 2*in*out + out, batch-norm = 2 per element, relu/pool = 1 per
/// output element, flatten = 0.
double layer_flops(const Layer& l, const Shape& in);

// im2col/col2im for (C,H,W) tensors; column j corresponds to output
// position (oy, ox) with j = oy*Wout + ox.
Eigen::MatrixXd im2col(const Tensor& x, Index ksize, Index stride, Index pad);
Tensor col2im(const Eigen::MatrixXd& cols, const Shape& in_shape, Index ksize,
              Index stride, Index pad);

// Update a BatchNorm layer's running statistics from one sample's
// per-channel moments (spatial moments for conv maps).
void update_running_stats(BatchNorm& bn, const Tensor& x);

}  // namespace racnet

#endif
