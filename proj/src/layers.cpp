#include "racnet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace racnet {

namespace {

void expect_chw(const Shape& s, const char* who) {
  if (s.size() != 3)
    throw std::invalid_argument(std::string(who) + ": expected (C,H,W) input, got " +
                                shape_str(s));
}

Index pooled_extent(Index in, Index k, Index stride) {
  if (in < k) throw std::invalid_argument("pool: window larger than input");
  return (in - k) / stride + 1;
}

Index conv_extent(Index in, Index k, Index stride, Index pad) {
  Index out = (in + 2 * pad - k) / stride + 1;
  if (out <= 0) throw std::invalid_argument("conv: empty output extent");
  return out;
}

}  // namespace

const char* layer_kind(const Layer& l) {
  struct V {
    const char* operator()(const Conv2d&) const { return "conv2d"; }
    const char* operator()(const BatchNorm&) const { return "batchnorm"; }
    const char* operator()(const Relu&) const { return "relu"; }
    const char* operator()(const MaxPool&) const { return "maxpool"; }
    const char* operator()(const AvgPool&) const { return "avgpool"; }
    const char* operator()(const Flatten&) const { return "flatten"; }
    const char* operator()(const Dense&) const { return "dense"; }
  };
  return std::visit(V{}, l);
}

Shape output_shape(const Layer& l, const Shape& in) {
  if (const auto* c = std::get_if<Conv2d>(&l)) {
    expect_chw(in, "conv2d");
    if (in[0] != c->in_ch)
      throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(in));
    return {c->out_ch, conv_extent(in[1], c->ksize, c->stride, c->pad),
            conv_extent(in[2], c->ksize, c->stride, c->pad)};
  }
  if (const auto* b = std::get_if<BatchNorm>(&l)) {
    expect_chw(in, "batchnorm");
    if (in[0] != b->gamma.size())
      throw std::invalid_argument("batchnorm: channel mismatch");
    return in;
  }
  if (std::holds_alternative<Relu>(l)) return in;
  if (const auto* p = std::get_if<MaxPool>(&l)) {
    expect_chw(in, "maxpool");
    return {in[0], pooled_extent(in[1], p->ksize, p->stride),
            pooled_extent(in[2], p->ksize, p->stride)};
  }
  if (const auto* p = std::get_if<AvgPool>(&l)) {
    expect_chw(in, "avgpool");
    return {in[0], pooled_extent(in[1], p->ksize, p->stride),
            pooled_extent(in[2], p->ksize, p->stride)};
  }
  if (std::holds_alternative<Flatten>(l)) return {Tensor::numel(in)};
  const auto& d = std::get<Dense>(l);
  if (in.size() != 1 || in[0] != d.weight.cols())
    throw std::invalid_argument("dense: expected flat input of width " +
                                std::to_string(d.weight.cols()) + ", got " +
                                shape_str(in));
  return {d.weight.rows()};
}

Eigen::MatrixXd im2col(const Tensor& x, Index ksize, Index stride, Index pad) {
  const Index C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const Index Ho = conv_extent(H, ksize, stride, pad);
  const Index Wo = conv_extent(W, ksize, stride, pad);
  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(C * ksize * ksize, Ho * Wo);
  for (Index c = 0; c < C; ++c)
    for (Index ky = 0; ky < ksize; ++ky)
      for (Index kx = 0; kx < ksize; ++kx) {
        const Index row = (c * ksize + ky) * ksize + kx;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index y = oy * stride + ky - pad;
          if (y < 0 || y >= H) continue;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index xx = ox * stride + kx - pad;
            if (xx < 0 || xx >= W) continue;
            cols(row, oy * Wo + ox) = x.data[(c * H + y) * W + xx];
          }
        }
      }
  return cols;
}

Tensor col2im(const Eigen::MatrixXd& cols, const Shape& in_shape, Index ksize,
              Index stride, Index pad) {
  const Index C = in_shape[0], H = in_shape[1], W = in_shape[2];
  const Index Ho = conv_extent(H, ksize, stride, pad);
  const Index Wo = conv_extent(W, ksize, stride, pad);
  Tensor out(in_shape);
  for (Index c = 0; c < C; ++c)
    for (Index ky = 0; ky < ksize; ++ky)
      for (Index kx = 0; kx < ksize; ++kx) {
        const Index row = (c * ksize + ky) * ksize + kx;
        for (Index oy = 0; oy < Ho; ++oy) {
          const Index y = oy * stride + ky - pad;
          if (y < 0 || y >= H) continue;
          for (Index ox = 0; ox < Wo; ++ox) {
            const Index xx = ox * stride + kx - pad;
            if (xx < 0 || xx >= W) continue;
            out.data[(c * H + y) * W + xx] += cols(row, oy * Wo + ox);
          }
        }
      }
  return out;
}

namespace {

Tensor conv_forward(const Conv2d& c, const Tensor& x) {
  const Shape os = output_shape(Layer{c}, x.shape);
  const Index HW = os[1] * os[2];
  Eigen::MatrixXd cols = im2col(x, c.ksize, c.stride, c.pad);
  Tensor out(os);
  Eigen::MatrixXd y = c.weight * cols;
  for (Index co = 0; co < c.out_ch; ++co)
    out.data.segment(co * HW, HW) =
        y.row(co).transpose().array() + c.bias[co];
  return out;
}

Tensor bn_forward(const BatchNorm& b, const Tensor& x) {
  const Index C = x.shape[0], HW = x.shape[1] * x.shape[2];
  Tensor out(x.shape);
  for (Index c = 0; c < C; ++c) {
    const double scale = b.gamma[c] / std::sqrt(b.running_var[c] + b.eps);
    const double shift = b.beta[c] - b.running_mean[c] * scale;
    out.data.segment(c * HW, HW) = x.data.segment(c * HW, HW).array() * scale + shift;
  }
  return out;
}

template <bool Max>
Tensor pool_forward(Index k, Index stride, const Tensor& x) {
  const Index C = x.shape[0], H = x.shape[1], W = x.shape[2];
  const Index Ho = pooled_extent(H, k, stride), Wo = pooled_extent(W, k, stride);
  Tensor out({C, Ho, Wo});
  for (Index c = 0; c < C; ++c)
    for (Index oy = 0; oy < Ho; ++oy)
      for (Index ox = 0; ox < Wo; ++ox) {
        double acc = Max ? -std::numeric_limits<double>::infinity() : 0.0;
        for (Index ky = 0; ky < k; ++ky)
          for (Index kx = 0; kx < k; ++kx) {
            const double v = x.data[(c * H + oy * stride + ky) * W + ox * stride + kx];
            if constexpr (Max)
              acc = std::max(acc, v);
            else
              acc += v;
          }
        out.data[(c * Ho + oy) * Wo + ox] = Max ? acc : acc / double(k * k);
      }
  return out;
}

}  // namespace

Tensor apply(const Layer& l, const Tensor& x) {
  output_shape(l, x.shape);  // validates
  if (const auto* c = std::get_if<Conv2d>(&l)) return conv_forward(*c, x);
  if (const auto* b = std::get_if<BatchNorm>(&l)) return bn_forward(*b, x);
  if (std::holds_alternative<Relu>(l))
    return Tensor(x.shape, x.data.cwiseMax(0.0));
  if (const auto* p = std::get_if<MaxPool>(&l))
    return pool_forward<true>(p->ksize, p->stride, x);
  if (const auto* p = std::get_if<AvgPool>(&l))
    return pool_forward<false>(p->ksize, p->stride, x);
  if (std::holds_alternative<Flatten>(l)) return Tensor({x.size()}, x.data);
  const auto& d = std::get<Dense>(l);
  return Tensor({d.weight.rows()}, d.weight * x.data + d.bias);
}

Tensor backward(const Layer& l, const Tensor& x, const Tensor& grad_out,
                LayerGrads* grads) {
  if (const auto* c = std::get_if<Conv2d>(&l)) {
    const Shape os = output_shape(l, x.shape);
    const Index HW = os[1] * os[2];
    Eigen::MatrixXd dy(c->out_ch, HW);
    for (Index co = 0; co < c->out_ch; ++co)
      dy.row(co) = grad_out.data.segment(co * HW, HW).transpose();
    Eigen::MatrixXd cols = im2col(x, c->ksize, c->stride, c->pad);
    if (grads) {
      grads->weight += dy * cols.transpose();
      grads->bias += dy.rowwise().sum();
    }
    return col2im(c->weight.transpose() * dy, x.shape, c->ksize, c->stride, c->pad);
  }
  if (const auto* b = std::get_if<BatchNorm>(&l)) {
    const Index C = x.shape[0], HW = x.shape[1] * x.shape[2];
    Tensor dx(x.shape);
    for (Index c = 0; c < C; ++c) {
      const double inv_std = 1.0 / std::sqrt(b->running_var[c] + b->eps);
      const auto xc = x.data.segment(c * HW, HW);
      const auto gc = grad_out.data.segment(c * HW, HW);
      if (grads) {
        grads->gamma[c] += (gc.array() * (xc.array() - b->running_mean[c]) * inv_std).sum();
        grads->beta[c] += gc.sum();
      }
      dx.data.segment(c * HW, HW) = gc * (b->gamma[c] * inv_std);
    }
    return dx;
  }
  if (std::holds_alternative<Relu>(l)) {
    Tensor dx(x.shape);
    dx.data = (x.data.array() > 0.0).select(grad_out.data, 0.0);
    return dx;
  }
  if (const auto* p = std::get_if<MaxPool>(&l)) {
    const Index C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const Index Ho = grad_out.shape[1], Wo = grad_out.shape[2];
    Tensor dx(x.shape);
    for (Index c = 0; c < C; ++c)
      for (Index oy = 0; oy < Ho; ++oy)
        for (Index ox = 0; ox < Wo; ++ox) {
          Index best = -1;
          double bv = -std::numeric_limits<double>::infinity();
          for (Index ky = 0; ky < p->ksize; ++ky)
            for (Index kx = 0; kx < p->ksize; ++kx) {
              const Index idx =
                  (c * H + oy * p->stride + ky) * W + ox * p->stride + kx;
              if (x.data[idx] > bv) {
                bv = x.data[idx];
                best = idx;
              }
            }
          dx.data[best] += grad_out.data[(c * Ho + oy) * Wo + ox];
        }
    return dx;
  }
  if (const auto* p = std::get_if<AvgPool>(&l)) {
    const Index C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const Index Ho = grad_out.shape[1], Wo = grad_out.shape[2];
    const double inv = 1.0 / double(p->ksize * p->ksize);
    Tensor dx(x.shape);
    for (Index c = 0; c < C; ++c)
      for (Index oy = 0; oy < Ho; ++oy)
        for (Index ox = 0; ox < Wo; ++ox) {
          const double g = grad_out.data[(c * Ho + oy) * Wo + ox] * inv;
          for (Index ky = 0; ky < p->ksize; ++ky)
            for (Index kx = 0; kx < p->ksize; ++kx)
              dx.data[(c * H + oy * p->stride + ky) * W + ox * p->stride + kx] += g;
        }
    return dx;
  }
  if (std::holds_alternative<Flatten>(l)) return Tensor(x.shape, grad_out.data);
  const auto& d = std::get<Dense>(l);
  if (grads) {
    grads->weight += grad_out.data * x.data.transpose();
    grads->bias += grad_out.data;
  }
  return Tensor(x.shape, d.weight.transpose() * grad_out.data);
}

double layer_flops(const Layer& l, const Shape& in) {
  const Shape os = output_shape(l, in);
  const double out_elems = double(Tensor::numel(os));
  if (const auto* c = std::get_if<Conv2d>(&l))
    return 2.0 * out_elems * double(c->in_ch) * double(c->ksize * c->ksize) + out_elems;
  if (std::holds_alternative<BatchNorm>(l)) return 2.0 * out_elems;
  if (std::holds_alternative<Relu>(l) || std::holds_alternative<MaxPool>(l) ||
      std::holds_alternative<AvgPool>(l))
    return out_elems;
  if (std::holds_alternative<Flatten>(l)) return 0.0;
  const auto& d = std::get<Dense>(l);
  return 2.0 * double(d.weight.rows()) * double(d.weight.cols()) + double(d.weight.rows());
}

void update_running_stats(BatchNorm& bn, const Tensor& x) {
  const Index C = x.shape[0], HW = x.shape[1] * x.shape[2];
  for (Index c = 0; c < C; ++c) {
    const auto xc = x.data.segment(c * HW, HW);
    const double mean = xc.mean();
    const double var = (xc.array() - mean).square().sum() / double(HW);
    bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean;
    bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * var;
  }
}

}  // namespace racnet
