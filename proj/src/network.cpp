#include "racnet/network.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace racnet {

std::vector<ArchLayer> vgg8_arch(int num_classes) {
  std::vector<ArchLayer> arch;
  const Index channels[8] = {32, 32, 64, 64, 128, 128, 128, 128};
  for (int i = 0; i < 8; ++i) {
    arch.push_back({"conv2d", channels[i], 3, 1, 1});
    arch.push_back({"batchnorm"});
    arch.push_back({"relu"});
    if (i == 1 || i == 3 || i == 5) arch.push_back({"maxpool", 0, 2, 2, 0});
  }
  arch.push_back({"flatten"});
  arch.push_back({"dense", num_classes});
  return arch;
}

Network init_network(const std::vector<ArchLayer>& arch, const Shape& input_shape,
                     int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("init_network: need >= 2 classes");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Network net;
  net.input_shape = input_shape;
  net.num_classes = num_classes;
  Shape cur = input_shape;
  for (const ArchLayer& a : arch) {
    Layer layer;
    if (a.kind == "conv2d") {
      if (cur.size() != 3) throw std::invalid_argument("conv2d needs (C,H,W) input");
      Conv2d c;
      c.in_ch = cur[0];
      c.out_ch = a.channels;
      c.ksize = a.ksize;
      c.stride = a.stride;
      c.pad = a.pad;
      const double std_dev = std::sqrt(2.0 / double(c.in_ch * c.ksize * c.ksize));
      c.weight = Eigen::MatrixXd::NullaryExpr(
          c.out_ch, c.in_ch * c.ksize * c.ksize,
          [&]() { return gauss(rng) * std_dev; });
      c.bias = Eigen::VectorXd::Zero(c.out_ch);
      layer = std::move(c);
    } else if (a.kind == "batchnorm") {
      if (cur.size() != 3) throw std::invalid_argument("batchnorm needs (C,H,W) input");
      BatchNorm b;
      b.gamma = Eigen::VectorXd::Ones(cur[0]);
      b.beta = Eigen::VectorXd::Zero(cur[0]);
      b.running_mean = Eigen::VectorXd::Zero(cur[0]);
      b.running_var = Eigen::VectorXd::Ones(cur[0]);
      layer = std::move(b);
    } else if (a.kind == "relu") {
      layer = Relu{};
    } else if (a.kind == "maxpool") {
      layer = MaxPool{a.ksize, a.stride};
    } else if (a.kind == "avgpool") {
      layer = AvgPool{a.ksize, a.stride};
    } else if (a.kind == "flatten") {
      layer = Flatten{};
    } else if (a.kind == "dense") {
      const Index in = Tensor::numel(cur);
      if (cur.size() != 1)
        throw std::invalid_argument("dense needs a flat input; add flatten first");
      Dense d;
      const double std_dev = std::sqrt(2.0 / double(in));
      d.weight = Eigen::MatrixXd::NullaryExpr(a.channels, in,
                                              [&]() { return gauss(rng) * std_dev; });
      d.bias = Eigen::VectorXd::Zero(a.channels);
      layer = std::move(d);
    } else {
      throw std::invalid_argument("unknown layer kind: " + a.kind);
    }
    cur = output_shape(layer, cur);
    net.layers.push_back(std::move(layer));
  }
  if (cur.size() != 1 || cur[0] != num_classes)
    throw std::invalid_argument("final layer must emit " + std::to_string(num_classes) +
                                " logits, got " + shape_str(cur));
  return net;
}

std::vector<Index> conv_layer_ids(const Network& net) {
  std::vector<Index> ids;
  for (Index i = 0; i < net.depth(); ++i)
    if (std::holds_alternative<Conv2d>(net.layers[i])) ids.push_back(i);
  return ids;
}

Index tap_end(const Network& net, Index conv_id) {
  const auto convs = conv_layer_ids(net);
  if (conv_id < 0 || conv_id >= static_cast<Index>(convs.size()))
    throw std::out_of_range("tap: conv id " + std::to_string(conv_id) +
                            " out of range (network has " +
                            std::to_string(convs.size()) + " conv layers)");
  Index i = convs[size_t(conv_id)];
  while (i + 1 < net.depth() &&
         (std::holds_alternative<BatchNorm>(net.layers[i + 1]) ||
          std::holds_alternative<Relu>(net.layers[i + 1])))
    ++i;
  return i;
}

ForwardCache forward_cached(const Network& net, const Tensor& x) {
  if (!same_shape(x.shape, net.input_shape))
    throw std::invalid_argument("forward: input shape " + shape_str(x.shape) +
                                " != network input " + shape_str(net.input_shape));
  ForwardCache cache;
  cache.inputs.reserve(net.layers.size() + 1);
  cache.inputs.push_back(x);
  for (const Layer& l : net.layers)
    cache.inputs.push_back(racnet::apply(l, cache.inputs.back()));
  return cache;
}

Tensor forward(const Network& net, const Tensor& x) {
  if (!same_shape(x.shape, net.input_shape))
    throw std::invalid_argument("forward: input shape " + shape_str(x.shape) +
                                " != network input " + shape_str(net.input_shape));
  Tensor cur = x;
  for (const Layer& l : net.layers) cur = racnet::apply(l, cur);
  return cur;
}

Tensor forward_from(const Network& net, Index from, const Tensor& activation) {
  Tensor cur = activation;
  for (Index i = from; i < net.depth(); ++i) cur = racnet::apply(net.layers[i], cur);
  return cur;
}

std::pair<Tensor, std::map<Index, Tensor>> forward_with_taps(
    const Network& net, const Tensor& x, const std::vector<Index>& tap_convs) {
  std::map<Index, Index> end_to_conv;  // layer index -> conv id
  for (Index t : tap_convs) end_to_conv[tap_end(net, t)] = t;
  if (!same_shape(x.shape, net.input_shape))
    throw std::invalid_argument("forward: input shape mismatch");
  std::map<Index, Tensor> taps;
  Tensor cur = x;
  for (Index i = 0; i < net.depth(); ++i) {
    cur = racnet::apply(net.layers[i], cur);
    if (auto it = end_to_conv.find(i); it != end_to_conv.end())
      taps.emplace(it->second, cur);
  }
  return {std::move(cur), std::move(taps)};
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  Eigen::ArrayXd e = (logits.array() - logits.maxCoeff()).exp();
  return (e / e.sum()).matrix();
}

double total_params(const Network& net) {
  double n = 0;
  for (const Layer& l : net.layers) {
    if (const auto* c = std::get_if<Conv2d>(&l))
      n += double(c->weight.size() + c->bias.size());
    else if (const auto* b = std::get_if<BatchNorm>(&l))
      n += double(b->gamma.size() + b->beta.size());
    else if (const auto* d = std::get_if<Dense>(&l))
      n += double(d->weight.size() + d->bias.size());
  }
  return n;
}

}  // namespace racnet
