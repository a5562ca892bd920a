#ifndef RACNET_NETWORK_HPP
#define RACNET_NETWORK_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "racnet/dataset.hpp"
#include "racnet/layers.hpp"
#include "racnet/tensor.hpp"

namespace racnet {

struct Network {
  Shape input_shape;
  int num_classes = 0;
  std::vector<Layer> layers;

  Index depth() const { return static_cast<Index>(layers.size()); }
};

// Parameter-free architecture description, one entry per layer.
struct ArchLayer {
  std::string kind;        // conv2d|batchnorm|relu|maxpool|avgpool|flatten|dense
  Index channels = 0;      // conv2d: output channels; dense: output width
  Index ksize = 3, stride = 1, pad = 1;  // conv2d / pools (pools use ksize, stride)
};

/// Builds and He-initializes a network from an architecture description.
/// Shapes are inferred front to back; a mismatch throws.
Network init_network(const std::vector<ArchLayer>& arch, const Shape& input_shape,
                     int num_classes, std::uint64_t seed);

/// The reference desk-scale architecture: 8 conv3x3 layers
/// (32,32,64,64,128,128,128,128), BN+ReLU each, maxpool after convs 2/4/6,
/// flatten, one dense head.
std::vector<ArchLayer> vgg8_arch(int num_classes);

/// Indices (into net.layers) of all conv layers, in network order.
std::vector<Index> conv_layer_ids(const Network& net);

/// Index into net.layers of the last layer of conv block `conv_id`
/// (the conv itself, or its trailing batch-norm/ReLU run). Taps are the
/// activations leaving this point.
Index tap_end(const Network& net, Index conv_id);

Tensor forward(const Network& net, const Tensor& x);

/// Forward pass recording post-BN-post-ReLU activations of the named conv
/// layers (ids are conv indices, 0-based in conv order).
std::pair<Tensor, std::map<Index, Tensor>> forward_with_taps(
    const Network& net, const Tensor& x, const std::vector<Index>& tap_convs);

/// Per-layer inputs recorded on a forward pass; inputs[i] feeds layers[i],
/// inputs.back() is the logits.
struct ForwardCache {
  std::vector<Tensor> inputs;
  const Tensor& logits() const { return inputs.back(); }
};

ForwardCache forward_cached(const Network& net, const Tensor& x);

/// Resume a forward pass from the activation entering layer `from`.
Tensor forward_from(const Network& net, Index from, const Tensor& activation);

Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 32;
  int epochs = 10;
  std::uint64_t seed = 1;
};

struct TrainStats {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
};

/// Mini-batch Adam on softmax cross-entropy. Deterministic given the seed;
/// epochs == 0 returns the network unchanged. Throws on divergence (NaN loss).
Network train(Network net, const LabeledDataset& data, const TrainConfig& cfg,
              TrainStats* stats = nullptr);

/// Differentiable scalar of the logits, plus optional terms on tapped
/// activations (keyed by conv id). Each callback returns the loss term and
/// fills the gradient w.r.t. its argument.
struct LossSpec {
  std::function<double(const Eigen::VectorXd& logits, Eigen::VectorXd& grad)> logit_loss;
  std::map<Index, std::function<double(const Tensor& tap, Tensor& grad)>> tap_losses;
};

/// d(loss)/d(input) by reverse-mode differentiation of the inference-mode
/// network.
Tensor input_gradient(const Network& net, const Tensor& x, const LossSpec& loss,
                      double* loss_value = nullptr);

void save_model(const Network& net, const std::string& path);
Network load_model(const std::string& path);

/// FNV-1a over the canonical serialized form; stable across save/load.
std::string model_hash(const Network& net);

double total_params(const Network& net);

}  // namespace racnet

#endif
