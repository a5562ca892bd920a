#ifndef RACNET_DATASET_HPP
#define RACNET_DATASET_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "racnet/tensor.hpp"

namespace racnet {

struct LabeledDataset {
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  int num_classes = 0;
  std::string tag;  // train|validation|test

  size_t size() const { return inputs.size(); }
};

/// 10-class oriented-grating images with per-sample random phase, spatial
/// jitter and Gaussian pixel noise. Learnable by a small CNN but noisy
/// enough that a trained baseline leaves natural errors to detect.
struct SyntheticSpec {
  int classes = 10;
  Index channels = 1;
  Index size = 32;
  double noise_sigma = 0.55;
  std::uint64_t seed = 7;
};

LabeledDataset make_synthetic(const SyntheticSpec& spec, int n, const std::string& tag,
                              std::uint64_t salt);

/// MNIST-style IDX pair (images file + labels file).
LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path,
                        const std::string& tag);

/// CIFAR-10 binary batch files (3073-byte records).
LabeledDataset load_cifar10(const std::vector<std::string>& batch_paths,
                            const std::string& tag);

/// Unlabeled inputs for OOD evaluation.
std::vector<Tensor> make_noise_inputs(const Shape& shape, int n, bool gaussian,
                                      std::uint64_t seed);

}  // namespace racnet

#endif
