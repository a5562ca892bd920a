#ifndef RACNET_RAC_HPP
#define RACNET_RAC_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "racnet/lrp.hpp"
#include "racnet/network.hpp"

namespace racnet {

struct RelevantFeatureSet {
  Index layer = 0;  // conv id
  int k = 0;
  std::vector<std::vector<int>> per_class;  // descending relevance, k each
};

struct BinaryLinearClassifier {
  int class_id = 0;
  Eigen::VectorXd weight;  // over the flattened k relevant maps
  double bias = 0.0;
};

double blc_prob(const BinaryLinearClassifier& blc, const Eigen::VectorXd& features);

struct Rac {
  Index layer = 0;  // conv id
  RelevantFeatureSet features;
  std::vector<BinaryLinearClassifier> blcs;  // one per class

  double param_count() const;
};

struct RacOutput {
  int rac_class = 0;
  double rac_prob = 0.0;
  Eigen::VectorXd blc_probs;
};

/// Indices of the k largest entries of row `cls` of M, descending score,
/// ties broken toward the lower index.
std::vector<int> select_relevant_features(const RelevanceScoreMatrix& m, int cls, int k);

/// One-vs-rest labels: 1 where label == cls.
std::vector<int> binary_labels(const std::vector<int>& labels, int cls);

/// Flatten the listed feature maps of a tap into one vector (k*H*W).
Eigen::VectorXd gather_features(const Tensor& tap, const std::vector<int>& maps);

struct BlcTrainConfig {
  double lr = 0.05;
  int batch_size = 64;
  int epochs = 12;
  std::uint64_t seed = 1;
  double pos_weight = 0.0;  // weight on positive-class loss terms; <= 0: auto (c-1)
};

/// Logistic regression by mini-batch SGD on weighted binary cross-entropy.
/// X holds one sample per row. Deterministic given the seed; epochs == 0
/// returns the zero initialization.
BinaryLinearClassifier train_blc(const Eigen::MatrixXd& X, const std::vector<int>& ybin,
                                 const BlcTrainConfig& cfg, int class_id);

/// Same, with rows produced on demand (avoids materializing the design
/// matrix for wide feature slices).
BinaryLinearClassifier train_blc_rows(
    const std::function<void(size_t, Eigen::VectorXd&)>& load_row, Index dim,
    const std::vector<int>& ybin, const BlcTrainConfig& cfg, int class_id);

/// Algorithm: pick top-k features per class from M, gather each class's
/// relevant-feature slices from the taps, train the c one-vs-rest BLCs.
/// `taps` holds the validation-layer activation per training sample.
/// The positive class is weighted by (c-1) unless cfg.pos_weight != 1 was
/// set explicitly; per-BLC seed is cfg.seed + class id.
Rac train_rac_from_taps(const std::vector<Tensor>& taps, const std::vector<int>& labels,
                        const RelevanceScoreMatrix& m, Index conv_id, int k,
                        const BlcTrainConfig& cfg, int num_classes);

/// Convenience wrapper running forward_with_taps over the dataset first.
Rac train_rac(const Network& net, const LabeledDataset& data,
              const RelevanceScoreMatrix& m, Index conv_id, int k,
              const BlcTrainConfig& cfg);

/// Evaluates every BLC on its own class's feature slice; class/prob are the
/// argmax/max of the BLC vector, ties toward the lower class id.
RacOutput rac_forward(const Rac& rac, const Tensor& tap);

/// Gradient of a scalar loss w.r.t. the tap, given d(loss)/d(blc output
/// probability) for each class. Used by full-knowledge attacks.
Tensor rac_backward(const Rac& rac, const Tensor& tap, const Eigen::VectorXd& dprob);

struct RacBundle {
  std::vector<Rac> racs;
  std::string model_hash;
  std::vector<std::string> matrix_hashes;
};

void save_racs(const RacBundle& bundle, const std::string& path);
RacBundle load_racs(const std::string& path);

}  // namespace racnet

#endif
