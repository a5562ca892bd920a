#ifndef RACNET_LRP_HPP
#define RACNET_LRP_HPP

#include <map>
#include <string>
#include <vector>

#include "racnet/network.hpp"
#include "racnet/tensor.hpp"

namespace racnet {

struct LrpParams {
  double alpha = 2.0;
  double beta = 1.0;
  double stabilizer_eps = 1e-9;
};

void validate(const LrpParams& p);  // requires alpha - beta == 1

/// One-hot relevance seed at the true label.
Eigen::VectorXd output_relevance(int true_label, int num_classes);

/// Redistributes upper-layer relevance through one layer with the
/// alpha/beta positive-negative decomposition. `input` must be the
/// activation recorded on the forward pass. ReLU and flatten pass relevance
/// through; max-pool routes winner-take-all; conv/dense/avg-pool apply the
/// decomposition rule. Batch-norm is rejected here: callers fold it into the
/// adjacent conv first (see fold_batchnorm).
Tensor lrp_step(const Layer& layer, const Tensor& input, const Tensor& upper_relevance,
                const LrpParams& params);

/// Effective conv with the following batch-norm's scale/shift folded into
/// weights and bias (inference-mode statistics).
Conv2d fold_batchnorm(const Conv2d& conv, const BatchNorm& bn);

/// Relevance of the tap activations of conv layer `conv_id` for sample
/// (x, label): forward pass, one-hot seed, repeated lrp_step down to the
/// tap point.
Tensor relevance_at_layer(const Network& net, const Tensor& x, int label,
                          Index conv_id, const LrpParams& params);

/// One forward pass and one downward propagation capturing the relevance at
/// several tap points; identical per layer to relevance_at_layer.
std::map<Index, Tensor> relevance_at_layers(const Network& net, const Tensor& x,
                                            int label, const std::vector<Index>& conv_ids,
                                            const LrpParams& params);

/// Spatial mean of relevance per feature map.
Eigen::VectorXd feature_map_relevance(const Tensor& rel_map);

struct RelevanceScoreMatrix {
  Index layer = 0;  // conv id
  Eigen::MatrixXd scores;  // classes x feature maps
  Eigen::VectorXi class_counts;
  double alpha = 2.0, beta = 1.0;
  std::string model_hash, dataset_tag;
};

/// Algorithm steps 1-13: class-averaged per-feature-map relevance over the
/// training set. Throws if any class has zero samples.
RelevanceScoreMatrix relevance_score_matrix(const Network& net,
                                            const LabeledDataset& train_data,
                                            Index conv_id, const LrpParams& params);

/// Matrices for several layers from a single sweep over the dataset.
std::vector<RelevanceScoreMatrix> relevance_score_matrices(
    const Network& net, const LabeledDataset& train_data,
    const std::vector<Index>& conv_ids, const LrpParams& params);

void save_matrix(const RelevanceScoreMatrix& m, const std::string& path);
RelevanceScoreMatrix load_matrix(const std::string& path);
std::string matrix_hash(const RelevanceScoreMatrix& m);

}  // namespace racnet

#endif
