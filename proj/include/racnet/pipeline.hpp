#ifndef RACNET_PIPELINE_HPP
#define RACNET_PIPELINE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "racnet/evaluation.hpp"
#include "racnet/serialize.hpp"

namespace racnet {

struct DatasetSpec {
  std::string type = "synthetic";  // synthetic | idx | cifar10
  SyntheticSpec synth;
  int train_n = 2000, val_n = 500, test_n = 1000;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // cifar10
  std::vector<std::string> train_batches, test_batches;
  double val_fraction = 0.1;  // carved from the train files for idx/cifar10
};

struct SweepGrids {
  std::vector<std::pair<Index, Index>> layer_pairs = {{2, 3}, {4, 5}, {6, 7}};
  std::vector<int> k = {8, 16, 32, 64};
  std::vector<double> delta = {0.5, 0.7, 0.9};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::string arch = "vgg8";
  std::uint64_t seed = 1;
  TrainConfig train;
  LrpParams lrp;
  int lrp_max_samples = 0;  // 0 = use the whole train split
  std::vector<Index> validation_layers = {4, 5};
  int k = 64;
  double delta_th = 0.7;
  BlcTrainConfig blc;
  SweepGrids sweep;
  AttackConfig attack;
  bool attack_paired = false;  // also run full knowledge and compare mean L2
  int attack_samples = 50;
  int ood_samples = 200;
  std::string out_dir = "out";
};

/// Parses and validates; rejects bad values with the offending field named.
ExperimentConfig parse_config(const Json& j);
ExperimentConfig load_config(const std::string& path);
Json config_to_json(const ExperimentConfig& cfg);

struct Splits {
  LabeledDataset train, val, test;
};
Splits load_splits(const DatasetSpec& spec);

std::string model_path(const ExperimentConfig& cfg);
std::string matrix_path(const ExperimentConfig& cfg, Index conv_id);
std::string racs_path(const ExperimentConfig& cfg);

/// Train the backbone and write the model file (plus a training-curve log).
/// Reuses an existing model file unless `force`.
std::string cmd_train(const ExperimentConfig& cfg, bool force);

/// One relevance-score matrix file per configured validation layer; files
/// carrying a matching provenance key are reused unless `force`.
std::vector<std::string> cmd_relevance(const ExperimentConfig& cfg, bool force);

/// Train all BLCs at every validation layer and write the RAC bundle.
std::string cmd_train_racs(const ExperimentConfig& cfg, bool force);

struct EvalOutputs {
  DetectionReport detection;
  FlopsReport flops;
  std::string outcomes_path, report_path;
};

/// Full test-split evaluation; refuses model/RAC bundles whose provenance
/// hashes disagree. baseline_only evaluates the plain backbone.
EvalOutputs cmd_eval(const ExperimentConfig& cfg, bool baseline_only);

struct SweepPoint {
  // axis values; unused fields hold the config defaults
  Index layer_lo = 0, layer_hi = 0;
  int k = 0;
  double delta = 0.0;
  // medians over seeds
  double tnr = 0.0, fnr = 0.0, normalized_flops = 0.0, early_exit_pct = 0.0;
  bool skipped = false;
  std::string skip_reason;
};

struct SweepResult {
  std::vector<SweepPoint> layer_sweep, k_sweep, delta_sweep;
  // operating point chosen on the validation split
  int selected_k = 0;
  double selected_delta = 0.0;
};

/// Hyper-parameter sweep on the VALIDATION split: layer-pair, k and
/// delta_th grids, medians over the configured seeds. Emits plot-ready
/// series files and a selected operating point.
SweepResult cmd_sweep(const ExperimentConfig& cfg);

struct AttackOutputs {
  AdversarialReport zero;
  std::optional<double> zero_tnr;
  std::optional<AdversarialReport> full;
  std::optional<double> full_tnr;
};

AttackOutputs cmd_attack(const ExperimentConfig& cfg);

struct OodRow {
  std::string source;
  double tnr = 0.0;
  int n = 0;
};

std::vector<OodRow> cmd_ood(const ExperimentConfig& cfg);

/// Single-forward-pass evaluation used by eval and sweeps: taps and logits
/// come from one cached pass, the decision and FLOPs accounting are
/// identical to infer().
struct SampleEval {
  int baseline_label = 0;
  Eigen::VectorXd logits;
  InferenceResult result;
};
SampleEval evaluate_sample(const Network& net, const std::vector<Rac>& racs,
                           const InferencePolicy& policy, const Tensor& x);

}  // namespace racnet

#endif
