#ifndef RACNET_EVALUATION_HPP
#define RACNET_EVALUATION_HPP

#include <cstdint>
#include <optional>
#include <vector>

#include "racnet/inference.hpp"

namespace racnet {

struct DetectionReport {
  double pct_correct = 0.0, pct_nd = 0.0, pct_bad = 0.0;
  std::optional<double> tnr, fnr;  // absent when there are no negatives/positives
  double early_exit_pct = 0.0;
  int n_samples = 0, n_negatives = 0, n_positives = 0;
  int n_correct = 0, n_nd = 0, n_bad = 0;
  int n_tn = 0, n_fn = 0;  // ND counts among negatives / positives
};

/// Negatives are baseline-misclassified samples, positives baseline-correct.
/// TNR/FNR are the ND rates within each group.
DetectionReport detection_metrics(const std::vector<int>& baseline_pred,
                                  const std::vector<int>& truth,
                                  const std::vector<Outcome>& outcomes);

/// Maximal-softmax-response detector: ND when max softmax < threshold.
bool msr_nd(const Eigen::VectorXd& logits, double threshold);

/// Threshold whose MSR FNR on (confidences, correctness) best matches
/// target_fnr, by bisection over the sorted confidence values.
double match_msr_threshold(std::vector<double> max_softmax, const std::vector<bool>& correct,
                           double target_fnr_pct);

struct MsrComparison {
  double threshold = 0.0;
  double msr_fnr = 0.0, msr_tnr = 0.0;
  double rac_fnr = 0.0, rac_tnr = 0.0;
  bool comparable = false;  // |FNR gap| <= 0.5 points
};

/// OOD inputs are all negatives; returns the fraction flagged ND.
double ood_eval(const Network& net, const std::vector<Rac>& racs,
                const InferencePolicy& policy, const std::vector<Tensor>& ood_inputs);

enum class AttackMode { ZeroKnowledge, FullKnowledge };

struct AttackConfig {
  AttackMode mode = AttackMode::ZeroKnowledge;
  int target_offset = 1;       // target class = (truth + offset) mod c
  double lambda = 0.05;        // weight on the squared-L2 distortion penalty
  double margin = 0.0;         // logit margin in the hinge term
  double step_size = 0.01;
  int iterations = 200;
  double rac_loss_weight = 1.0;  // full knowledge only; must be > 0 there
};

struct AdversarialExample {
  Tensor input;
  int truth = 0, target = 0;
  bool success = false;
  double l2 = 0.0;
};

struct AdversarialReport {
  double success_rate = 0.0;
  double mean_l2 = 0.0;  // over successful adversaries only
  std::optional<double> adv_tnr;  // ND rate over successful adversaries
  int n_attempted = 0, n_success = 0;
};

/// Targeted CW-style attack: hinge margin loss on logits plus an L2
/// distortion penalty, optimized by gradient descent in tanh space so the
/// result stays in the input box [0,1]. Full knowledge adds binary
/// cross-entropy terms on every RAC steering its BLCs toward the target.
/// Success means the baseline predicts the target class.
std::pair<std::vector<AdversarialExample>, AdversarialReport> generate_adversarial(
    const Network& net, const std::vector<Rac>& racs, const InferencePolicy& policy,
    const std::vector<Tensor>& inputs, const std::vector<int>& truths,
    const AttackConfig& cfg);

/// Adversarial TNR of the RAC system over successful adversaries.
double adversarial_tnr(const Network& net, const std::vector<Rac>& racs,
                       const InferencePolicy& policy,
                       const std::vector<AdversarialExample>& examples);

}  // namespace racnet

#endif
