#include "racnet/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace racnet {

DetectionReport detection_metrics(const std::vector<int>& baseline_pred,
                                  const std::vector<int>& truth,
                                  const std::vector<Outcome>& outcomes) {
  if (baseline_pred.size() != truth.size() || truth.size() != outcomes.size())
    throw std::invalid_argument("detection_metrics: misaligned inputs");
  if (truth.empty()) throw std::invalid_argument("detection_metrics: no samples");

  DetectionReport rep;
  rep.n_samples = int(truth.size());
  int early = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    const bool baseline_correct = baseline_pred[i] == truth[i];
    const bool nd = outcomes[i].verdict == Verdict::NoDecision;
    if (baseline_correct) {
      ++rep.n_positives;
      if (nd) ++rep.n_fn;
    } else {
      ++rep.n_negatives;
      if (nd) ++rep.n_tn;
    }
    if (nd)
      ++rep.n_nd;
    else if (outcomes[i].label == truth[i])
      ++rep.n_correct;
    else
      ++rep.n_bad;
    if (outcomes[i].early) ++early;
  }
  const double n = double(rep.n_samples);
  rep.pct_correct = 100.0 * rep.n_correct / n;
  rep.pct_nd = 100.0 * rep.n_nd / n;
  rep.pct_bad = 100.0 * rep.n_bad / n;
  rep.early_exit_pct = 100.0 * early / n;
  if (rep.n_negatives > 0) rep.tnr = 100.0 * rep.n_tn / double(rep.n_negatives);
  if (rep.n_positives > 0) rep.fnr = 100.0 * rep.n_fn / double(rep.n_positives);
  return rep;
}

bool msr_nd(const Eigen::VectorXd& logits, double threshold) {
  return softmax(logits).maxCoeff() < threshold;
}

double match_msr_threshold(std::vector<double> max_softmax, const std::vector<bool>& correct,
                           double target_fnr_pct) {
  if (max_softmax.size() != correct.size())
    throw std::invalid_argument("match_msr_threshold: misaligned inputs");
  std::vector<double> pos;
  for (size_t i = 0; i < correct.size(); ++i)
    if (correct[i]) pos.push_back(max_softmax[i]);
  if (pos.empty()) throw std::invalid_argument("match_msr_threshold: no correct samples");
  std::sort(pos.begin(), pos.end());
  // FNR(t) = #\{conf < t\} / n; pick the threshold realizing the closest count.
  const int n = int(pos.size());
  int k = int(std::lround(target_fnr_pct * n / 100.0));
  k = std::clamp(k, 0, n);
  if (k == 0) return pos.front() * 0.5;
  if (k == n) return 0.5 * (pos.back() + 1.0) + 1e-9;
  return 0.5 * (pos[size_t(k - 1)] + pos[size_t(k)]);
}

double ood_eval(const Network& net, const std::vector<Rac>& racs,
                const InferencePolicy& policy, const std::vector<Tensor>& ood_inputs) {
  if (ood_inputs.empty()) throw std::invalid_argument("ood_eval: empty OOD set");
  int nd = 0;
  for (const Tensor& x : ood_inputs)
    if (infer(net, racs, policy, x).outcome.verdict == Verdict::NoDecision) ++nd;
  return 100.0 * nd / double(ood_inputs.size());
}

namespace {

// Squared-hinge-free CW margin term on the logits for target class t.
double cw_logit_loss(const Eigen::VectorXd& logits, int target, double margin,
                     Eigen::VectorXd& grad) {
  grad.setZero(logits.size());
  Eigen::Index best_other = -1;
  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    if (i != target && logits[i] > best) {
      best = logits[i];
      best_other = i;
    }
  const double h = best - logits[target] + margin;
  if (h <= 0.0) return 0.0;
  grad[best_other] = 1.0;
  grad[target] = -1.0;
  return h;
}

}  // namespace

std::pair<std::vector<AdversarialExample>, AdversarialReport> generate_adversarial(
    const Network& net, const std::vector<Rac>& racs, const InferencePolicy& policy,
    const std::vector<Tensor>& inputs, const std::vector<int>& truths,
    const AttackConfig& cfg) {
  if (inputs.size() != truths.size())
    throw std::invalid_argument("generate_adversarial: misaligned inputs");
  if (cfg.mode == AttackMode::FullKnowledge && cfg.rac_loss_weight <= 0.0)
    throw std::invalid_argument("generate_adversarial: full knowledge needs rac_loss_weight > 0");
  if (cfg.mode == AttackMode::FullKnowledge && racs.empty())
    throw std::invalid_argument("generate_adversarial: full knowledge needs RACs");

  const int c = net.num_classes;
  std::vector<AdversarialExample> successes;
  AdversarialReport rep;
  rep.n_attempted = int(inputs.size());
  double l2_sum = 0.0;

  for (size_t si = 0; si < inputs.size(); ++si) {
    const Tensor& x0 = inputs[si];
    const int target = (truths[si] + cfg.target_offset) % c;

    // tanh-space variable keeps the iterate inside [0,1].
    Eigen::ArrayXd w(x0.size());
    for (Index i = 0; i < x0.size(); ++i) {
      const double v = std::clamp(x0.data[i], 1e-6, 1.0 - 1e-6);
      w[i] = std::atanh(2.0 * v - 1.0);
    }
    Eigen::ArrayXd m = Eigen::ArrayXd::Zero(w.size()), v2 = m;
    const double b1 = 0.9, b2 = 0.999;

    AdversarialExample best;
    best.truth = truths[si];
    best.target = target;
    best.l2 = std::numeric_limits<double>::infinity();

    for (int it = 0; it < cfg.iterations; ++it) {
      Tensor x(x0.shape);
      x.data = (0.5 * (w.tanh() + 1.0)).matrix();

      LossSpec loss;
      loss.logit_loss = [&](const Eigen::VectorXd& logits, Eigen::VectorXd& grad) {
        return cw_logit_loss(logits, target, cfg.margin, grad);
      };
      if (cfg.mode == AttackMode::FullKnowledge) {
        for (const Rac& rac : racs) {
          loss.tap_losses[rac.layer] = [&, target](const Tensor& tap, Tensor& grad) {
            const RacOutput out = rac_forward(rac, tap);
            Eigen::VectorXd dprob = Eigen::VectorXd::Zero(out.blc_probs.size());
            double term = 0.0;
            for (Eigen::Index i = 0; i < out.blc_probs.size(); ++i) {
              const double p = std::clamp(out.blc_probs[i], 1e-12, 1.0 - 1e-12);
              if (int(i) == target) {
                term -= std::log(p);
                dprob[i] = -1.0 / p;
              } else {
                term -= std::log(1.0 - p) / double(c - 1);
                dprob[i] = 1.0 / (1.0 - p) / double(c - 1);
              }
            }
            const double scale = cfg.rac_loss_weight / double(racs.size());
            grad = rac_backward(rac, tap, dprob * scale);
            return term * scale;
          };
        }
      }

      Tensor gx = input_gradient(net, x, loss);
      const Eigen::ArrayXd delta = (x.data - x0.data).array();
      Eigen::ArrayXd g = gx.data.array() + 2.0 * cfg.lambda * delta;
      g *= 0.5 * (1.0 - w.tanh().square());  // dx/dw

      m = b1 * m + (1 - b1) * g;
      v2 = b2 * v2 + (1 - b2) * g.square();
      const double t = double(it + 1);
      w -= cfg.step_size * (m / (1 - std::pow(b1, t))) /
           ((v2 / (1 - std::pow(b2, t))).sqrt() + 1e-8);

      // Track the lowest-distortion iterate that fools the baseline.
      Eigen::Index argmax;
      forward(net, x).data.maxCoeff(&argmax);
      if (int(argmax) == target) {
        const double l2 = std::sqrt(delta.square().sum());
        if (l2 < best.l2) {
          best.success = true;
          best.l2 = l2;
          best.input = x;
        }
      }
    }
    if (best.success) {
      ++rep.n_success;
      l2_sum += best.l2;
      successes.push_back(std::move(best));
    }
  }
  rep.success_rate = rep.n_attempted > 0
                         ? 100.0 * rep.n_success / double(rep.n_attempted)
                         : 0.0;
  rep.mean_l2 = rep.n_success > 0 ? l2_sum / double(rep.n_success) : 0.0;
  return {std::move(successes), rep};
}

double adversarial_tnr(const Network& net, const std::vector<Rac>& racs,
                       const InferencePolicy& policy,
                       const std::vector<AdversarialExample>& examples) {
  int nd = 0, n = 0;
  for (const auto& ex : examples) {
    if (!ex.success) continue;
    ++n;
    if (infer(net, racs, policy, ex.input).outcome.verdict == Verdict::NoDecision) ++nd;
  }
  if (n == 0) throw std::invalid_argument("adversarial_tnr: no successful adversaries");
  return 100.0 * nd / double(n);
}

}  // namespace racnet
