#ifndef RACNET_INFERENCE_HPP
#define RACNET_INFERENCE_HPP

#include <functional>
#include <vector>

#include "racnet/network.hpp"
#include "racnet/rac.hpp"

namespace racnet {

struct InferencePolicy {
  std::vector<Index> validation_layers;  // conv ids, strictly increasing
  double delta_th = 0.7;
};

void validate(const InferencePolicy& policy, const Network& net);

enum class Verdict { Classified, NoDecision };

struct Outcome {
  Verdict verdict = Verdict::NoDecision;
  int label = -1;  // valid only when verdict == Classified
  Index exit_layer = 0;  // conv id of the last evaluated layer
  bool early = false;
  double flops = 0.0;
};

/// The consensus + confidence decision. `final_layer_eval` runs the layers
/// past the validation prefix and is invoked only on the deferred branch:
///   - any RAC disagreement          -> ND, early
///   - consensus, all probs > delta  -> Classified(consensus), early
///   - consensus, some prob <= delta -> final layer decides: match ->
///     Classified, mismatch -> ND; either way not early.
Outcome decide(const std::vector<RacOutput>& rac_outputs, const InferencePolicy& policy,
               const std::function<int()>& final_layer_eval);

struct InferenceResult {
  Outcome outcome;
  std::vector<RacOutput> rac_outputs;
};

InferenceResult infer(const Network& net, const std::vector<Rac>& racs,
                      const InferencePolicy& policy, const Tensor& x);

/// FLOPs of the prefix net.layers[0..up_to_layer] (inclusive; -1 = empty),
/// indices into net.layers. Monotone nondecreasing in up_to_layer.
double flops_of(const Network& net, Index up_to_layer);

/// Prefix up to and including the tap point of conv `conv_id`.
double prefix_flops(const Network& net, Index conv_id);

double full_net_flops(const Network& net);

/// 2*k*H*W + 1 per BLC, summed over classes.
double rac_flops(const Rac& rac);

struct FlopsReport {
  double avg_flops_baseline = 0.0;
  double avg_flops_rac_system = 0.0;
  double normalized_flops = 0.0;  // baseline / rac system; > 1 means savings
  double early_exit_fraction = 0.0;
};

FlopsReport flops_report(const Network& net, const std::vector<Rac>& racs,
                         const InferencePolicy& policy, const std::vector<Tensor>& inputs);

}  // namespace racnet

#endif
