#include "racnet/inference.hpp"

#include <stdexcept>

namespace racnet {

void validate(const InferencePolicy& policy, const Network& net) {
  if (policy.delta_th < 0.0 || policy.delta_th > 1.0)
    throw std::invalid_argument("policy: delta_th must lie in [0,1]");
  if (policy.validation_layers.size() < 2)
    throw std::invalid_argument("policy: need at least two validation layers");
  const Index n_convs = Index(conv_layer_ids(net).size());
  Index prev = -1;
  for (Index v : policy.validation_layers) {
    if (v <= prev)
      throw std::invalid_argument("policy: validation layers must be strictly increasing");
    if (v < 0 || v >= n_convs)
      throw std::invalid_argument("policy: validation layer " + std::to_string(v) +
                                  " out of range");
    prev = v;
  }
  if (policy.validation_layers.back() == n_convs - 1 &&
      tap_end(net, policy.validation_layers.back()) >= net.depth() - 1)
    throw std::invalid_argument("policy: last validation layer leaves no suffix to run");
}

Outcome decide(const std::vector<RacOutput>& rac_outputs, const InferencePolicy& policy,
               const std::function<int()>& final_layer_eval) {
  if (rac_outputs.empty()) throw std::invalid_argument("decide: no RAC outputs");
  if (rac_outputs.size() != policy.validation_layers.size())
    throw std::invalid_argument("decide: one RAC output per validation layer expected");

  Outcome out;
  const int consensus = rac_outputs.front().rac_class;
  bool agree = true, all_confident = true;
  for (const RacOutput& r : rac_outputs) {
    agree = agree && r.rac_class == consensus;
    all_confident = all_confident && r.rac_prob > policy.delta_th;
  }

  if (!agree) {
    out.verdict = Verdict::NoDecision;
    out.early = true;
    out.exit_layer = policy.validation_layers.back();
    return out;
  }
  if (all_confident) {
    out.verdict = Verdict::Classified;
    out.label = consensus;
    out.early = true;
    out.exit_layer = policy.validation_layers.back();
    return out;
  }
  const int fc = final_layer_eval();
  out.early = false;
  out.exit_layer = policy.validation_layers.back() + 1;  // caller refines
  if (fc == consensus) {
    out.verdict = Verdict::Classified;
    out.label = fc;
  } else {
    out.verdict = Verdict::NoDecision;
  }
  return out;
}

double flops_of(const Network& net, Index up_to_layer) {
  if (up_to_layer >= net.depth())
    throw std::invalid_argument("flops_of: layer index out of range");
  double total = 0.0;
  Shape cur = net.input_shape;
  for (Index i = 0; i <= up_to_layer; ++i) {
    total += layer_flops(net.layers[size_t(i)], cur);
    cur = output_shape(net.layers[size_t(i)], cur);
  }
  return total;
}

double prefix_flops(const Network& net, Index conv_id) {
  return flops_of(net, tap_end(net, conv_id));
}

double full_net_flops(const Network& net) { return flops_of(net, net.depth() - 1); }

double rac_flops(const Rac& rac) {
  double total = 0.0;
  for (const auto& blc : rac.blcs) total += 2.0 * double(blc.weight.size()) + 1.0;
  return total;
}

InferenceResult infer(const Network& net, const std::vector<Rac>& racs,
                      const InferencePolicy& policy, const Tensor& x) {
  validate(policy, net);
  if (racs.size() != policy.validation_layers.size())
    throw std::invalid_argument("infer: one RAC per validation layer expected");
  for (size_t i = 0; i < racs.size(); ++i)
    if (racs[i].layer != policy.validation_layers[i])
      throw std::invalid_argument("infer: RAC layers do not match policy");

  const Index split = tap_end(net, policy.validation_layers.back());
  std::map<Index, Index> taps_at;  // layer index -> conv id
  for (Index v : policy.validation_layers) taps_at[tap_end(net, v)] = v;

  Tensor cur = x;
  std::map<Index, Tensor> taps;
  for (Index i = 0; i <= split; ++i) {
    cur = racnet::apply(net.layers[size_t(i)], cur);
    if (auto it = taps_at.find(i); it != taps_at.end()) taps.emplace(it->second, cur);
  }

  InferenceResult res;
  for (const Rac& rac : racs)
    res.rac_outputs.push_back(rac_forward(rac, taps.at(rac.layer)));

  bool final_used = false;
  const auto final_eval = [&]() {
    final_used = true;
    const Tensor logits = forward_from(net, split + 1, cur);
    Eigen::Index argmax;
    logits.data.maxCoeff(&argmax);
    return int(argmax);
  };

  res.outcome = decide(res.rac_outputs, policy, final_eval);
  double flops = flops_of(net, split);
  for (const Rac& rac : racs) flops += rac_flops(rac);
  if (final_used) flops += full_net_flops(net) - flops_of(net, split);
  res.outcome.flops = flops;
  if (!res.outcome.early)
    res.outcome.exit_layer = Index(conv_layer_ids(net).size()) - 1;
  return res;
}

FlopsReport flops_report(const Network& net, const std::vector<Rac>& racs,
                         const InferencePolicy& policy, const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("flops_report: empty dataset");
  FlopsReport rep;
  rep.avg_flops_baseline = full_net_flops(net);
  double total = 0.0;
  int early = 0;
  for (const Tensor& x : inputs) {
    const InferenceResult r = infer(net, racs, policy, x);
    total += r.outcome.flops;
    if (r.outcome.early) ++early;
  }
  rep.avg_flops_rac_system = total / double(inputs.size());
  rep.normalized_flops = rep.avg_flops_baseline / rep.avg_flops_rac_system;
  rep.early_exit_fraction = double(early) / double(inputs.size());
  return rep;
}

}  // namespace racnet
