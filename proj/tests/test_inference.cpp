#include <doctest.h>

#include <cmath>
#include <random>

#include "racnet/inference.hpp"

using namespace racnet;

namespace {

RacOutput rac_out(int cls, double prob, int c = 10) {
  RacOutput o;
  o.rac_class = cls;
  o.rac_prob = prob;
  o.blc_probs = Eigen::VectorXd::Constant(c, 0.01);
  o.blc_probs[cls] = prob;
  return o;
}

InferencePolicy policy_45(double delta = 0.9) { return {{4, 5}, delta}; }

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data[i] = dist(rng);
  return t;
}

double logit(double p) { return std::log(p / (1.0 - p)); }

Rac fixed_rac(const std::vector<double>& probs, Index layer) {
  Rac rac;
  rac.layer = layer;
  rac.features.layer = layer;
  rac.features.k = 1;
  for (size_t cls = 0; cls < probs.size(); ++cls) {
    rac.features.per_class.push_back({0});
    BinaryLinearClassifier blc;
    blc.class_id = int(cls);
    blc.weight = Eigen::VectorXd::Zero(64);  // 8x8 map
    blc.bias = logit(probs[cls]);
    rac.blcs.push_back(std::move(blc));
  }
  return rac;
}

}  // namespace

TEST_CASE("decide: consensus with high confidence classifies early") {
  int probes = 0;
  const auto probe = [&]() {
    ++probes;
    return 3;
  };
  const Outcome o = decide({rac_out(3, 0.95), rac_out(3, 0.97)}, policy_45(0.9), probe);
  CHECK(o.verdict == Verdict::Classified);
  CHECK(o.label == 3);
  CHECK(o.early);
  CHECK(o.exit_layer == 5);
  CHECK(probes == 0);
}

TEST_CASE("decide: disagreement is ND and never runs the final layers") {
  int probes = 0;
  const auto probe = [&]() {
    ++probes;
    return 0;
  };
  const Outcome o = decide({rac_out(1, 0.99), rac_out(2, 0.99)}, policy_45(0.9), probe);
  CHECK(o.verdict == Verdict::NoDecision);
  CHECK(o.early);
  CHECK(probes == 0);
}

TEST_CASE("decide: low-confidence consensus defers to the final layers") {
  SUBCASE("final layer agrees -> classified, not early") {
    int probes = 0;
    const Outcome o = decide({rac_out(5, 0.6), rac_out(5, 0.95)}, policy_45(0.9), [&]() {
      ++probes;
      return 5;
    });
    CHECK(o.verdict == Verdict::Classified);
    CHECK(o.label == 5);
    CHECK_FALSE(o.early);
    CHECK(probes == 1);
  }
  SUBCASE("final layer disagrees -> ND, not early") {
    const Outcome o =
        decide({rac_out(5, 0.6), rac_out(5, 0.95)}, policy_45(0.9), []() { return 7; });
    CHECK(o.verdict == Verdict::NoDecision);
    CHECK_FALSE(o.early);
    CHECK(o.label == -1);
  }
}

TEST_CASE("decide: empty RAC outputs rejected") {
  CHECK_THROWS_AS(decide({}, policy_45(), []() { return 0; }), std::invalid_argument);
}

TEST_CASE("decide: delta boundaries use strict inequality") {
  // delta 0: any positive confidence exits early.
  Outcome o = decide({rac_out(2, 0.01), rac_out(2, 0.02)}, policy_45(0.0),
                     []() { return 2; });
  CHECK(o.early);
  // prob exactly equal to delta does NOT exit early.
  o = decide({rac_out(2, 0.9), rac_out(2, 0.95)}, policy_45(0.9), []() { return 2; });
  CHECK_FALSE(o.early);
  // delta 1: probabilities cannot exceed 1, never early via consensus branch.
  o = decide({rac_out(2, 1.0), rac_out(2, 1.0)}, policy_45(1.0), []() { return 2; });
  CHECK_FALSE(o.early);
}

TEST_CASE("decide: raising delta only shrinks the early-confident set") {
  const std::vector<std::vector<RacOutput>> cases = {
      {rac_out(1, 0.55), rac_out(1, 0.8)},
      {rac_out(2, 0.72), rac_out(2, 0.71)},
      {rac_out(3, 0.95), rac_out(3, 0.99)},
  };
  int prev_early = int(cases.size()) + 1;
  for (double delta : {0.5, 0.7, 0.9}) {
    int early = 0;
    for (const auto& c : cases)
      if (decide(c, policy_45(delta), []() { return 0; }).early) ++early;
    CHECK(early <= prev_early);
    prev_early = early;
  }
}

TEST_CASE("layer_flops conventions: documented conv example") {
  // conv 3x3, Cin=2, Cout=4, output 8x8: 2*4*8*8*(2*9) + 4*8*8 = 9472.
  Conv2d c;
  c.in_ch = 2;
  c.out_ch = 4;
  c.ksize = 3;
  c.stride = 1;
  c.pad = 1;
  c.weight = Eigen::MatrixXd::Zero(4, 18);
  c.bias = Eigen::VectorXd::Zero(4);
  CHECK(layer_flops(Layer{c}, {2, 8, 8}) == 9472.0);
}

TEST_CASE("flops_of matches a multiply-add counting oracle on random specs") {
  std::mt19937_64 rng(30);
  for (int trial = 0; trial < 20; ++trial) {
    const Index cin = 1 + Index(rng() % 3);
    const Index cout = 1 + Index(rng() % 4);
    const Index size = 6 + Index(rng() % 3) * 2;
    Network net = init_network({{"conv2d", cout, 3, 1, 1},
                                {"batchnorm"},
                                {"relu"},
                                {"maxpool", 0, 2, 2, 0},
                                {"flatten"},
                                {"dense", 2}},
                               {cin, size, size}, 2, 40 + std::uint64_t(trial));
    // Oracle: count each convention term explicitly.
    const double conv = 2.0 * double(cout * size * size * cin * 9) +
                        double(cout * size * size);
    const double bn = 2.0 * double(cout * size * size);
    const double relu = double(cout * size * size);
    const Index half = size / 2;
    const double pool = double(cout * half * half);
    const Index flat = cout * half * half;
    const double dense = 2.0 * double(flat * 2) + 2.0;
    CHECK(flops_of(net, 0) == conv);
    CHECK(flops_of(net, 1) == conv + bn);
    CHECK(flops_of(net, 2) == conv + bn + relu);
    CHECK(flops_of(net, 3) == conv + bn + relu + pool);
    CHECK(full_net_flops(net) == conv + bn + relu + pool + dense);
  }
}

TEST_CASE("flops_of: empty prefix is zero, prefixes are monotone") {
  Network net = init_network(vgg8_arch(10), {1, 32, 32}, 10, 41);
  CHECK(flops_of(net, -1) == 0.0);
  double prev = 0.0;
  for (Index i = 0; i < net.depth(); ++i) {
    const double f = flops_of(net, i);
    CHECK(f >= prev);
    prev = f;
  }
}

TEST_CASE("rac_flops: one BLC on k=64 maps of 8x8 costs 8193") {
  Rac rac;
  BinaryLinearClassifier blc;
  blc.weight = Eigen::VectorXd::Zero(64 * 64);
  rac.blcs.push_back(blc);
  CHECK(rac_flops(rac) == 8193.0);
}

TEST_CASE("validate(policy): bounds and ordering enforced") {
  Network net = init_network(vgg8_arch(10), {1, 32, 32}, 10, 42);
  CHECK_NOTHROW(validate(policy_45(), net));
  CHECK_THROWS_AS(validate({{5, 4}, 0.5}, net), std::invalid_argument);
  CHECK_THROWS_AS(validate({{4}, 0.5}, net), std::invalid_argument);
  CHECK_THROWS_AS(validate({{4, 9}, 0.5}, net), std::invalid_argument);
  CHECK_THROWS_AS(validate({{4, 5}, 1.5}, net), std::invalid_argument);
}

namespace {

struct DeskFixture {
  Network net = init_network(vgg8_arch(10), {1, 32, 32}, 10, 43);
  Tensor x = random_tensor({1, 32, 32}, 44);
};

}  // namespace

TEST_CASE("infer: early exits spend the prefix plus RAC flops only") {
  DeskFixture fx;
  // Confident agreeing RACs force branch (ii).
  std::vector<Rac> racs = {fixed_rac({0.99, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2}, 4),
                           fixed_rac({0.98, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2}, 5)};
  const InferencePolicy pol = policy_45(0.9);
  const InferenceResult res = infer(fx.net, racs, pol, fx.x);
  CHECK(res.outcome.early);
  CHECK(res.outcome.verdict == Verdict::Classified);
  CHECK(res.outcome.label == 0);

  const double expect =
      prefix_flops(fx.net, 5) + rac_flops(racs[0]) + rac_flops(racs[1]);
  CHECK(res.outcome.flops == expect);
  CHECK(res.outcome.flops < full_net_flops(fx.net));
}

TEST_CASE("infer: deferred branch charges the whole network plus RACs") {
  DeskFixture fx;
  std::vector<Rac> racs = {fixed_rac({0.5, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2}, 4),
                           fixed_rac({0.5, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2}, 5)};
  const InferenceResult res = infer(fx.net, racs, policy_45(0.9), fx.x);
  CHECK_FALSE(res.outcome.early);
  const double expect =
      full_net_flops(fx.net) + rac_flops(racs[0]) + rac_flops(racs[1]);
  CHECK(res.outcome.flops == expect);
  CHECK(res.outcome.exit_layer == 7);
  // Verdict depends on whether the dense head agrees with class 0; both
  // outcomes are legal, but the label must be consistent.
  if (res.outcome.verdict == Verdict::Classified) CHECK(res.outcome.label == 0);
}

TEST_CASE("flops_report: closed forms at the two extremes") {
  DeskFixture fx;
  const std::vector<Tensor> inputs = {fx.x, random_tensor({1, 32, 32}, 45)};
  const double full = full_net_flops(fx.net);
  const double prefix = prefix_flops(fx.net, 5);

  std::vector<Rac> confident = {
      fixed_rac({0.99, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2}, 4),
      fixed_rac({0.98, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2}, 5)};
  const double racf = rac_flops(confident[0]) + rac_flops(confident[1]);

  FlopsReport rep = flops_report(fx.net, confident, policy_45(0.9), inputs);
  CHECK(rep.early_exit_fraction == 1.0);
  CHECK(rep.normalized_flops == doctest::Approx(full / (prefix + racf)).epsilon(1e-12));
  CHECK(rep.normalized_flops > 1.0);

  // delta = 1 forbids the confident branch: overhead only, ratio below 1.
  rep = flops_report(fx.net, confident, policy_45(1.0), inputs);
  CHECK(rep.early_exit_fraction == 0.0);
  CHECK(rep.normalized_flops == doctest::Approx(full / (full + racf)).epsilon(1e-12));
  CHECK(rep.normalized_flops < 1.0);
}

TEST_CASE("infer: RAC/policy mismatches rejected") {
  DeskFixture fx;
  std::vector<Rac> racs = {fixed_rac({0.5, 0.5}, 4)};
  CHECK_THROWS_AS(infer(fx.net, racs, policy_45(), fx.x), std::invalid_argument);
  racs.push_back(fixed_rac({0.5, 0.5}, 6));
  CHECK_THROWS_AS(infer(fx.net, racs, policy_45(), fx.x), std::invalid_argument);
}
