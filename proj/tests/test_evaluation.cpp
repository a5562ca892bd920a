#include <doctest.h>

#include <cmath>
#include <random>

#include "racnet/evaluation.hpp"

using namespace racnet;

namespace {

Outcome classified(int label, bool early = false) {
  Outcome o;
  o.verdict = Verdict::Classified;
  o.label = label;
  o.early = early;
  return o;
}

Outcome nd(bool early = true) {
  Outcome o;
  o.verdict = Verdict::NoDecision;
  o.early = early;
  return o;
}

Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.data[i] = dist(rng);
  return t;
}

}  // namespace

TEST_CASE("detection_metrics: hand-enumerated 4-sample case") {
  // Samples a,b,c,d. Baseline wrong on a and b. System: ND on a, wrong on b,
  // correct on c and d.
  const std::vector<int> truth = {0, 0, 0, 0};
  const std::vector<int> baseline = {1, 1, 0, 0};
  const std::vector<Outcome> outcomes = {nd(), classified(1), classified(0),
                                         classified(0)};
  const DetectionReport rep = detection_metrics(baseline, truth, outcomes);
  CHECK(rep.tnr.value() == 50.0);
  CHECK(rep.fnr.value() == 0.0);
  CHECK(rep.pct_correct == 50.0);
  CHECK(rep.pct_nd == 25.0);
  CHECK(rep.pct_bad == 25.0);
  CHECK(rep.pct_correct + rep.pct_nd + rep.pct_bad == doctest::Approx(100.0).epsilon(1e-9));
}

TEST_CASE("detection_metrics: degenerate detectors") {
  const std::vector<int> truth = {0, 1, 2, 0, 1};
  const std::vector<int> baseline = {0, 1, 0, 0, 2};  // 2 errors

  SUBCASE("system identical to baseline (never ND)") {
    std::vector<Outcome> outcomes;
    for (int b : baseline) outcomes.push_back(classified(b));
    const DetectionReport rep = detection_metrics(baseline, truth, outcomes);
    CHECK(rep.tnr.value() == 0.0);
    CHECK(rep.fnr.value() == 0.0);
    CHECK(rep.pct_bad == doctest::Approx(100.0 * 2 / 5).epsilon(1e-9));
  }
  SUBCASE("system always ND") {
    const std::vector<Outcome> outcomes(5, nd());
    const DetectionReport rep = detection_metrics(baseline, truth, outcomes);
    CHECK(rep.tnr.value() == 100.0);
    CHECK(rep.fnr.value() == 100.0);
    CHECK(rep.pct_correct == 0.0);
    CHECK(rep.pct_nd == 100.0);
  }
}

TEST_CASE("detection_metrics: absent groups reported as absent") {
  const std::vector<int> truth = {0, 1};
  const std::vector<int> baseline = {0, 1};  // no negatives
  const std::vector<Outcome> outcomes = {classified(0), nd()};
  const DetectionReport rep = detection_metrics(baseline, truth, outcomes);
  CHECK_FALSE(rep.tnr.has_value());
  CHECK(rep.fnr.has_value());
  CHECK_THROWS_AS(detection_metrics({0}, {0, 1}, outcomes), std::invalid_argument);
  CHECK_THROWS_AS(detection_metrics({}, {}, {}), std::invalid_argument);
}

TEST_CASE("detection_metrics: identities hold against a counting oracle") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + int(rng() % 40);
    std::vector<int> truth, baseline;
    std::vector<Outcome> outcomes;
    for (int i = 0; i < n; ++i) {
      truth.push_back(int(rng() % 3));
      baseline.push_back(int(rng() % 3));
      const int kind = int(rng() % 3);
      outcomes.push_back(kind == 0 ? nd() : classified(int(rng() % 3), kind == 1));
    }
    const DetectionReport rep = detection_metrics(baseline, truth, outcomes);

    int tn = 0, fn = 0, neg = 0, pos = 0, ok = 0, ndc = 0, bad = 0;
    for (int i = 0; i < n; ++i) {
      const bool base_ok = baseline[size_t(i)] == truth[size_t(i)];
      const bool is_nd = outcomes[size_t(i)].verdict == Verdict::NoDecision;
      (base_ok ? pos : neg) += 1;
      if (is_nd) {
        ++ndc;
        (base_ok ? fn : tn) += 1;
      } else if (outcomes[size_t(i)].label == truth[size_t(i)]) {
        ++ok;
      } else {
        ++bad;
      }
    }
    CHECK(rep.pct_correct + rep.pct_nd + rep.pct_bad ==
          doctest::Approx(100.0).epsilon(1e-9));
    CHECK(rep.n_correct == ok);
    CHECK(rep.n_nd == ndc);
    CHECK(rep.n_bad == bad);
    if (neg > 0) CHECK(rep.tnr.value() == doctest::Approx(100.0 * tn / neg).epsilon(1e-12));
    if (pos > 0) CHECK(rep.fnr.value() == doctest::Approx(100.0 * fn / pos).epsilon(1e-12));
  }
}

TEST_CASE("msr_nd thresholds the maximal softmax response") {
  Eigen::VectorXd logits(2);
  logits << std::log(0.95), std::log(0.05);
  CHECK_FALSE(msr_nd(logits, 0.9));

  const Eigen::VectorXd uniform = Eigen::VectorXd::Zero(4);
  CHECK(msr_nd(uniform, 0.26));
  CHECK_FALSE(msr_nd(uniform, 0.25));
}

TEST_CASE("match_msr_threshold realizes the target FNR within 0.5 points") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> dist(0.1, 1.0);
  std::vector<double> conf;
  std::vector<bool> correct;
  for (int i = 0; i < 400; ++i) {
    conf.push_back(dist(rng));
    correct.push_back(rng() % 4 != 0);
  }
  for (double target : {0.0, 5.0, 12.5, 50.0, 100.0}) {
    const double th = match_msr_threshold(conf, correct, target);
    int fn = 0, pos = 0;
    for (size_t i = 0; i < conf.size(); ++i) {
      if (!correct[i]) continue;
      ++pos;
      if (conf[i] < th) ++fn;
    }
    const double fnr = 100.0 * fn / double(pos);
    CHECK(std::abs(fnr - target) <= 0.5);
  }
}

namespace {

struct TinyFixture {
  // Small conv net: cheap enough for iterative attacks in a unit test.
  Network net = init_network({{"conv2d", 4, 3, 1, 1},
                              {"relu"},
                              {"conv2d", 4, 3, 1, 1},
                              {"relu"},
                              {"maxpool", 0, 2, 2, 0},
                              {"flatten"},
                              {"dense", 4}},
                             {1, 8, 8}, 4, 50);
  InferencePolicy policy{{0, 1}, 0.7};

  Rac make_rac(Index layer, std::uint64_t seed) const {
    Rac rac;
    rac.layer = layer;
    rac.features.layer = layer;
    rac.features.k = 2;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 0.2);
    for (int cls = 0; cls < 4; ++cls) {
      rac.features.per_class.push_back({cls % 4, (cls + 1) % 4});
      BinaryLinearClassifier blc;
      blc.class_id = cls;
      blc.weight = Eigen::VectorXd::NullaryExpr(2 * 64, [&]() { return g(rng); });
      blc.bias = g(rng);
      rac.blcs.push_back(std::move(blc));
    }
    return rac;
  }
};

}  // namespace

TEST_CASE("ood_eval: empty set rejected, ND fraction reported") {
  TinyFixture fx;
  const std::vector<Rac> racs = {fx.make_rac(0, 51), fx.make_rac(1, 52)};
  CHECK_THROWS_AS(ood_eval(fx.net, racs, fx.policy, {}), std::invalid_argument);

  std::vector<Tensor> inputs;
  for (std::uint64_t i = 0; i < 10; ++i) inputs.push_back(random_tensor({1, 8, 8}, 60 + i));
  const double tnr = ood_eval(fx.net, racs, fx.policy, inputs);
  CHECK(tnr >= 0.0);
  CHECK(tnr <= 100.0);
}

TEST_CASE("generate_adversarial: zero iteration budget yields no successes") {
  TinyFixture fx;
  AttackConfig cfg;
  cfg.iterations = 0;
  auto [set, rep] = generate_adversarial(fx.net, {}, fx.policy,
                                         {random_tensor({1, 8, 8}, 70)}, {0}, cfg);
  CHECK(set.empty());
  CHECK(rep.n_attempted == 1);
  CHECK(rep.n_success == 0);
  CHECK(rep.success_rate == 0.0);
}

TEST_CASE("generate_adversarial: random nets are fragile (>=95% success)") {
  TinyFixture fx;
  std::vector<Tensor> inputs;
  std::vector<int> truths;
  for (std::uint64_t i = 0; i < 20; ++i) {
    inputs.push_back(random_tensor({1, 8, 8}, 80 + i));
    Eigen::Index am;
    forward(fx.net, inputs.back()).data.maxCoeff(&am);
    truths.push_back(int(am));
  }
  AttackConfig cfg;
  cfg.iterations = 150;
  cfg.step_size = 0.05;
  auto [set, rep] = generate_adversarial(fx.net, {}, fx.policy, inputs, truths, cfg);
  CHECK(rep.success_rate >= 95.0);
  CHECK(rep.mean_l2 > 0.0);
  for (const auto& ex : set) {
    CHECK(ex.success);
    CHECK(ex.input.data.minCoeff() >= 0.0);
    CHECK(ex.input.data.maxCoeff() <= 1.0);
    Eigen::Index am;
    forward(fx.net, ex.input).data.maxCoeff(&am);
    CHECK(int(am) == ex.target);
  }
}

TEST_CASE("generate_adversarial: full knowledge needs RACs and a positive weight") {
  TinyFixture fx;
  AttackConfig cfg;
  cfg.mode = AttackMode::FullKnowledge;
  cfg.rac_loss_weight = 0.0;
  const std::vector<Rac> racs = {fx.make_rac(0, 53), fx.make_rac(1, 54)};
  CHECK_THROWS_AS(generate_adversarial(fx.net, racs, fx.policy,
                                       {random_tensor({1, 8, 8}, 90)}, {0}, cfg),
                  std::invalid_argument);
  cfg.rac_loss_weight = 1.0;
  CHECK_THROWS_AS(
      generate_adversarial(fx.net, {}, fx.policy, {random_tensor({1, 8, 8}, 91)}, {0}, cfg),
      std::invalid_argument);
}

TEST_CASE("generate_adversarial: full-knowledge mode runs and reports") {
  TinyFixture fx;
  const std::vector<Rac> racs = {fx.make_rac(0, 55), fx.make_rac(1, 56)};
  std::vector<Tensor> inputs;
  std::vector<int> truths;
  for (std::uint64_t i = 0; i < 5; ++i) {
    inputs.push_back(random_tensor({1, 8, 8}, 95 + i));
    Eigen::Index am;
    forward(fx.net, inputs.back()).data.maxCoeff(&am);
    truths.push_back(int(am));
  }
  AttackConfig cfg;
  cfg.mode = AttackMode::FullKnowledge;
  cfg.iterations = 100;
  cfg.step_size = 0.05;
  auto [set, rep] = generate_adversarial(fx.net, racs, fx.policy, inputs, truths, cfg);
  CHECK(rep.n_attempted == 5);
  if (!set.empty()) {
    const double tnr = adversarial_tnr(fx.net, racs, fx.policy, set);
    CHECK(tnr >= 0.0);
    CHECK(tnr <= 100.0);
  }
}

TEST_CASE("adversarial_tnr: no successful adversaries rejected") {
  TinyFixture fx;
  const std::vector<Rac> racs = {fx.make_rac(0, 57), fx.make_rac(1, 58)};
  CHECK_THROWS_AS(adversarial_tnr(fx.net, racs, fx.policy, {}), std::invalid_argument);
}
