#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include "racnet/pipeline.hpp"

namespace {

struct CommonOpts {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  int threads = 1;
};

void add_common(CLI::App* sub, CommonOpts& o) {
  sub->add_option("--config", o.config_path, "experiment config JSON");
  sub->add_option("--seed", o.seed, "override the config seed");
  sub->add_option("--out", o.out_dir, "override the output directory");
  sub->add_option("--threads", o.threads, "worker threads (reserved; runs are sequential)");
}

racnet::ExperimentConfig resolve(const CommonOpts& o) {
  racnet::ExperimentConfig cfg =
      o.config_path.empty() ? racnet::ExperimentConfig{} : racnet::load_config(o.config_path);
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.train.seed = *o.seed;
    cfg.blc.seed = *o.seed;
  }
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"racnet: relevance-gated early-exit inference for small CNNs"};
  app.require_subcommand(1);

  CommonOpts opts;
  bool force = false;
  bool baseline_only = false;

  CLI::App* train = app.add_subcommand("train", "train the backbone CNN");
  add_common(train, opts);
  train->add_flag("--force", force, "retrain even if a model file exists");

  CLI::App* relevance =
      app.add_subcommand("relevance", "compute relevance-score matrices");
  add_common(relevance, opts);
  relevance->add_flag("--force", force, "recompute even if cached matrices match");

  CLI::App* train_racs =
      app.add_subcommand("train-racs", "train the auxiliary linear classifiers");
  add_common(train_racs, opts);
  train_racs->add_flag("--force", force, "retrain even if a matching bundle exists");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate on the test split");
  add_common(eval_cmd, opts);
  eval_cmd->add_flag("--baseline-only", baseline_only,
                     "evaluate the plain backbone without auxiliary classifiers");

  CLI::App* sweep = app.add_subcommand("sweep", "hyper-parameter sweep on validation");
  add_common(sweep, opts);

  CLI::App* attack = app.add_subcommand("attack", "targeted adversarial evaluation");
  add_common(attack, opts);

  CLI::App* ood = app.add_subcommand("ood", "out-of-distribution detection rates");
  add_common(ood, opts);

  CLI11_PARSE(app, argc, argv);

  try {
    const racnet::ExperimentConfig cfg = resolve(opts);
    if (train->parsed()) {
      const std::string path = racnet::cmd_train(cfg, force);
      std::printf("model: %s\n", path.c_str());
    } else if (relevance->parsed()) {
      for (const std::string& p : racnet::cmd_relevance(cfg, force))
        std::printf("matrix: %s\n", p.c_str());
    } else if (train_racs->parsed()) {
      const std::string path = racnet::cmd_train_racs(cfg, force);
      std::printf("racs: %s\n", path.c_str());
    } else if (eval_cmd->parsed()) {
      const racnet::EvalOutputs out = racnet::cmd_eval(cfg, baseline_only);
      std::printf("correct: %.2f%%  nd: %.2f%%  bad: %.2f%%\n", out.detection.pct_correct,
                  out.detection.pct_nd, out.detection.pct_bad);
      if (out.detection.tnr)
        std::printf("tnr: %.2f%%  fnr: %.2f%%\n", *out.detection.tnr, *out.detection.fnr);
      std::printf("normalized flops: %.4f  early exit: %.2f%%\n",
                  out.flops.normalized_flops, out.detection.early_exit_pct);
      std::printf("report: %s\n", out.report_path.c_str());
    } else if (sweep->parsed()) {
      const racnet::SweepResult res = racnet::cmd_sweep(cfg);
      std::printf("selected k: %d  delta_th: %.2f\n", res.selected_k, res.selected_delta);
      std::printf("series: %s/sweep_{layers,k,delta}.json\n", cfg.out_dir.c_str());
    } else if (attack->parsed()) {
      const racnet::AttackOutputs out = racnet::cmd_attack(cfg);
      std::printf("zero knowledge: success %.2f%%  mean L2 %.4f\n",
                  out.zero.success_rate, out.zero.mean_l2);
      if (out.zero_tnr) std::printf("  adversarial tnr: %.2f%%\n", *out.zero_tnr);
      if (out.full) {
        std::printf("full knowledge: success %.2f%%  mean L2 %.4f\n",
                    out.full->success_rate, out.full->mean_l2);
        if (out.full_tnr) std::printf("  adversarial tnr: %.2f%%\n", *out.full_tnr);
      }
    } else if (ood->parsed()) {
      for (const racnet::OodRow& row : racnet::cmd_ood(cfg))
        std::printf("%-18s tnr: %.2f%%  (n=%d)\n", row.source.c_str(), row.tnr, row.n);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
