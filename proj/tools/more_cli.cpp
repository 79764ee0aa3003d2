#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "more/checkpoint.hpp"
#include "more/experiment.hpp"

using namespace more;

namespace {

ExperimentConfig load_config(const std::string& path) {
  return ExperimentConfig::from_kv(KeyValueConfig::parse_file(path));
}

int cmd_gen_data(const std::string& config_path, const std::string& out_path) {
  ExperimentConfig cfg = load_config(config_path);
  BinSpec bins = cfg.make_bins();
  TrajectorySet set = generate_dataset(cfg.train_family(), bins, cfg.n_expert, cfg.n_subopt,
                                       cfg.epsilon, derive_seed(cfg.seed, "data"));
  write_trajectories(out_path, set);
  std::cout << "wrote " << set.trajectories.size() << " trajectories ("
            << set.count(Quality::expert) << " expert, " << set.count(Quality::suboptimal)
            << " suboptimal, " << set.transition_count() << " transitions) to " << out_path
            << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_path,
              const std::string& ckpt_path, const std::string& metrics_path) {
  ExperimentConfig cfg = load_config(config_path);
  BinSpec bins = cfg.make_bins();
  TrajectorySet data = read_trajectories(data_path);

  ModelConfig mc = cfg.make_model_config(bins);
  if (!cfg.flags.use_moe) mc = dense_variant(mc);
  mc.init_seed = derive_seed(cfg.seed, "model");
  MoePolicy policy(mc);

  TrainConfig tc = cfg.train;
  tc.bc_mode = !cfg.flags.use_rl;
  tc.seed = derive_seed(cfg.seed, "train");
  train_policy(policy, data, bins, tc, metrics_path);

  save_checkpoint(ckpt_path, policy.params(), config_fingerprint(mc), "");
  std::cout << "trained " << tc.total_steps << " steps; checkpoint at " << ckpt_path << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config_path, int episodes,
             bool ood, const std::string& csv_path) {
  ExperimentConfig cfg = load_config(config_path);
  BinSpec bins = cfg.make_bins();

  ModelConfig mc = cfg.make_model_config(bins);
  if (!cfg.flags.use_moe) mc = dense_variant(mc);
  mc.init_seed = derive_seed(cfg.seed, "model");
  MoePolicy policy(mc);
  CheckpointHeader hdr = load_checkpoint(ckpt_path, policy.params());
  if (hdr.fingerprint != config_fingerprint(mc)) {
    std::cerr << "checkpoint fingerprint does not match this config\n";
    return 1;
  }

  if (episodes <= 0) episodes = cfg.eval_episodes;
  auto family = ood ? cfg.eval_family() : cfg.train_family();
  SuccessStats stats = rollout(policy, family, bins, episodes, derive_seed(cfg.seed, "eval"));
  stats.ood = ood;

  for (const auto& t : stats.tasks)
    std::cout << t.task << " success_rate=" << t.success_rate << " mean_len=" << t.mean_len
              << " n=" << t.n_episodes << "\n";
  std::cout << "average " << stats.average() << (ood ? " (ood)" : " (in-distribution)") << "\n";

  if (!csv_path.empty()) {
    AblationRow row;
    row.variant = cfg.flags.variant_name();
    row.stats = stats;
    row.seed = cfg.seed;
    report({row}, csv_path, csv_path + ".summary.txt");
  }
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir) {
  ExperimentConfig cfg = load_config(config_path);
  std::filesystem::create_directories(out_dir);
  auto rows = run_ablation_suite(cfg);
  report(rows, out_dir + "/ablation.csv", out_dir + "/ablation_summary.txt");
  for (const auto& row : rows)
    std::cout << row.variant << " average=" << row.stats.average() << "\n";
  std::cout << "report at " << out_dir << "/ablation.csv\n";
  return 0;
}

int cmd_grad_check(const std::string& config_path) {
  ExperimentConfig cfg = load_config(config_path);
  // small float64 model regardless of the experiment's model scale
  BinSpec bins = BinSpec::toy_spec(ObsVocab::total(), 2, 3);
  ModelConfig mc;
  mc.vocab = bins.vocab_size();
  mc.action_dims = bins.action_dims();
  mc.max_seq = ObsVocab::obs_len() + ObsVocab::instr_len() + bins.action_dims() + 2;
  mc.n_layers = 2;
  mc.hidden = 16;
  mc.n_heads = 2;
  mc.ffn_mult = 2;
  mc.n_experts = 3;
  mc.top_k = 2;
  mc.lora_rank = 2;
  mc.init_seed = derive_seed(cfg.seed, "gradcheck-model");
  MoePolicy policy(mc);

  TaskSpec spec = TaskSpec::standard(TaskKind::go_to, 6, 12);
  spec.goal_lo = 2;
  spec.goal_hi = 6;
  TrajectorySet data = generate_dataset({spec}, bins, 4, 4, 0.5, derive_seed(cfg.seed, "gradcheck"));

  TrainConfig tc = cfg.train;
  tc.batch_size = 8;
  tc.total_steps = 20;
  tc.seed = derive_seed(cfg.seed, "gradcheck-train");
  RlTrainer trainer(policy, bins, tc);
  for (int i = 0; i < tc.total_steps; ++i) trainer.train_step(data);

  std::mt19937_64 rng(derive_seed(cfg.seed, "gradcheck-batch"));
  TransitionBatch batch = sample_batch(data, 4, rng);
  Trainables grad = policy.zero_grad();
  compute_loss_and_grad(policy, trainer.target_params(), batch, bins, tc, tc.alpha, &grad, nullptr);
  auto loss_fn = [&]() {
    return compute_loss_and_grad(policy, trainer.target_params(), batch, bins, tc, tc.alpha,
                                 nullptr, nullptr)
        .total;
  };
  double err = grad_check(loss_fn, policy.params(), grad, 1e-5, 300, rng);
  std::cout << "max relative gradient error: " << err << "\n";
  return err < 1e-5 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-of-LoRA-experts offline RL experiment driver"};
  app.require_subcommand(1);

  std::string config_path, out_path, data_path, ckpt_path, metrics_path, csv_path;
  int episodes = 0;
  bool ood = false;

  auto* gen = app.add_subcommand("gen-data", "generate an offline trajectory dataset");
  gen->add_option("--config", config_path, "config file")->required();
  gen->add_option("--out", out_path, "output dataset path")->required();

  auto* train = app.add_subcommand("train", "train a policy on a dataset");
  train->add_option("--config", config_path, "config file")->required();
  train->add_option("--data", data_path, "dataset path")->required();
  train->add_option("--out", ckpt_path, "output checkpoint path")->required();
  train->add_option("--metrics", metrics_path, "per-step metrics CSV");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval->add_option("--config", config_path, "config file")->required();
  eval->add_option("--episodes", episodes, "episodes per task");
  eval->add_flag("--ood", ood, "evaluate on the shifted goal family");
  eval->add_option("--csv", csv_path, "write results CSV");

  auto* ablate = app.add_subcommand("ablate", "run the four-variant ablation suite");
  ablate->add_option("--config", config_path, "config file")->required();
  ablate->add_option("--out", out_path, "output directory")->required();

  auto* gc = app.add_subcommand("grad-check", "finite-difference gradient verification");
  gc->add_option("--config", config_path, "config file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_path);
    if (train->parsed()) return cmd_train(config_path, data_path, ckpt_path, metrics_path);
    if (eval->parsed()) return cmd_eval(ckpt_path, config_path, episodes, ood, csv_path);
    if (ablate->parsed()) return cmd_ablate(config_path, out_path);
    if (gc->parsed()) return cmd_grad_check(config_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
