#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "more/dataset.hpp"
#include "more/moe_policy.hpp"
#include "more/rl_trainer.hpp"

namespace more {

// Flat `section.key = value` text config with '#' comments.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::string& path);
  static KeyValueConfig parse_string(const std::string& text);

  bool has(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  uint64_t get_u64(const std::string& key, uint64_t fallback) const;
  void set(const std::string& key, const std::string& value);

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

struct AblationFlags {
  bool use_rl = true;
  bool use_moe = true;
  bool use_subopt_data = true;

  std::string variant_name() const;
};

struct ExperimentConfig {
  // environment
  std::vector<TaskKind> tasks = {TaskKind::go_to, TaskKind::crawl, TaskKind::go_avoid};
  int corridor_length = 20;
  int horizon = 60;
  int n_bins = 21; // per continuous command field; the flag always has 2
  // data
  int n_expert = 60;
  int n_subopt = 240;
  double epsilon = 0.5;
  // model
  ModelConfig model;
  // training
  TrainConfig train;
  // evaluation
  int eval_episodes = 25;
  int eval_seeds = 5;
  // run
  AblationFlags flags;
  std::string out_dir = ".";
  uint64_t seed = 0;

  static ExperimentConfig from_kv(const KeyValueConfig& kv);

  BinSpec make_bins() const;
  // Train-family goals sit in [L/2, L); the shifted eval family draws from
  // [L/4, L).
  std::vector<TaskSpec> train_family() const;
  std::vector<TaskSpec> eval_family() const;
  ModelConfig make_model_config(const BinSpec& bins) const;
};

// Dense rank whose single-adapter trainable count best matches the MoE
// configuration (within 10%).
int matched_dense_rank(const ModelConfig& moe_cfg);
ModelConfig dense_variant(const ModelConfig& moe_cfg);

struct TaskResult {
  std::string task;
  int n_episodes = 0;
  double success_rate = 0.0;
  double mean_len = 0.0;
};

struct SuccessStats {
  std::vector<TaskResult> tasks;
  bool ood = false;
  uint64_t seed = 0;

  double average() const;
};

// Greedy rollouts: n_episodes per family member; success = episode reward 1.
SuccessStats rollout(const MoePolicy& policy, const std::vector<TaskSpec>& family,
                     const BinSpec& bins, int n_episodes, uint64_t seed);

// Train one variant on the given dataset. Metrics stream one CSV row per
// step when metrics_path is set.
void train_policy(MoePolicy& policy, const TrajectorySet& data, const BinSpec& bins,
                  const TrainConfig& cfg, const std::string& metrics_path = "",
                  std::vector<RouterStats>* final_stats = nullptr);

struct AblationRow {
  std::string variant;
  SuccessStats stats;
  uint64_t seed = 0;
};

// Four-variant suite sharing seeds and evaluation episodes.
std::vector<AblationRow> run_ablation_suite(const ExperimentConfig& cfg);

void report(const std::vector<AblationRow>& rows, const std::string& csv_path,
            const std::string& summary_path);

// MORE_SEED overrides the config seed when set.
uint64_t resolve_master_seed(const KeyValueConfig& kv);

} // namespace more
