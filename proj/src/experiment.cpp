#include "more/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace more {
namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

size_t trainable_scalar_count(const ModelConfig& cfg) {
  const size_t d = static_cast<size_t>(cfg.hidden);
  const size_t dff = static_cast<size_t>(cfg.d_ff());
  const size_t r = static_cast<size_t>(cfg.lora_rank);
  const size_t n = static_cast<size_t>(cfg.n_experts);
  size_t per_layer = 0;
  if (cfg.attention_lora) per_layer += 4 * 2 * r * d;
  per_layer += n * 2 * r * (d + dff); // expert up+down adapters
  per_layer += n * d;                 // router
  return per_layer * static_cast<size_t>(cfg.n_layers);
}

} // namespace

KeyValueConfig KeyValueConfig::parse_string(const std::string& text) {
  KeyValueConfig kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) + ": missing '='");
    kv.values_[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValueConfig KeyValueConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return parse_string(os.str());
}

bool KeyValueConfig::has(const std::string& key) const { return values_.count(key) > 0; }

std::string KeyValueConfig::get_str(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : std::stoi(it->second);
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : std::stod(it->second);
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::runtime_error("config key " + key + ": not a boolean: " + v);
}

uint64_t KeyValueConfig::get_u64(const std::string& key, uint64_t fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : std::stoull(it->second);
}

void KeyValueConfig::set(const std::string& key, const std::string& value) {
  values_[key] = value;
}

std::string AblationFlags::variant_name() const {
  if (use_rl && use_moe && use_subopt_data) return "full";
  if (!use_rl) return "wo_rl";
  if (!use_moe) return "wo_moe";
  return "wo_sdata";
}

uint64_t resolve_master_seed(const KeyValueConfig& kv) {
  if (const char* env = std::getenv("MORE_SEED")) return std::stoull(env);
  return kv.get_u64("run.seed", 0);
}

ExperimentConfig ExperimentConfig::from_kv(const KeyValueConfig& kv) {
  ExperimentConfig cfg;
  std::string tasks = kv.get_str("env.tasks", "go_to,crawl,go_avoid");
  cfg.tasks.clear();
  std::istringstream ts(tasks);
  std::string tok;
  while (std::getline(ts, tok, ',')) cfg.tasks.push_back(task_kind_from_name(trim(tok)));
  cfg.corridor_length = kv.get_int("env.length", 20);
  cfg.horizon = kv.get_int("env.horizon", 60);
  cfg.n_bins = kv.get_int("env.n_bins", 21);

  cfg.n_expert = kv.get_int("data.n_expert", 60);
  cfg.n_subopt = kv.get_int("data.n_subopt", 240);
  cfg.epsilon = kv.get_double("data.epsilon", 0.5);

  cfg.model.n_layers = kv.get_int("model.n_layers", 4);
  cfg.model.hidden = kv.get_int("model.hidden", 128);
  cfg.model.n_heads = kv.get_int("model.n_heads", 4);
  cfg.model.ffn_mult = kv.get_int("model.ffn_mult", 4);
  cfg.model.n_experts = kv.get_int("model.n_experts", 4);
  cfg.model.top_k = kv.get_int("model.top_k", 2);
  cfg.model.lora_rank = kv.get_int("model.lora_rank", 8);
  cfg.model.lora_scaling = kv.get_double("model.lora_scaling", 1.0);
  cfg.model.attention_lora = kv.get_bool("model.attention_lora", true);
  cfg.model.tied_head = kv.get_bool("model.tied_head", false);

  cfg.train.gamma = kv.get_double("train.gamma", 0.98);
  cfg.train.alpha = kv.get_double("train.alpha", 0.5);
  cfg.train.beta = kv.get_double("train.beta", 0.002);
  cfg.train.learning_rate = kv.get_double("train.learning_rate", 1e-3);
  cfg.train.grad_clip = kv.get_double("train.grad_clip", 1.0);
  cfg.train.target_sync_period = kv.get_int("train.target_sync_period", 200);
  cfg.train.batch_size = kv.get_int("train.batch_size", 32);
  cfg.train.total_steps = kv.get_int("train.total_steps", 2000);
  cfg.train.alpha_anneal_steps = kv.get_int("train.alpha_anneal_steps", 0);

  cfg.eval_episodes = kv.get_int("eval.episodes", 25);
  cfg.eval_seeds = kv.get_int("eval.seeds", 5);

  cfg.flags.use_rl = kv.get_bool("ablate.use_rl", true);
  cfg.flags.use_moe = kv.get_bool("ablate.use_moe", true);
  cfg.flags.use_subopt_data = kv.get_bool("ablate.use_subopt_data", true);

  cfg.out_dir = kv.get_str("run.out_dir", ".");
  cfg.seed = resolve_master_seed(kv);
  return cfg;
}

BinSpec ExperimentConfig::make_bins() const {
  BinSpec bins = BinSpec::default_spec(ObsVocab::total());
  if (n_bins != 21) {
    // odd so symmetric fields keep an exact zero-center bin
    if (n_bins < 3 || n_bins % 2 == 0)
      throw std::invalid_argument("env.n_bins must be an odd value >= 3");
    for (auto& d : bins.dims)
      if (d.n_bins != 2) d.n_bins = n_bins;
  }
  return bins;
}

std::vector<TaskSpec> ExperimentConfig::train_family() const {
  std::vector<TaskSpec> family;
  for (TaskKind k : tasks) {
    TaskSpec s = TaskSpec::standard(k, corridor_length, horizon);
    s.goal_lo = corridor_length / 2;
    s.goal_hi = corridor_length;
    family.push_back(std::move(s));
  }
  return family;
}

std::vector<TaskSpec> ExperimentConfig::eval_family() const {
  std::vector<TaskSpec> family;
  for (TaskKind k : tasks) {
    TaskSpec s = TaskSpec::standard(k, corridor_length, horizon);
    s.goal_lo = corridor_length / 4;
    s.goal_hi = corridor_length;
    s.id = s.id + "_ood";
    family.push_back(std::move(s));
  }
  return family;
}

ModelConfig ExperimentConfig::make_model_config(const BinSpec& bins) const {
  ModelConfig mc = model;
  mc.vocab = bins.vocab_size();
  mc.action_dims = bins.action_dims();
  mc.max_seq = ObsVocab::obs_len() + ObsVocab::instr_len() + bins.action_dims() + 2;
  return mc;
}

int matched_dense_rank(const ModelConfig& moe_cfg) {
  size_t target = trainable_scalar_count(moe_cfg);
  ModelConfig dense = moe_cfg;
  dense.n_experts = 1;
  dense.top_k = 1;
  int best_rank = 1;
  size_t best_diff = SIZE_MAX;
  for (int r = 1; r <= 16 * moe_cfg.lora_rank * moe_cfg.n_experts; ++r) {
    dense.lora_rank = r;
    size_t c = trainable_scalar_count(dense);
    size_t diff = c > target ? c - target : target - c;
    if (diff < best_diff) {
      best_diff = diff;
      best_rank = r;
    }
  }
  return best_rank;
}

ModelConfig dense_variant(const ModelConfig& moe_cfg) {
  ModelConfig dense = moe_cfg;
  dense.lora_rank = matched_dense_rank(moe_cfg);
  dense.n_experts = 1;
  dense.top_k = 1;
  return dense;
}

double SuccessStats::average() const {
  if (tasks.empty()) return 0.0;
  double s = 0.0;
  for (const auto& t : tasks) s += t.success_rate;
  return s / static_cast<double>(tasks.size());
}

SuccessStats rollout(const MoePolicy& policy, const std::vector<TaskSpec>& family,
                     const BinSpec& bins, int n_episodes, uint64_t seed) {
  SuccessStats stats;
  stats.seed = seed;
  for (const TaskSpec& spec : family) {
    CorridorEnv env(spec, bins);
    int successes = 0;
    double total_len = 0.0;
    for (int ep = 0; ep < n_episodes; ++ep) {
      auto [state, obs] = env.reset(derive_seed(seed, "eval:" + spec.id, static_cast<uint64_t>(ep)));
      double ep_reward = 0.0;
      int len = 0;
      while (!env.state().done) {
        ActionTokens act = policy.greedy_action(obs.obs_tokens, obs.instr_tokens, bins);
        CommandVector cmd = detokenize(act, bins);
        auto [next_obs, reward] = env.step(cmd);
        ep_reward += reward;
        obs = next_obs;
        ++len;
      }
      if (ep_reward >= 1.0) ++successes;
      total_len += len;
    }
    TaskResult r;
    r.task = spec.id;
    r.n_episodes = n_episodes;
    r.success_rate = n_episodes > 0 ? static_cast<double>(successes) / n_episodes : 0.0;
    r.mean_len = n_episodes > 0 ? total_len / n_episodes : 0.0;
    stats.tasks.push_back(std::move(r));
  }
  return stats;
}

void train_policy(MoePolicy& policy, const TrajectorySet& data, const BinSpec& bins,
                  const TrainConfig& cfg, const std::string& metrics_path,
                  std::vector<RouterStats>* final_stats) {
  RlTrainer trainer(policy, bins, cfg);
  std::ofstream metrics;
  if (!metrics_path.empty()) {
    metrics.open(metrics_path);
    if (!metrics) throw IoError("cannot open metrics file: " + metrics_path);
    metrics << "step,td,conservative,balance,total";
    for (int l = 0; l < policy.config().n_layers; ++l) metrics << ",f_entropy_l" << l;
    metrics << "\n";
  }
  for (int s = 0; s < cfg.total_steps; ++s) {
    LossTerms terms = trainer.train_step(data);
    if (metrics) {
      metrics << s << "," << fmt6(terms.td) << "," << fmt6(terms.conservative) << ","
              << fmt6(terms.balance) << "," << fmt6(terms.total);
      for (const RouterStats& st : trainer.last_router_stats()) {
        double ent = 0.0;
        for (Eigen::Index k = 0; k < st.f.size(); ++k)
          if (st.f(k) > 0.0) ent -= st.f(k) * std::log(st.f(k));
        metrics << "," << fmt6(ent);
      }
      metrics << "\n";
    }
  }
  if (final_stats) *final_stats = trainer.last_router_stats();
}

std::vector<AblationRow> run_ablation_suite(const ExperimentConfig& cfg) {
  BinSpec bins = cfg.make_bins();
  std::vector<TaskSpec> train_fam = cfg.train_family();
  std::vector<TaskSpec> eval_fam = cfg.eval_family();

  uint64_t data_seed = derive_seed(cfg.seed, "data");
  TrajectorySet mixed =
      generate_dataset(train_fam, bins, cfg.n_expert, cfg.n_subopt, cfg.epsilon, data_seed);
  TrajectorySet expert_only = generate_dataset(train_fam, bins, cfg.n_expert, 0, 0.0, data_seed);

  std::vector<AblationFlags> variants = {
      {true, true, true},   // full
      {false, true, false}, // w/o RL: behavior cloning on expert data
      {true, false, true},  // w/o MoE: dense single-adapter path
      {true, true, false},  // w/o S-Data: expert-only RL
  };

  std::vector<AblationRow> rows;
  for (const AblationFlags& flags : variants) {
    ModelConfig mc = cfg.make_model_config(bins);
    if (!flags.use_moe) mc = dense_variant(mc);
    mc.init_seed = derive_seed(cfg.seed, "model");
    MoePolicy policy(mc);

    TrainConfig tc = cfg.train;
    tc.bc_mode = !flags.use_rl;
    tc.seed = derive_seed(cfg.seed, "train");
    const TrajectorySet& data = flags.use_subopt_data ? mixed : expert_only;
    train_policy(policy, data, bins, tc);

    AblationRow row;
    row.variant = flags.variant_name();
    row.seed = cfg.seed;
    row.stats = rollout(policy, eval_fam, bins, cfg.eval_episodes, derive_seed(cfg.seed, "eval"));
    row.stats.ood = true;
    rows.push_back(std::move(row));
  }
  return rows;
}

void report(const std::vector<AblationRow>& rows, const std::string& csv_path,
            const std::string& summary_path) {
  std::ofstream csv(csv_path);
  if (!csv) throw IoError("cannot open report: " + csv_path);
  csv << "variant,task,n_episodes,success_rate,mean_len,seed\n";
  for (const auto& row : rows)
    for (const auto& t : row.stats.tasks)
      csv << row.variant << "," << t.task << "," << t.n_episodes << ","
          << fmt6(t.success_rate) << "," << fmt6(t.mean_len) << "," << row.seed << "\n";
  if (!csv) throw IoError("report write failed: " + csv_path);

  std::ofstream summary(summary_path);
  if (!summary) throw IoError("cannot open summary: " + summary_path);
  summary << "variant averages\n";
  for (const auto& row : rows)
    summary << row.variant << " " << fmt6(row.stats.average()) << "\n";
}

} // namespace more
