#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "more/experiment.hpp"

using namespace more;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("key-value config parsing") {
  auto kv = KeyValueConfig::parse_string(
      "# a comment\n"
      "run.seed = 7   # trailing comment\n"
      "env.length=12\n"
      "data.epsilon = 0.25\n"
      "ablate.use_moe = false\n"
      "run.out_dir = out/x\n"
      "\n");
  CHECK(kv.get_u64("run.seed", 0) == 7);
  CHECK(kv.get_int("env.length", 0) == 12);
  CHECK(kv.get_double("data.epsilon", 0) == doctest::Approx(0.25));
  CHECK(kv.get_bool("ablate.use_moe", true) == false);
  CHECK(kv.get_str("run.out_dir", "") == "out/x");
  CHECK(kv.get_int("missing.key", 42) == 42);
  CHECK(!kv.has("missing.key"));
  CHECK_THROWS(KeyValueConfig::parse_string("no equals sign here\n"));
  CHECK_THROWS(KeyValueConfig::parse_string("a.b = maybe\n").get_bool("a.b", false));
}

TEST_CASE("experiment config defaults and overrides") {
  ExperimentConfig d = ExperimentConfig::from_kv(KeyValueConfig::parse_string(""));
  CHECK(d.tasks.size() == 3);
  CHECK(d.corridor_length == 20);
  CHECK(d.n_expert == 60);
  CHECK(d.n_subopt == 240);
  CHECK(d.epsilon == doctest::Approx(0.5));
  CHECK(d.model.n_experts == 4);
  CHECK(d.train.alpha == doctest::Approx(0.5));
  CHECK(d.train.beta == doctest::Approx(0.002));
  CHECK(d.flags.variant_name() == "full");

  auto kv = KeyValueConfig::parse_string(
      "env.tasks = crawl\n"
      "env.length = 10\n"
      "model.n_experts = 2\n"
      "ablate.use_rl = false\n"
      "run.seed = 5\n");
  ExperimentConfig c = ExperimentConfig::from_kv(kv);
  CHECK(c.tasks.size() == 1);
  CHECK(c.tasks[0] == TaskKind::crawl);
  CHECK(c.corridor_length == 10);
  CHECK(c.model.n_experts == 2);
  CHECK(c.flags.variant_name() == "wo_rl");
  CHECK(c.seed == 5);
}

TEST_CASE("environment seed override wins over the config") {
  auto kv = KeyValueConfig::parse_string("run.seed = 5\n");
  setenv("MORE_SEED", "99", 1);
  CHECK(resolve_master_seed(kv) == 99);
  unsetenv("MORE_SEED");
  CHECK(resolve_master_seed(kv) == 5);
}

TEST_CASE("variant names cover the ablation grid") {
  CHECK(AblationFlags{true, true, true}.variant_name() == "full");
  CHECK(AblationFlags{false, true, false}.variant_name() == "wo_rl");
  CHECK(AblationFlags{true, false, true}.variant_name() == "wo_moe");
  CHECK(AblationFlags{true, true, false}.variant_name() == "wo_sdata");
}

TEST_CASE("goal families separate train and shifted evaluation") {
  ExperimentConfig cfg = ExperimentConfig::from_kv(KeyValueConfig::parse_string(""));
  auto train = cfg.train_family();
  auto eval = cfg.eval_family();
  REQUIRE(train.size() == 3);
  REQUIRE(eval.size() == 3);
  for (const auto& s : train) {
    CHECK(s.goal_lo == cfg.corridor_length / 2);
    CHECK(s.goal_hi == cfg.corridor_length);
  }
  for (const auto& s : eval) {
    CHECK(s.goal_lo == cfg.corridor_length / 4);
    CHECK(s.goal_lo < cfg.corridor_length / 2); // includes unseen goals
    CHECK(s.id.find("_ood") != std::string::npos);
  }
}

TEST_CASE("dense variant matches the adapter budget within ten percent") {
  ExperimentConfig cfg = ExperimentConfig::from_kv(KeyValueConfig::parse_string(""));
  BinSpec bins = cfg.make_bins();
  ModelConfig moe = cfg.make_model_config(bins);
  ModelConfig dense = dense_variant(moe);
  CHECK(dense.n_experts == 1);
  CHECK(dense.top_k == 1);
  CHECK(dense.lora_rank > moe.lora_rank);

  // compare actual allocated trainables on small instantiations
  ModelConfig small_moe = moe;
  small_moe.n_layers = 1;
  small_moe.hidden = 32;
  small_moe.n_heads = 2;
  ModelConfig small_dense = dense_variant(small_moe);
  MoePolicy a(small_moe), b(small_dense);
  double na = static_cast<double>(a.params().scalar_count());
  double nb = static_cast<double>(b.params().scalar_count());
  CHECK(std::abs(na - nb) / na < 0.10);
}

TEST_CASE("greedy rollouts are deterministic and bounded") {
  ExperimentConfig cfg = ExperimentConfig::from_kv(KeyValueConfig::parse_string(
      "env.length = 10\nenv.horizon = 20\nmodel.n_layers = 1\nmodel.hidden = 32\n"
      "model.n_heads = 2\nmodel.ffn_mult = 2\nmodel.n_experts = 2\nmodel.lora_rank = 2\n"));
  BinSpec bins = cfg.make_bins();
  ModelConfig mc = cfg.make_model_config(bins);
  mc.init_seed = 3;
  MoePolicy policy(mc);
  auto fam = cfg.train_family();
  SuccessStats s1 = rollout(policy, fam, bins, 3, 12);
  SuccessStats s2 = rollout(policy, fam, bins, 3, 12);
  REQUIRE(s1.tasks.size() == fam.size());
  for (size_t i = 0; i < s1.tasks.size(); ++i) {
    CHECK(s1.tasks[i].success_rate == s2.tasks[i].success_rate);
    CHECK(s1.tasks[i].mean_len == s2.tasks[i].mean_len);
    CHECK(s1.tasks[i].n_episodes == 3);
    CHECK(s1.tasks[i].success_rate >= 0.0);
    CHECK(s1.tasks[i].success_rate <= 1.0);
    CHECK(s1.tasks[i].mean_len <= cfg.horizon);
  }
  CHECK(s1.average() == s2.average());
}

TEST_CASE("training writes one metrics row per step") {
  ExperimentConfig cfg = ExperimentConfig::from_kv(KeyValueConfig::parse_string(
      "env.length = 8\nenv.horizon = 16\nmodel.n_layers = 2\nmodel.hidden = 16\n"
      "model.n_heads = 2\nmodel.ffn_mult = 2\nmodel.n_experts = 2\nmodel.lora_rank = 2\n"
      "train.total_steps = 5\ntrain.batch_size = 4\n"));
  BinSpec bins = cfg.make_bins();
  TrajectorySet data = generate_dataset(cfg.train_family(), bins, 2, 2, 0.5, 21);
  ModelConfig mc = cfg.make_model_config(bins);
  mc.init_seed = 4;
  MoePolicy policy(mc);
  std::string path = tmp_path("more_metrics.csv");
  train_policy(policy, data, bins, cfg.train, path);

  std::ifstream in(path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "step,td,conservative,balance,total,f_entropy_l0,f_entropy_l1");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 5);
  std::remove(path.c_str());
}

TEST_CASE("report emits one row per variant and task, deterministically") {
  std::vector<AblationRow> rows;
  for (const std::string& v : {"full", "wo_rl"}) {
    AblationRow row;
    row.variant = v;
    row.seed = 3;
    TaskResult t1{"go_to_ood", 25, 0.72, 11.4};
    TaskResult t2{"crawl_ood", 25, 0.5, 13.0};
    row.stats.tasks = {t1, t2};
    rows.push_back(row);
  }
  std::string csv1 = tmp_path("more_report1.csv"), sum1 = tmp_path("more_sum1.txt");
  std::string csv2 = tmp_path("more_report2.csv"), sum2 = tmp_path("more_sum2.txt");
  report(rows, csv1, sum1);
  report(rows, csv2, sum2);

  std::string body = slurp(csv1);
  CHECK(body == slurp(csv2));
  CHECK(body.find("variant,task,n_episodes,success_rate,mean_len,seed\n") == 0);
  CHECK(body.find("full,go_to_ood,25,0.720000,11.400000,3\n") != std::string::npos);
  CHECK(body.find("wo_rl,crawl_ood,25,0.500000,13.000000,3\n") != std::string::npos);
  int lines = 0;
  for (char c : body)
    if (c == '\n') ++lines;
  CHECK(lines == 5); // header + 2 variants x 2 tasks

  std::string summary = slurp(sum1);
  CHECK(summary.find("full 0.610000") != std::string::npos);
  for (const std::string& p : {csv1, sum1, csv2, sum2}) std::remove(p.c_str());
}

TEST_CASE("seed derivation separates streams and stays stable") {
  uint64_t a = derive_seed(1, "data");
  uint64_t b = derive_seed(1, "train");
  uint64_t c = derive_seed(2, "data");
  CHECK(a != b);
  CHECK(a != c);
  CHECK(derive_seed(1, "data") == a);
  CHECK(derive_seed(1, "eval:go_to", 3) != derive_seed(1, "eval:go_to", 4));
  CHECK(derive_seed(1, "eval:go_to", 3) != derive_seed(1, "eval:crawl", 3));
}
