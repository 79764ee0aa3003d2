#include "more/dataset.hpp"

namespace more {
namespace {

uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

uint64_t mix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

} // namespace

uint64_t derive_seed(uint64_t master, const std::string& tag, uint64_t index) {
  return mix(mix(master ^ fnv1a(tag)) ^ index);
}

Trajectory rollout_episode(const TaskSpec& spec, const BinSpec& bins, double epsilon,
                           uint64_t seed, Quality quality) {
  CorridorEnv env(spec, bins);
  std::mt19937_64 rng(mix(seed ^ 0x5851f42d4c957f2dULL));
  auto [state, obs] = env.reset(seed);
  Trajectory traj;
  traj.quality = quality;
  traj.spec_id = spec.id;
  while (!env.state().done) {
    CommandVector cmd = epsilon < 0.0 ? expert_policy(env.state(), env, rng)
                                      : suboptimal_policy(env.state(), env, epsilon, rng);
    TrajStep step;
    step.obs = obs.obs_tokens;
    step.instr = obs.instr_tokens;
    step.act = discretize(cmd, bins).tokens;
    auto [next_obs, reward] = env.step(cmd);
    step.reward = reward;
    step.done = env.state().done;
    traj.steps.push_back(std::move(step));
    obs = next_obs;
  }
  traj.validate();
  return traj;
}

TrajectorySet generate_dataset(const std::vector<TaskSpec>& family, const BinSpec& bins,
                               int n_expert, int n_subopt, double epsilon, uint64_t seed) {
  if (family.empty()) throw std::invalid_argument("empty spec family");
  if (n_expert < 0 || n_subopt < 0) throw std::invalid_argument("negative episode count");
  TrajectorySet set;
  for (int i = 0; i < n_expert; ++i) {
    const TaskSpec& spec = family[static_cast<size_t>(i) % family.size()];
    set.trajectories.push_back(
        rollout_episode(spec, bins, -1.0, derive_seed(seed, "expert", static_cast<uint64_t>(i)),
                        Quality::expert));
  }
  for (int i = 0; i < n_subopt; ++i) {
    const TaskSpec& spec = family[static_cast<size_t>(i) % family.size()];
    set.trajectories.push_back(
        rollout_episode(spec, bins, epsilon, derive_seed(seed, "subopt", static_cast<uint64_t>(i)),
                        Quality::suboptimal));
  }
  return set;
}

} // namespace more
