#pragma once

#include <cstdint>
#include <vector>

#include "more/action_codec.hpp"
#include "more/corridor_env.hpp"
#include "more/trajectory_store.hpp"

namespace more {

// Deterministic sub-seed derivation: independent streams per component.
uint64_t derive_seed(uint64_t master, const std::string& tag, uint64_t index = 0);

// Roll one episode with the given behavior policy. epsilon < 0 means pure
// expert; expert episodes always end in success.
Trajectory rollout_episode(const TaskSpec& spec, const BinSpec& bins, double epsilon,
                           uint64_t seed, Quality quality);

// n_expert successful demonstrations plus n_subopt epsilon-mixture episodes,
// cycling through the spec family.
TrajectorySet generate_dataset(const std::vector<TaskSpec>& family, const BinSpec& bins,
                               int n_expert, int n_subopt, double epsilon, uint64_t seed);

} // namespace more
