#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "more/action_codec.hpp"

namespace more {

enum class TaskKind { go_to, crawl, go_avoid };

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

enum class HeightLevel : int { low = 0, mid = 1, high = 2 };

struct Obstacle {
  int cell;
  HeightLevel required; // passing with body height above this fails
};

// One corridor task family member. Obstacle and distractor cells are placed
// at reset from the episode seed when the random counts are nonzero;
// `fixed_obstacles` pins them instead.
struct TaskSpec {
  TaskKind kind = TaskKind::go_to;
  int corridor_length = 20; // L
  int horizon = 60;         // H
  int start = 0;
  int goal_lo = 10; // goal sampled uniformly in [goal_lo, goal_hi)
  int goal_hi = 20;
  int n_obstacles = 0; // critical cells, placed in (start+1, goal)
  int n_distractors = 0;
  std::vector<Obstacle> fixed_obstacles;
  std::string id = "task";

  void validate() const;
  // Canonical spec for a task kind at corridor scale.
  static TaskSpec standard(TaskKind kind, int length = 20, int horizon = 60);
};

struct EnvState {
  int position = 0;
  HeightLevel body_height = HeightLevel::mid;
  std::vector<Obstacle> obstacles;
  std::vector<int> distractors;
  int goal = 0;
  int step_count = 0;
  bool done = false;
  bool succeeded = false;
};

struct Observation {
  std::vector<int> obs_tokens;
  std::vector<int> instr_tokens;
};

struct InvalidSpec : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SteppedAfterDone : std::runtime_error {
  SteppedAfterDone() : std::runtime_error("step() called on a finished episode") {}
};
struct Unsolvable : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Token layout of the reserved (non-action) vocabulary region. Every
// observation and instruction token falls inside [0, total()).
struct ObsVocab {
  static constexpr int kWindowRadius = 2;
  static constexpr int kWindowSlots = 2 * kWindowRadius + 1;
  static constexpr int kCellCategories = 6; // empty, bar, block, wall, goal, distractor
  static constexpr int kHeightTokens = 3;
  static constexpr int kDirectionTokens = 5; // here, ahead near/far, behind near/far
  static constexpr int kHorizonBuckets = 4;
  static constexpr int kTaskTokens = 3;

  static constexpr int window_base(int slot) { return slot * kCellCategories; }
  static constexpr int height_base() { return kWindowSlots * kCellCategories; }
  static constexpr int direction_base() { return height_base() + kHeightTokens; }
  static constexpr int horizon_base() { return direction_base() + kDirectionTokens; }
  static constexpr int task_base() { return horizon_base() + kHorizonBuckets; }
  static constexpr int total() { return task_base() + kTaskTokens; }

  static constexpr int obs_len() { return kWindowSlots + 3; } // window, height, direction, horizon
  static constexpr int instr_len() { return 1; }
};

// Effective command content seen by the dynamics; the other nine fields of a
// CommandVector are recorded but inert.
struct EffectiveCommand {
  int move = 0; // sign of v_x
  HeightLevel height = HeightLevel::mid;
  bool terminate = false;
};

HeightLevel height_band(double h_z, const BinSpec& bins);
EffectiveCommand effective_command(const CommandVector& cmd, const BinSpec& bins);

class CorridorEnv {
 public:
  CorridorEnv(TaskSpec spec, const BinSpec& bins);

  std::pair<EnvState, Observation> reset(uint64_t seed);
  // Step the current episode. Also usable on an externally constructed state
  // via set_state().
  std::pair<Observation, double> step(const CommandVector& cmd);

  const EnvState& state() const { return state_; }
  void set_state(const EnvState& s) { state_ = s; }
  const TaskSpec& spec() const { return spec_; }
  const BinSpec& bins() const { return bins_; }
  Observation observe() const { return observe(state_); }
  Observation observe(const EnvState& s) const;

  // True when success is still reachable from s within the horizon.
  bool can_succeed(const EnvState& s) const;
  // All (move, height, terminate) combinations from s that keep success
  // reachable (or succeed outright).
  std::vector<EffectiveCommand> success_preserving(const EnvState& s) const;

 private:
  TaskSpec spec_;
  const BinSpec& bins_;
  EnvState state_;
};

// Uniformly random success-preserving command; inert fields uniform.
CommandVector expert_policy(const EnvState& state, CorridorEnv& env, std::mt19937_64& rng);
// With probability epsilon a uniformly random valid command, else expert.
CommandVector suboptimal_policy(const EnvState& state, CorridorEnv& env, double epsilon,
                                std::mt19937_64& rng);
// Uniform over all bin centers in every dimension.
CommandVector random_command(const BinSpec& bins, std::mt19937_64& rng);

} // namespace more
