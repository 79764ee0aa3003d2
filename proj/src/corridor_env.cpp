#include "more/corridor_env.hpp"

#include <algorithm>
#include <cmath>

namespace more {
namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi_inclusive) {
  return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi_inclusive - lo + 1));
}

const BinSpec::Dim* find_field(const BinSpec& bins, int field) {
  for (const auto& d : bins.dims)
    if (d.field == field) return &d;
  return nullptr;
}

int sign_of(double v) {
  if (v > 1e-9) return 1;
  if (v < -1e-9) return -1;
  return 0;
}

const Obstacle* obstacle_at(const EnvState& s, int cell) {
  for (const auto& o : s.obstacles)
    if (o.cell == cell) return &o;
  return nullptr;
}

} // namespace

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::go_to: return "go_to";
    case TaskKind::crawl: return "crawl";
    case TaskKind::go_avoid: return "go_avoid";
  }
  return "?";
}

TaskKind task_kind_from_name(const std::string& name) {
  if (name == "go_to") return TaskKind::go_to;
  if (name == "crawl") return TaskKind::crawl;
  if (name == "go_avoid") return TaskKind::go_avoid;
  throw std::invalid_argument("unknown task kind: " + name);
}

void TaskSpec::validate() const {
  if (corridor_length < 2) throw InvalidSpec("corridor too short");
  if (horizon < 1) throw InvalidSpec("horizon must be positive");
  if (start < 0 || start >= corridor_length) throw InvalidSpec("start outside corridor");
  if (goal_lo < 0 || goal_hi > corridor_length || goal_lo >= goal_hi)
    throw InvalidSpec("goal range invalid");
  if (n_obstacles > corridor_length) throw InvalidSpec("more critical cells than corridor cells");
  if (n_obstacles > 0 && goal_lo - start < n_obstacles + 2)
    throw InvalidSpec("no room for critical cells before the goal");
  for (const auto& o : fixed_obstacles)
    if (o.cell < 0 || o.cell >= corridor_length) throw InvalidSpec("fixed obstacle outside corridor");
}

TaskSpec TaskSpec::standard(TaskKind kind, int length, int horizon) {
  TaskSpec s;
  s.kind = kind;
  s.corridor_length = length;
  s.horizon = horizon;
  s.goal_lo = length / 2;
  s.goal_hi = length;
  switch (kind) {
    case TaskKind::go_to:
      s.n_obstacles = 0;
      break;
    case TaskKind::crawl:
      s.n_obstacles = 2;
      break;
    case TaskKind::go_avoid:
      s.n_obstacles = 2;
      s.n_distractors = 2;
      break;
  }
  s.id = task_kind_name(kind);
  return s;
}

HeightLevel height_band(double h_z, const BinSpec& bins) {
  const BinSpec::Dim* d = find_field(bins, 7);
  if (!d) return HeightLevel::mid;
  double u = (h_z - d->lo) / (d->hi - d->lo);
  if (u < 1.0 / 3.0) return HeightLevel::low;
  if (u < 2.0 / 3.0) return HeightLevel::mid;
  return HeightLevel::high;
}

EffectiveCommand effective_command(const CommandVector& cmd, const BinSpec& bins) {
  EffectiveCommand e;
  e.move = sign_of(cmd.v_x);
  e.height = height_band(cmd.h_z, bins);
  e.terminate = cmd.T >= 0.5;
  return e;
}

CorridorEnv::CorridorEnv(TaskSpec spec, const BinSpec& bins)
    : spec_(std::move(spec)), bins_(bins) {
  spec_.validate();
}

std::pair<EnvState, Observation> CorridorEnv::reset(uint64_t seed) {
  std::mt19937_64 rng(splitmix64(seed));
  EnvState s;
  s.position = spec_.start;
  s.body_height = HeightLevel::mid;
  s.goal = uniform_int(rng, spec_.goal_lo, spec_.goal_hi - 1);
  if (!spec_.fixed_obstacles.empty()) {
    s.obstacles = spec_.fixed_obstacles;
  } else if (spec_.n_obstacles > 0) {
    HeightLevel req = spec_.kind == TaskKind::go_avoid ? HeightLevel::mid : HeightLevel::low;
    std::vector<int> cells;
    for (int c = spec_.start + 2; c < s.goal; ++c) cells.push_back(c);
    if (static_cast<int>(cells.size()) < spec_.n_obstacles)
      throw InvalidSpec("critical cells do not fit before the goal");
    std::shuffle(cells.begin(), cells.end(), rng);
    for (int i = 0; i < spec_.n_obstacles; ++i) s.obstacles.push_back({cells[i], req});
    std::sort(s.obstacles.begin(), s.obstacles.end(),
              [](const Obstacle& a, const Obstacle& b) { return a.cell < b.cell; });
  }
  for (int i = 0; i < spec_.n_distractors; ++i) {
    for (int tries = 0; tries < 64; ++tries) {
      int c = uniform_int(rng, spec_.start + 1, spec_.corridor_length - 1);
      if (c == s.goal || obstacle_at(s, c)) continue;
      if (std::find(s.distractors.begin(), s.distractors.end(), c) != s.distractors.end()) continue;
      s.distractors.push_back(c);
      break;
    }
  }
  state_ = s;
  return {state_, observe(state_)};
}

std::pair<Observation, double> CorridorEnv::step(const CommandVector& cmd) {
  if (state_.done) throw SteppedAfterDone();
  EffectiveCommand e = effective_command(cmd, bins_);
  state_.step_count += 1;
  state_.position = std::clamp(state_.position + e.move, 0, spec_.corridor_length - 1);
  state_.body_height = e.height;

  double reward = 0.0;
  const Obstacle* obs = obstacle_at(state_, state_.position);
  if (obs && static_cast<int>(state_.body_height) > static_cast<int>(obs->required)) {
    state_.done = true;
  } else if (e.terminate) {
    state_.done = true;
    if (state_.position == state_.goal) {
      state_.succeeded = true;
      reward = 1.0;
    }
  } else if (state_.step_count >= spec_.horizon) {
    state_.done = true;
  }
  return {observe(state_), reward};
}

Observation CorridorEnv::observe(const EnvState& s) const {
  Observation o;
  o.obs_tokens.reserve(ObsVocab::obs_len());
  for (int slot = 0; slot < ObsVocab::kWindowSlots; ++slot) {
    int c = s.position + slot - ObsVocab::kWindowRadius;
    int cat = 0;
    if (c < 0 || c >= spec_.corridor_length) {
      cat = 3;
    } else if (c == s.goal) {
      cat = 4;
    } else if (const Obstacle* ob = obstacle_at(s, c)) {
      cat = ob->required == HeightLevel::low ? 1 : 2;
    } else if (std::find(s.distractors.begin(), s.distractors.end(), c) != s.distractors.end()) {
      cat = 5;
    }
    o.obs_tokens.push_back(ObsVocab::window_base(slot) + cat);
  }
  o.obs_tokens.push_back(ObsVocab::height_base() + static_cast<int>(s.body_height));

  int delta = s.goal - s.position;
  int dir;
  if (delta == 0) dir = 0;
  else if (delta > 0) dir = delta <= 2 ? 1 : 2;
  else dir = delta >= -2 ? 3 : 4;
  o.obs_tokens.push_back(ObsVocab::direction_base() + dir);

  int remaining = std::max(0, spec_.horizon - s.step_count);
  int bucket = std::min(3, (4 * remaining) / std::max(1, spec_.horizon));
  o.obs_tokens.push_back(ObsVocab::horizon_base() + bucket);

  o.instr_tokens.push_back(ObsVocab::task_base() + static_cast<int>(spec_.kind));
  return o;
}

bool CorridorEnv::can_succeed(const EnvState& s) const {
  if (s.done) return false;
  int remaining = spec_.horizon - s.step_count;
  int dist = std::abs(s.goal - s.position);
  return remaining >= std::max(dist, 1);
}

std::vector<EffectiveCommand> CorridorEnv::success_preserving(const EnvState& s) const {
  std::vector<EffectiveCommand> out;
  if (s.done) return out;
  for (int move = -1; move <= 1; ++move) {
    for (int h = 0; h < 3; ++h) {
      for (int term = 0; term <= 1; ++term) {
        EffectiveCommand e{move, static_cast<HeightLevel>(h), term != 0};
        int pos = std::clamp(s.position + move, 0, spec_.corridor_length - 1);
        const Obstacle* ob = obstacle_at(s, pos);
        if (ob && h > static_cast<int>(ob->required)) continue; // fails on contact
        if (e.terminate) {
          if (pos == s.goal) out.push_back(e); // succeeds outright
          continue;
        }
        int remaining = spec_.horizon - (s.step_count + 1);
        int dist = std::abs(s.goal - pos);
        if (remaining >= std::max(dist, 1)) out.push_back(e);
      }
    }
  }
  return out;
}

CommandVector random_command(const BinSpec& bins, std::mt19937_64& rng) {
  CommandVector cmd;
  for (const auto& d : bins.dims) {
    int b = uniform_int(rng, 0, d.n_bins - 1);
    cmd.set_field(d.field, bin_center(b, d));
  }
  return cmd;
}

namespace {

// Realize an effective choice as a concrete command on bin centers.
CommandVector realize(const EffectiveCommand& e, const BinSpec& bins, std::mt19937_64& rng) {
  CommandVector cmd = random_command(bins, rng);
  for (const auto& d : bins.dims) {
    if (d.field == 0) {
      std::vector<int> candidates;
      for (int b = 0; b < d.n_bins; ++b)
        if (sign_of(bin_center(b, d)) == e.move) candidates.push_back(b);
      if (candidates.empty()) throw std::logic_error("no v_x bin with the requested sign");
      cmd.v_x = bin_center(candidates[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(candidates.size()) - 1))], d);
    } else if (d.field == 7) {
      std::vector<int> candidates;
      for (int b = 0; b < d.n_bins; ++b)
        if (height_band(bin_center(b, d), bins) == e.height) candidates.push_back(b);
      if (candidates.empty()) throw std::logic_error("no h_z bin in the requested band");
      cmd.h_z = bin_center(candidates[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(candidates.size()) - 1))], d);
    } else if (d.field == CommandVector::kNumFields - 1) {
      cmd.T = e.terminate ? 1.0 : 0.0;
    }
  }
  return cmd;
}

} // namespace

CommandVector expert_policy(const EnvState& state, CorridorEnv& env, std::mt19937_64& rng) {
  std::vector<EffectiveCommand> options = env.success_preserving(state);
  if (options.empty()) throw Unsolvable("no success-preserving command from this state");
  const EffectiveCommand& pick =
      options[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(options.size()) - 1))];
  return realize(pick, env.bins(), rng);
}

CommandVector suboptimal_policy(const EnvState& state, CorridorEnv& env, double epsilon,
                                std::mt19937_64& rng) {
  if (epsilon < 0.0 || epsilon > 1.0) throw std::invalid_argument("epsilon outside [0,1]");
  double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  if (u < epsilon) return random_command(env.bins(), rng);
  // exploration can make the episode unwinnable; after that there is no
  // success-preserving set to imitate, so keep acting randomly
  if (env.success_preserving(state).empty()) return random_command(env.bins(), rng);
  return expert_policy(state, env, rng);
}

} // namespace more
