#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace more {

enum class Quality { expert, suboptimal };

struct TrajStep {
  std::vector<int> obs;
  std::vector<int> instr;
  std::vector<int> act;
  double reward = 0.0;
  bool done = false;
};

struct Trajectory {
  std::vector<TrajStep> steps;
  Quality quality = Quality::expert;
  std::string spec_id;

  double ret() const;
  void validate() const; // sparse-reward and done-placement invariants
};

struct TrajectorySet {
  std::vector<Trajectory> trajectories;

  size_t transition_count() const;
  size_t count(Quality q) const;
};

struct Transition {
  const TrajStep* step = nullptr;
  const std::vector<int>* next_obs = nullptr; // terminal steps point at their own obs
  const std::vector<int>* instr = nullptr;
};

struct TransitionBatch {
  std::vector<Transition> items;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  int line;
  ParseError(int l, const std::string& what)
      : std::runtime_error("line " + std::to_string(l) + ": " + what), line(l) {}
};
struct InvariantViolation : std::runtime_error {
  int line;
  InvariantViolation(int l, const std::string& reason)
      : std::runtime_error("line " + std::to_string(l) + ": " + reason), line(l) {}
};
struct EmptyDataset : std::runtime_error {
  EmptyDataset() : std::runtime_error("dataset has no transitions") {}
};

// One trajectory per line:
//   {"quality": "expert"|"suboptimal", "spec_id": str, "steps": [...]}
void write_trajectories(const std::string& path, const TrajectorySet& set);
TrajectorySet read_trajectories(const std::string& path);

// Every transition of the set, in trajectory order. Pointers borrow from the
// set, which must outlive the result.
std::vector<Transition> flatten_transitions(const TrajectorySet& set);

// Uniform sampling over transitions (with replacement).
TransitionBatch sample_batch(const TrajectorySet& set, int batch_size, std::mt19937_64& rng);

} // namespace more
