#include "more/trajectory_store.hpp"

#include <fstream>

#include <json.hpp>

namespace more {

double Trajectory::ret() const {
  double r = 0.0;
  for (const auto& s : steps) r += s.reward;
  return r;
}

void Trajectory::validate() const {
  if (steps.empty()) throw std::invalid_argument("trajectory has no steps");
  for (size_t i = 0; i < steps.size(); ++i) {
    const auto& s = steps[i];
    if (s.done && i + 1 != steps.size())
      throw std::invalid_argument("done before the final step");
    if (s.reward != 0.0 && !s.done)
      throw std::invalid_argument("nonzero reward at a non-done step");
    if (s.reward != 0.0 && s.reward != 1.0)
      throw std::invalid_argument("reward outside {0,1}");
  }
  if (!steps.back().done) throw std::invalid_argument("final step is not done");
  double r = ret();
  if (r != 0.0 && r != 1.0) throw std::invalid_argument("return outside {0,1}");
}

size_t TrajectorySet::transition_count() const {
  size_t n = 0;
  for (const auto& t : trajectories) n += t.steps.size();
  return n;
}

size_t TrajectorySet::count(Quality q) const {
  size_t n = 0;
  for (const auto& t : trajectories)
    if (t.quality == q) ++n;
  return n;
}

void write_trajectories(const std::string& path, const TrajectorySet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const auto& traj : set.trajectories) {
    nlohmann::ordered_json rec;
    rec["quality"] = traj.quality == Quality::expert ? "expert" : "suboptimal";
    rec["spec_id"] = traj.spec_id;
    auto& steps = rec["steps"] = nlohmann::ordered_json::array();
    for (const auto& s : traj.steps) {
      nlohmann::ordered_json js;
      js["obs"] = s.obs;
      js["instr"] = s.instr;
      js["act"] = s.act;
      js["r"] = static_cast<int>(s.reward);
      js["done"] = s.done;
      steps.push_back(std::move(js));
    }
    out << rec.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

TrajectorySet read_trajectories(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  TrajectorySet set;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
    Trajectory traj;
    try {
      std::string q = rec.at("quality").get<std::string>();
      if (q == "expert") traj.quality = Quality::expert;
      else if (q == "suboptimal") traj.quality = Quality::suboptimal;
      else throw ParseError(lineno, "unknown quality label: " + q);
      traj.spec_id = rec.at("spec_id").get<std::string>();
      for (const auto& js : rec.at("steps")) {
        TrajStep s;
        s.obs = js.at("obs").get<std::vector<int>>();
        s.instr = js.at("instr").get<std::vector<int>>();
        s.act = js.at("act").get<std::vector<int>>();
        s.reward = js.at("r").get<double>();
        s.done = js.at("done").get<bool>();
        traj.steps.push_back(std::move(s));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, e.what());
    }
    try {
      traj.validate();
    } catch (const std::invalid_argument& e) {
      throw InvariantViolation(lineno, e.what());
    }
    set.trajectories.push_back(std::move(traj));
  }
  return set;
}

std::vector<Transition> flatten_transitions(const TrajectorySet& set) {
  std::vector<Transition> out;
  out.reserve(set.transition_count());
  for (const auto& traj : set.trajectories) {
    for (size_t i = 0; i < traj.steps.size(); ++i) {
      Transition t;
      t.step = &traj.steps[i];
      t.instr = &traj.steps[i].instr;
      t.next_obs = i + 1 < traj.steps.size() ? &traj.steps[i + 1].obs : &traj.steps[i].obs;
      out.push_back(t);
    }
  }
  return out;
}

TransitionBatch sample_batch(const TrajectorySet& set, int batch_size, std::mt19937_64& rng) {
  std::vector<Transition> all = flatten_transitions(set);
  if (all.empty()) throw EmptyDataset();
  TransitionBatch batch;
  batch.items.reserve(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i)
    batch.items.push_back(all[rng() % all.size()]);
  return batch;
}

} // namespace more
