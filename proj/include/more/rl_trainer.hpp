#pragma once

#include <functional>
#include <optional>

#include "more/moe_policy.hpp"
#include "more/trajectory_store.hpp"

namespace more {

struct TrainConfig {
  double gamma = 0.98;
  double alpha = 0.5;  // conservative coefficient
  double beta = 0.002; // balance coefficient
  double learning_rate = 1e-3;
  double grad_clip = 1.0;
  int target_sync_period = 200;
  int batch_size = 32;
  int total_steps = 2000;
  uint64_t seed = 0;
  int alpha_anneal_steps = 0; // > 0: alpha fades linearly to 0 by this step
  bool bc_mode = false;       // cross-entropy objective instead of TD

  void validate() const;
};

struct BellmanTargets {
  Matrix values; // action_dims x batch, each in [0,1]
};

struct LossTerms {
  double td = 0.0;
  double conservative = 0.0;
  double balance = 0.0;
  double total = 0.0;
};

struct ShapeMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyBatch : std::runtime_error {
  EmptyBatch() : std::runtime_error("router stats cover no tokens") {}
};
struct NonFiniteLoss : std::runtime_error {
  explicit NonFiniteLoss(const std::string& diag)
      : std::runtime_error("non-finite loss: " + diag) {}
};

// Eq.-style per-dimension Bellman backup. Maxima are restricted to valid
// action tokens per dimension; done transitions drop the bootstrap.
BellmanTargets bellman_targets(const TransitionBatch& batch, const MoePolicy& policy,
                               const Trainables& target_params, const BinSpec& bins,
                               double gamma);

// q[b] is vocab x action_dims: online sigmoid values per dimension for batch
// item b; actions[b] the logged tokens. The conservative term averages
// Q^2 over every other vocabulary token.
double rl_loss(const std::vector<Matrix>& q, const std::vector<std::vector<int>>& actions,
               const BellmanTargets& targets, double alpha);

// Switch-style balance objective, averaged over layers.
double moe_balance_loss(const std::vector<RouterStats>& stats);

double total_loss(double rl, double balance, double beta);

// Loss and parameter gradients for one batch. Gradients go to *grad when
// given; router stats to *accum.
LossTerms compute_loss_and_grad(const MoePolicy& policy, const Trainables& target_params,
                                const TransitionBatch& batch, const BinSpec& bins,
                                const TrainConfig& cfg, double alpha_now, Trainables* grad,
                                RouterAccum* accum);

struct AdamState {
  Trainables m, v;
  int t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

class RlTrainer {
 public:
  RlTrainer(MoePolicy& policy, const BinSpec& bins, TrainConfig cfg);

  // One gradient step on the LoRA and router parameters.
  LossTerms train_step(const TransitionBatch& batch);
  // Sample from the set and step; convenience for the training loop.
  LossTerms train_step(const TrajectorySet& data);

  int steps_done() const { return step_; }
  double alpha_now() const;
  const Trainables& target_params() const { return target_; }
  const std::vector<RouterStats>& last_router_stats() const { return last_stats_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  MoePolicy& policy_;
  const BinSpec& bins_;
  TrainConfig cfg_;
  Trainables target_;
  AdamState adam_;
  std::mt19937_64 rng_;
  int step_ = 0;
  std::vector<RouterStats> last_stats_;
};

// Max relative error between analytic gradients and central finite
// differences of loss_fn over up to max_coords sampled coordinates.
double grad_check(const std::function<double()>& loss_fn, Trainables& params,
                  const Trainables& analytic_grad, double epsilon, int max_coords,
                  std::mt19937_64& rng);

} // namespace more
