#include "more/rl_trainer.hpp"

#include <cmath>
#include <sstream>

namespace more {
namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::vector<int> full_sequence(const Transition& t) {
  std::vector<int> seq;
  seq.reserve(t.step->obs.size() + t.instr->size() + t.step->act.size());
  seq.insert(seq.end(), t.step->obs.begin(), t.step->obs.end());
  seq.insert(seq.end(), t.instr->begin(), t.instr->end());
  seq.insert(seq.end(), t.step->act.begin(), t.step->act.end());
  return seq;
}

double masked_max_q(const Vector& logits, const std::vector<bool>& mask) {
  double best = -std::numeric_limits<double>::infinity();
  for (Eigen::Index t = 0; t < logits.size(); ++t)
    if (mask[static_cast<size_t>(t)]) best = std::max(best, logits(t));
  return sigmoid(best); // sigmoid is monotone, max commutes
}

} // namespace

void TrainConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma outside (0,1]");
  if (alpha < 0.0) throw std::invalid_argument("alpha must be >= 0");
  if (beta < 0.0) throw std::invalid_argument("beta must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (target_sync_period < 1) throw std::invalid_argument("target_sync_period must be positive");
}

BellmanTargets bellman_targets(const TransitionBatch& batch, const MoePolicy& policy,
                               const Trainables& target_params, const BinSpec& bins,
                               double gamma) {
  const int dA = bins.action_dims();
  const int B = static_cast<int>(batch.items.size());
  std::vector<std::vector<bool>> masks;
  for (int d = 0; d < dA; ++d) masks.push_back(valid_token_mask(d, policy.config().vocab, bins));

  BellmanTargets out;
  out.values.resize(dA, B);
  for (int b = 0; b < B; ++b) {
    const Transition& tr = batch.items[static_cast<size_t>(b)];
    if (static_cast<int>(tr.step->act.size()) != dA)
      throw ShapeMismatch("logged action does not cover every dimension");
    std::vector<int> seq = full_sequence(tr);
    const int base = static_cast<int>(seq.size()) - dA;
    Matrix logits = policy.forward_with(target_params, seq);
    // within-timestep maxima over the next dimension
    for (int i = 0; i + 1 < dA; ++i)
      out.values(i, b) = masked_max_q(logits.col(base + i), masks[static_cast<size_t>(i + 1)]);
    // cross-timestep backup at the last dimension
    if (tr.step->done) {
      out.values(dA - 1, b) = tr.step->reward;
    } else {
      std::vector<int> next_seq = *tr.next_obs;
      next_seq.insert(next_seq.end(), tr.instr->begin(), tr.instr->end());
      Matrix next_logits = policy.forward_with(target_params, next_seq);
      double next_max = masked_max_q(next_logits.col(next_logits.cols() - 1), masks[0]);
      out.values(dA - 1, b) = tr.step->reward + gamma * next_max;
    }
  }
  return out;
}

double rl_loss(const std::vector<Matrix>& q, const std::vector<std::vector<int>>& actions,
               const BellmanTargets& targets, double alpha) {
  if (q.empty()) throw ShapeMismatch("empty batch");
  if (q.size() != actions.size()) throw ShapeMismatch("q/actions batch sizes differ");
  const int dA = static_cast<int>(q[0].cols());
  const int V = static_cast<int>(q[0].rows());
  double td = 0.0, cons = 0.0;
  const double denom = static_cast<double>(q.size()) * dA;
  for (size_t b = 0; b < q.size(); ++b) {
    if (static_cast<int>(actions[b].size()) != dA) throw ShapeMismatch("action length");
    for (int i = 0; i < dA; ++i) {
      int a = actions[b][static_cast<size_t>(i)];
      double diff = q[b](a, i) - targets.values(i, static_cast<Eigen::Index>(b));
      td += 0.5 * diff * diff / denom;
      if (V > 1) {
        double s = q[b].col(i).squaredNorm() - q[b](a, i) * q[b](a, i);
        cons += alpha * 0.5 * s / (V - 1) / denom;
      }
    }
  }
  return td + cons;
}

double moe_balance_loss(const std::vector<RouterStats>& stats) {
  if (stats.empty()) throw EmptyBatch();
  double sum = 0.0;
  for (const auto& s : stats) {
    if (s.token_count == 0) throw EmptyBatch();
    const int n = static_cast<int>(s.f.size());
    sum += s.f.dot(s.P) / n;
  }
  return sum / static_cast<double>(stats.size());
}

double total_loss(double rl, double balance, double beta) { return rl + beta * balance; }

LossTerms compute_loss_and_grad(const MoePolicy& policy, const Trainables& target_params,
                                const TransitionBatch& batch, const BinSpec& bins,
                                const TrainConfig& cfg, double alpha_now, Trainables* grad,
                                RouterAccum* accum) {
  const ModelConfig& mc = policy.config();
  const int dA = bins.action_dims();
  const int V = mc.vocab;
  const int B = static_cast<int>(batch.items.size());
  if (B == 0) throw ShapeMismatch("empty batch");
  const double denom = static_cast<double>(B) * dA;

  RouterAccum local_accum(mc.n_layers, mc.n_experts);
  RouterAccum& acc = accum ? *accum : local_accum;

  BellmanTargets targets;
  if (!cfg.bc_mode) targets = bellman_targets(batch, policy, target_params, bins, cfg.gamma);

  LossTerms terms;
  std::vector<ForwardCache> caches(static_cast<size_t>(B));
  std::vector<Matrix> dlogits(static_cast<size_t>(B));

  for (int b = 0; b < B; ++b) {
    const Transition& tr = batch.items[static_cast<size_t>(b)];
    std::vector<int> seq = full_sequence(tr);
    const int base = static_cast<int>(seq.size()) - dA;
    Matrix logits = policy.forward(seq, &caches[static_cast<size_t>(b)], &acc);
    Matrix& dz = dlogits[static_cast<size_t>(b)];
    dz = Matrix::Zero(V, logits.cols());

    for (int i = 0; i < dA; ++i) {
      const int col = base - 1 + i;
      const int a = tr.step->act[static_cast<size_t>(i)];
      Vector z = logits.col(col);
      if (cfg.bc_mode) {
        Vector zs = (z.array() - z.maxCoeff()).exp();
        Vector p = zs / zs.sum();
        terms.td += -std::log(std::max(p(a), 1e-300)) / denom;
        dz.col(col) += p / denom;
        dz(a, col) -= 1.0 / denom;
      } else {
        Vector q = z.unaryExpr([](double v) { return sigmoid(v); });
        double diff = q(a) - targets.values(i, b);
        terms.td += 0.5 * diff * diff / denom;
        dz(a, col) += diff * q(a) * (1.0 - q(a)) / denom;
        if (V > 1 && alpha_now > 0.0) {
          double s = q.squaredNorm() - q(a) * q(a);
          terms.conservative += alpha_now * 0.5 * s / (V - 1) / denom;
          double scale = alpha_now / ((V - 1) * denom);
          for (int t = 0; t < V; ++t) {
            if (t == a) continue;
            dz(t, col) += scale * q(t) * q(t) * (1.0 - q(t));
          }
        }
      }
    }
  }

  std::vector<RouterStats> stats = acc.finalize();
  terms.balance = moe_balance_loss(stats);
  terms.total = terms.td + terms.conservative + cfg.beta * terms.balance;

  if (grad) {
    std::vector<Vector> balance_dp(static_cast<size_t>(mc.n_layers));
    for (int l = 0; l < mc.n_layers; ++l) {
      double tokens = std::max<double>(1.0, static_cast<double>(stats[static_cast<size_t>(l)].token_count));
      balance_dp[static_cast<size_t>(l)] =
          (cfg.beta / (mc.n_layers * mc.n_experts * tokens)) * stats[static_cast<size_t>(l)].f;
    }
    for (int b = 0; b < B; ++b)
      policy.backward(policy.params(), caches[static_cast<size_t>(b)], dlogits[static_cast<size_t>(b)],
                      &balance_dp, *grad);
  }
  return terms;
}

RlTrainer::RlTrainer(MoePolicy& policy, const BinSpec& bins, TrainConfig cfg)
    : policy_(policy), bins_(bins), cfg_(cfg), target_(policy.params()),
      rng_(cfg.seed ^ 0xa02bdbf7bb3c0a7ULL) {
  cfg_.validate();
  adam_.m = policy_.zero_grad();
  adam_.v = policy_.zero_grad();
}

double RlTrainer::alpha_now() const {
  if (cfg_.alpha_anneal_steps <= 0) return cfg_.alpha;
  double frac = 1.0 - static_cast<double>(step_) / cfg_.alpha_anneal_steps;
  return cfg_.alpha * std::max(0.0, frac);
}

LossTerms RlTrainer::train_step(const TransitionBatch& batch) {
  Trainables grad = policy_.zero_grad();
  RouterAccum accum(policy_.config().n_layers, policy_.config().n_experts);
  LossTerms terms =
      compute_loss_and_grad(policy_, target_, batch, bins_, cfg_, alpha_now(), &grad, &accum);
  if (!std::isfinite(terms.total)) {
    std::ostringstream os;
    os << "step " << step_ << " td=" << terms.td << " cons=" << terms.conservative
       << " balance=" << terms.balance;
    throw NonFiniteLoss(os.str());
  }

  double sq = 0.0;
  for_each_param(grad, [&](const std::string&, Matrix& g) { sq += g.squaredNorm(); });
  double norm = std::sqrt(sq);
  if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) {
    double scale = cfg_.grad_clip / norm;
    for_each_param(grad, [&](const std::string&, Matrix& g) { g *= scale; });
  }

  // adaptive-moment update on the trainables only
  adam_.t += 1;
  double bc1 = 1.0 - std::pow(adam_.beta1, adam_.t);
  double bc2 = 1.0 - std::pow(adam_.beta2, adam_.t);
  std::vector<Matrix*> gs, ms, vs, ps;
  for_each_param(grad, [&](const std::string&, Matrix& m) { gs.push_back(&m); });
  for_each_param(adam_.m, [&](const std::string&, Matrix& m) { ms.push_back(&m); });
  for_each_param(adam_.v, [&](const std::string&, Matrix& m) { vs.push_back(&m); });
  for_each_param(policy_.params(), [&](const std::string&, Matrix& m) { ps.push_back(&m); });
  for (size_t i = 0; i < gs.size(); ++i) {
    Matrix& g = *gs[i];
    Matrix& m = *ms[i];
    Matrix& v = *vs[i];
    m = adam_.beta1 * m + (1.0 - adam_.beta1) * g;
    v = adam_.beta2 * v + (1.0 - adam_.beta2) * g.cwiseProduct(g);
    Matrix mhat = m / bc1;
    Matrix vhat = v / bc2;
    ps[i]->array() -= cfg_.learning_rate * mhat.array() / (vhat.array().sqrt() + adam_.eps);
  }

  step_ += 1;
  if (step_ % cfg_.target_sync_period == 0) target_ = policy_.params();
  last_stats_ = accum.finalize();
  return terms;
}

LossTerms RlTrainer::train_step(const TrajectorySet& data) {
  TransitionBatch batch = sample_batch(data, cfg_.batch_size, rng_);
  return train_step(batch);
}

double grad_check(const std::function<double()>& loss_fn, Trainables& params,
                  const Trainables& analytic_grad, double epsilon, int max_coords,
                  std::mt19937_64& rng) {
  std::vector<Matrix*> ps;
  std::vector<const Matrix*> gs;
  for_each_param(params, [&](const std::string&, Matrix& m) { ps.push_back(&m); });
  for_each_param(analytic_grad, [&](const std::string&, const Matrix& m) { gs.push_back(&m); });

  size_t total = 0;
  for (const Matrix* p : ps) total += static_cast<size_t>(p->size());

  std::vector<size_t> coords;
  if (max_coords <= 0 || static_cast<size_t>(max_coords) >= total) {
    coords.resize(total);
    for (size_t i = 0; i < total; ++i) coords[i] = i;
  } else {
    for (int i = 0; i < max_coords; ++i) coords.push_back(rng() % total);
  }

  double max_err = 0.0;
  for (size_t flat : coords) {
    size_t k = flat;
    size_t which = 0;
    while (k >= static_cast<size_t>(ps[which]->size())) {
      k -= static_cast<size_t>(ps[which]->size());
      ++which;
    }
    double* slot = ps[which]->data() + k;
    double g = gs[which]->data()[k];
    double orig = *slot;
    *slot = orig + epsilon;
    double lp = loss_fn();
    *slot = orig - epsilon;
    double lm = loss_fn();
    *slot = orig;
    double g_fd = (lp - lm) / (2.0 * epsilon);
    // absolute floor keeps finite-difference noise on near-zero coordinates
    // from dominating the relative error
    double err = std::abs(g_fd - g) / std::max(1e-6, std::abs(g_fd) + std::abs(g));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

} // namespace more
