#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "more/action_codec.hpp"

namespace more {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  int vocab = 0;
  int action_dims = 0;
  int max_seq = 64;
  int n_layers = 4;
  int hidden = 128;
  int n_heads = 4;
  int ffn_mult = 4;
  int n_experts = 4;
  int top_k = 2;
  int lora_rank = 8;
  double lora_scaling = 1.0;
  bool attention_lora = true;
  bool tied_head = false;
  uint64_t init_seed = 0;

  int d_ff() const { return ffn_mult * hidden; }
  int head_dim() const { return hidden / n_heads; }
  void validate() const;
  static ModelConfig for_bins(const BinSpec& bins, int obs_len, int instr_len);
};

// Low-rank delta: scaling * B * A. B starts at zero, so a fresh adapter
// contributes nothing.
struct LoraPair {
  Matrix A; // r x d_in
  Matrix B; // d_out x r
};

struct LayerTrainables {
  LoraPair attn_q, attn_k, attn_v, attn_o;
  std::vector<LoraPair> expert_up;   // N adapters on the shared up projection
  std::vector<LoraPair> expert_down; // N adapters on the shared down projection
  Matrix router; // N x hidden
};

struct Trainables {
  std::vector<LayerTrainables> layers;

  size_t scalar_count() const;
};

// Enumerate every trainable matrix with a stable name.
template <typename T, typename Fn>
void for_each_param(T& t, Fn&& fn) {
  for (size_t l = 0; l < t.layers.size(); ++l) {
    auto& layer = t.layers[l];
    std::string p = "layer" + std::to_string(l) + ".";
    auto pair = [&](const std::string& name, auto& lp) {
      if (lp.A.size() > 0) fn(p + name + ".A", lp.A);
      if (lp.B.size() > 0) fn(p + name + ".B", lp.B);
    };
    pair("attn_q", layer.attn_q);
    pair("attn_k", layer.attn_k);
    pair("attn_v", layer.attn_v);
    pair("attn_o", layer.attn_o);
    for (size_t e = 0; e < layer.expert_up.size(); ++e) {
      pair("expert" + std::to_string(e) + ".up", layer.expert_up[e]);
      pair("expert" + std::to_string(e) + ".down", layer.expert_down[e]);
    }
    fn(p + "router", layer.router);
  }
}

struct LayerFrozen {
  Matrix wq, wk, wv, wo; // hidden x hidden
  Vector ln1_g, ln1_b, ln2_g, ln2_b;
  Matrix w_up;   // d_ff x hidden, shared across experts
  Matrix w_down; // hidden x d_ff
};

struct Frozen {
  Matrix embed; // hidden x vocab
  Matrix pos;   // hidden x max_seq
  std::vector<LayerFrozen> layers;
  Vector lnf_g, lnf_b;
  Matrix head; // vocab x hidden (unused when tied)

  uint64_t checksum() const;
};

// Per-layer router usage over a batch of tokens.
struct RouterStats {
  Vector f; // dispatch fractions, sums to 1
  Vector P; // mean router probabilities
  uint64_t token_count = 0;
};

struct RouterAccum {
  std::vector<Vector> f_count;
  std::vector<Vector> p_sum;
  std::vector<uint64_t> tokens;
  uint64_t expert_evals = 0;

  explicit RouterAccum(int n_layers = 0, int n_experts = 0);
  void resize(int n_layers, int n_experts);
  std::vector<RouterStats> finalize() const;
};

struct PrefixTooLong : std::runtime_error {
  PrefixTooLong() : std::runtime_error("action prefix covers every dimension") {}
};

// Activation caches kept for the backward pass.
struct AttnCache {
  Matrix ln_x;  // normalized input
  Matrix xhat;  // (x - mean)/std, for layernorm backward
  Vector rstd;
  Matrix Q, K, V, Out;
  std::vector<Matrix> P; // per-head attention rows
};

struct MoeCache {
  Matrix ln_x;
  Matrix xhat;
  Vector rstd;
  Matrix p_full;         // N x T router softmax
  Eigen::MatrixXi sel;   // K x T selected experts
  Matrix gate;           // K x T renormalized weights
  std::vector<Matrix> u; // K slots of d_ff x T pre-activations
  std::vector<Matrix> h; // K slots of d_ff x T activations
};

struct ForwardCache {
  std::vector<int> tokens;
  std::vector<AttnCache> attn;
  std::vector<MoeCache> moe;
  Matrix xf_hat;
  Vector f_rstd;
  Matrix xf; // final normalized activations
};

class MoePolicy {
 public:
  explicit MoePolicy(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const Frozen& frozen() const { return frozen_; }
  Trainables& params() { return params_; }
  const Trainables& params() const { return params_; }

  // Logits (vocab x T) for a token sequence, optionally caching activations
  // and accumulating router statistics.
  Matrix forward(const std::vector<int>& tokens, ForwardCache* cache = nullptr,
                 RouterAccum* accum = nullptr) const;
  Matrix forward_with(const Trainables& tr, const std::vector<int>& tokens,
                      ForwardCache* cache = nullptr, RouterAccum* accum = nullptr) const;

  // Accumulate gradients of sum(dlogits .* logits) into grad.
  // balance_dp, when given, adds a per-layer uniform dL/dp term at every
  // token's router softmax (the load-balancing path).
  void backward(const Trainables& tr, const ForwardCache& cache, const Matrix& dlogits,
                const std::vector<Vector>* balance_dp, Trainables& grad) const;

  // Logits and sigmoid Q-values for action dimension prefix.size()+1.
  std::pair<Vector, Vector> forward_q(const std::vector<int>& obs_tokens,
                                      const std::vector<int>& instr_tokens,
                                      const std::vector<int>& action_prefix) const;

  // Per-dimension argmax over valid tokens; ties go to the lowest index.
  ActionTokens greedy_action(const std::vector<int>& obs_tokens,
                             const std::vector<int>& instr_tokens, const BinSpec& bins) const;

  Trainables zero_grad() const;

  const Matrix& head() const;

 private:
  ModelConfig cfg_;
  Frozen frozen_;
  Trainables params_;
};

// Standalone layer-level operations.
// Top-K routing: selected expert indices (descending logit) and softmax
// weights over exactly those logits.
std::pair<std::vector<int>, Vector> route(const Vector& x, const Matrix& router, int top_k);
// Shared FFN plus expert k's adapters.
Vector expert_forward(const Vector& x, int k, const LayerFrozen& fz, const LayerTrainables& tr,
                      double scaling);
// Gated mixture over the selected experts; also returns the full router
// softmax.
std::pair<Vector, Vector> moe_forward(const Vector& x, const LayerFrozen& fz,
                                      const LayerTrainables& tr, const ModelConfig& cfg,
                                      uint64_t* expert_evals = nullptr);

double gelu(double x);
double gelu_grad(double x);

} // namespace more
