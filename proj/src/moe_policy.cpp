#include "more/moe_policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace more {
namespace {

constexpr double kLnEps = 1e-5;

Vector softmax(const Vector& z) {
  Vector s = (z.array() - z.maxCoeff()).exp();
  return s / s.sum();
}

void lora_grad(const LoraPair& lp, double scaling, const Matrix& dW_eff, LoraPair& grad) {
  if (lp.A.size() == 0) return;
  grad.B.noalias() += scaling * dW_eff * lp.A.transpose();
  grad.A.noalias() += scaling * lp.B.transpose() * dW_eff;
}

Matrix effective(const Matrix& frozen, const LoraPair& lp, double scaling) {
  if (lp.A.size() == 0) return frozen;
  return frozen + scaling * lp.B * lp.A;
}

// dL/dx for y = layernorm(x) with gain g, given dL/dy.
Matrix layernorm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd,
                          const Vector& g) {
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index t = 0; t < dy.cols(); ++t) {
    Vector dxhat = dy.col(t).cwiseProduct(g);
    double m1 = dxhat.mean();
    double m2 = dxhat.cwiseProduct(xhat.col(t)).mean();
    dx.col(t) = (rstd(t) * (dxhat.array() - m1 - xhat.col(t).array() * m2)).matrix();
  }
  return dx;
}

void layernorm_forward(const Matrix& x, const Vector& g, const Vector& b, Matrix& out,
                       Matrix& xhat, Vector& rstd) {
  xhat.resize(x.rows(), x.cols());
  out.resize(x.rows(), x.cols());
  rstd.resize(x.cols());
  for (Eigen::Index t = 0; t < x.cols(); ++t) {
    double mu = x.col(t).mean();
    double var = (x.col(t).array() - mu).square().mean();
    double r = 1.0 / std::sqrt(var + kLnEps);
    rstd(t) = r;
    xhat.col(t) = (x.col(t).array() - mu) * r;
    out.col(t) = xhat.col(t).cwiseProduct(g) + b;
  }
}

Matrix normal_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

LoraPair make_lora(std::mt19937_64& rng, int d_out, int d_in, int rank) {
  LoraPair lp;
  lp.A = normal_matrix(rng, rank, d_in, 1.0 / std::sqrt(static_cast<double>(d_in)));
  lp.B = Matrix::Zero(d_out, rank);
  return lp;
}

} // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * phi;
}

void ModelConfig::validate() const {
  if (vocab <= 0) throw std::invalid_argument("vocab must be positive");
  if (hidden % n_heads != 0) throw std::invalid_argument("hidden must divide into heads");
  if (top_k < 1 || top_k > n_experts) throw std::invalid_argument("top_k outside [1, n_experts]");
  if (lora_rank < 1) throw std::invalid_argument("lora_rank must be positive");
}

ModelConfig ModelConfig::for_bins(const BinSpec& bins, int obs_len, int instr_len) {
  ModelConfig cfg;
  cfg.vocab = bins.vocab_size();
  cfg.action_dims = bins.action_dims();
  cfg.max_seq = obs_len + instr_len + bins.action_dims() + 2;
  return cfg;
}

size_t Trainables::scalar_count() const {
  size_t n = 0;
  for_each_param(*this, [&](const std::string&, const Matrix& m) { n += static_cast<size_t>(m.size()); });
  return n;
}

uint64_t Frozen::checksum() const {
  uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const double* p, Eigen::Index n) {
    const unsigned char* bytes = reinterpret_cast<const unsigned char*>(p);
    for (Eigen::Index i = 0; i < n * static_cast<Eigen::Index>(sizeof(double)); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  feed(embed.data(), embed.size());
  feed(pos.data(), pos.size());
  for (const auto& l : layers) {
    feed(l.wq.data(), l.wq.size());
    feed(l.wk.data(), l.wk.size());
    feed(l.wv.data(), l.wv.size());
    feed(l.wo.data(), l.wo.size());
    feed(l.ln1_g.data(), l.ln1_g.size());
    feed(l.ln1_b.data(), l.ln1_b.size());
    feed(l.ln2_g.data(), l.ln2_g.size());
    feed(l.ln2_b.data(), l.ln2_b.size());
    feed(l.w_up.data(), l.w_up.size());
    feed(l.w_down.data(), l.w_down.size());
  }
  feed(lnf_g.data(), lnf_g.size());
  feed(lnf_b.data(), lnf_b.size());
  feed(head.data(), head.size());
  return h;
}

RouterAccum::RouterAccum(int n_layers, int n_experts) { resize(n_layers, n_experts); }

void RouterAccum::resize(int n_layers, int n_experts) {
  f_count.assign(static_cast<size_t>(n_layers), Vector::Zero(n_experts));
  p_sum.assign(static_cast<size_t>(n_layers), Vector::Zero(n_experts));
  tokens.assign(static_cast<size_t>(n_layers), 0);
}

std::vector<RouterStats> RouterAccum::finalize() const {
  std::vector<RouterStats> out;
  for (size_t l = 0; l < f_count.size(); ++l) {
    RouterStats s;
    s.token_count = tokens[l];
    double n = std::max<double>(1.0, static_cast<double>(tokens[l]));
    s.f = f_count[l] / n;
    s.P = p_sum[l] / n;
    out.push_back(std::move(s));
  }
  return out;
}

MoePolicy::MoePolicy(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int d = cfg_.hidden;
  const int dff = cfg_.d_ff();
  std::mt19937_64 rng(cfg_.init_seed ^ 0x9e3779b97f4a7c15ULL);

  frozen_.embed = normal_matrix(rng, d, cfg_.vocab, 0.5);
  frozen_.pos = normal_matrix(rng, d, cfg_.max_seq, 0.5);
  double ws = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    LayerFrozen fz;
    fz.wq = normal_matrix(rng, d, d, ws);
    fz.wk = normal_matrix(rng, d, d, ws);
    fz.wv = normal_matrix(rng, d, d, ws);
    fz.wo = normal_matrix(rng, d, d, ws);
    fz.ln1_g = Vector::Ones(d);
    fz.ln1_b = Vector::Zero(d);
    fz.ln2_g = Vector::Ones(d);
    fz.ln2_b = Vector::Zero(d);
    fz.w_up = normal_matrix(rng, dff, d, ws);
    fz.w_down = normal_matrix(rng, d, dff, 1.0 / std::sqrt(static_cast<double>(dff)));
    frozen_.layers.push_back(std::move(fz));
  }
  frozen_.lnf_g = Vector::Ones(d);
  frozen_.lnf_b = Vector::Zero(d);
  frozen_.head = cfg_.tied_head ? Matrix(frozen_.embed.transpose())
                                : normal_matrix(rng, cfg_.vocab, d, ws);

  for (int l = 0; l < cfg_.n_layers; ++l) {
    LayerTrainables tr;
    if (cfg_.attention_lora) {
      tr.attn_q = make_lora(rng, d, d, cfg_.lora_rank);
      tr.attn_k = make_lora(rng, d, d, cfg_.lora_rank);
      tr.attn_v = make_lora(rng, d, d, cfg_.lora_rank);
      tr.attn_o = make_lora(rng, d, d, cfg_.lora_rank);
    }
    for (int e = 0; e < cfg_.n_experts; ++e) {
      tr.expert_up.push_back(make_lora(rng, dff, d, cfg_.lora_rank));
      tr.expert_down.push_back(make_lora(rng, d, dff, cfg_.lora_rank));
    }
    tr.router = normal_matrix(rng, cfg_.n_experts, d, 0.02);
    params_.layers.push_back(std::move(tr));
  }
}

const Matrix& MoePolicy::head() const { return frozen_.head; }

Trainables MoePolicy::zero_grad() const {
  Trainables g = params_;
  for_each_param(g, [](const std::string&, Matrix& m) { m.setZero(); });
  return g;
}

std::pair<std::vector<int>, Vector> route(const Vector& x, const Matrix& router, int top_k) {
  Vector logits = router * x;
  std::vector<int> order(static_cast<size_t>(logits.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return logits(a) > logits(b); });
  order.resize(static_cast<size_t>(top_k));
  Vector sel(top_k);
  for (int i = 0; i < top_k; ++i) sel(i) = logits(order[static_cast<size_t>(i)]);
  return {order, softmax(sel)};
}

Vector expert_forward(const Vector& x, int k, const LayerFrozen& fz, const LayerTrainables& tr,
                      double scaling) {
  const LoraPair& up = tr.expert_up[static_cast<size_t>(k)];
  const LoraPair& down = tr.expert_down[static_cast<size_t>(k)];
  Vector u = fz.w_up * x;
  u.noalias() += scaling * (up.B * (up.A * x));
  Vector h = u.unaryExpr([](double v) { return gelu(v); });
  Vector y = fz.w_down * h;
  y.noalias() += scaling * (down.B * (down.A * h));
  return y;
}

std::pair<Vector, Vector> moe_forward(const Vector& x, const LayerFrozen& fz,
                                      const LayerTrainables& tr, const ModelConfig& cfg,
                                      uint64_t* expert_evals) {
  Vector logits = tr.router * x;
  Vector p = softmax(logits);
  auto [sel, gate] = route(x, tr.router, cfg.top_k);
  Vector y = Vector::Zero(x.size());
  for (int i = 0; i < cfg.top_k; ++i) {
    y += gate(i) * expert_forward(x, sel[static_cast<size_t>(i)], fz, tr, cfg.lora_scaling);
    if (expert_evals) ++*expert_evals;
  }
  return {y, p};
}

Matrix MoePolicy::forward(const std::vector<int>& tokens, ForwardCache* cache,
                          RouterAccum* accum) const {
  return forward_with(params_, tokens, cache, accum);
}

Matrix MoePolicy::forward_with(const Trainables& tr, const std::vector<int>& tokens,
                               ForwardCache* cache, RouterAccum* accum) const {
  const int T = static_cast<int>(tokens.size());
  if (T == 0) throw std::invalid_argument("empty token sequence");
  if (T > cfg_.max_seq) throw std::invalid_argument("sequence longer than max_seq");
  const int d = cfg_.hidden;
  const int nh = cfg_.n_heads;
  const int dh = cfg_.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix X(d, T);
  for (int t = 0; t < T; ++t) {
    int tok = tokens[static_cast<size_t>(t)];
    if (tok < 0 || tok >= cfg_.vocab) throw std::invalid_argument("token id outside vocabulary");
    X.col(t) = frozen_.embed.col(tok) + frozen_.pos.col(t);
  }
  if (cache) {
    cache->tokens = tokens;
    cache->attn.assign(static_cast<size_t>(cfg_.n_layers), {});
    cache->moe.assign(static_cast<size_t>(cfg_.n_layers), {});
  }

  for (int l = 0; l < cfg_.n_layers; ++l) {
    const LayerFrozen& fz = frozen_.layers[static_cast<size_t>(l)];
    const LayerTrainables& lt = tr.layers[static_cast<size_t>(l)];

    // attention block
    AttnCache local_ac;
    AttnCache& ac = cache ? cache->attn[static_cast<size_t>(l)] : local_ac;
    layernorm_forward(X, fz.ln1_g, fz.ln1_b, ac.ln_x, ac.xhat, ac.rstd);

    Matrix wq = effective(fz.wq, lt.attn_q, cfg_.lora_scaling);
    Matrix wk = effective(fz.wk, lt.attn_k, cfg_.lora_scaling);
    Matrix wv = effective(fz.wv, lt.attn_v, cfg_.lora_scaling);
    Matrix wo = effective(fz.wo, lt.attn_o, cfg_.lora_scaling);

    ac.Q.noalias() = wq * ac.ln_x;
    ac.K.noalias() = wk * ac.ln_x;
    ac.V.noalias() = wv * ac.ln_x;
    ac.Out.resize(d, T);
    ac.P.assign(static_cast<size_t>(nh), Matrix());
    for (int h = 0; h < nh; ++h) {
      auto Qh = ac.Q.middleRows(h * dh, dh);
      auto Kh = ac.K.middleRows(h * dh, dh);
      auto Vh = ac.V.middleRows(h * dh, dh);
      Matrix scores = (Qh.transpose() * Kh) * inv_sqrt_dh; // (i,j) = q_i . k_j
      Matrix& P = ac.P[static_cast<size_t>(h)];
      P = Matrix::Zero(T, T);
      for (int i = 0; i < T; ++i) {
        Vector row = scores.row(i).head(i + 1);
        Vector sm = softmax(row);
        P.row(i).head(i + 1) = sm.transpose();
      }
      ac.Out.middleRows(h * dh, dh).noalias() = Vh * P.transpose();
    }
    X.noalias() += wo * ac.Out;

    // MoE block
    MoeCache local_mc;
    MoeCache& mc = cache ? cache->moe[static_cast<size_t>(l)] : local_mc;
    layernorm_forward(X, fz.ln2_g, fz.ln2_b, mc.ln_x, mc.xhat, mc.rstd);
    mc.p_full.resize(cfg_.n_experts, T);
    mc.sel.resize(cfg_.top_k, T);
    mc.gate.resize(cfg_.top_k, T);
    mc.u.assign(static_cast<size_t>(cfg_.top_k), Matrix(cfg_.d_ff(), T));
    mc.h.assign(static_cast<size_t>(cfg_.top_k), Matrix(cfg_.d_ff(), T));

    for (int t = 0; t < T; ++t) {
      Vector x = mc.ln_x.col(t);
      auto [sel, gate] = route(x, lt.router, cfg_.top_k);
      Vector logits = lt.router * x;
      Vector p = softmax(logits);
      mc.p_full.col(t) = p;
      Vector y = Vector::Zero(d);
      Vector base_u = fz.w_up * x;
      for (int i = 0; i < cfg_.top_k; ++i) {
        int e = sel[static_cast<size_t>(i)];
        mc.sel(i, t) = e;
        mc.gate(i, t) = gate(i);
        const LoraPair& up = lt.expert_up[static_cast<size_t>(e)];
        const LoraPair& down = lt.expert_down[static_cast<size_t>(e)];
        Vector u = base_u;
        if (up.A.size() > 0) u.noalias() += cfg_.lora_scaling * (up.B * (up.A * x));
        Vector h = u.unaryExpr([](double v) { return gelu(v); });
        Vector e_out = fz.w_down * h;
        if (down.A.size() > 0) e_out.noalias() += cfg_.lora_scaling * (down.B * (down.A * h));
        mc.u[static_cast<size_t>(i)].col(t) = u;
        mc.h[static_cast<size_t>(i)].col(t) = h;
        y += gate(i) * e_out;
        if (accum) ++accum->expert_evals;
      }
      X.col(t) += y;
      if (accum) {
        int arg;
        p.maxCoeff(&arg);
        accum->f_count[static_cast<size_t>(l)](arg) += 1.0;
        accum->p_sum[static_cast<size_t>(l)] += p;
        accum->tokens[static_cast<size_t>(l)] += 1;
      }
    }
  }

  ForwardCache local_fc;
  Matrix& xf = cache ? cache->xf : local_fc.xf;
  Matrix& xf_hat = cache ? cache->xf_hat : local_fc.xf_hat;
  Vector& f_rstd = cache ? cache->f_rstd : local_fc.f_rstd;
  layernorm_forward(X, frozen_.lnf_g, frozen_.lnf_b, xf, xf_hat, f_rstd);
  return frozen_.head * xf;
}

void MoePolicy::backward(const Trainables& tr, const ForwardCache& cache, const Matrix& dlogits,
                         const std::vector<Vector>* balance_dp, Trainables& grad) const {
  const int T = static_cast<int>(cache.tokens.size());
  const int d = cfg_.hidden;
  const int nh = cfg_.n_heads;
  const int dh = cfg_.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dxf = frozen_.head.transpose() * dlogits;
  Matrix dX = layernorm_backward(dxf, cache.xf_hat, cache.f_rstd, frozen_.lnf_g);

  for (int l = cfg_.n_layers - 1; l >= 0; --l) {
    const LayerFrozen& fz = frozen_.layers[static_cast<size_t>(l)];
    const LayerTrainables& lt = tr.layers[static_cast<size_t>(l)];
    LayerTrainables& lg = grad.layers[static_cast<size_t>(l)];
    const MoeCache& mc = cache.moe[static_cast<size_t>(l)];
    const AttnCache& ac = cache.attn[static_cast<size_t>(l)];

    // MoE block backward: X_out = R + moe(ln(R))
    Matrix dLn = Matrix::Zero(d, T);
    for (int t = 0; t < T; ++t) {
      Vector dy = dX.col(t);
      Vector x = mc.ln_x.col(t);
      Vector drl = Vector::Zero(cfg_.n_experts);
      Vector dx = Vector::Zero(d);

      Vector dgate(cfg_.top_k);
      for (int i = 0; i < cfg_.top_k; ++i) {
        int e = mc.sel(i, t);
        const LoraPair& up = lt.expert_up[static_cast<size_t>(e)];
        const LoraPair& down = lt.expert_down[static_cast<size_t>(e)];
        LoraPair& gup = lg.expert_up[static_cast<size_t>(e)];
        LoraPair& gdown = lg.expert_down[static_cast<size_t>(e)];
        Vector u = mc.u[static_cast<size_t>(i)].col(t);
        Vector h = mc.h[static_cast<size_t>(i)].col(t);

        Vector e_out = fz.w_down * h;
        if (down.A.size() > 0) e_out.noalias() += cfg_.lora_scaling * (down.B * (down.A * h));
        dgate(i) = dy.dot(e_out);

        Vector de = mc.gate(i, t) * dy;
        // down projection
        gdown.B.noalias() += cfg_.lora_scaling * de * (down.A * h).transpose();
        gdown.A.noalias() += cfg_.lora_scaling * (down.B.transpose() * de) * h.transpose();
        Vector dh = fz.w_down.transpose() * de;
        if (down.A.size() > 0) dh.noalias() += cfg_.lora_scaling * (down.A.transpose() * (down.B.transpose() * de));
        // activation
        Vector du = dh.cwiseProduct(u.unaryExpr([](double v) { return gelu_grad(v); }));
        // up projection
        gup.B.noalias() += cfg_.lora_scaling * du * (up.A * x).transpose();
        gup.A.noalias() += cfg_.lora_scaling * (up.B.transpose() * du) * x.transpose();
        dx.noalias() += fz.w_up.transpose() * du;
        if (up.A.size() > 0) dx.noalias() += cfg_.lora_scaling * (up.A.transpose() * (up.B.transpose() * du));
      }

      // gate softmax over the selected logits
      Vector g = mc.gate.col(t);
      double gd = g.dot(dgate);
      for (int i = 0; i < cfg_.top_k; ++i)
        drl(mc.sel(i, t)) += g(i) * (dgate(i) - gd);

      // load-balancing path through the full softmax
      if (balance_dp) {
        const Vector& dp = (*balance_dp)[static_cast<size_t>(l)];
        Vector p = mc.p_full.col(t);
        double pd = p.dot(dp);
        drl.array() += p.array() * (dp.array() - pd);
      }

      lg.router.noalias() += drl * x.transpose();
      dx.noalias() += lt.router.transpose() * drl;
      dLn.col(t) = dx;
    }
    dX += layernorm_backward(dLn, mc.xhat, mc.rstd, fz.ln2_g);

    // attention block backward
    Matrix wq = effective(fz.wq, lt.attn_q, cfg_.lora_scaling);
    Matrix wk = effective(fz.wk, lt.attn_k, cfg_.lora_scaling);
    Matrix wv = effective(fz.wv, lt.attn_v, cfg_.lora_scaling);
    Matrix wo = effective(fz.wo, lt.attn_o, cfg_.lora_scaling);

    const Matrix& dO = dX; // residual: gradient flows unchanged past the add
    lora_grad(lt.attn_o, cfg_.lora_scaling, dO * ac.Out.transpose(), lg.attn_o);
    Matrix dOut = wo.transpose() * dO;

    Matrix dQ(d, T), dK(d, T), dV(d, T);
    for (int h = 0; h < nh; ++h) {
      auto Qh = ac.Q.middleRows(h * dh, dh);
      auto Kh = ac.K.middleRows(h * dh, dh);
      auto Vh = ac.V.middleRows(h * dh, dh);
      const Matrix& P = ac.P[static_cast<size_t>(h)];
      auto dOuth = dOut.middleRows(h * dh, dh);

      dV.middleRows(h * dh, dh).noalias() = dOuth * P;
      Matrix dP = dOuth.transpose() * Vh; // T x T
      Matrix dM = Matrix::Zero(T, T);
      for (int i = 0; i < T; ++i) {
        auto p = P.row(i).head(i + 1);
        auto dp = dP.row(i).head(i + 1);
        double pd = p.dot(dp);
        dM.row(i).head(i + 1) = (p.array() * (dp.array() - pd)).matrix();
      }
      dQ.middleRows(h * dh, dh).noalias() = (Kh * dM.transpose()) * inv_sqrt_dh;
      dK.middleRows(h * dh, dh).noalias() = (Qh * dM) * inv_sqrt_dh;
    }

    lora_grad(lt.attn_q, cfg_.lora_scaling, dQ * ac.ln_x.transpose(), lg.attn_q);
    lora_grad(lt.attn_k, cfg_.lora_scaling, dK * ac.ln_x.transpose(), lg.attn_k);
    lora_grad(lt.attn_v, cfg_.lora_scaling, dV * ac.ln_x.transpose(), lg.attn_v);
    Matrix dLn1 = wq.transpose() * dQ;
    dLn1.noalias() += wk.transpose() * dK;
    dLn1.noalias() += wv.transpose() * dV;
    dX += layernorm_backward(dLn1, ac.xhat, ac.rstd, fz.ln1_g);
  }
}

std::pair<Vector, Vector> MoePolicy::forward_q(const std::vector<int>& obs_tokens,
                                               const std::vector<int>& instr_tokens,
                                               const std::vector<int>& action_prefix) const {
  if (static_cast<int>(action_prefix.size()) >= cfg_.action_dims) throw PrefixTooLong();
  std::vector<int> seq;
  seq.reserve(obs_tokens.size() + instr_tokens.size() + action_prefix.size());
  seq.insert(seq.end(), obs_tokens.begin(), obs_tokens.end());
  seq.insert(seq.end(), instr_tokens.begin(), instr_tokens.end());
  seq.insert(seq.end(), action_prefix.begin(), action_prefix.end());
  Matrix logits = forward(seq);
  Vector last = logits.col(logits.cols() - 1);
  Vector q = last.unaryExpr([](double z) { return 1.0 / (1.0 + std::exp(-z)); });
  return {last, q};
}

ActionTokens MoePolicy::greedy_action(const std::vector<int>& obs_tokens,
                                      const std::vector<int>& instr_tokens,
                                      const BinSpec& bins) const {
  ActionTokens out;
  for (int dim = 0; dim < bins.action_dims(); ++dim) {
    auto [logits, q] = forward_q(obs_tokens, instr_tokens, out.tokens);
    int start = bins.block_start(dim);
    int best = start;
    double best_q = q(start);
    for (int t = start + 1; t < start + bins.dims[static_cast<size_t>(dim)].n_bins; ++t) {
      if (q(t) > best_q) {
        best_q = q(t);
        best = t;
      }
    }
    out.tokens.push_back(best);
  }
  return out;
}

} // namespace more
