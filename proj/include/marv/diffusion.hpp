#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "marv/model.hpp"
#include "marv/nn.hpp"
#include "marv/rng.hpp"
#include "marv/tensor.hpp"

namespace marv {

// Cosine alpha-bar schedule with beta clipping, plus an evenly strided
// inference subset.
struct DiffusionSchedule {
  int train_steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;
  std::vector<int> inference_timesteps;  // ascending subset of 0..T-1

  void validate() const {
    if (train_steps < 1 || betas.empty()) throw ConfigError("empty schedule");
  }
};

inline DiffusionSchedule make_schedule(int train_steps, int inference_steps) {
  if (train_steps < 1 || inference_steps < 1 || inference_steps > train_steps)
    throw ConfigError("make_schedule: need T >= inference_steps >= 1");
  DiffusionSchedule sched;
  sched.train_steps = train_steps;
  sched.betas.resize(static_cast<size_t>(train_steps));
  sched.alphas.resize(static_cast<size_t>(train_steps));
  sched.alpha_bars.resize(static_cast<size_t>(train_steps));

  const double s = 0.008;
  auto f = [&](double t) {
    const double u = (t / train_steps + s) / (1.0 + s) * std::numbers::pi / 2.0;
    const double c = std::cos(u);
    return c * c;
  };
  const double f0 = f(0.0);
  double bar = 1.0;
  double prev = 1.0;
  for (int t = 0; t < train_steps; ++t) {
    const double target = f(static_cast<double>(t + 1)) / f0;
    double beta = 1.0 - target / prev;
    beta = std::min(std::max(beta, 1e-8), 0.999);
    sched.betas[static_cast<size_t>(t)] = beta;
    sched.alphas[static_cast<size_t>(t)] = 1.0 - beta;
    bar *= 1.0 - beta;
    sched.alpha_bars[static_cast<size_t>(t)] = bar;
    prev = target;
  }

  sched.inference_timesteps.resize(static_cast<size_t>(inference_steps));
  if (inference_steps == 1) {
    sched.inference_timesteps[0] = train_steps - 1;
  } else {
    for (int i = 0; i < inference_steps; ++i)
      sched.inference_timesteps[static_cast<size_t>(i)] = static_cast<int>(std::llround(
          static_cast<double>(i) * (train_steps - 1) / (inference_steps - 1)));
  }
  return sched;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename S>
MatX<S> q_sample(const MatX<S>& x0, const std::vector<int>& t,
                 const MatX<S>& eps, const DiffusionSchedule& sched) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols() ||
      static_cast<size_t>(x0.rows()) != t.size())
    throw ShapeError("q_sample: shape mismatch");
  MatX<S> xt(x0.rows(), x0.cols());
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    const int ti = t[static_cast<size_t>(i)];
    if (ti < 0 || ti >= sched.train_steps) throw ConfigError("q_sample: t out of range");
    const double abar = sched.alpha_bars[static_cast<size_t>(ti)];
    xt.row(i) = x0.row(i) * static_cast<S>(std::sqrt(abar)) +
                eps.row(i) * static_cast<S>(std::sqrt(1.0 - abar));
  }
  return xt;
}

// ---------------------------------------------------------------------------
// Head forward / backward. Conditioning (projected z + timestep embedding)
// is added to every block input.
// ---------------------------------------------------------------------------

template <typename S>
struct HeadCache {
  MatX<S> z_in;      // z + positional rows (input to z projection)
  MatX<S> t_feat;    // sinusoidal timestep features
  MatX<S> t_pre;     // silu pre-activation
  MatX<S> cond;
  MatX<S> x_t;
  struct BlockCache {
    MatX<S> in_sum;  // h + cond
    MatX<S> xhat;
    VecX<S> rstd;
    MatX<S> pre;     // fc1 output, silu pre-activation
  };
  std::vector<BlockCache> blocks;
  MatX<S> h_final;
  MatX<S> xhat_out;
  VecX<S> rstd_out;
};

// z rows are conditioning vectors; positions index the head positional
// embedding; t picks per-row timestep features. Returns eps_hat.
template <typename S>
MatX<S> head_forward(const HeadParams<S>& head, const Buffers<S>& bufs,
                     const MatX<S>& z, const std::vector<int>& positions,
                     const std::vector<int>& t, const MatX<S>& x_t,
                     std::type_identity_t<HeadCache<S>*> cache) {
  const Eigen::Index n = z.rows();
  HeadCache<S> local;
  HeadCache<S>& c = cache ? *cache : local;

  c.z_in = z;
  for (Eigen::Index i = 0; i < n; ++i)
    c.z_in.row(i) += head.pos_emb.row(positions[static_cast<size_t>(i)]);

  c.t_feat.resize(n, bufs.timestep_features.cols());
  for (Eigen::Index i = 0; i < n; ++i)
    c.t_feat.row(i) = bufs.timestep_features.row(t[static_cast<size_t>(i)]);
  c.t_pre = linear_forward(c.t_feat, head.t_fc1_w, head.t_fc1_b);
  const MatX<S> t_emb = linear_forward(silu(c.t_pre), head.t_fc2_w, head.t_fc2_b);

  c.cond = linear_forward(c.z_in, head.z_w, head.z_b) + t_emb;
  c.x_t = x_t;

  MatX<S> h = linear_forward(x_t, head.in_w, head.in_b);
  c.blocks.resize(head.blocks.size());
  for (size_t b = 0; b < head.blocks.size(); ++b) {
    auto& bc = c.blocks[b];
    bc.in_sum = h + c.cond;
    MatX<S> y;
    layernorm_forward(bc.in_sum, head.blocks[b].ln_g, head.blocks[b].ln_b, y,
                      bc.xhat, bc.rstd);
    bc.pre = linear_forward(y, head.blocks[b].fc1_w, head.blocks[b].fc1_b);
    h += linear_forward(silu(bc.pre), head.blocks[b].fc2_w, head.blocks[b].fc2_b);
  }
  c.h_final = h;

  MatX<S> y_out;
  layernorm_forward(h, head.ln_out_g, head.ln_out_b, y_out, c.xhat_out, c.rstd_out);
  return linear_forward(y_out, head.out_w, head.out_b);
}

// Backward through head_forward; accumulates into head_grads, returns d_z.
template <typename S>
MatX<S> head_backward(const HeadParams<S>& head, const HeadCache<S>& c,
                      const std::vector<int>& positions, const MatX<S>& d_eps,
                      HeadParams<S>& head_grads) {
  MatX<S> y_out = c.xhat_out.array().rowwise() * head.ln_out_g.col(0).transpose().array();
  y_out.array().rowwise() += head.ln_out_b.col(0).transpose().array();
  MatX<S> d_y_out;
  linear_backward(d_eps, y_out, head.out_w, &d_y_out, head_grads.out_w,
                  head_grads.out_b);
  MatX<S> d_h;
  layernorm_backward(d_y_out, c.xhat_out, c.rstd_out, head.ln_out_g, d_h,
                     head_grads.ln_out_g, head_grads.ln_out_b);

  MatX<S> d_cond = MatX<S>::Zero(c.cond.rows(), c.cond.cols());
  for (size_t b = head.blocks.size(); b-- > 0;) {
    const auto& bc = c.blocks[b];
    auto& bg = head_grads.blocks[b];
    MatX<S> y = bc.xhat.array().rowwise() * head.blocks[b].ln_g.col(0).transpose().array();
    y.array().rowwise() += head.blocks[b].ln_b.col(0).transpose().array();

    MatX<S> d_act;
    linear_backward(d_h, silu(bc.pre), head.blocks[b].fc2_w, &d_act, bg.fc2_w,
                    bg.fc2_b);
    MatX<S> d_pre = d_act.array() * silu_grad(bc.pre).array();
    MatX<S> d_y;
    linear_backward(d_pre, y, head.blocks[b].fc1_w, &d_y, bg.fc1_w, bg.fc1_b);
    MatX<S> d_in_sum;
    layernorm_backward(d_y, bc.xhat, bc.rstd, head.blocks[b].ln_g, d_in_sum,
                       bg.ln_g, bg.ln_b);
    // d_h flows through the residual unchanged; block input adds cond.
    d_cond += d_in_sum;
    d_h += d_in_sum;
  }

  linear_backward(d_h, c.x_t, head.in_w, nullptr, head_grads.in_w, head_grads.in_b);

  // cond = z_proj(z_in) + t_mlp(t_feat)
  MatX<S> d_t_act;
  linear_backward(d_cond, silu(c.t_pre), head.t_fc2_w, &d_t_act, head_grads.t_fc2_w,
                  head_grads.t_fc2_b);
  MatX<S> d_t_pre = d_t_act.array() * silu_grad(c.t_pre).array();
  linear_backward(d_t_pre, c.t_feat, head.t_fc1_w, nullptr, head_grads.t_fc1_w,
                  head_grads.t_fc1_b);

  MatX<S> d_z;
  linear_backward(d_cond, c.z_in, head.z_w, &d_z, head_grads.z_w, head_grads.z_b);
  for (Eigen::Index i = 0; i < d_z.rows(); ++i)
    head_grads.pos_emb.row(positions[static_cast<size_t>(i)]) += d_z.row(i);
  return d_z;
}

// Pre-drawn randomness for the diffusion loss so FD checks and parallel
// workers see a frozen objective.
template <typename S>
struct HeadLossDraws {
  std::vector<int> t;
  MatX<S> eps;
};

template <typename S>
HeadLossDraws<S> draw_head_loss(int rows, int dims, const DiffusionSchedule& sched,
                                Rng& rng) {
  HeadLossDraws<S> draws;
  draws.t.resize(static_cast<size_t>(rows));
  draws.eps.resize(rows, dims);
  for (int i = 0; i < rows; ++i) {
    draws.t[static_cast<size_t>(i)] = rng.uniform_int(0, sched.train_steps - 1);
    for (int j = 0; j < dims; ++j) draws.eps(i, j) = static_cast<S>(rng.normal());
  }
  return draws;
}

// Mean squared eps-prediction error over the given rows (masked tokens only;
// observation tokens never reach this function).
template <typename S>
S head_loss_forward(const HeadParams<S>& head, const Buffers<S>& bufs,
                    const DiffusionSchedule& sched, const MatX<S>& z,
                    const std::vector<int>& positions, const MatX<S>& x0,
                    const HeadLossDraws<S>& draws, std::type_identity_t<HeadCache<S>*> cache,
                    std::type_identity_t<MatX<S>*> eps_hat_out) {
  const MatX<S> x_t = q_sample(x0, draws.t, draws.eps, sched);
  MatX<S> eps_hat = head_forward(head, bufs, z, positions, draws.t, x_t, cache);
  const S loss = (eps_hat - draws.eps).array().square().mean();
  if (eps_hat_out) *eps_hat_out = std::move(eps_hat);
  return loss;
}

template <typename S>
MatX<S> head_loss_backward(const HeadParams<S>& head, const HeadCache<S>& cache,
                           const std::vector<int>& positions,
                           const MatX<S>& eps_hat, const HeadLossDraws<S>& draws,
                           HeadParams<S>& head_grads) {
  const S scale = S(2) / static_cast<S>(eps_hat.size());
  const MatX<S> d_eps = scale * (eps_hat - draws.eps);
  return head_backward(head, cache, positions, d_eps, head_grads);
}

// ---------------------------------------------------------------------------
// Ancestral sampling
// ---------------------------------------------------------------------------

// Pre-drawn noise for one token's full denoising chain.
template <typename S>
struct SampleNoise {
  VecX<S> init;     // x_T
  MatX<S> per_step; // steps x dim; unused entries ignored
};

template <typename S>
SampleNoise<S> draw_sample_noise(int dims, int steps, Rng& rng, bool deterministic) {
  SampleNoise<S> noise;
  noise.init.setZero(dims);
  noise.per_step.setZero(steps, dims);
  if (!deterministic) {
    for (int j = 0; j < dims; ++j) noise.init(j) = static_cast<S>(rng.normal());
    for (int s = 0; s < steps; ++s)
      for (int j = 0; j < dims; ++j) noise.per_step(s, j) = static_cast<S>(rng.normal());
  }
  return noise;
}

// Batched ancestral sampling conditioned on z, over the schedule's inference
// subset. The posterior-mean form with x0 clamped to [-1, 1] keeps the first
// steps stable where alpha_bar is tiny.
template <typename S>
MatX<S> sample_tokens(const HeadParams<S>& head, const Buffers<S>& bufs,
                      const DiffusionSchedule& sched, const MatX<S>& z,
                      const std::vector<int>& positions,
                      const std::vector<SampleNoise<S>>& noise) {
  const Eigen::Index n = z.rows();
  const int dims = static_cast<int>(head.out_w.rows());
  const auto& steps = sched.inference_timesteps;
  const int num_steps = static_cast<int>(steps.size());

  MatX<S> x(n, dims);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = noise[static_cast<size_t>(i)].init.transpose();

  for (int s = num_steps - 1; s >= 0; --s) {
    const int t = steps[static_cast<size_t>(s)];
    const std::vector<int> t_rows(static_cast<size_t>(n), t);
    const MatX<S> eps_hat = head_forward<S>(head, bufs, z, positions, t_rows, x, nullptr);

    const double abar = sched.alpha_bars[static_cast<size_t>(t)];
    MatX<S> x0 = (x - eps_hat * static_cast<S>(std::sqrt(1.0 - abar))) /
                 static_cast<S>(std::sqrt(abar));
    x0 = x0.cwiseMax(S(-1)).cwiseMin(S(1));
    if (s == 0) {
      x = std::move(x0);
      break;
    }
    const int t_prev = steps[static_cast<size_t>(s - 1)];
    const double abar_prev = sched.alpha_bars[static_cast<size_t>(t_prev)];
    const double alpha_eff = abar / abar_prev;
    const double beta_eff = 1.0 - alpha_eff;
    const double coef_x0 = std::sqrt(abar_prev) * beta_eff / (1.0 - abar);
    const double coef_xt = std::sqrt(alpha_eff) * (1.0 - abar_prev) / (1.0 - abar);
    const double var = beta_eff * (1.0 - abar_prev) / (1.0 - abar);
    const S sigma = static_cast<S>(std::sqrt(std::max(var, 0.0)));
    x = x0 * static_cast<S>(coef_x0) + x * static_cast<S>(coef_xt);
    for (Eigen::Index i = 0; i < n; ++i)
      x.row(i) += sigma * noise[static_cast<size_t>(i)].per_step.row(s);
  }
  return x;
}

}  // namespace marv
