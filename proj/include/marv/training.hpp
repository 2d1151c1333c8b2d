#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "marv/data.hpp"
#include "marv/diffusion.hpp"
#include "marv/layout.hpp"
#include "marv/model.hpp"

namespace marv {

struct TrainConfig {
  std::string mode = "ctf";  // ctf | mtf
  bool dynamic_interval = true;
  bool dynamic_noise = true;
  double lr = 1e-4;
  int warmup_steps = 500;
  double weight_decay = 0.02;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  int batch_size = 16;
  int steps = 2000;
  int epochs = 0;  // optional alternative budget: steps = epochs * ceil(|corpus| / batch)
  double ema_decay = 0.99;
  int clip_len = 16;
  double mask_ratio_lo = 0.7;
  double mask_ratio_hi = 1.0;
  double noise_sigma_scale = 0.07;
  int max_resample = 100;
  int denoise_steps = 100;
  std::uint64_t seed = 0;

  bool is_ctf() const { return mode == "ctf"; }

  void validate() const {
    if (mode != "ctf" && mode != "mtf") throw ConfigError("train mode must be ctf|mtf");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
    if (!(ema_decay >= 0.0) || !(ema_decay <= 1.0))
      throw ConfigError("ema_decay must lie in [0, 1]");
    if (batch_size < 1 || clip_len < 1) throw ConfigError("batch_size/clip_len >= 1");
    if (steps < 0 || epochs < 0) throw ConfigError("steps/epochs must be >= 0");
  }

  int total_steps(size_t corpus_size) const {
    if (epochs > 0) {
      const int per_epoch = static_cast<int>(
          (corpus_size + static_cast<size_t>(batch_size) - 1) / batch_size);
      return epochs * std::max(per_epoch, 1);
    }
    return steps;
  }
};

template <typename S>
struct TrainExample {
  SequenceInput<S> input;
  std::vector<int> masked_rows;
  std::vector<int> positions;  // spatial position per masked row
  MatX<S> x0;                  // ground truth at masked rows
  HeadLossDraws<S> draws;
  int interval = 1;
  std::vector<int> noise_levels;  // per observation frame
  std::vector<MaskPlan> plans;
};

// Assembles one training sequence from a sampled clip. Under ctf the layout
// doubles: noisy observation slots then masked slots holding clean targets.
template <typename S>
TrainExample<S> make_example(const ModelConfig& cfg, const TrainConfig& tc,
                             const std::vector<MatF>& clean_tokens, int interval,
                             const std::vector<int>& noise_levels,
                             const std::vector<MaskPlan>& plans,
                             const DiffusionSchedule& sched, Rng& rng) {
  const int n = static_cast<int>(clean_tokens.size());
  const int m = cfg.tokens_per_frame();
  const int d = cfg.token_dim();

  TrainExample<S> ex;
  ex.interval = interval;
  ex.noise_levels = noise_levels;
  ex.plans = plans;

  auto built = tc.is_ctf() ? build_ctf_layout(n) : build_mtf_layout(n);
  ex.input.layout = std::move(built.layout);
  ex.input.mask = std::move(built.mask);
  ex.input.interval = interval;

  const int slots = ex.input.layout.num_slots();
  ex.input.tokens.resize(slots * m, d);
  ex.input.layout.token_masked.assign(static_cast<size_t>(slots), {});
  ex.input.noise_level.assign(static_cast<size_t>(slots), 0);

  for (int s = 0; s < slots; ++s) {
    const Slot& slot = ex.input.layout.slots[static_cast<size_t>(s)];
    const MatF& clean = clean_tokens[static_cast<size_t>(slot.frame_index)];
    if (slot.role == SlotRole::observation) {
      const int level = noise_levels[static_cast<size_t>(slot.frame_index)];
      NoiseSpec noise{level, tc.dynamic_noise ? tc.noise_sigma_scale : 0.0};
      const MatF noisy = inject_noise(clean, noise, rng);
      ex.input.tokens.middleRows(s * m, m) = noisy.cast<S>();
      ex.input.noise_level[static_cast<size_t>(s)] = level;
    } else {
      ex.input.tokens.middleRows(s * m, m) = clean.cast<S>();
      ex.input.layout.token_masked[static_cast<size_t>(s)] =
          plans[static_cast<size_t>(slot.frame_index)].flags(m);
    }
  }

  ex.masked_rows = ex.input.masked_rows(m);
  if (ex.masked_rows.empty())
    throw ConfigError("train example has no masked tokens");
  ex.x0.resize(static_cast<Eigen::Index>(ex.masked_rows.size()), d);
  ex.positions.reserve(ex.masked_rows.size());
  for (size_t i = 0; i < ex.masked_rows.size(); ++i) {
    const int row = ex.masked_rows[i];
    ex.positions.push_back(row % m);
    ex.x0.row(static_cast<Eigen::Index>(i)) = ex.input.tokens.row(row);
  }
  ex.draws = draw_head_loss<S>(static_cast<int>(ex.masked_rows.size()), d, sched, rng);
  return ex;
}

template <typename S>
std::vector<TrainExample<S>> make_batch(const std::vector<VideoClip>& corpus,
                                        const ModelConfig& cfg, const TrainConfig& tc,
                                        const DiffusionSchedule& sched, Rng& rng) {
  if (corpus.empty()) throw ConfigError("make_batch: empty corpus");
  const int m = cfg.tokens_per_frame();
  const int len = tc.clip_len;

  std::vector<TrainExample<S>> batch;
  batch.reserve(static_cast<size_t>(tc.batch_size));
  for (int b = 0; b < tc.batch_size; ++b) {
    int attempts = 0;
    while (true) {
      if (++attempts > tc.max_resample)
        throw SamplingError("make_batch: no clip fits requested length/interval");
      const auto& video =
          corpus[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(corpus.size()) - 1))];
      int interval = 1;
      if (tc.dynamic_interval) {
        interval = rng.uniform_int(1, cfg.interval_vocab);
        const int feasible =
            len > 1 ? (video.num_frames - 1) / (len - 1) : cfg.interval_vocab;
        interval = std::min(interval, std::max(feasible, 1));
      }
      const int span = (len - 1) * interval;
      if (span >= video.num_frames) continue;  // resample
      const int start = rng.uniform_int(0, video.num_frames - 1 - span);
      const VideoClip clip = sample_clip(video, len, interval, start);

      std::vector<MatF> tokens;
      tokens.reserve(static_cast<size_t>(len));
      for (int f = 0; f < len; ++f)
        tokens.push_back(patchify(clip, f, cfg.patch).tokens);

      std::vector<int> levels(static_cast<size_t>(len), 1);
      if (tc.dynamic_noise)
        for (auto& level : levels) level = rng.uniform_int(1, cfg.noise_vocab);

      std::vector<MaskPlan> plans;
      plans.reserve(static_cast<size_t>(len));
      for (int f = 0; f < len; ++f)
        plans.push_back(sample_train_mask(m, tc.mask_ratio_lo, tc.mask_ratio_hi, rng));

      batch.push_back(
          make_example<S>(cfg, tc, tokens, interval, levels, plans, sched, rng));
      break;
    }
  }
  return batch;
}

// Loss (and optionally gradients) for one example: embed, spatial-temporal
// forward, diffusion loss at masked rows, full backward.
template <typename S>
S example_loss(const Parameters<S>& params, const ModelConfig& cfg,
               const Buffers<S>& bufs, const DiffusionSchedule& sched,
               const TrainExample<S>& ex, std::type_identity_t<Parameters<S>*> grads) {
  if (ex.masked_rows.empty()) throw ConfigError("example has no masked tokens");
  ForwardCache<S> cache;
  const MatX<S> h0 = embed_inputs(params, cfg, bufs, ex.input);
  const MatX<S> h_out =
      forward_train(params, cfg, ex.input, h0, grads ? &cache : nullptr);

  MatX<S> z(static_cast<Eigen::Index>(ex.masked_rows.size()), cfg.hidden);
  for (size_t i = 0; i < ex.masked_rows.size(); ++i)
    z.row(static_cast<Eigen::Index>(i)) = h_out.row(ex.masked_rows[i]);

  HeadCache<S> head_cache;
  MatX<S> eps_hat;
  const S loss =
      head_loss_forward(params.head, bufs, sched, z, ex.positions, ex.x0, ex.draws,
                        grads ? &head_cache : nullptr, grads ? &eps_hat : nullptr);
  if (!grads) return loss;

  const MatX<S> d_z = head_loss_backward(params.head, head_cache, ex.positions,
                                         eps_hat, ex.draws, grads->head);
  MatX<S> d_final = MatX<S>::Zero(h_out.rows(), h_out.cols());
  for (size_t i = 0; i < ex.masked_rows.size(); ++i)
    d_final.row(ex.masked_rows[i]) = d_z.row(static_cast<Eigen::Index>(i));
  const MatX<S> d_h0 = backward_train(params, cfg, ex.input, cache, d_final, *grads);
  embed_backward(cfg, ex.input, d_h0, *grads);
  return loss;
}

// ---------------------------------------------------------------------------
// Optimizer state and updates
// ---------------------------------------------------------------------------

template <typename S>
std::vector<MatX<S>*> collect_params(Parameters<S>& p) {
  std::vector<MatX<S>*> out;
  for_each_param(p, [&](const std::string&, MatX<S>& mat) { out.push_back(&mat); });
  return out;
}

struct LossRow {
  long step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

template <typename S>
struct TrainState {
  ModelConfig model_config;
  TrainConfig train_config;
  Parameters<S> params;
  Parameters<S> ema;
  Parameters<S> adam_m;
  Parameters<S> adam_v;
  long step = 0;
  Rng rng{0};
  std::vector<LossRow> history;
};

template <typename S>
TrainState<S> init_train_state(const ModelConfig& cfg, const TrainConfig& tc) {
  tc.validate();
  TrainState<S> state;
  state.model_config = cfg;
  state.train_config = tc;
  state.params = init_params<S>(cfg, tc.seed);
  state.ema = state.params;  // ema starts at params
  state.adam_m = make_empty_params<S>(cfg);
  state.adam_v = make_empty_params<S>(cfg);
  state.rng = Rng(hash_mix(tc.seed, 0x747261696eULL));
  return state;
}

// ema <- decay * ema + (1 - decay) * params
template <typename S>
void ema_update(Parameters<S>& ema, const Parameters<S>& params, double decay) {
  auto ema_ptrs = collect_params(ema);
  auto param_ptrs = collect_params(const_cast<Parameters<S>&>(params));
  if (ema_ptrs.size() != param_ptrs.size())
    throw ShapeError("ema_update: parameter manifests differ");
  for (size_t i = 0; i < ema_ptrs.size(); ++i) {
    if (ema_ptrs[i]->rows() != param_ptrs[i]->rows() ||
        ema_ptrs[i]->cols() != param_ptrs[i]->cols())
      throw ShapeError("ema_update: tensor shape mismatch");
    *ema_ptrs[i] = static_cast<S>(decay) * *ema_ptrs[i] +
                   static_cast<S>(1.0 - decay) * *param_ptrs[i];
  }
}

template <typename S>
double adamw_update(TrainState<S>& state, Parameters<S>& grads, double lr_now) {
  const TrainConfig& tc = state.train_config;
  auto p = collect_params(state.params);
  auto g = collect_params(grads);
  auto mom = collect_params(state.adam_m);
  auto vel = collect_params(state.adam_v);
  const double b1 = tc.adam_beta1, b2 = tc.adam_beta2;
  const long t = state.step + 1;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));

  double grad_sq = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    grad_sq += g[i]->template cast<double>().array().square().sum();
    *mom[i] = static_cast<S>(b1) * *mom[i] + static_cast<S>(1.0 - b1) * *g[i];
    *vel[i] = (static_cast<S>(b2) * vel[i]->array() +
               static_cast<S>(1.0 - b2) * g[i]->array().square())
                  .matrix();
    const auto m_hat = (mom[i]->array() / static_cast<S>(bc1));
    const auto v_hat = (vel[i]->array() / static_cast<S>(bc2));
    p[i]->array() -= static_cast<S>(lr_now) *
                     (m_hat / (v_hat.sqrt() + static_cast<S>(tc.adam_eps)) +
                      static_cast<S>(tc.weight_decay) * p[i]->array());
  }
  return std::sqrt(grad_sq);
}

inline double lr_at_step(const TrainConfig& tc, long step) {
  if (tc.warmup_steps <= 0) return tc.lr;
  const double ramp = static_cast<double>(step + 1) / tc.warmup_steps;
  return tc.lr * std::min(1.0, ramp);
}

// One optimization step over a batch. Deterministic given state.rng; aborts
// on non-finite loss with a diagnostic.
template <typename S>
double train_step(TrainState<S>& state, const Buffers<S>& bufs,
                  const DiffusionSchedule& sched,
                  const std::vector<TrainExample<S>>& batch) {
  const int b = static_cast<int>(batch.size());
  if (b == 0) throw ConfigError("train_step: empty batch");

  Parameters<S> grads = make_empty_params<S>(state.model_config);
  std::vector<double> losses(static_cast<size_t>(b), 0.0);

#ifdef _OPENMP
  const int nthreads = std::min(b, omp_get_max_threads());
#else
  const int nthreads = 1;
#endif
  // per-thread accumulators merged in thread order, so the reduction order
  // is fixed for a given thread count
  std::vector<Parameters<S>> locals;
  locals.reserve(static_cast<size_t>(nthreads));
  for (int t = 0; t < nthreads; ++t)
    locals.push_back(make_empty_params<S>(state.model_config));

#pragma omp parallel for schedule(static) num_threads(nthreads)
  for (int i = 0; i < b; ++i) {
#ifdef _OPENMP
    Parameters<S>& local = locals[static_cast<size_t>(omp_get_thread_num())];
#else
    Parameters<S>& local = locals[0];
#endif
    losses[static_cast<size_t>(i)] = static_cast<double>(example_loss(
        state.params, state.model_config, bufs, sched, batch[static_cast<size_t>(i)], &local));
  }

  auto dst = collect_params(grads);
  for (int t = 0; t < nthreads; ++t) {
    auto src = collect_params(locals[static_cast<size_t>(t)]);
    for (size_t k = 0; k < dst.size(); ++k) *dst[k] += *src[k];
  }

  double loss = 0.0;
  for (double v : losses) loss += v;
  loss /= b;

  auto g = collect_params(grads);
  for (auto* mat : g) *mat /= static_cast<S>(b);

  const double lr_now = lr_at_step(state.train_config, state.step);
  const double grad_norm = adamw_update(state, grads, lr_now);

  if (!std::isfinite(loss) || !std::isfinite(grad_norm)) {
    throw NumericError("train_step: non-finite loss at step " +
                       std::to_string(state.step) + " (lr " + std::to_string(lr_now) +
                       ", grad norm " + std::to_string(grad_norm) + ")");
  }

  ema_update(state.ema, state.params, state.train_config.ema_decay);
  ++state.step;
  state.history.push_back({state.step, loss, lr_now, grad_norm});
  return loss;
}

// ---------------------------------------------------------------------------
// Gradient check: central finite differences against the analytic gradients,
// stratified entries per tensor.
// ---------------------------------------------------------------------------

struct GradCheckRow {
  std::string name;
  double max_rel_err = 0.0;
  double max_abs_grad = 0.0;
  int checked = 0;
};

template <typename S>
std::vector<GradCheckRow> grad_check(Parameters<S>& params, const ModelConfig& cfg,
                                     const Buffers<S>& bufs,
                                     const DiffusionSchedule& sched,
                                     const TrainExample<S>& ex, double fd_eps,
                                     int entries_per_tensor) {
  Parameters<S> grads = make_empty_params<S>(cfg);
  example_loss(params, cfg, bufs, sched, ex, &grads);

  std::vector<GradCheckRow> report;
  auto p = collect_params(params);
  auto g = collect_params(grads);
  std::vector<std::string> names;
  for_each_param(params,
                 [&](const std::string& n, const MatX<S>&) { names.push_back(n); });

  for (size_t i = 0; i < p.size(); ++i) {
    GradCheckRow row;
    row.name = names[i];
    const Eigen::Index size = p[i]->size();
    const int checks = std::min<Eigen::Index>(size, entries_per_tensor);
    for (int c = 0; c < checks; ++c) {
      const Eigen::Index idx = size * c / checks;
      S* slot = p[i]->data() + idx;
      const S saved = *slot;
      *slot = saved + static_cast<S>(fd_eps);
      const double up =
          static_cast<double>(example_loss(params, cfg, bufs, sched, ex, nullptr));
      *slot = saved - static_cast<S>(fd_eps);
      const double down =
          static_cast<double>(example_loss(params, cfg, bufs, sched, ex, nullptr));
      *slot = saved;
      const double fd = (up - down) / (2.0 * fd_eps);
      const double an = static_cast<double>(*(g[i]->data() + idx));
      const double rel =
          std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
      row.max_rel_err = std::max(row.max_rel_err, rel);
      row.max_abs_grad = std::max(row.max_abs_grad, std::abs(an));
      ++row.checked;
    }
    report.push_back(std::move(row));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const TrainState<float>& state, const std::string& path);
TrainState<float> load_checkpoint(const std::string& path);
TrainState<float> load_checkpoint(const std::string& path, const ModelConfig& expect);
void write_loss_history_csv(const std::vector<LossRow>& history,
                            const std::string& path,
                            const std::string& fingerprint);

}  // namespace marv
