#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "marv/diffusion.hpp"
#include "marv/model.hpp"
#include "marv/training.hpp"
#include "oracles.hpp"

using namespace marv;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.depth = 1;
  cfg.hidden = 16;
  cfg.mlp = 32;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.frame_h = 4;
  cfg.frame_w = 4;  // m = 4
  cfg.max_frames = 8;
  cfg.head_width = 16;
  cfg.head_blocks = 2;
  cfg.train_timesteps = 50;
  return cfg;
}

ModelConfig small_config() {
  ModelConfig cfg = tiny_config();
  cfg.depth = 2;
  cfg.hidden = 32;
  cfg.mlp = 64;
  cfg.heads = 4;
  cfg.frame_h = 4;
  cfg.frame_w = 6;  // m = 6
  return cfg;
}

// Random sequence input over a built layout; masked slots get partial masks.
template <typename S>
SequenceInput<S> random_input(const ModelConfig& cfg, LayoutAndMask built,
                              std::uint64_t seed, double mask_ratio = 0.6) {
  const int m = cfg.tokens_per_frame();
  Rng rng(seed);
  SequenceInput<S> input;
  input.layout = std::move(built.layout);
  input.mask = std::move(built.mask);
  const int slots = input.layout.num_slots();
  input.tokens.resize(slots * m, cfg.token_dim());
  for (Eigen::Index i = 0; i < input.tokens.rows(); ++i)
    for (Eigen::Index j = 0; j < input.tokens.cols(); ++j)
      input.tokens(i, j) = static_cast<S>(rng.uniform(-1.0, 1.0));
  input.layout.token_masked.assign(static_cast<size_t>(slots), {});
  input.noise_level.assign(static_cast<size_t>(slots), 0);
  input.interval = 3;
  for (int s = 0; s < slots; ++s) {
    if (input.layout.slots[static_cast<size_t>(s)].role == SlotRole::observation) {
      input.noise_level[static_cast<size_t>(s)] = 1 + (s % cfg.noise_vocab);
    } else {
      auto plan = sample_train_mask(m, mask_ratio, 1.0, rng);
      input.layout.token_masked[static_cast<size_t>(s)] = plan.flags(m);
    }
  }
  return input;
}

template <typename S>
TrainExample<S> random_example(const ModelConfig& cfg, const TrainConfig& tc,
                               const DiffusionSchedule& sched, std::uint64_t seed) {
  const int m = cfg.tokens_per_frame();
  Rng rng(seed);
  const int n = tc.clip_len;
  std::vector<MatF> tokens;
  for (int f = 0; f < n; ++f) {
    MatF g(m, cfg.token_dim());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index j = 0; j < g.cols(); ++j)
        g(i, j) = static_cast<float>(rng.uniform(-1.0, 1.0));
    tokens.push_back(std::move(g));
  }
  std::vector<int> levels(static_cast<size_t>(n));
  for (auto& level : levels) level = rng.uniform_int(1, cfg.noise_vocab);
  std::vector<MaskPlan> plans;
  for (int f = 0; f < n; ++f)
    plans.push_back(sample_train_mask(m, tc.mask_ratio_lo, tc.mask_ratio_hi, rng));
  return make_example<S>(cfg, tc, tokens, 2, levels, plans, sched, rng);
}

}  // namespace

TEST_CASE("init_params deterministic, finite, and non-degenerate") {
  const ModelConfig cfg = tiny_config();
  const auto a = init_params<float>(cfg, 7);
  const auto b = init_params<float>(cfg, 7);
  const auto c = init_params<float>(cfg, 8);

  bool all_equal = true, any_diff_seed = false, all_finite = true;
  for_each_param(const_cast<Parameters<float>&>(a), [&](const std::string& name, MatF& mat) {
    (void)name;
    all_finite = all_finite && mat.allFinite();
  });
  auto pa = collect_params(const_cast<Parameters<float>&>(a));
  auto pb = collect_params(const_cast<Parameters<float>&>(b));
  auto pc = collect_params(const_cast<Parameters<float>&>(c));
  for (size_t i = 0; i < pa.size(); ++i) {
    if (*pa[i] != *pb[i]) all_equal = false;
    if (*pa[i] != *pc[i]) any_diff_seed = true;
  }
  CHECK(all_equal);
  CHECK(any_diff_seed);
  CHECK(all_finite);
  for (const auto& layer : a.spatial) CHECK(layer.qkv_w.cwiseAbs().maxCoeff() > 0.0f);
  for (const auto& layer : a.temporal) CHECK(layer.qkv_w.cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("parameter count matches the closed-form manifest count") {
  ModelConfig cfg;
  cfg.depth = 4;
  cfg.hidden = 256;
  cfg.mlp = 1024;
  cfg.heads = 8;
  cfg.frame_h = 16;
  cfg.frame_w = 16;
  cfg.head_width = 256;
  cfg.head_blocks = 3;
  const auto params = init_params<float>(cfg, 1);

  const std::size_t h = 256, d = 12, mlp = 1024, m = 64, w = 256, hb = 3,
                    layers = 8;
  std::size_t want = 0;
  want += h * d + h;               // input projection
  want += h;                       // mask token
  want += 2 * h + 25 * h + 5 * h;  // role, interval, noise tables
  want += layers * (3 * h * h + 3 * h + h * h + h + 4 * h + mlp * h + mlp +
                    h * mlp + h);
  want += 2 * h;  // final norm
  want += m * h;  // head positional embedding
  want += w * h + w;
  want += 2 * (w * w + w);  // timestep mlp
  want += w * d + w;
  want += hb * (2 * w + 2 * (w * w + w));
  want += 2 * w;
  want += d * w + d;
  CHECK(param_count(params) == want);
}

TEST_CASE("embedding is additive in its tables") {
  const ModelConfig cfg = tiny_config();
  const auto params = init_params<double>(cfg, 3);
  const auto bufs = make_buffers<double>(cfg);
  const int m = cfg.tokens_per_frame();

  auto built = build_ctf_layout(2);
  auto input = random_input<double>(cfg, built, 11);

  const MatD h = embed_inputs(params, cfg, bufs, input);

  SUBCASE("same token at two frame indices differs by temporal PE + role/noise terms") {
    // obs slot 0 (frame 0) and obs slot 1 (frame 1), same spatial position
    const int p = 1;
    input.tokens.row(1 * m + p) = input.tokens.row(0 * m + p);
    const MatD h2 = embed_inputs(params, cfg, bufs, input);
    const MatD diff = h2.row(1 * m + p) - h2.row(0 * m + p);
    MatD want = bufs.temporal_pe.row(1) - bufs.temporal_pe.row(0);
    want += params.noise_emb.row(input.noise_level[1] - 1) -
            params.noise_emb.row(input.noise_level[0] - 1);
    CHECK((diff - want).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("interval 1 vs vocab max differ by the interval-table row difference") {
    auto lo = input, hi = input;
    lo.interval = 1;
    hi.interval = cfg.interval_vocab;
    const MatD h_lo = embed_inputs(params, cfg, bufs, lo);
    const MatD h_hi = embed_inputs(params, cfg, bufs, hi);
    const MatD want = params.interval_emb.row(cfg.interval_vocab - 1) -
                      params.interval_emb.row(0);
    for (int row : {0, 3, 2 * m + 1}) {
      const MatD diff = h_hi.row(row) - h_lo.row(row);
      CHECK((diff - want).cwiseAbs().maxCoeff() < 1e-12);
    }
  }

  SUBCASE("zeroing tables and PEs leaves only the input projection") {
    auto stripped = params;
    stripped.role_emb.setZero();
    stripped.interval_emb.setZero();
    stripped.noise_emb.setZero();
    auto no_pe = bufs;
    no_pe.spatial_pe.setZero();
    no_pe.temporal_pe.setZero();
    // unmasked rows only
    auto plain = input;
    for (auto& flags : plain.layout.token_masked) flags.clear();
    const MatD h3 = embed_inputs(stripped, cfg, no_pe, plain);
    const MatD want = linear_forward(plain.tokens, stripped.in_w, stripped.in_b);
    CHECK((h3 - want).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("vocabulary overflow is a config error") {
    auto bad = input;
    bad.interval = cfg.interval_vocab + 1;
    CHECK_THROWS_AS(embed_inputs(params, cfg, bufs, bad), ConfigError);
    auto bad_noise = input;
    bad_noise.noise_level[0] = cfg.noise_vocab + 1;
    CHECK_THROWS_AS(embed_inputs(params, cfg, bufs, bad_noise), ConfigError);
  }
}

TEST_CASE("forbidden-slot perturbations leave masked outputs bitwise unchanged") {
  ModelConfig cfg = small_config();
  const auto params = init_params<float>(cfg, 5);
  const auto bufs = make_buffers<float>(cfg);
  const int m = cfg.tokens_per_frame();
  const int n = 4;

  auto base = random_input<float>(cfg, build_ctf_layout(n), 17);
  const MatF h_base =
      forward_train(params, cfg, base, embed_inputs(params, cfg, bufs, base), nullptr);

  Rng rng(99);
  int trials = 0;
  for (int trial = 0; trial < 40 && trials < 20; ++trial) {
    const int target = rng.uniform_int(0, 2 * n - 1);  // any slot
    const auto reach = oracles::reachable_slots(base.mask, target);
    const std::set<int> reachable(reach.begin(), reach.end());
    const int perturbed = rng.uniform_int(0, 2 * n - 1);
    if (reachable.count(perturbed)) continue;  // influence allowed; skip
    ++trials;

    auto mod = base;
    for (int p = 0; p < m; ++p)
      for (int jj = 0; jj < cfg.token_dim(); ++jj)
        mod.tokens(perturbed * m + p, jj) += static_cast<float>(rng.uniform(-0.5, 0.5));
    const MatF h_mod =
        forward_train(params, cfg, mod, embed_inputs(params, cfg, bufs, mod), nullptr);
    for (int p = 0; p < m; ++p)
      CHECK(h_mod.row(target * m + p) == h_base.row(target * m + p));
  }
  CHECK(trials >= 15);
}

TEST_CASE("perturbing a visible observation does change masked outputs") {
  ModelConfig cfg = small_config();
  const auto params = init_params<float>(cfg, 5);
  const auto bufs = make_buffers<float>(cfg);
  const int m = cfg.tokens_per_frame();

  auto base = random_input<float>(cfg, build_ctf_layout(3), 23);
  const MatF h_base =
      forward_train(params, cfg, base, embed_inputs(params, cfg, bufs, base), nullptr);
  auto mod = base;
  mod.tokens.row(0 * m + 0).array() += 0.25f;  // obs_0 visible to mask_1, mask_2
  const MatF h_mod =
      forward_train(params, cfg, mod, embed_inputs(params, cfg, bufs, mod), nullptr);
  CHECK((h_mod.row(4 * m + 1) - h_base.row(4 * m + 1)).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("spatial attention is permutation-equivariant modulo PEs") {
  ModelConfig cfg = small_config();
  const auto params = init_params<double>(cfg, 9);
  auto bufs = make_buffers<double>(cfg);
  const int m = cfg.tokens_per_frame();

  auto base = random_input<double>(cfg, build_mtf_layout(3), 31, 0.5);
  const MatD h_base =
      forward_train(params, cfg, base, embed_inputs(params, cfg, bufs, base), nullptr);

  const int p1 = 1, p2 = 4;
  auto swapped = base;
  auto bufs2 = bufs;
  bufs2.spatial_pe.row(p1).swap(bufs2.spatial_pe.row(p2));
  for (int s = 0; s < base.layout.num_slots(); ++s) {
    swapped.tokens.row(s * m + p1).swap(swapped.tokens.row(s * m + p2));
    auto& flags = swapped.layout.token_masked[static_cast<size_t>(s)];
    if (!flags.empty()) std::swap(flags[p1], flags[p2]);
  }
  const MatD h_swapped = forward_train(params, cfg, swapped,
                                       embed_inputs(params, cfg, bufs2, swapped), nullptr);
  for (int s = 0; s < base.layout.num_slots(); ++s) {
    for (int p = 0; p < m; ++p) {
      const int q = p == p1 ? p2 : p == p2 ? p1 : p;
      CHECK((h_swapped.row(s * m + q) - h_base.row(s * m + p)).cwiseAbs().maxCoeff() <
            1e-11);
    }
  }
}

TEST_CASE("single-key masked attention returns the value row exactly") {
  Rng rng(2);
  MatD q(1, 8), k(1, 8), v(1, 8);
  for (int j = 0; j < 8; ++j) {
    q(0, j) = rng.normal();
    k(0, j) = rng.normal();
    v(0, j) = rng.normal();
  }
  TemporalMask mask(1);
  mask.set(0, 0, true);
  MatD out;
  masked_attention_forward(q, k, v, mask, 2, out, nullptr);
  CHECK(out == v);
}

TEST_CASE("analytic gradients match finite differences (double)") {
  ModelConfig cfg = tiny_config();
  TrainConfig tc;
  tc.mode = "ctf";
  tc.clip_len = 3;
  tc.batch_size = 1;
  tc.mask_ratio_lo = 0.5;
  tc.mask_ratio_hi = 0.9;
  const auto sched = make_schedule(cfg.train_timesteps, 10);
  auto params = init_params<double>(cfg, 21);
  const auto bufs = make_buffers<double>(cfg);
  const auto ex = random_example<double>(cfg, tc, sched, 77);

  const auto report = grad_check(params, cfg, bufs, sched, ex, 1e-4, 6);
  REQUIRE(!report.empty());
  double worst = 0.0;
  for (const auto& row : report) {
    INFO(row.name, " rel err ", row.max_rel_err);
    CHECK(row.max_rel_err < 1e-3);
    worst = std::max(worst, row.max_rel_err);
  }
  CHECK(worst < 1e-3);

  // gradient flows through z into the backbone
  Parameters<double> grads = make_empty_params<double>(cfg);
  example_loss(params, cfg, bufs, sched, ex, &grads);
  CHECK(grads.spatial[0].qkv_w.cwiseAbs().maxCoeff() > 0.0);
  CHECK(grads.temporal[0].qkv_w.cwiseAbs().maxCoeff() > 0.0);
  CHECK(grads.in_w.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("mtf gradients also match finite differences") {
  ModelConfig cfg = tiny_config();
  TrainConfig tc;
  tc.mode = "mtf";
  tc.clip_len = 3;
  tc.mask_ratio_lo = 0.6;
  tc.mask_ratio_hi = 1.0;
  const auto sched = make_schedule(cfg.train_timesteps, 10);
  auto params = init_params<double>(cfg, 22);
  const auto bufs = make_buffers<double>(cfg);
  const auto ex = random_example<double>(cfg, tc, sched, 78);
  const auto report = grad_check(params, cfg, bufs, sched, ex, 1e-4, 4);
  for (const auto& row : report) {
    INFO(row.name, " rel err ", row.max_rel_err);
    CHECK(row.max_rel_err < 1e-3);
  }
}

TEST_CASE("temporal PE interpolation: identity, midpoints, convexity") {
  const MatD table = sinusoidal_table<double>(8, 16);
  CHECK(interpolate_rows(table, 8) == table);

  const MatD doubled = interpolate_rows(table, 15);
  for (int i = 0; i < 15; i += 2)
    CHECK((doubled.row(i) - table.row(i / 2)).cwiseAbs().maxCoeff() < 1e-12);
  for (int i = 1; i < 15; i += 2) {
    const MatD mid = 0.5 * (table.row(i / 2) + table.row(i / 2 + 1));
    CHECK((doubled.row(i) - mid).cwiseAbs().maxCoeff() < 1e-12);
  }

  const MatD stretched = interpolate_rows(table, 29);
  for (int i = 0; i < 29; ++i) {
    const double coord = static_cast<double>(i) * 7 / 28;
    const int i0 = std::min(static_cast<int>(coord), 6);
    for (int j = 0; j < 16; ++j) {
      const double lo = std::min(table(i0, j), table(i0 + 1, j));
      const double hi = std::max(table(i0, j), table(i0 + 1, j));
      CHECK(stretched(i, j) >= lo - 1e-12);
      CHECK(stretched(i, j) <= hi + 1e-12);
    }
  }
}

TEST_CASE("incremental forward with KV cache equals full causal recompute") {
  ModelConfig cfg = small_config();
  cfg.max_frames = 6;
  const auto params = init_params<float>(cfg, 41);
  const auto bufs = make_buffers<float>(cfg);
  const int m = cfg.tokens_per_frame();
  const int frames = 5;

  Rng rng(55);
  std::vector<MatF> committed;
  auto cache = KVCache<float>::make(cfg, frames + 1);

  for (int f = 0; f <= frames; ++f) {
    // in-progress frame with a partial mask
    MatF tokens(m, cfg.token_dim());
    for (Eigen::Index i = 0; i < tokens.rows(); ++i)
      for (Eigen::Index j = 0; j < tokens.cols(); ++j)
        tokens(i, j) = static_cast<float>(rng.uniform(-1.0, 1.0));
    std::vector<std::uint8_t> flags(static_cast<size_t>(m), 0);
    for (int p = 0; p < m; p += 2) flags[static_cast<size_t>(p)] = 1;

    const MatF z_inc = forward_incremental(params, cfg, bufs, cache, tokens, flags,
                                           f, SlotRole::masked, 0, 2, false);

    // full recompute over committed observations + the in-progress slot
    SequenceInput<float> full;
    full.layout.mode = LayoutMode::inference;
    full.mask = build_inference_mask(f);
    full.tokens.resize((f + 1) * m, cfg.token_dim());
    for (int c = 0; c < f; ++c) {
      full.layout.slots.push_back({SlotRole::observation, c});
      full.layout.token_masked.push_back({});
      full.noise_level.push_back(1);
      full.tokens.middleRows(c * m, m) = committed[static_cast<size_t>(c)];
    }
    full.layout.slots.push_back({SlotRole::masked, f});
    full.layout.token_masked.push_back(flags);
    full.noise_level.push_back(0);
    full.tokens.middleRows(f * m, m) = tokens;
    full.interval = 2;

    const MatF h_full =
        forward_train(params, cfg, full, embed_inputs(params, cfg, bufs, full), nullptr);
    const MatF z_full = h_full.middleRows(f * m, m);

    // identical arithmetic by construction: per-slot GEMM chunks plus
    // fixed-order attention accumulation
    const float diff = (z_inc - z_full).cwiseAbs().maxCoeff();
    INFO("frame ", f, " diff ", diff);
    CHECK(diff == 0.0f);

    // commit a fresh completed frame
    MatF final_tokens(m, cfg.token_dim());
    for (Eigen::Index i = 0; i < final_tokens.rows(); ++i)
      for (Eigen::Index j = 0; j < final_tokens.cols(); ++j)
        final_tokens(i, j) = static_cast<float>(rng.uniform(-1.0, 1.0));
    commit_frame(params, cfg, bufs, cache, final_tokens, f, SlotRole::observation, 1, 2);
    committed.push_back(final_tokens);
    CHECK(cache.filled_frames == f + 1);
    CHECK(cache.entry_count() ==
          static_cast<size_t>(2) * cfg.depth * (f + 1) * m);
  }
}

TEST_CASE("kv cache commit protocol errors") {
  ModelConfig cfg = tiny_config();
  const auto params = init_params<float>(cfg, 1);
  const auto bufs = make_buffers<float>(cfg);
  const int m = cfg.tokens_per_frame();
  auto cache = KVCache<float>::make(cfg, 4);
  MatF tokens = MatF::Zero(m, cfg.token_dim());

  commit_frame(params, cfg, bufs, cache, tokens, 0, SlotRole::observation, 1, 1);
  CHECK(cache.filled_frames == 1);
  // committing the same index twice: filled_frames has advanced
  CHECK_THROWS_AS(
      commit_frame(params, cfg, bufs, cache, tokens, 0, SlotRole::observation, 1, 1),
      ProtocolError);
  CHECK_THROWS_AS(
      commit_frame(params, cfg, bufs, cache, tokens, 3, SlotRole::observation, 1, 1),
      ProtocolError);
}
