#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "marv/training.hpp"

using namespace marv;
namespace fs = std::filesystem;

namespace {

ModelConfig exp_config() {
  ModelConfig cfg;
  cfg.depth = 1;
  cfg.hidden = 32;
  cfg.mlp = 64;
  cfg.heads = 4;
  cfg.patch = 2;
  cfg.frame_h = 8;
  cfg.frame_w = 8;
  cfg.max_frames = 8;
  cfg.head_width = 32;
  cfg.head_blocks = 2;
  cfg.train_timesteps = 100;
  return cfg;
}

std::vector<VideoClip> small_corpus(int video_length = 64, int num_videos = 3) {
  ToyDatasetSpec spec;
  spec.num_videos = num_videos;
  spec.video_length = video_length;
  spec.height = 8;
  spec.width = 8;
  spec.min_radius = 1.0;
  spec.max_radius = 2.0;
  spec.seed = 42;
  return synth_toy_dataset(spec);
}

}  // namespace

TEST_CASE("make_batch honors mode and strategy toggles") {
  const ModelConfig cfg = exp_config();
  const auto sched = make_schedule(cfg.train_timesteps, 10);
  const auto corpus = small_corpus();

  TrainConfig tc;
  tc.batch_size = 4;
  tc.clip_len = 4;

  SUBCASE("dynamic_interval off: all intervals 1") {
    tc.dynamic_interval = false;
    Rng rng(1);
    const auto batch = make_batch<float>(corpus, cfg, tc, sched, rng);
    for (const auto& ex : batch) CHECK(ex.interval == 1);
  }

  SUBCASE("ctf doubles the slot count; mtf does not") {
    tc.mode = "ctf";
    Rng rng(2);
    auto batch = make_batch<float>(corpus, cfg, tc, sched, rng);
    for (const auto& ex : batch) CHECK(ex.input.layout.num_slots() == 8);
    tc.mode = "mtf";
    Rng rng2(2);
    auto mtf = make_batch<float>(corpus, cfg, tc, sched, rng2);
    for (const auto& ex : mtf) CHECK(ex.input.layout.num_slots() == 4);
  }

  SUBCASE("dynamic_noise off pins level 1 with zero sigma") {
    tc.dynamic_noise = false;
    tc.mode = "ctf";
    Rng rng(3);
    const auto batch = make_batch<float>(corpus, cfg, tc, sched, rng);
    const int m = cfg.tokens_per_frame();
    for (const auto& ex : batch) {
      for (int s = 0; s < ex.input.layout.num_slots(); ++s) {
        const Slot& slot = ex.input.layout.slots[static_cast<size_t>(s)];
        if (slot.role != SlotRole::observation) continue;
        CHECK(ex.input.noise_level[static_cast<size_t>(s)] == 1);
        // observation tokens equal the clean masked-slot tokens bit-exactly
        const int mask_slot = ex.input.layout.num_slots() / 2 + slot.frame_index;
        CHECK(ex.input.tokens.middleRows(s * m, m) ==
              ex.input.tokens.middleRows(mask_slot * m, m));
      }
    }
  }

  SUBCASE("too-short corpus raises after bounded retries") {
    tc.clip_len = 10;
    const auto tiny = small_corpus(6);
    Rng rng(4);
    CHECK_THROWS_AS(make_batch<float>(tiny, cfg, tc, sched, rng), SamplingError);
  }
}

TEST_CASE("dynamic interval histogram is uniform over the vocabulary") {
  ModelConfig cfg = exp_config();
  const auto sched = make_schedule(cfg.train_timesteps, 10);
  // sources long enough that no interval gets clipped: (16-1)*25 + 1 = 376
  const auto corpus = small_corpus(400, 2);

  TrainConfig tc;
  tc.batch_size = 50;
  tc.clip_len = 16;
  tc.dynamic_noise = false;
  tc.mode = "mtf";  // cheaper layout, sampling path identical

  Rng rng(7);
  std::vector<int> counts(static_cast<size_t>(cfg.interval_vocab), 0);
  const int draws = 500 * tc.batch_size;
  for (int rep = 0; rep < 500; ++rep) {
    const auto batch = make_batch<float>(corpus, cfg, tc, sched, rng);
    for (const auto& ex : batch) ++counts[static_cast<size_t>(ex.interval - 1)];
  }
  const double expected = static_cast<double>(draws) / cfg.interval_vocab;
  double chi2 = 0.0;
  for (int c : counts) {
    const double dev = c - expected;
    chi2 += dev * dev / expected;
  }
  // chi-square critical value, 24 dof, p = 0.001
  CHECK(chi2 < 51.18);
}

TEST_CASE("ema update identities and closed form") {
  const ModelConfig cfg = exp_config();
  auto params = init_params<float>(cfg, 1);
  auto ema0 = init_params<float>(cfg, 2);

  SUBCASE("decay 0 copies params") {
    auto ema = ema0;
    ema_update(ema, params, 0.0);
    auto a = collect_params(ema);
    auto b = collect_params(params);
    for (size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);
  }

  SUBCASE("decay 1 leaves ema unchanged") {
    auto ema = ema0;
    ema_update(ema, params, 1.0);
    auto a = collect_params(ema);
    auto b = collect_params(ema0);
    for (size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);
  }

  SUBCASE("k steps of constant params follow the geometric recursion") {
    const double decay = 0.9;
    const int k = 7;
    auto ema = ema0;
    for (int i = 0; i < k; ++i) ema_update(ema, params, decay);
    const double factor = std::pow(decay, k);
    auto e = collect_params(ema);
    auto e0 = collect_params(ema0);
    auto p = collect_params(params);
    for (size_t i = 0; i < e.size(); ++i) {
      const MatF want =
          p[i]->array() + static_cast<float>(factor) * (e0[i]->array() - p[i]->array());
      CHECK((*e[i] - want).cwiseAbs().maxCoeff() < 1e-5f);
    }
  }
}

TEST_CASE("train_step: finite first loss, zero-lr identity, determinism") {
  const ModelConfig cfg = exp_config();
  const auto corpus = small_corpus();
  TrainConfig tc;
  tc.batch_size = 2;
  tc.clip_len = 3;
  tc.lr = 1e-3;
  tc.warmup_steps = 0;
  tc.seed = 11;
  const auto sched = make_schedule(cfg.train_timesteps, 10);
  const auto bufs = make_buffers<float>(cfg);

  SUBCASE("first loss is finite and positive") {
    auto state = init_train_state<float>(cfg, tc);
    const auto batch = make_batch<float>(corpus, cfg, tc, sched, state.rng);
    const double loss = train_step(state, bufs, sched, batch);
    CHECK(std::isfinite(loss));
    CHECK(loss > 0.0);
    CHECK(state.step == 1);
  }

  SUBCASE("zero lr and zero weight decay leave parameters unchanged") {
    TrainConfig frozen = tc;
    frozen.lr = 0.0;
    frozen.weight_decay = 0.0;
    auto state = init_train_state<float>(cfg, frozen);
    const auto before = state.params;
    const auto batch = make_batch<float>(corpus, cfg, frozen, sched, state.rng);
    train_step(state, bufs, sched, batch);
    auto a = collect_params(state.params);
    auto b = collect_params(const_cast<Parameters<float>&>(before));
    for (size_t i = 0; i < a.size(); ++i) CHECK(*a[i] == *b[i]);
    CHECK(state.step == 1);  // bookkeeping still advances
  }

  SUBCASE("identical seeds give identical loss histories") {
    auto run = [&](std::uint64_t seed) {
      TrainConfig c = tc;
      c.seed = seed;
      auto state = init_train_state<float>(cfg, c);
      for (int i = 0; i < 5; ++i) {
        const auto batch = make_batch<float>(corpus, cfg, c, sched, state.rng);
        train_step(state, bufs, sched, batch);
      }
      return state.history;
    };
    const auto h1 = run(21), h2 = run(21), h3 = run(22);
    REQUIRE(h1.size() == h2.size());
    for (size_t i = 0; i < h1.size(); ++i) {
      CHECK(h1[i].loss == h2[i].loss);
      CHECK(h1[i].grad_norm == h2[i].grad_norm);
    }
    CHECK(h1[0].loss != h3[0].loss);
  }
}

TEST_CASE("loss depends on hidden observations only through conditioning") {
  // perturbing the last observation frame (visible to no masked slot) leaves
  // the loss bit-identical; perturbing an earlier one changes it
  const ModelConfig cfg = exp_config();
  const auto sched = make_schedule(cfg.train_timesteps, 10);
  const auto bufs = make_buffers<float>(cfg);
  const auto params = init_params<float>(cfg, 3);
  const auto corpus = small_corpus();
  TrainConfig tc;
  tc.batch_size = 1;
  tc.clip_len = 3;
  Rng rng(5);
  auto batch = make_batch<float>(corpus, cfg, tc, sched, rng);
  auto& ex = batch[0];
  const int m = cfg.tokens_per_frame();

  const double base = example_loss(params, cfg, bufs, sched, ex, nullptr);

  auto perturbed = ex;
  perturbed.input.tokens.middleRows(2 * m, m).array() += 0.3f;  // obs of frame 2
  const double same = example_loss(params, cfg, bufs, sched, perturbed, nullptr);
  CHECK(same == base);

  auto visible = ex;
  visible.input.tokens.middleRows(0 * m, m).array() += 0.3f;  // obs of frame 0
  const double changed = example_loss(params, cfg, bufs, sched, visible, nullptr);
  CHECK(changed != base);
}

TEST_CASE("an example with no masked tokens is a precondition error") {
  const ModelConfig cfg = exp_config();
  const auto sched = make_schedule(cfg.train_timesteps, 10);
  const auto bufs = make_buffers<float>(cfg);
  const auto params = init_params<float>(cfg, 3);
  const auto corpus = small_corpus();
  TrainConfig tc;
  tc.batch_size = 1;
  tc.clip_len = 2;
  Rng rng(6);
  auto batch = make_batch<float>(corpus, cfg, tc, sched, rng);
  auto& ex = batch[0];
  for (auto& flags : ex.input.layout.token_masked) flags.clear();
  ex.masked_rows.clear();
  CHECK_THROWS_AS(example_loss(params, cfg, bufs, sched, ex, nullptr), ConfigError);
}

TEST_CASE("checkpoint round trip is bit-identical and resume matches") {
  const fs::path dir = fs::temp_directory_path() / "marv_test_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);

  const ModelConfig cfg = exp_config();
  const auto corpus = small_corpus();
  TrainConfig tc;
  tc.batch_size = 2;
  tc.clip_len = 3;
  tc.lr = 1e-3;
  tc.seed = 31;
  const auto sched = make_schedule(cfg.train_timesteps, 10);
  const auto bufs = make_buffers<float>(cfg);

  // unbroken run: 10 steps
  auto full = init_train_state<float>(cfg, tc);
  for (int i = 0; i < 10; ++i)
    train_step(full, bufs, sched, make_batch<float>(corpus, cfg, tc, sched, full.rng));

  // broken run: 5 steps, save, load, 5 more
  auto part = init_train_state<float>(cfg, tc);
  for (int i = 0; i < 5; ++i)
    train_step(part, bufs, sched, make_batch<float>(corpus, cfg, tc, sched, part.rng));
  const std::string ck = (dir / "state.ckpt").string();
  save_checkpoint(part, ck);

  // save -> load -> save produces identical bytes
  auto loaded = load_checkpoint(ck);
  const std::string ck2 = (dir / "state2.ckpt").string();
  loaded.history = part.history;  // history lives in the CSV, not the checkpoint
  save_checkpoint(loaded, ck2);
  std::ifstream a(ck, std::ios::binary), b(ck2, std::ios::binary);
  const std::string bytes_a((std::istreambuf_iterator<char>(a)), {});
  const std::string bytes_b((std::istreambuf_iterator<char>(b)), {});
  CHECK(bytes_a == bytes_b);

  for (int i = 0; i < 5; ++i)
    train_step(loaded, bufs, sched, make_batch<float>(corpus, cfg, tc, sched, loaded.rng));

  REQUIRE(loaded.step == full.step);
  auto pa = collect_params(full.params);
  auto pb = collect_params(loaded.params);
  for (size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i] == *pb[i]);
  // loss trajectories agree step by step (early rows were copied in above)
  REQUIRE(loaded.history.size() == 10);
  for (size_t i = 0; i < 10; ++i)
    CHECK(full.history[i].loss == loaded.history[i].loss);

  // mismatched model config is a manifest error
  ModelConfig other = cfg;
  other.hidden = 64;
  other.mlp = 128;
  CHECK_THROWS_AS(load_checkpoint(ck, other), ManifestError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), IoError);
}

TEST_CASE("loss history csv has the expected schema") {
  const fs::path dir = fs::temp_directory_path() / "marv_test_csv";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<LossRow> history{{1, 0.5, 1e-4, 2.0}, {2, 0.4, 1e-4, 1.5}};
  const std::string path = (dir / "loss.csv").string();
  write_loss_history_csv(history, path, "abcd1234");
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "# config_fingerprint=abcd1234");
  std::getline(in, line);
  CHECK(line == "step,loss,lr,grad_norm");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 2);
}

TEST_CASE("grad check on the reduced model reports small errors per group") {
  ModelConfig cfg;
  cfg.depth = 1;
  cfg.hidden = 16;
  cfg.mlp = 32;
  cfg.heads = 2;
  cfg.patch = 2;
  cfg.frame_h = 4;
  cfg.frame_w = 4;  // m = 4
  cfg.head_width = 16;
  cfg.head_blocks = 2;
  cfg.train_timesteps = 100;
  TrainConfig tc;
  tc.clip_len = 2;
  tc.batch_size = 1;
  tc.seed = 3;
  const auto sched = make_schedule(cfg.train_timesteps, 10);
  auto params = init_params<double>(cfg, 9);
  const auto bufs = make_buffers<double>(cfg);
  const auto corpus = small_corpus(16);
  // tokens from the real pipeline, double precision example
  Rng rng(12);
  TrainConfig tcd = tc;
  const auto batch = make_batch<double>(corpus, cfg, tcd, sched, rng);
  const auto report = grad_check(params, cfg, bufs, sched, batch[0], 1e-4, 5);
  for (const auto& row : report) {
    INFO(row.name);
    CHECK(row.max_rel_err < 1e-3);
  }
}
