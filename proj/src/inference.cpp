#include "marv/inference.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

namespace marv {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

struct GenSession {
  const Parameters<float>& params;
  const ModelConfig& cfg;
  const GenerationRequest& request;
  Buffers<float> bufs;
  DiffusionSchedule sched;
  KVCache<float> cache;
  std::vector<MatF> committed;  // tokens per committed frame
  bool use_cache;

  GenSession(const Parameters<float>& p, const ModelConfig& c,
             const GenerationRequest& r, bool cached)
      : params(p), cfg(c), request(r), use_cache(cached) {
    bufs = make_buffers<float>(cfg, std::max(request.total_frames, cfg.max_frames));
    sched = make_schedule(cfg.train_timesteps, request.denoise_steps);
    cache = KVCache<float>::make(cfg, request.total_frames);
  }

  SlotRole committed_role() const {
    return request.mtf_roles ? SlotRole::masked : SlotRole::observation;
  }
  int committed_noise_level() const { return request.mtf_roles ? 0 : 1; }

  // Conditioning vectors for the in-progress frame's m positions.
  MatF conditioning_z(const MatF& grid, const std::vector<std::uint8_t>& flags,
                      int frame_index) {
    if (use_cache) {
      return forward_incremental(params, cfg, bufs, cache, grid, flags, frame_index,
                                 SlotRole::masked, 0, request.interval, false);
    }
    const int m = cfg.tokens_per_frame();
    SequenceInput<float> full;
    full.layout.mode = LayoutMode::inference;
    full.mask = build_inference_mask(frame_index);
    full.tokens.resize((frame_index + 1) * m, cfg.token_dim());
    for (int c = 0; c < frame_index; ++c) {
      full.layout.slots.push_back({committed_role(), c});
      full.layout.token_masked.push_back({});
      full.noise_level.push_back(committed_noise_level());
      full.tokens.middleRows(c * m, m) = committed[static_cast<size_t>(c)];
    }
    full.layout.slots.push_back({SlotRole::masked, frame_index});
    full.layout.token_masked.push_back(flags);
    full.noise_level.push_back(0);
    full.tokens.middleRows(frame_index * m, m) = grid;
    full.interval = request.interval;
    const MatF h =
        forward_train(params, cfg, full, embed_inputs(params, cfg, bufs, full), nullptr);
    return h.middleRows(frame_index * m, m);
  }

  void commit(const MatF& tokens, int frame_index) {
    if (use_cache) {
      commit_frame(params, cfg, bufs, cache, tokens, frame_index, committed_role(),
                   committed_noise_level(), request.interval);
    } else if (frame_index != static_cast<int>(committed.size())) {
      throw ProtocolError("uncached commit out of order");
    }
    committed.push_back(tokens);
  }

  // Iterative masked decoding of one frame.
  MatF generate_frame(int frame_index, RolloutTrace* trace) {
    const int m = cfg.tokens_per_frame();
    const int d = cfg.token_dim();
    MatF grid = MatF::Zero(m, d);
    std::vector<std::uint8_t> flags(static_cast<size_t>(m), 1);
    const DecodePlan plan = decode_schedule(m, request.decode_steps);

    const auto frame_start = Clock::now();
    for (int k = 0; k < plan.steps; ++k) {
      const int count = plan.counts[static_cast<size_t>(k)];
      if (count == 0) continue;  // nothing scheduled; skip the head entirely
      const auto step_start = Clock::now();

      const MatF z_all = conditioning_z(grid, flags, frame_index);

      // uniform random choice among still-masked positions
      Rng step_rng(hash_mix(request.seed, static_cast<std::uint64_t>(frame_index),
                            static_cast<std::uint64_t>(k)));
      std::vector<int> still_masked;
      for (int p = 0; p < m; ++p)
        if (flags[static_cast<size_t>(p)]) still_masked.push_back(p);
      for (int i = 0; i < count; ++i) {
        const int j = step_rng.uniform_int(i, static_cast<int>(still_masked.size()) - 1);
        std::swap(still_masked[static_cast<size_t>(i)], still_masked[static_cast<size_t>(j)]);
      }
      std::vector<int> selected(still_masked.begin(), still_masked.begin() + count);
      std::sort(selected.begin(), selected.end());

      MatF z(count, cfg.hidden);
      std::vector<SampleNoise<float>> noise;
      noise.reserve(static_cast<size_t>(count));
      for (int i = 0; i < count; ++i) {
        z.row(i) = z_all.row(selected[static_cast<size_t>(i)]);
        Rng token_rng(hash_mix(hash_mix(request.seed, static_cast<std::uint64_t>(frame_index),
                                        static_cast<std::uint64_t>(k)),
                               static_cast<std::uint64_t>(selected[static_cast<size_t>(i)]) + 1));
        noise.push_back(draw_sample_noise<float>(d, request.denoise_steps, token_rng,
                                                 request.deterministic));
      }
      const MatF sampled =
          sample_tokens(params.head, bufs, sched, z, selected, noise);
      for (int i = 0; i < count; ++i) {
        grid.row(selected[static_cast<size_t>(i)]) = sampled.row(i);
        flags[static_cast<size_t>(selected[static_cast<size_t>(i)])] = 0;
      }
      if (trace)
        trace->steps.push_back({frame_index, k, count, ms_since(step_start)});
    }
    if (std::count(flags.begin(), flags.end(), 1) != 0)
      throw ProtocolError("decode finished with masked positions remaining");

    commit(grid, frame_index);
    if (trace) trace->frame_ms.push_back(ms_since(frame_start));
    return grid;
  }
};

void validate_request(const ModelConfig& cfg, const GenerationRequest& request) {
  const int cond = request.conditioning_frames();
  if (request.total_frames < cond + 1)
    throw ConfigError("rollout: total_frames must exceed conditioning length");
  if (request.interval < 1 || request.interval > cfg.interval_vocab)
    throw ConfigError("rollout: interval outside vocabulary");
  if (request.decode_steps < 1 || request.denoise_steps < 1)
    throw ConfigError("rollout: decode/denoise steps must be >= 1");
  if (cond > 0) {
    if (request.conditioning.num_frames < cond)
      throw ConfigError("rollout: conditioning clip shorter than requested");
    if (request.conditioning.height != cfg.frame_h ||
        request.conditioning.width != cfg.frame_w)
      throw ConfigError("rollout: conditioning frames incompatible with model config");
  }
}

}  // namespace

RolloutResult rollout(const Parameters<float>& params, const ModelConfig& cfg,
                      const GenerationRequest& request, bool use_cache) {
  validate_request(cfg, request);
  GenSession session(params, cfg, request, use_cache);

  RolloutResult result;
  const int cond = request.conditioning_frames();
  for (int f = 0; f < cond; ++f) {
    const auto t0 = Clock::now();
    session.commit(patchify(request.conditioning, f, cfg.patch).tokens, f);
    result.trace.frame_ms.push_back(ms_since(t0));
  }
  for (int f = cond; f < request.total_frames; ++f)
    session.generate_frame(f, &result.trace);

  result.trace.committed_frames = static_cast<int>(session.committed.size());
  result.video = VideoClip::zeros(request.total_frames, cfg.frame_h, cfg.frame_w);
  for (int f = 0; f < request.total_frames; ++f)
    unpatchify(session.committed[static_cast<size_t>(f)], cfg.patch, cfg.frame_h,
               cfg.frame_w, 3, result.video.frame_data(f));
  result.video.interval = request.interval;
  result.video.source_id = "rollout";
  return result;
}

std::vector<BenchRow> bench_generation(const Parameters<float>& params,
                                       const ModelConfig& cfg,
                                       const GenerationRequest& request) {
  const RolloutResult cached = rollout(params, cfg, request, true);
  const RolloutResult uncached = rollout(params, cfg, request, false);

  std::vector<BenchRow> rows;
  for (int f = 0; f < request.total_frames; ++f) {
    BenchRow row;
    row.frame_index = f;
    row.cached_ms = cached.trace.frame_ms[static_cast<size_t>(f)];
    row.uncached_ms = uncached.trace.frame_ms[static_cast<size_t>(f)];
    float diff = 0.0f;
    const size_t n = cached.video.frame_size();
    const float* a = cached.video.frame_data(f);
    const float* b = uncached.video.frame_data(f);
    for (size_t i = 0; i < n; ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
    row.max_abs_diff = diff;
    rows.push_back(row);
  }
  return rows;
}

void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path,
                     const std::string& fingerprint) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "# config_fingerprint=" << fingerprint << "\n";
  out << "frame_index,cached_ms,uncached_ms,max_abs_diff\n";
  char line[128];
  for (const auto& row : rows) {
    std::snprintf(line, sizeof(line), "%d,%.3f,%.3f,%.3g\n", row.frame_index,
                  row.cached_ms, row.uncached_ms, static_cast<double>(row.max_abs_diff));
    out << line;
  }
}

void write_trace_csv(const RolloutTrace& trace, const std::string& path,
                     const std::string& fingerprint) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "# config_fingerprint=" << fingerprint << "\n";
  out << "frame_index,step,tokens_finalized,ms\n";
  char line[128];
  for (const auto& row : trace.steps) {
    std::snprintf(line, sizeof(line), "%d,%d,%d,%.3f\n", row.frame_index, row.step,
                  row.tokens_finalized, row.ms);
    out << line;
  }
}

}  // namespace marv
