#pragma once

#include <string>
#include <vector>

#include "marv/common.hpp"
#include "marv/data.hpp"
#include "marv/layout.hpp"
#include "marv/nn.hpp"
#include "marv/rng.hpp"
#include "marv/tensor.hpp"

namespace marv {

struct ModelConfig {
  int depth = 4;  // spatial-temporal block pairs
  int hidden = 256;
  int mlp = 1024;
  int heads = 8;
  int patch = 2;
  int frame_h = 16;
  int frame_w = 16;
  int max_frames = 16;
  int interval_vocab = 25;
  int noise_vocab = 5;
  int head_width = 256;  // diffusion head
  int head_blocks = 3;
  int train_timesteps = 1000;

  int token_dim() const { return patch * patch * 3; }
  int tokens_per_frame() const { return (frame_h / patch) * (frame_w / patch); }
  int head_dim() const { return hidden / heads; }

  void validate() const {
    if (depth < 1 || hidden < 4 || mlp < 1 || heads < 1 || head_width < 1 ||
        head_blocks < 1)
      throw ConfigError("model config: nonpositive dimension");
    if (hidden % heads != 0) throw ConfigError("model config: hidden % heads != 0");
    if (hidden % 4 != 0)
      throw ConfigError("model config: hidden must be divisible by 4 for 2d PEs");
    if (patch < 1 || frame_h % patch != 0 || frame_w % patch != 0)
      throw ConfigError("model config: frame dims not divisible by patch");
    if (max_frames < 1 || interval_vocab < 1 || noise_vocab < 1)
      throw ConfigError("model config: bad vocab/max_frames");
    if (train_timesteps < 1) throw ConfigError("model config: train_timesteps < 1");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename S>
struct AttentionLayerParams {
  MatX<S> qkv_w, qkv_b;    // (3h x h), (3h x 1)
  MatX<S> proj_w, proj_b;  // (h x h), (h x 1)
  MatX<S> ln1_g, ln1_b;
  MatX<S> ln2_g, ln2_b;
  MatX<S> fc1_w, fc1_b;  // (mlp x h), (mlp x 1)
  MatX<S> fc2_w, fc2_b;  // (h x mlp), (h x 1)
};

template <typename S>
struct HeadBlockParams {
  MatX<S> ln_g, ln_b;
  MatX<S> fc1_w, fc1_b;
  MatX<S> fc2_w, fc2_b;
};

template <typename S>
struct HeadParams {
  MatX<S> pos_emb;          // m x hidden, added to z by spatial position
  MatX<S> z_w, z_b;         // width x hidden
  MatX<S> t_fc1_w, t_fc1_b; // width x width, on sinusoidal timestep features
  MatX<S> t_fc2_w, t_fc2_b;
  MatX<S> in_w, in_b;       // width x token_dim
  std::vector<HeadBlockParams<S>> blocks;
  MatX<S> ln_out_g, ln_out_b;
  MatX<S> out_w, out_b;     // token_dim x width
};

template <typename S>
struct Parameters {
  MatX<S> in_w, in_b;     // hidden x token_dim
  MatX<S> mask_token;     // hidden x 1
  MatX<S> role_emb;       // 2 x hidden (observation, masked)
  MatX<S> interval_emb;   // interval_vocab x hidden
  MatX<S> noise_emb;      // noise_vocab x hidden
  std::vector<AttentionLayerParams<S>> spatial;   // depth
  std::vector<AttentionLayerParams<S>> temporal;  // depth
  MatX<S> ln_f_g, ln_f_b;
  HeadParams<S> head;
};

// Visits every parameter tensor in fixed manifest order.
template <typename P, typename F>
void for_each_param(P& p, F&& f) {
  f("in_w", p.in_w);
  f("in_b", p.in_b);
  f("mask_token", p.mask_token);
  f("role_emb", p.role_emb);
  f("interval_emb", p.interval_emb);
  f("noise_emb", p.noise_emb);
  auto visit_layer = [&](const std::string& prefix, auto& layer) {
    f(prefix + ".qkv_w", layer.qkv_w);
    f(prefix + ".qkv_b", layer.qkv_b);
    f(prefix + ".proj_w", layer.proj_w);
    f(prefix + ".proj_b", layer.proj_b);
    f(prefix + ".ln1_g", layer.ln1_g);
    f(prefix + ".ln1_b", layer.ln1_b);
    f(prefix + ".ln2_g", layer.ln2_g);
    f(prefix + ".ln2_b", layer.ln2_b);
    f(prefix + ".fc1_w", layer.fc1_w);
    f(prefix + ".fc1_b", layer.fc1_b);
    f(prefix + ".fc2_w", layer.fc2_w);
    f(prefix + ".fc2_b", layer.fc2_b);
  };
  for (size_t l = 0; l < p.spatial.size(); ++l)
    visit_layer("spatial." + std::to_string(l), p.spatial[l]);
  for (size_t l = 0; l < p.temporal.size(); ++l)
    visit_layer("temporal." + std::to_string(l), p.temporal[l]);
  f("ln_f_g", p.ln_f_g);
  f("ln_f_b", p.ln_f_b);
  f("head.pos_emb", p.head.pos_emb);
  f("head.z_w", p.head.z_w);
  f("head.z_b", p.head.z_b);
  f("head.t_fc1_w", p.head.t_fc1_w);
  f("head.t_fc1_b", p.head.t_fc1_b);
  f("head.t_fc2_w", p.head.t_fc2_w);
  f("head.t_fc2_b", p.head.t_fc2_b);
  f("head.in_w", p.head.in_w);
  f("head.in_b", p.head.in_b);
  for (size_t b = 0; b < p.head.blocks.size(); ++b) {
    const std::string prefix = "head.block" + std::to_string(b);
    f(prefix + ".ln_g", p.head.blocks[b].ln_g);
    f(prefix + ".ln_b", p.head.blocks[b].ln_b);
    f(prefix + ".fc1_w", p.head.blocks[b].fc1_w);
    f(prefix + ".fc1_b", p.head.blocks[b].fc1_b);
    f(prefix + ".fc2_w", p.head.blocks[b].fc2_w);
    f(prefix + ".fc2_b", p.head.blocks[b].fc2_b);
  }
  f("head.ln_out_g", p.head.ln_out_g);
  f("head.ln_out_b", p.head.ln_out_b);
  f("head.out_w", p.head.out_w);
  f("head.out_b", p.head.out_b);
}

template <typename S>
Parameters<S> make_empty_params(const ModelConfig& cfg) {
  cfg.validate();
  const int h = cfg.hidden, d = cfg.token_dim(), w = cfg.head_width;
  Parameters<S> p;
  p.in_w.setZero(h, d);
  p.in_b.setZero(h, 1);
  p.mask_token.setZero(h, 1);
  p.role_emb.setZero(2, h);
  p.interval_emb.setZero(cfg.interval_vocab, h);
  p.noise_emb.setZero(cfg.noise_vocab, h);
  auto make_layer = [&] {
    AttentionLayerParams<S> layer;
    layer.qkv_w.setZero(3 * h, h);
    layer.qkv_b.setZero(3 * h, 1);
    layer.proj_w.setZero(h, h);
    layer.proj_b.setZero(h, 1);
    layer.ln1_g.setZero(h, 1);
    layer.ln1_b.setZero(h, 1);
    layer.ln2_g.setZero(h, 1);
    layer.ln2_b.setZero(h, 1);
    layer.fc1_w.setZero(cfg.mlp, h);
    layer.fc1_b.setZero(cfg.mlp, 1);
    layer.fc2_w.setZero(h, cfg.mlp);
    layer.fc2_b.setZero(h, 1);
    return layer;
  };
  for (int l = 0; l < cfg.depth; ++l) {
    p.spatial.push_back(make_layer());
    p.temporal.push_back(make_layer());
  }
  p.ln_f_g.setZero(h, 1);
  p.ln_f_b.setZero(h, 1);

  p.head.pos_emb.setZero(cfg.tokens_per_frame(), h);
  p.head.z_w.setZero(w, h);
  p.head.z_b.setZero(w, 1);
  p.head.t_fc1_w.setZero(w, w);
  p.head.t_fc1_b.setZero(w, 1);
  p.head.t_fc2_w.setZero(w, w);
  p.head.t_fc2_b.setZero(w, 1);
  p.head.in_w.setZero(w, d);
  p.head.in_b.setZero(w, 1);
  for (int b = 0; b < cfg.head_blocks; ++b) {
    HeadBlockParams<S> block;
    block.ln_g.setZero(w, 1);
    block.ln_b.setZero(w, 1);
    block.fc1_w.setZero(w, w);
    block.fc1_b.setZero(w, 1);
    block.fc2_w.setZero(w, w);
    block.fc2_b.setZero(w, 1);
    p.head.blocks.push_back(std::move(block));
  }
  p.head.ln_out_g.setZero(w, 1);
  p.head.ln_out_b.setZero(w, 1);
  p.head.out_w.setZero(d, w);
  p.head.out_b.setZero(d, 1);
  return p;
}

// Weight matrices ~ N(0, 1/fan_in); embedding-like tensors N(0, 0.02^2);
// norm gains 1; biases 0. Deterministic in seed via the manifest order.
template <typename S>
Parameters<S> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  Parameters<S> p = make_empty_params<S>(cfg);
  Rng rng(hash_mix(seed, 0x706172616d73ULL));
  for_each_param(p, [&](const std::string& name, MatX<S>& mat) {
    const bool is_emb = name == "mask_token" || name.ends_with("_emb") ||
                        name == "head.out_w";
    const bool is_gain = name.ends_with("_g");
    const bool is_bias = name.ends_with("_b") && !is_emb;
    if (is_gain) {
      mat.setOnes();
      return;
    }
    if (is_bias) {
      mat.setZero();
      return;
    }
    double std_dev;
    if (is_emb) {
      std_dev = 0.02;
    } else {
      std_dev = 1.0 / std::sqrt(static_cast<double>(mat.cols()));
    }
    for (Eigen::Index i = 0; i < mat.rows(); ++i)
      for (Eigen::Index j = 0; j < mat.cols(); ++j)
        mat(i, j) = static_cast<S>(std_dev * rng.normal());
  });
  return p;
}

template <typename S>
void set_zero(Parameters<S>& p) {
  for_each_param(p, [](const std::string&, MatX<S>& mat) { mat.setZero(); });
}

template <typename S>
std::size_t param_count(const Parameters<S>& p) {
  std::size_t total = 0;
  for_each_param(p, [&](const std::string&, const MatX<S>& mat) {
    total += static_cast<std::size_t>(mat.size());
  });
  return total;
}

// ---------------------------------------------------------------------------
// Fixed (non-learned) positional tables
// ---------------------------------------------------------------------------

template <typename S>
MatX<S> sinusoidal_table(int len, int dim) {
  MatX<S> pe(len, dim);
  for (int pos = 0; pos < len; ++pos) {
    for (int i = 0; i < dim / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / dim);
      pe(pos, 2 * i) = static_cast<S>(std::sin(pos * freq));
      pe(pos, 2 * i + 1) = static_cast<S>(std::cos(pos * freq));
    }
  }
  return pe;
}

// First half of the features encodes the patch-grid row, second half the
// column.
template <typename S>
MatX<S> sinusoidal_2d(int grid_h, int grid_w, int dim) {
  const MatX<S> row_pe = sinusoidal_table<S>(grid_h, dim / 2);
  const MatX<S> col_pe = sinusoidal_table<S>(grid_w, dim / 2);
  MatX<S> pe(grid_h * grid_w, dim);
  for (int y = 0; y < grid_h; ++y)
    for (int x = 0; x < grid_w; ++x) {
      pe.row(y * grid_w + x).head(dim / 2) = row_pe.row(y);
      pe.row(y * grid_w + x).tail(dim / 2) = col_pe.row(x);
    }
  return pe;
}

// Endpoint-aligned linear interpolation of table rows.
template <typename S>
MatX<S> interpolate_rows(const MatX<S>& table, int target_len) {
  if (target_len < 1) throw ConfigError("interpolate_rows: target_len < 1");
  const int src_len = static_cast<int>(table.rows());
  if (target_len == src_len) return table;
  MatX<S> out(target_len, table.cols());
  if (target_len == 1 || src_len == 1) {
    for (int i = 0; i < target_len; ++i) out.row(i) = table.row(0);
    return out;
  }
  for (int i = 0; i < target_len; ++i) {
    const double coord = static_cast<double>(i) * (src_len - 1) / (target_len - 1);
    const int i0 = std::min(static_cast<int>(coord), src_len - 2);
    const double frac = coord - i0;
    out.row(i) = table.row(i0) * static_cast<S>(1.0 - frac) +
                 table.row(i0 + 1) * static_cast<S>(frac);
  }
  return out;
}

template <typename S>
struct Buffers {
  MatX<S> spatial_pe;           // m x hidden
  MatX<S> temporal_pe;          // frames x hidden
  MatX<S> timestep_features;    // train_timesteps x head_width (diffusion head)
};

template <typename S>
Buffers<S> make_buffers(const ModelConfig& cfg, int temporal_len = 0) {
  Buffers<S> bufs;
  bufs.spatial_pe =
      sinusoidal_2d<S>(cfg.frame_h / cfg.patch, cfg.frame_w / cfg.patch, cfg.hidden);
  bufs.temporal_pe = sinusoidal_table<S>(cfg.max_frames, cfg.hidden);
  if (temporal_len > cfg.max_frames)
    bufs.temporal_pe = interpolate_rows(bufs.temporal_pe, temporal_len);
  bufs.timestep_features =
      sinusoidal_table<S>(cfg.train_timesteps, cfg.head_width);
  return bufs;
}

// interpolate_rows applied to the temporal table; identity when the target
// matches the training length.
template <typename S>
MatX<S> interpolate_temporal_pe(const MatX<S>& pe_table, int target_len) {
  return interpolate_rows(pe_table, target_len);
}

// ---------------------------------------------------------------------------
// Sequence input and embedding
// ---------------------------------------------------------------------------

template <typename S>
struct SequenceInput {
  SequenceLayout layout;
  TemporalMask mask;
  MatX<S> tokens;                // (slots*m) x token_dim
  std::vector<int> noise_level;  // per slot; 0 = none
  int interval = 1;

  std::vector<int> masked_rows(int m) const {
    std::vector<int> rows;
    for (int s = 0; s < layout.num_slots(); ++s) {
      if (layout.token_masked.empty() || layout.token_masked[s].empty()) continue;
      for (int p = 0; p < m; ++p)
        if (layout.token_masked[s][p]) rows.push_back(s * m + p);
    }
    return rows;
  }
};

template <typename S>
MatX<S> embed_inputs(const Parameters<S>& params, const ModelConfig& cfg,
                     const Buffers<S>& bufs, const SequenceInput<S>& input) {
  const int m = cfg.tokens_per_frame();
  const int slots = input.layout.num_slots();
  if (input.tokens.rows() != slots * m || input.tokens.cols() != cfg.token_dim())
    throw ShapeError("embed_inputs: token matrix inconsistent with layout");
  if (input.interval < 1 || input.interval > cfg.interval_vocab)
    throw ConfigError("embed_inputs: interval outside embedding vocabulary");

  MatX<S> h = linear_forward_chunked(input.tokens, params.in_w, params.in_b, m);
  for (int s = 0; s < slots; ++s) {
    const Slot& slot = input.layout.slots[static_cast<size_t>(s)];
    if (slot.frame_index < 0 || slot.frame_index >= bufs.temporal_pe.rows())
      throw ConfigError("embed_inputs: frame index outside temporal PE table");
    const bool has_flags = !input.layout.token_masked.empty() &&
                           !input.layout.token_masked[static_cast<size_t>(s)].empty();
    const int level =
        s < static_cast<int>(input.noise_level.size()) ? input.noise_level[static_cast<size_t>(s)] : 0;
    if (slot.role == SlotRole::observation && (level < 1 || level > cfg.noise_vocab))
      throw ConfigError("embed_inputs: observation slot needs noise level in vocab");
    for (int p = 0; p < m; ++p) {
      const int row = s * m + p;
      if (has_flags && input.layout.token_masked[static_cast<size_t>(s)][static_cast<size_t>(p)])
        h.row(row) = params.mask_token.col(0).transpose();
      h.row(row) += bufs.spatial_pe.row(p);
      h.row(row) += bufs.temporal_pe.row(slot.frame_index);
      h.row(row) += params.role_emb.row(slot.role == SlotRole::observation ? 0 : 1);
      h.row(row) += params.interval_emb.row(input.interval - 1);
      if (slot.role == SlotRole::observation)
        h.row(row) += params.noise_emb.row(level - 1);
    }
  }
  return h;
}

template <typename S>
void embed_backward(const ModelConfig& cfg, const SequenceInput<S>& input,
                    const MatX<S>& d_h0, Parameters<S>& grads) {
  const int m = cfg.tokens_per_frame();
  const int slots = input.layout.num_slots();
  MatX<S> d_base = d_h0;
  for (int s = 0; s < slots; ++s) {
    const Slot& slot = input.layout.slots[static_cast<size_t>(s)];
    const bool has_flags = !input.layout.token_masked.empty() &&
                           !input.layout.token_masked[static_cast<size_t>(s)].empty();
    const int level =
        s < static_cast<int>(input.noise_level.size()) ? input.noise_level[static_cast<size_t>(s)] : 0;
    for (int p = 0; p < m; ++p) {
      const int row = s * m + p;
      if (has_flags && input.layout.token_masked[static_cast<size_t>(s)][static_cast<size_t>(p)]) {
        grads.mask_token.col(0) += d_h0.row(row).transpose();
        d_base.row(row).setZero();
      }
      grads.role_emb.row(slot.role == SlotRole::observation ? 0 : 1) += d_h0.row(row);
      grads.interval_emb.row(input.interval - 1) += d_h0.row(row);
      if (slot.role == SlotRole::observation)
        grads.noise_emb.row(level - 1) += d_h0.row(row);
    }
  }
  linear_backward(d_base, input.tokens, MatX<S>(), nullptr, grads.in_w, grads.in_b);
}

// ---------------------------------------------------------------------------
// Spatial-temporal forward / backward
// ---------------------------------------------------------------------------

template <typename S>
MatX<S> to_position_major(const MatX<S>& x, int slots, int m) {
  MatX<S> out(x.rows(), x.cols());
  for (int s = 0; s < slots; ++s)
    for (int p = 0; p < m; ++p) out.row(p * slots + s) = x.row(s * m + p);
  return out;
}

template <typename S>
MatX<S> to_slot_major(const MatX<S>& x, int slots, int m) {
  MatX<S> out(x.rows(), x.cols());
  for (int s = 0; s < slots; ++s)
    for (int p = 0; p < m; ++p) out.row(s * m + p) = x.row(p * slots + s);
  return out;
}

template <typename S>
struct LayerCache {
  MatX<S> xhat1;
  VecX<S> rstd1;
  MatX<S> q, k, v;  // temporal layers store these position-major
  std::vector<MatX<S>> attn;
  MatX<S> attn_out;  // slot-major, pre-projection
  MatX<S> xhat2;
  VecX<S> rstd2;
  MatX<S> mlp_pre;
};

template <typename S>
struct ForwardCache {
  std::vector<LayerCache<S>> layers;  // spatial 0, temporal 0, spatial 1, ...
  MatX<S> xhat_f;
  VecX<S> rstd_f;
};

namespace detail {

// One pre-norm attention layer: x + proj(attn(LN1 x)) then x + mlp(LN2 x).
// `temporal` switches the attention pattern (position-major masked groups).
template <typename S>
MatX<S> attention_layer_forward(const AttentionLayerParams<S>& layer,
                                const MatX<S>& x, bool temporal,
                                const TemporalMask* mask, int slots, int m,
                                int heads, std::type_identity_t<LayerCache<S>*> cache) {
  LayerCache<S> local;
  LayerCache<S>& c = cache ? *cache : local;

  MatX<S> y1;
  layernorm_forward(x, layer.ln1_g, layer.ln1_b, y1, c.xhat1, c.rstd1);
  MatX<S> qkv = linear_forward_chunked(y1, layer.qkv_w, layer.qkv_b, m);
  const int h = static_cast<int>(x.cols());
  MatX<S> q = qkv.leftCols(h);
  MatX<S> k = qkv.middleCols(h, h);
  MatX<S> v = qkv.rightCols(h);

  MatX<S> attn_out;
  if (temporal) {
    q = to_position_major(q, slots, m);
    k = to_position_major(k, slots, m);
    v = to_position_major(v, slots, m);
    MatX<S> out_pos;
    masked_attention_forward(q, k, v, *mask, heads, out_pos,
                             cache ? &c.attn : nullptr);
    attn_out = to_slot_major(out_pos, slots, m);
  } else {
    grouped_attention_forward(q, k, v, m, heads, attn_out,
                              cache ? &c.attn : nullptr);
  }
  if (cache) {
    c.q = std::move(q);
    c.k = std::move(k);
    c.v = std::move(v);
    c.attn_out = attn_out;
  }

  MatX<S> x_mid = x + linear_forward_chunked(attn_out, layer.proj_w, layer.proj_b, m);

  MatX<S> y2;
  layernorm_forward(x_mid, layer.ln2_g, layer.ln2_b, y2, c.xhat2, c.rstd2);
  MatX<S> pre = linear_forward_chunked(y2, layer.fc1_w, layer.fc1_b, m);
  MatX<S> act = gelu(pre);
  if (cache) c.mlp_pre = std::move(pre);
  MatX<S> out = x_mid + linear_forward_chunked(act, layer.fc2_w, layer.fc2_b, m);
  return out;
}

template <typename S>
MatX<S> attention_layer_backward(const AttentionLayerParams<S>& layer,
                                 AttentionLayerParams<S>& grads,
                                 const LayerCache<S>& c, const MatX<S>& d_out,
                                 bool temporal, const TemporalMask* mask,
                                 int slots, int m, int heads) {
  // mlp branch
  MatX<S> y2 = c.xhat2.array().rowwise() * layer.ln2_g.col(0).transpose().array();
  y2.array().rowwise() += layer.ln2_b.col(0).transpose().array();
  const MatX<S> act = gelu(c.mlp_pre);

  MatX<S> d_act;
  linear_backward(d_out, act, layer.fc2_w, &d_act, grads.fc2_w, grads.fc2_b);
  MatX<S> d_pre = d_act.array() * gelu_grad(c.mlp_pre).array();
  MatX<S> d_y2;
  linear_backward(d_pre, y2, layer.fc1_w, &d_y2, grads.fc1_w, grads.fc1_b);
  MatX<S> d_mid_from_ln;
  layernorm_backward(d_y2, c.xhat2, c.rstd2, layer.ln2_g, d_mid_from_ln,
                     grads.ln2_g, grads.ln2_b);
  MatX<S> d_mid = d_out + d_mid_from_ln;

  // attention branch
  MatX<S> d_attn_out;
  linear_backward(d_mid, c.attn_out, layer.proj_w, &d_attn_out, grads.proj_w,
                  grads.proj_b);
  MatX<S> d_q, d_k, d_v;
  if (temporal) {
    MatX<S> d_out_pos = to_position_major(d_attn_out, slots, m);
    masked_attention_backward(c.q, c.k, c.v, c.attn, *mask, heads, d_out_pos,
                              d_q, d_k, d_v);
    d_q = to_slot_major(d_q, slots, m);
    d_k = to_slot_major(d_k, slots, m);
    d_v = to_slot_major(d_v, slots, m);
  } else {
    grouped_attention_backward(c.q, c.k, c.v, c.attn, m, heads, d_attn_out, d_q,
                               d_k, d_v);
  }
  MatX<S> d_qkv(d_q.rows(), 3 * d_q.cols());
  d_qkv << d_q, d_k, d_v;

  MatX<S> y1 = c.xhat1.array().rowwise() * layer.ln1_g.col(0).transpose().array();
  y1.array().rowwise() += layer.ln1_b.col(0).transpose().array();
  MatX<S> d_y1;
  linear_backward(d_qkv, y1, layer.qkv_w, &d_y1, grads.qkv_w, grads.qkv_b);
  MatX<S> d_x_from_ln;
  layernorm_backward(d_y1, c.xhat1, c.rstd1, layer.ln1_g, d_x_from_ln,
                     grads.ln1_g, grads.ln1_b);
  return d_mid + d_x_from_ln;
}

}  // namespace detail

// Full forward over an embedded sequence. Returns the post-final-norm hidden
// states for every row; callers gather masked rows as conditioning vectors.
template <typename S>
MatX<S> forward_train(const Parameters<S>& params, const ModelConfig& cfg,
                      const SequenceInput<S>& input, const MatX<S>& h0,
                      std::type_identity_t<ForwardCache<S>*> cache) {
  const int m = cfg.tokens_per_frame();
  const int slots = input.layout.num_slots();
  if (input.mask.size != slots)
    throw ShapeError("forward_train: temporal mask size != slot count");
  if (cache) cache->layers.resize(2 * static_cast<size_t>(cfg.depth));

  MatX<S> x = h0;
  for (int l = 0; l < cfg.depth; ++l) {
    x = detail::attention_layer_forward(params.spatial[static_cast<size_t>(l)], x, false,
                                        nullptr, slots, m, cfg.heads,
                                        cache ? &cache->layers[2 * static_cast<size_t>(l)] : nullptr);
    x = detail::attention_layer_forward(params.temporal[static_cast<size_t>(l)], x, true,
                                        &input.mask, slots, m, cfg.heads,
                                        cache ? &cache->layers[2 * static_cast<size_t>(l) + 1] : nullptr);
  }
  MatX<S> out, xhat_f;
  VecX<S> rstd_f;
  layernorm_forward(x, params.ln_f_g, params.ln_f_b, out, xhat_f, rstd_f);
  if (cache) {
    cache->xhat_f = std::move(xhat_f);
    cache->rstd_f = std::move(rstd_f);
  }
  return out;
}

// Backward for forward_train; returns d(h0).
template <typename S>
MatX<S> backward_train(const Parameters<S>& params, const ModelConfig& cfg,
                       const SequenceInput<S>& input, const ForwardCache<S>& cache,
                       const MatX<S>& d_final, Parameters<S>& grads) {
  const int m = cfg.tokens_per_frame();
  const int slots = input.layout.num_slots();
  MatX<S> d_x;
  layernorm_backward(d_final, cache.xhat_f, cache.rstd_f, params.ln_f_g, d_x,
                     grads.ln_f_g, grads.ln_f_b);
  for (int l = cfg.depth - 1; l >= 0; --l) {
    d_x = detail::attention_layer_backward(
        params.temporal[static_cast<size_t>(l)], grads.temporal[static_cast<size_t>(l)],
        cache.layers[2 * static_cast<size_t>(l) + 1], d_x, true, &input.mask, slots, m,
        cfg.heads);
    d_x = detail::attention_layer_backward(
        params.spatial[static_cast<size_t>(l)], grads.spatial[static_cast<size_t>(l)],
        cache.layers[2 * static_cast<size_t>(l)], d_x, false, nullptr, slots, m,
        cfg.heads);
  }
  return d_x;
}

// ---------------------------------------------------------------------------
// Frame-level KV cache and incremental forward
// ---------------------------------------------------------------------------

template <typename S>
struct KVCache {
  int depth = 0, m = 0, hidden = 0, capacity = 0;
  int filled_frames = 0;
  std::vector<MatX<S>> k, v;  // per temporal layer: (capacity*m) x hidden

  static KVCache make(const ModelConfig& cfg, int capacity) {
    KVCache cache;
    cache.depth = cfg.depth;
    cache.m = cfg.tokens_per_frame();
    cache.hidden = cfg.hidden;
    cache.capacity = capacity;
    cache.k.assign(static_cast<size_t>(cfg.depth), MatX<S>::Zero(capacity * cache.m, cfg.hidden));
    cache.v.assign(static_cast<size_t>(cfg.depth), MatX<S>::Zero(capacity * cache.m, cfg.hidden));
    return cache;
  }

  // stored K and V entries across layers: 2 * depth * filled * m
  std::size_t entry_count() const {
    return static_cast<std::size_t>(2) * depth * filled_frames * m;
  }
};

// Runs one frame slot through the stack against cached history. With
// commit=true the slot's keys/values are written into the cache and
// filled_frames advances; the in-progress slot (commit=false) recomputes its
// own K/V each call and leaves the cache untouched. Returns post-norm hidden
// states (m x hidden).
template <typename S>
MatX<S> forward_incremental(const Parameters<S>& params, const ModelConfig& cfg,
                            const Buffers<S>& bufs, KVCache<S>& cache,
                            const MatX<S>& tokens,
                            const std::vector<std::uint8_t>& token_masked,
                            int frame_index, SlotRole role, int noise_level,
                            int interval, bool commit) {
  const int m = cfg.tokens_per_frame();
  if (frame_index != cache.filled_frames)
    throw ProtocolError("forward_incremental: frame_index != filled_frames");
  if (cache.filled_frames >= cache.capacity)
    throw ProtocolError("forward_incremental: cache capacity exhausted");

  SequenceInput<S> input;
  input.layout.mode = LayoutMode::inference;
  input.layout.slots = {{role, frame_index}};
  input.layout.token_masked = {token_masked};
  input.mask = build_inference_mask(0);
  input.tokens = tokens;
  input.noise_level = {noise_level};
  input.interval = interval;
  MatX<S> x = embed_inputs(params, cfg, bufs, input);

  const int heads = cfg.heads;
  const int dh = cfg.head_dim();
  const S scale = S(1) / std::sqrt(S(dh));
  const int filled = cache.filled_frames;

  std::vector<const S*> keys, values;
  std::vector<S> weights(static_cast<size_t>(filled) + 1);

  for (int l = 0; l < cfg.depth; ++l) {
    x = detail::attention_layer_forward(params.spatial[static_cast<size_t>(l)], x, false,
                                        nullptr, 1, m, heads, nullptr);

    // temporal layer, inline against the cache
    const auto& layer = params.temporal[static_cast<size_t>(l)];
    MatX<S> y1, xhat1;
    VecX<S> rstd1;
    layernorm_forward(x, layer.ln1_g, layer.ln1_b, y1, xhat1, rstd1);
    MatX<S> qkv = linear_forward_chunked(y1, layer.qkv_w, layer.qkv_b, m);
    const int h = cfg.hidden;
    const MatX<S> q = qkv.leftCols(h);
    const MatX<S> k = qkv.middleCols(h, h);
    const MatX<S> v = qkv.rightCols(h);

    MatX<S> attn_out(m, h);
    for (int p = 0; p < m; ++p) {
      for (int hd = 0; hd < heads; ++hd) {
        keys.clear();
        values.clear();
        for (int f = 0; f < filled; ++f) {
          keys.push_back(cache.k[static_cast<size_t>(l)].row(f * m + p).data() + hd * dh);
          values.push_back(cache.v[static_cast<size_t>(l)].row(f * m + p).data() + hd * dh);
        }
        keys.push_back(k.row(p).data() + hd * dh);
        values.push_back(v.row(p).data() + hd * dh);
        attend_row(q.row(p).data() + hd * dh, keys, values, dh, scale,
                   attn_out.row(p).data() + hd * dh, weights.data());
      }
    }
    if (commit) {
      cache.k[static_cast<size_t>(l)].middleRows(filled * m, m) = k;
      cache.v[static_cast<size_t>(l)].middleRows(filled * m, m) = v;
    }

    MatX<S> x_mid = x + linear_forward_chunked(attn_out, layer.proj_w, layer.proj_b, m);
    MatX<S> y2, xhat2;
    VecX<S> rstd2;
    layernorm_forward(x_mid, layer.ln2_g, layer.ln2_b, y2, xhat2, rstd2);
    x = x_mid + linear_forward_chunked(
                    gelu(linear_forward_chunked(y2, layer.fc1_w, layer.fc1_b, m)),
                    layer.fc2_w, layer.fc2_b, m);
  }

  if (commit) ++cache.filled_frames;

  MatX<S> out, xhat_f;
  VecX<S> rstd_f;
  layernorm_forward(x, params.ln_f_g, params.ln_f_b, out, xhat_f, rstd_f);
  return out;
}

// Commit a completed frame's keys/values. Role conveys the teacher-forcing
// convention: completed frames re-enter as observations under ctf and as
// fully-visible masked-role frames under mtf.
template <typename S>
void commit_frame(const Parameters<S>& params, const ModelConfig& cfg,
                  const Buffers<S>& bufs, KVCache<S>& cache, const MatX<S>& tokens,
                  int frame_index, SlotRole role, int noise_level, int interval) {
  forward_incremental(params, cfg, bufs, cache, tokens, {}, frame_index, role,
                      noise_level, interval, true);
}

}  // namespace marv
