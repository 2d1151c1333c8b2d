#include "marv/layout.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace marv {

std::string TemporalMask::to_text() const {
  std::string out;
  out.reserve(static_cast<size_t>(size) * (size + 1));
  for (int i = 0; i < size; ++i) {
    for (int j = 0; j < size; ++j) out.push_back(allowed(i, j) ? '1' : '0');
    out.push_back('\n');
  }
  return out;
}

TemporalMask TemporalMask::from_text(const std::string& text) {
  std::vector<std::string> rows;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      if (!cur.empty()) rows.push_back(cur);
      cur.clear();
    } else if (c == '0' || c == '1') {
      cur.push_back(c);
    } else if (c != '\r' && c != ' ') {
      throw IoError("temporal mask text: unexpected character");
    }
  }
  if (!cur.empty()) rows.push_back(cur);
  const int n = static_cast<int>(rows.size());
  TemporalMask mask(n);
  for (int i = 0; i < n; ++i) {
    if (static_cast<int>(rows[i].size()) != n)
      throw IoError("temporal mask text: not square");
    for (int j = 0; j < n; ++j) mask.set(i, j, rows[i][j] == '1');
  }
  return mask;
}

LayoutAndMask build_ctf_layout(int n) {
  if (n < 1) throw ConfigError("build_ctf_layout: frame count must be >= 1");
  LayoutAndMask out;
  out.layout.mode = LayoutMode::ctf;
  out.layout.slots.reserve(2 * static_cast<size_t>(n));
  for (int f = 0; f < n; ++f) out.layout.slots.push_back({SlotRole::observation, f});
  for (int f = 0; f < n; ++f) out.layout.slots.push_back({SlotRole::masked, f});

  TemporalMask mask(2 * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) mask.set(i, j, true);  // obs causal
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < j; ++i) mask.set(n + j, i, true);  // earlier observations
    mask.set(n + j, n + j, true);                          // itself only among masked
  }
  out.mask = std::move(mask);
  return out;
}

LayoutAndMask build_mtf_layout(int n) {
  if (n < 1) throw ConfigError("build_mtf_layout: frame count must be >= 1");
  LayoutAndMask out;
  out.layout.mode = LayoutMode::mtf;
  for (int f = 0; f < n; ++f) out.layout.slots.push_back({SlotRole::masked, f});
  TemporalMask mask(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) mask.set(i, j, true);
  out.mask = std::move(mask);
  return out;
}

TemporalMask build_inference_mask(int n_cached) {
  if (n_cached < 0) throw ConfigError("build_inference_mask: negative cache size");
  TemporalMask mask(n_cached + 1);
  for (int i = 0; i <= n_cached; ++i)
    for (int j = 0; j <= i; ++j) mask.set(i, j, true);
  return mask;
}

std::vector<std::uint8_t> MaskPlan::flags(int m) const {
  std::vector<std::uint8_t> f(static_cast<size_t>(m), 0);
  for (int idx : masked_token_indices) f[static_cast<size_t>(idx)] = 1;
  return f;
}

MaskPlan sample_train_mask(int m, double ratio_lo, double ratio_hi, Rng& rng) {
  if (m < 1) throw ConfigError("sample_train_mask: m must be >= 1");
  if (!(ratio_lo > 0.0) || !(ratio_lo <= ratio_hi) || !(ratio_hi <= 1.0))
    throw ConfigError("sample_train_mask: need 0 < ratio_lo <= ratio_hi <= 1");

  MaskPlan plan;
  plan.rng_state = rng.state();
  plan.ratio = rng.uniform(ratio_lo, ratio_hi);
  int count = static_cast<int>(std::llround(plan.ratio * m));
  count = std::clamp(count, 1, m);

  // partial Fisher-Yates
  std::vector<int> idx(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) idx[static_cast<size_t>(i)] = i;
  for (int i = 0; i < count; ++i) {
    const int j = rng.uniform_int(i, m - 1);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  plan.masked_token_indices.assign(idx.begin(), idx.begin() + count);
  std::sort(plan.masked_token_indices.begin(), plan.masked_token_indices.end());
  return plan;
}

DecodePlan decode_schedule(int m, int K) {
  if (m < 1 || K < 1) throw ConfigError("decode_schedule: m and K must be >= 1");
  DecodePlan plan;
  plan.steps = K;
  plan.counts.resize(static_cast<size_t>(K));
  int prev = m;
  // evaluated in extended precision: floor sits on integer boundaries when
  // m*cos(angle) is an exact half-turn fraction
  for (int k = 1; k <= K; ++k) {
    const long double angle =
        std::numbers::pi_v<long double> / 2.0L * static_cast<long double>(k) / K;
    // remaining(K) = 0 exactly; cos can land on either side of zero at pi/2
    const int remaining =
        std::max(0, static_cast<int>(std::floor(m * std::cos(angle))));
    plan.counts[static_cast<size_t>(k - 1)] = prev - remaining;
    prev = remaining;
  }
  return plan;
}

}  // namespace marv
