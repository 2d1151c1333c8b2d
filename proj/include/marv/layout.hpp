#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "marv/common.hpp"
#include "marv/rng.hpp"

namespace marv {

enum class SlotRole : std::uint8_t { observation, masked };
enum class LayoutMode : std::uint8_t { ctf, mtf, inference };

struct Slot {
  SlotRole role;
  int frame_index;  // 0-based position within the clip
};

// Slot roles plus per-slot token mask flags. The structural builders leave
// token_masked empty; the batch assembler fills it from MaskPlans.
struct SequenceLayout {
  LayoutMode mode = LayoutMode::ctf;
  std::vector<Slot> slots;
  std::vector<std::vector<std::uint8_t>> token_masked;  // per slot; empty = none masked

  int num_slots() const { return static_cast<int>(slots.size()); }
};

// Boolean slot-by-slot attention matrix; row attends column where true.
struct TemporalMask {
  int size = 0;
  std::vector<std::uint8_t> allow;  // row-major size*size

  TemporalMask() = default;
  explicit TemporalMask(int n) : size(n), allow(static_cast<size_t>(n) * n, 0) {}

  bool allowed(int row, int col) const {
    return allow[static_cast<size_t>(row) * size + col] != 0;
  }
  void set(int row, int col, bool v) {
    allow[static_cast<size_t>(row) * size + col] = v ? 1 : 0;
  }

  // one row per line of 0/1 characters, trailing newline
  std::string to_text() const;
  static TemporalMask from_text(const std::string& text);

  bool operator==(const TemporalMask&) const = default;
};

struct LayoutAndMask {
  SequenceLayout layout;
  TemporalMask mask;
};

// Training layout with doubled sequence: observation slots for frames 0..n-1
// followed by masked slots for frames 0..n-1. Observations attend causally;
// masked slot j attends observations of strictly earlier frames plus itself.
LayoutAndMask build_ctf_layout(int n);

// Training layout of n masked slots with a causal (incl. self) mask.
LayoutAndMask build_mtf_layout(int n);

// Causal mask over n_cached completed frames plus the in-progress frame.
TemporalMask build_inference_mask(int n_cached);

struct MaskPlan {
  double ratio = 1.0;
  std::vector<int> masked_token_indices;         // sorted, distinct
  std::array<std::uint64_t, 4> rng_state{};      // rng state before the draw

  std::vector<std::uint8_t> flags(int m) const;  // dense per-token mask
};

// ratio ~ Uniform[ratio_lo, ratio_hi]; round(ratio*m) indices without
// replacement, at least one.
MaskPlan sample_train_mask(int m, double ratio_lo, double ratio_hi, Rng& rng);

struct DecodePlan {
  int steps = 0;            // K
  std::vector<int> counts;  // tokens finalized per step; sums to m
};

// Cosine unmasking schedule: remaining(k) = floor(m*cos(pi/2 * k/K)).
DecodePlan decode_schedule(int m, int K);

}  // namespace marv
