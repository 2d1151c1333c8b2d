#pragma once

#include <cmath>
#include <numbers>
#include <type_traits>
#include <vector>

#include "marv/common.hpp"
#include "marv/layout.hpp"
#include "marv/tensor.hpp"

// Layer primitives with explicit backward passes. Weights are (out x in);
// biases and norm parameters are (n x 1) column matrices so every parameter
// tensor shares one type.

namespace marv {

constexpr double kLayerNormEps = 1e-5;

// y = x * W^T + b
template <typename S>
MatX<S> linear_forward(const MatX<S>& x, const MatX<S>& w, const MatX<S>& b) {
  MatX<S> y = x * w.transpose();
  y.rowwise() += b.col(0).transpose();
  return y;
}

// Same product evaluated in fixed row chunks. Hidden-state linears use this
// so the incremental (single-slot) and full-sequence inference paths hit the
// same GEMM kernel per slot and stay bit-identical.
template <typename S>
MatX<S> linear_forward_chunked(const MatX<S>& x, const MatX<S>& w, const MatX<S>& b,
                               int chunk_rows) {
  const Eigen::Index rows = x.rows();
  if (chunk_rows <= 0 || rows % chunk_rows != 0)
    return linear_forward(x, w, b);
  MatX<S> y(rows, w.rows());
  for (Eigen::Index r = 0; r < rows; r += chunk_rows) {
    y.middleRows(r, chunk_rows).noalias() =
        x.middleRows(r, chunk_rows) * w.transpose();
    y.middleRows(r, chunk_rows).rowwise() += b.col(0).transpose();
  }
  return y;
}

template <typename S>
void linear_backward(const MatX<S>& d_y, const MatX<S>& x, const MatX<S>& w,
                     std::type_identity_t<MatX<S>*> d_x, MatX<S>& d_w, MatX<S>& d_b) {
  if (d_x) d_x->noalias() = d_y * w;
  d_w.noalias() += d_y.transpose() * x;
  d_b.col(0).noalias() += d_y.colwise().sum().transpose();
}

template <typename S>
void layernorm_forward(const MatX<S>& x, const MatX<S>& gamma, const MatX<S>& beta,
                       MatX<S>& y, MatX<S>& xhat, VecX<S>& rstd) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  y.resize(rows, cols);
  xhat.resize(rows, cols);
  rstd.resize(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const S mean = x.row(i).mean();
    const S var = (x.row(i).array() - mean).square().mean();
    const S r = S(1) / std::sqrt(var + S(kLayerNormEps));
    rstd(i) = r;
    xhat.row(i) = (x.row(i).array() - mean) * r;
    y.row(i) = xhat.row(i).array() * gamma.col(0).transpose().array() +
               beta.col(0).transpose().array();
  }
}

template <typename S>
void layernorm_backward(const MatX<S>& d_y, const MatX<S>& xhat, const VecX<S>& rstd,
                        const MatX<S>& gamma, MatX<S>& d_x, MatX<S>& d_gamma,
                        MatX<S>& d_beta) {
  const Eigen::Index rows = d_y.rows(), cols = d_y.cols();
  d_x.resize(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const auto dxhat =
        (d_y.row(i).array() * gamma.col(0).transpose().array()).eval();
    const S mean_dxhat = dxhat.mean();
    const S mean_dxhat_xhat = (dxhat * xhat.row(i).array()).mean();
    d_x.row(i) =
        rstd(i) * (dxhat - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat);
  }
  d_gamma.col(0).noalias() +=
      (d_y.array() * xhat.array()).colwise().sum().matrix().transpose();
  d_beta.col(0).noalias() += d_y.colwise().sum().transpose();
}

template <typename S>
S gelu_scalar(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S((1.0 / std::numbers::sqrt2))));
}

template <typename S>
S gelu_grad_scalar(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x * S((1.0 / std::numbers::sqrt2))));
  const S pdf = std::exp(S(-0.5) * x * x) *
                S(1.0 / std::sqrt(2.0 * std::numbers::pi));
  return cdf + x * pdf;
}

template <typename S>
MatX<S> gelu(const MatX<S>& x) {
  return x.unaryExpr([](S v) { return gelu_scalar(v); });
}

template <typename S>
MatX<S> gelu_grad(const MatX<S>& x) {
  return x.unaryExpr([](S v) { return gelu_grad_scalar(v); });
}

template <typename S>
S silu_scalar(S x) {
  return x / (S(1) + std::exp(-x));
}

template <typename S>
S silu_grad_scalar(S x) {
  const S sig = S(1) / (S(1) + std::exp(-x));
  return sig * (S(1) + x * (S(1) - sig));
}

template <typename S>
MatX<S> silu(const MatX<S>& x) {
  return x.unaryExpr([](S v) { return silu_scalar(v); });
}

template <typename S>
MatX<S> silu_grad(const MatX<S>& x) {
  return x.unaryExpr([](S v) { return silu_grad_scalar(v); });
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

// Bidirectional attention within consecutive groups of `group` rows; heads
// split the feature columns. attn_save gets one (group x group) matrix per
// (block, head).
template <typename S>
void grouped_attention_forward(const MatX<S>& q, const MatX<S>& k, const MatX<S>& v,
                               int group, int heads, MatX<S>& out,
                               std::type_identity_t<std::vector<MatX<S>>*> attn_save) {
  const Eigen::Index rows = q.rows(), cols = q.cols();
  const int dh = static_cast<int>(cols) / heads;
  const S scale = S(1) / std::sqrt(S(dh));
  const int blocks = static_cast<int>(rows) / group;
  out.resize(rows, cols);
  if (attn_save) attn_save->assign(static_cast<size_t>(blocks) * heads, {});
  for (int b = 0; b < blocks; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = q.block(b * group, h * dh, group, dh);
      const auto kb = k.block(b * group, h * dh, group, dh);
      const auto vb = v.block(b * group, h * dh, group, dh);
      MatX<S> scores = qb * kb.transpose() * scale;
      for (int i = 0; i < group; ++i) {
        auto row = scores.row(i);
        const S mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      out.block(b * group, h * dh, group, dh).noalias() = scores * vb;
      if (attn_save) (*attn_save)[static_cast<size_t>(b) * heads + h] = std::move(scores);
    }
  }
}

template <typename S>
void grouped_attention_backward(const MatX<S>& q, const MatX<S>& k, const MatX<S>& v,
                                const std::vector<MatX<S>>& attn, int group, int heads,
                                const MatX<S>& d_out, MatX<S>& d_q, MatX<S>& d_k,
                                MatX<S>& d_v) {
  const Eigen::Index rows = q.rows(), cols = q.cols();
  const int dh = static_cast<int>(cols) / heads;
  const S scale = S(1) / std::sqrt(S(dh));
  const int blocks = static_cast<int>(rows) / group;
  d_q.resize(rows, cols);
  d_k.resize(rows, cols);
  d_v.resize(rows, cols);
  for (int b = 0; b < blocks; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto qb = q.block(b * group, h * dh, group, dh);
      const auto kb = k.block(b * group, h * dh, group, dh);
      const auto vb = v.block(b * group, h * dh, group, dh);
      const auto dob = d_out.block(b * group, h * dh, group, dh);
      const MatX<S>& a = attn[static_cast<size_t>(b) * heads + h];

      MatX<S> d_a = dob * vb.transpose();
      const VecX<S> row_dot = (d_a.array() * a.array()).rowwise().sum();
      MatX<S> d_scores = a.array() * (d_a.colwise() - row_dot).array();
      d_q.block(b * group, h * dh, group, dh).noalias() = d_scores * kb * scale;
      d_k.block(b * group, h * dh, group, dh).noalias() =
          d_scores.transpose() * qb * scale;
      d_v.block(b * group, h * dh, group, dh).noalias() = a.transpose() * dob;
    }
  }
}

// One query row against an explicit ordered list of key/value rows. Every
// temporal-attention call site funnels through this so the cached and
// recomputed inference paths perform identical arithmetic. Returns weights.
template <typename S>
void attend_row(const S* q, const std::vector<const S*>& keys,
                const std::vector<const S*>& values, int dh, S scale, S* out,
                S* attn_out) {
  const int n = static_cast<int>(keys.size());
  Eigen::Map<const VecX<S>> qv(q, dh);
  S mx = -std::numeric_limits<S>::infinity();
  for (int i = 0; i < n; ++i) {
    const S logit = qv.dot(Eigen::Map<const VecX<S>>(keys[i], dh)) * scale;
    attn_out[i] = logit;
    if (logit > mx) mx = logit;
  }
  S denom = S(0);
  for (int i = 0; i < n; ++i) {
    attn_out[i] = std::exp(attn_out[i] - mx);
    denom += attn_out[i];
  }
  Eigen::Map<VecX<S>> ov(out, dh);
  ov.setZero();
  for (int i = 0; i < n; ++i) {
    attn_out[i] /= denom;
    ov += attn_out[i] * Eigen::Map<const VecX<S>>(values[i], dh);
  }
}

// Masked attention across groups of `group` rows (temporal layers): row i of
// a group attends the rows of the same group at columns the mask allows, in
// ascending column order. Disallowed logits are never materialized, so
// forbidden slots contribute exactly zero.
template <typename S>
void masked_attention_forward(const MatX<S>& q, const MatX<S>& k, const MatX<S>& v,
                              const TemporalMask& mask, int heads, MatX<S>& out,
                              std::type_identity_t<std::vector<MatX<S>>*> attn_save) {
  const int group = mask.size;
  const Eigen::Index rows = q.rows(), cols = q.cols();
  const int dh = static_cast<int>(cols) / heads;
  const S scale = S(1) / std::sqrt(S(dh));
  const int blocks = static_cast<int>(rows) / group;
  out.resize(rows, cols);
  if (attn_save) attn_save->assign(static_cast<size_t>(blocks) * heads, {});

  std::vector<const S*> keys, values;
  std::vector<S> weights;
  std::vector<int> allowed;
  for (int b = 0; b < blocks; ++b) {
    for (int h = 0; h < heads; ++h) {
      MatX<S> a;
      if (attn_save) a = MatX<S>::Zero(group, group);
      for (int i = 0; i < group; ++i) {
        allowed.clear();
        keys.clear();
        values.clear();
        for (int j = 0; j < group; ++j) {
          if (!mask.allowed(i, j)) continue;
          allowed.push_back(j);
          keys.push_back(k.row(b * group + j).data() + h * dh);
          values.push_back(v.row(b * group + j).data() + h * dh);
        }
        weights.resize(keys.size());
        attend_row(q.row(b * group + i).data() + h * dh, keys, values, dh, scale,
                   out.row(b * group + i).data() + h * dh, weights.data());
        if (attn_save)
          for (size_t t = 0; t < allowed.size(); ++t) a(i, allowed[t]) = weights[t];
      }
      if (attn_save) (*attn_save)[static_cast<size_t>(b) * heads + h] = std::move(a);
    }
  }
}

template <typename S>
void masked_attention_backward(const MatX<S>& q, const MatX<S>& k, const MatX<S>& v,
                               const std::vector<MatX<S>>& attn,
                               const TemporalMask& mask, int heads,
                               const MatX<S>& d_out, MatX<S>& d_q, MatX<S>& d_k,
                               MatX<S>& d_v) {
  const int group = mask.size;
  const Eigen::Index rows = q.rows(), cols = q.cols();
  const int dh = static_cast<int>(cols) / heads;
  const S scale = S(1) / std::sqrt(S(dh));
  const int blocks = static_cast<int>(rows) / group;
  d_q.setZero(rows, cols);
  d_k.setZero(rows, cols);
  d_v.setZero(rows, cols);
  for (int b = 0; b < blocks; ++b) {
    for (int h = 0; h < heads; ++h) {
      const MatX<S>& a = attn[static_cast<size_t>(b) * heads + h];
      for (int i = 0; i < group; ++i) {
        Eigen::Map<const VecX<S>> doi(d_out.row(b * group + i).data() + h * dh, dh);
        Eigen::Map<const VecX<S>> qi(q.row(b * group + i).data() + h * dh, dh);
        // d_a(i,j) = doi . v_j, restricted to allowed entries; a is zero
        // elsewhere, so d_scores vanishes off-mask automatically.
        S row_dot = S(0);
        for (int j = 0; j < group; ++j) {
          if (!mask.allowed(i, j)) continue;
          Eigen::Map<const VecX<S>> vj(v.row(b * group + j).data() + h * dh, dh);
          row_dot += a(i, j) * doi.dot(vj);
        }
        for (int j = 0; j < group; ++j) {
          if (!mask.allowed(i, j)) continue;
          Eigen::Map<const VecX<S>> vj(v.row(b * group + j).data() + h * dh, dh);
          Eigen::Map<const VecX<S>> kj(k.row(b * group + j).data() + h * dh, dh);
          Eigen::Map<VecX<S>> dvj(d_v.row(b * group + j).data() + h * dh, dh);
          Eigen::Map<VecX<S>> dkj(d_k.row(b * group + j).data() + h * dh, dh);
          Eigen::Map<VecX<S>> dqi(d_q.row(b * group + i).data() + h * dh, dh);
          const S ds = a(i, j) * (doi.dot(vj) - row_dot);
          dvj += a(i, j) * doi;
          dqi += ds * scale * kj;
          dkj += ds * scale * qi;
        }
      }
    }
  }
}

}  // namespace marv
