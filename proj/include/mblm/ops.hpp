#pragma once

#include <random>
#include <vector>

#include "mblm/tensor.hpp"

namespace mblm {

// Elementwise, same shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor gelu(const Tensor& x);

// [m,k] x [k,n] -> [m,n]; gradients dA = g*B^T, dB = A^T*g.
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched: [B,m,k] x [B,k,n] -> [B,m,n].
Tensor bmm(const Tensor& a, const Tensor& b);

// Numerically stable (max-subtracted) along the given axis.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

Tensor sum(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean(const Tensor& x);

// Joins same-shape tensors along a new axis inserted at `axis`.
Tensor stack(const std::vector<Tensor>& parts, int axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<int>& order);

// Row lookup from a 2-D table; gradients scatter-add into the table.
Tensor gather_rows(const Tensor& table, const std::vector<int>& indices);
// Slices one index from an axis, dropping that axis.
Tensor select(const Tensor& x, int axis, int index);

// Normalizes along the given axis: (x - mean) / sqrt(var + eps).
Tensor layer_norm(const Tensor& x, int axis, float eps = 1e-5f);

// v broadcast over the last axis of x.
Tensor mul_vec(const Tensor& x, const Tensor& v);
Tensor add_vec(const Tensor& x, const Tensor& v);
// Per-row feature weights: x [B,n,d] * w [B,d], w broadcast over axis 1.
Tensor bcast_mul(const Tensor& x, const Tensor& w);

Tensor dropout(const Tensor& x, float p, std::mt19937& rng);

}  // namespace mblm
