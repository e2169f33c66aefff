#pragma once

// Central finite-difference oracle for gradient verification. Lives in test
// code only; it never calls into a backward implementation.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mblm/tensor.hpp"

namespace gradcheck {

// Builds a scalar loss from the given leaf tensors. Called repeatedly with
// perturbed leaf values, so it must not cache graph state between calls.
using LossFn = std::function<mblm::Tensor(std::vector<mblm::Tensor>&)>;

struct Result {
  double max_rel_error = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double rel_error(double analytic, double numeric) {
  const double denom = std::max(1.0, std::max(std::fabs(analytic), std::fabs(numeric)));
  return std::fabs(analytic - numeric) / denom;
}

// Compares reverse-mode gradients of `loss` against central differences
// evaluated entirely through the forward path.
inline Result check(const LossFn& loss, std::vector<mblm::Tensor>& leaves, float step = 1e-3f) {
  for (auto& leaf : leaves) leaf.zero_grad();
  mblm::Tensor out = loss(leaves);
  mblm::backward(out);

  Result res;
  for (auto& leaf : leaves) {
    std::vector<float> analytic(leaf.size(), 0.0f);
    if (leaf.has_grad()) analytic = leaf.grad();
    for (int64_t i = 0; i < leaf.size(); ++i) {
      const float saved = leaf.values()[i];
      leaf.values()[i] = saved + step;
      const double up = loss(leaves).item();
      leaf.values()[i] = saved - step;
      const double down = loss(leaves).item();
      leaf.values()[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = rel_error(analytic[i], numeric);
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_analytic = analytic[i];
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

inline std::vector<float> random_values(int64_t n, std::mt19937& rng, float lo = -1.0f,
                                        float hi = 1.0f) {
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline mblm::Shape random_shape(std::mt19937& rng, int max_rank = 3, int max_dim = 5) {
  std::uniform_int_distribution<int> rank_dist(1, max_rank);
  std::uniform_int_distribution<int> dim_dist(1, max_dim);
  mblm::Shape s(rank_dist(rng));
  for (auto& d : s) d = dim_dist(rng);
  return s;
}

inline mblm::Tensor random_leaf(const mblm::Shape& shape, std::mt19937& rng, float lo = -1.0f,
                                float hi = 1.0f) {
  return mblm::Tensor::of(shape, random_values(mblm::shape_numel(shape), rng, lo, hi), true);
}

}  // namespace gradcheck
