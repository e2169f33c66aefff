#include "mblm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mblm {
namespace {

Tensor make_op(Shape shape, std::vector<float> data, const std::vector<Tensor>& parents,
               std::function<void(TensorNode&)> fn) {
  bool tracked = false;
  if (grad_enabled()) {
    for (const auto& p : parents) {
      if (p.tracked()) {
        tracked = true;
        break;
      }
    }
  }
  Tensor out = Tensor::of(std::move(shape), std::move(data));
  if (tracked) {
    auto n = out.node();
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(fn);
  }
  return out;
}

void check_valid(const Tensor& t, const char* op) {
  if (!t.valid()) throw ContractError(std::string(op) + ": empty tensor handle");
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  check_valid(a, op);
  check_valid(b, op);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Decomposes a shape around one axis: lines of length n, strided by `inner`.
struct AxisView {
  int64_t outer;
  int64_t n;
  int64_t inner;
};

AxisView axis_view(const char* op, const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size())) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + shape_str(shape));
  }
  AxisView v{1, shape[axis], 1};
  for (int i = 0; i < axis; ++i) v.outer *= shape[i];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i) v.inner *= shape[i];
  return v;
}

// y = x * unary'(x) rules share this skeleton.
template <typename Fwd, typename Bwd>
Tensor unary_op(const char* op, const Tensor& x, Fwd fwd, Bwd bwd) {
  check_valid(x, op);
  const auto& xv = x.values();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_op(x.shape(), std::move(out), {x}, [bwd](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * bwd(p.data[i], self.data[i]);
    }
  });
}

std::vector<float> permute_data(const std::vector<float>& src, const Shape& in_shape,
                                const std::vector<int>& order) {
  const int nd = static_cast<int>(in_shape.size());
  std::vector<int64_t> in_strides(nd);
  int64_t s = 1;
  for (int i = nd - 1; i >= 0; --i) {
    in_strides[i] = s;
    s *= in_shape[i];
  }
  Shape out_shape(nd);
  std::vector<int64_t> map_strides(nd);
  for (int i = 0; i < nd; ++i) {
    out_shape[i] = in_shape[order[i]];
    map_strides[i] = in_strides[order[i]];
  }
  std::vector<float> out(src.size());
  std::vector<int64_t> idx(nd, 0);
  int64_t src_off = 0;
  for (int64_t o = 0; o < static_cast<int64_t>(out.size()); ++o) {
    out[o] = src[src_off];
    for (int i = nd - 1; i >= 0; --i) {
      src_off += map_strides[i];
      if (++idx[i] < out_shape[i]) break;
      src_off -= map_strides[i] * out_shape[i];
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<float> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    for (int pi = 0; pi < 2; ++pi) {
      auto& p = *self.parents[pi];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  std::vector<float> out(a.values());
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    auto& a_ = *self.parents[0];
    if (a_.requires_grad) {
      a_.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) a_.grad[i] += self.grad[i];
    }
    auto& b_ = *self.parents[1];
    if (b_.requires_grad) {
      b_.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) b_.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    auto& a_ = *self.parents[0];
    auto& b_ = *self.parents[1];
    if (a_.requires_grad) {
      a_.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) a_.grad[i] += self.grad[i] * b_.data[i];
    }
    if (b_.requires_grad) {
      b_.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) b_.grad[i] += self.grad[i] * a_.data[i];
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  check_valid(a, "scale");
  std::vector<float> out(a.values());
  for (auto& x : out) x *= factor;
  return make_op(a.shape(), std::move(out), {a}, [factor](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * factor;
  });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](float v) { return std::exp(v); },
      [](float, float out) { return out; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](float v) { return std::log(v); },
      [](float in, float) { return 1.0f / in; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(
      "tanh", x, [](float v) { return std::tanh(v); },
      [](float, float out) { return 1.0f - out * out; });
}

Tensor gelu(const Tensor& x) {
  constexpr float kInvSqrt2 = 0.7071067811865476f;
  constexpr float kInvSqrt2Pi = 0.3989422804014327f;
  return unary_op(
      "gelu", x,
      [](float v) { return 0.5f * v * (1.0f + std::erf(v * kInvSqrt2)); },
      [](float in, float) {
        const float cdf = 0.5f * (1.0f + std::erf(in * kInvSqrt2));
        const float pdf = kInvSqrt2Pi * std::exp(-0.5f * in * in);
        return cdf + in * pdf;
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_valid(a, "matmul");
  check_valid(b, "matmul");
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const float* __restrict__ A = a.values().data();
  const float* __restrict__ B = b.values().data();
  std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
  for (int i = 0; i < m; ++i) {
    float* __restrict__ C = out.data() + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = A[static_cast<int64_t>(i) * k + p];
      const float* __restrict__ Br = B + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) C[j] += av * Br[j];
    }
  }
  return make_op({m, n}, std::move(out), {a, b}, [m, k, n](TensorNode& self) {
    const float* g = self.grad.data();
    auto& a_ = *self.parents[0];
    auto& b_ = *self.parents[1];
    if (a_.requires_grad) {
      a_.ensure_grad();
      const float* __restrict__ B = b_.data.data();
      for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
          const float* __restrict__ gr = g + static_cast<int64_t>(i) * n;
          const float* __restrict__ Br = B + static_cast<int64_t>(p) * n;
          float acc = 0.0f;
          for (int j = 0; j < n; ++j) acc += gr[j] * Br[j];
          a_.grad[static_cast<int64_t>(i) * k + p] += acc;
        }
      }
    }
    if (b_.requires_grad) {
      b_.ensure_grad();
      const float* __restrict__ A = a_.data.data();
      for (int i = 0; i < m; ++i) {
        const float* __restrict__ gr = g + static_cast<int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
          const float av = A[static_cast<int64_t>(i) * k + p];
          float* __restrict__ br = b_.grad.data() + static_cast<int64_t>(p) * n;
          for (int j = 0; j < n; ++j) br[j] += av * gr[j];
        }
      }
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  check_valid(a, "bmm");
  check_valid(b, "bmm");
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  const float* __restrict__ A = a.values().data();
  const float* __restrict__ B = b.values().data();
  std::vector<float> out(static_cast<size_t>(bs) * m * n, 0.0f);
  for (int bi = 0; bi < bs; ++bi) {
    const float* __restrict__ Ab = A + static_cast<int64_t>(bi) * m * k;
    const float* __restrict__ Bb = B + static_cast<int64_t>(bi) * k * n;
    float* __restrict__ Cb = out.data() + static_cast<int64_t>(bi) * m * n;
    for (int i = 0; i < m; ++i) {
      float* __restrict__ C = Cb + static_cast<int64_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const float av = Ab[static_cast<int64_t>(i) * k + p];
        const float* __restrict__ Br = Bb + static_cast<int64_t>(p) * n;
        for (int j = 0; j < n; ++j) C[j] += av * Br[j];
      }
    }
  }
  return make_op({bs, m, n}, std::move(out), {a, b}, [bs, m, k, n](TensorNode& self) {
    auto& a_ = *self.parents[0];
    auto& b_ = *self.parents[1];
    for (int bi = 0; bi < bs; ++bi) {
      const float* g = self.grad.data() + static_cast<int64_t>(bi) * m * n;
      if (a_.requires_grad) {
        a_.ensure_grad();
        const float* __restrict__ Bb = b_.data.data() + static_cast<int64_t>(bi) * k * n;
        float* __restrict__ ga = a_.grad.data() + static_cast<int64_t>(bi) * m * k;
        for (int i = 0; i < m; ++i) {
          for (int p = 0; p < k; ++p) {
            const float* __restrict__ gr = g + static_cast<int64_t>(i) * n;
            const float* __restrict__ Br = Bb + static_cast<int64_t>(p) * n;
            float acc = 0.0f;
            for (int j = 0; j < n; ++j) acc += gr[j] * Br[j];
            ga[static_cast<int64_t>(i) * k + p] += acc;
          }
        }
      }
      if (b_.requires_grad) {
        b_.ensure_grad();
        const float* __restrict__ Ab = a_.data.data() + static_cast<int64_t>(bi) * m * k;
        float* __restrict__ gb = b_.grad.data() + static_cast<int64_t>(bi) * k * n;
        for (int i = 0; i < m; ++i) {
          const float* __restrict__ gr = g + static_cast<int64_t>(i) * n;
          for (int p = 0; p < k; ++p) {
            const float av = Ab[static_cast<int64_t>(i) * k + p];
            float* __restrict__ br = gb + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) br[j] += av * gr[j];
          }
        }
      }
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  check_valid(x, "softmax");
  const AxisView v = axis_view("softmax", x.shape(), axis);
  const auto& xv = x.values();
  std::vector<float> out(xv.size());
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t i = 0; i < v.inner; ++i) {
      const int64_t base = o * v.n * v.inner + i;
      float mx = xv[base];
      for (int64_t j = 1; j < v.n; ++j) mx = std::max(mx, xv[base + j * v.inner]);
      float sum = 0.0f;
      for (int64_t j = 0; j < v.n; ++j) {
        const float e = std::exp(xv[base + j * v.inner] - mx);
        out[base + j * v.inner] = e;
        sum += e;
      }
      const float inv = 1.0f / sum;
      for (int64_t j = 0; j < v.n; ++j) out[base + j * v.inner] *= inv;
    }
  }
  return make_op(x.shape(), std::move(out), {x}, [v](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    // dx = s * (g - sum(g*s)) per line
    for (int64_t o = 0; o < v.outer; ++o) {
      for (int64_t i = 0; i < v.inner; ++i) {
        const int64_t base = o * v.n * v.inner + i;
        float dot = 0.0f;
        for (int64_t j = 0; j < v.n; ++j) {
          const int64_t ix = base + j * v.inner;
          dot += self.grad[ix] * self.data[ix];
        }
        for (int64_t j = 0; j < v.n; ++j) {
          const int64_t ix = base + j * v.inner;
          p.grad[ix] += self.data[ix] * (self.grad[ix] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  check_valid(x, "log_softmax");
  const AxisView v = axis_view("log_softmax", x.shape(), axis);
  const auto& xv = x.values();
  std::vector<float> out(xv.size());
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t i = 0; i < v.inner; ++i) {
      const int64_t base = o * v.n * v.inner + i;
      float mx = xv[base];
      for (int64_t j = 1; j < v.n; ++j) mx = std::max(mx, xv[base + j * v.inner]);
      float sum = 0.0f;
      for (int64_t j = 0; j < v.n; ++j) sum += std::exp(xv[base + j * v.inner] - mx);
      const float lse = mx + std::log(sum);
      for (int64_t j = 0; j < v.n; ++j) {
        const int64_t ix = base + j * v.inner;
        out[ix] = xv[ix] - lse;
      }
    }
  }
  return make_op(x.shape(), std::move(out), {x}, [v](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    // dx = g - softmax * sum(g) per line; softmax = exp(out)
    for (int64_t o = 0; o < v.outer; ++o) {
      for (int64_t i = 0; i < v.inner; ++i) {
        const int64_t base = o * v.n * v.inner + i;
        float gsum = 0.0f;
        for (int64_t j = 0; j < v.n; ++j) gsum += self.grad[base + j * v.inner];
        for (int64_t j = 0; j < v.n; ++j) {
          const int64_t ix = base + j * v.inner;
          p.grad[ix] += self.grad[ix] - std::exp(self.data[ix]) * gsum;
        }
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  check_valid(x, "sum");
  float total = 0.0f;
  for (float v : x.values()) total += v;
  return make_op({1}, {total}, {x}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const float g = self.grad[0];
    for (auto& gv : p.grad) gv += g;
  });
}

Tensor sum_axis(const Tensor& x, int axis) {
  check_valid(x, "sum_axis");
  const AxisView v = axis_view("sum_axis", x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  const auto& xv = x.values();
  std::vector<float> out(v.outer * v.inner, 0.0f);
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t j = 0; j < v.n; ++j) {
      const int64_t base = (o * v.n + j) * v.inner;
      for (int64_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += xv[base + i];
    }
  }
  return make_op(std::move(out_shape), std::move(out), {x}, [v](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t o = 0; o < v.outer; ++o) {
      for (int64_t j = 0; j < v.n; ++j) {
        const int64_t base = (o * v.n + j) * v.inner;
        for (int64_t i = 0; i < v.inner; ++i) p.grad[base + i] += self.grad[o * v.inner + i];
      }
    }
  });
}

Tensor mean(const Tensor& x) {
  check_valid(x, "mean");
  if (x.size() == 0) throw ContractError("mean of an empty tensor");
  float total = 0.0f;
  for (float v : x.values()) total += v;
  const float inv = 1.0f / static_cast<float>(x.size());
  return make_op({1}, {total * inv}, {x}, [inv](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const float g = self.grad[0] * inv;
    for (auto& gv : p.grad) gv += g;
  });
}

Tensor stack(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("stack: no tensors given");
  const Shape& s = parts[0].shape();
  for (const auto& p : parts) check_same_shape("stack", parts[0], p);
  const int nd = static_cast<int>(s.size());
  if (axis < 0 || axis > nd) {
    throw ShapeError("stack: axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(s));
  }
  const int count = static_cast<int>(parts.size());
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis; i < nd; ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape.insert(out_shape.begin() + axis, count);
  std::vector<float> out(outer * count * inner);
  for (int l = 0; l < count; ++l) {
    const auto& pv = parts[l].values();
    for (int64_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * inner, inner, out.data() + (o * count + l) * inner);
    }
  }
  return make_op(std::move(out_shape), std::move(out), parts,
                 [outer, inner, count](TensorNode& self) {
                   for (int l = 0; l < count; ++l) {
                     auto& p = *self.parents[l];
                     if (!p.requires_grad) continue;
                     p.ensure_grad();
                     for (int64_t o = 0; o < outer; ++o) {
                       const float* g = self.grad.data() + (o * count + l) * inner;
                       float* pg = p.grad.data() + o * inner;
                       for (int64_t i = 0; i < inner; ++i) pg[i] += g[i];
                     }
                   }
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_valid(x, "reshape");
  if (shape_numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  return make_op(std::move(shape), x.values(), {x}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  check_valid(x, "transpose");
  if (x.ndim() != 2) {
    throw ShapeError("transpose: expected a 2-D tensor, got " + shape_str(x.shape()));
  }
  return permute(x, {1, 0});
}

Tensor permute(const Tensor& x, const std::vector<int>& order) {
  check_valid(x, "permute");
  const int nd = x.ndim();
  if (static_cast<int>(order.size()) != nd) {
    throw ShapeError("permute: order size " + std::to_string(order.size()) +
                     " does not match rank of " + shape_str(x.shape()));
  }
  std::vector<bool> seen(nd, false);
  for (int a : order) {
    if (a < 0 || a >= nd || seen[a]) throw ShapeError("permute: invalid axis order");
    seen[a] = true;
  }
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i) out_shape[i] = x.shape()[order[i]];
  std::vector<int> inverse(nd);
  for (int i = 0; i < nd; ++i) inverse[order[i]] = i;
  auto out = permute_data(x.values(), x.shape(), order);
  return make_op(std::move(out_shape), std::move(out), {x},
                 [inverse](TensorNode& self) {
                   auto& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   p.ensure_grad();
                   auto back = permute_data(self.grad, self.shape, inverse);
                   for (size_t i = 0; i < back.size(); ++i) p.grad[i] += back[i];
                 });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& indices) {
  check_valid(table, "gather_rows");
  if (table.ndim() != 2) {
    throw ShapeError("gather_rows: table must be 2-D, got " + shape_str(table.shape()));
  }
  const int rows = table.dim(0), d = table.dim(1);
  for (size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= rows) {
      throw DataError("gather_rows: index " + std::to_string(indices[i]) + " out of range [0," +
                      std::to_string(rows) + ") at position " + std::to_string(i));
    }
  }
  const int len = static_cast<int>(indices.size());
  const float* T = table.values().data();
  std::vector<float> out(static_cast<size_t>(len) * d);
  for (int i = 0; i < len; ++i) {
    std::copy_n(T + static_cast<int64_t>(indices[i]) * d, d, out.data() + static_cast<int64_t>(i) * d);
  }
  return make_op({len, d}, std::move(out), {table}, [indices, d](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < indices.size(); ++i) {
      const float* g = self.grad.data() + static_cast<int64_t>(i) * d;
      float* pg = p.grad.data() + static_cast<int64_t>(indices[i]) * d;
      for (int j = 0; j < d; ++j) pg[j] += g[j];
    }
  });
}

Tensor select(const Tensor& x, int axis, int index) {
  check_valid(x, "select");
  const AxisView v = axis_view("select", x.shape(), axis);
  if (index < 0 || index >= v.n) {
    throw ShapeError("select: index " + std::to_string(index) + " out of range for axis of size " +
                     std::to_string(v.n));
  }
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  const auto& xv = x.values();
  std::vector<float> out(v.outer * v.inner);
  for (int64_t o = 0; o < v.outer; ++o) {
    const int64_t base = (o * v.n + index) * v.inner;
    std::copy_n(xv.data() + base, v.inner, out.data() + o * v.inner);
  }
  return make_op(std::move(out_shape), std::move(out), {x}, [v, index](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t o = 0; o < v.outer; ++o) {
      const int64_t base = (o * v.n + index) * v.inner;
      for (int64_t i = 0; i < v.inner; ++i) p.grad[base + i] += self.grad[o * v.inner + i];
    }
  });
}

Tensor layer_norm(const Tensor& x, int axis, float eps) {
  check_valid(x, "layer_norm");
  const AxisView v = axis_view("layer_norm", x.shape(), axis);
  if (v.n < 1) throw ShapeError("layer_norm: empty axis");
  const auto& xv = x.values();
  std::vector<float> out(xv.size());
  const float invn = 1.0f / static_cast<float>(v.n);
  for (int64_t o = 0; o < v.outer; ++o) {
    for (int64_t i = 0; i < v.inner; ++i) {
      const int64_t base = o * v.n * v.inner + i;
      float mu = 0.0f;
      for (int64_t j = 0; j < v.n; ++j) mu += xv[base + j * v.inner];
      mu *= invn;
      float var = 0.0f;
      for (int64_t j = 0; j < v.n; ++j) {
        const float dlt = xv[base + j * v.inner] - mu;
        var += dlt * dlt;
      }
      var *= invn;
      const float inv_std = 1.0f / std::sqrt(var + eps);
      for (int64_t j = 0; j < v.n; ++j) {
        const int64_t ix = base + j * v.inner;
        out[ix] = (xv[ix] - mu) * inv_std;
      }
    }
  }
  return make_op(x.shape(), std::move(out), {x}, [v, eps, invn](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    // dx = (g - mean(g) - y*mean(g*y)) / std, recomputing std from the input
    for (int64_t o = 0; o < v.outer; ++o) {
      for (int64_t i = 0; i < v.inner; ++i) {
        const int64_t base = o * v.n * v.inner + i;
        float mu = 0.0f;
        for (int64_t j = 0; j < v.n; ++j) mu += p.data[base + j * v.inner];
        mu *= invn;
        float var = 0.0f;
        for (int64_t j = 0; j < v.n; ++j) {
          const float dlt = p.data[base + j * v.inner] - mu;
          var += dlt * dlt;
        }
        var *= invn;
        const float inv_std = 1.0f / std::sqrt(var + eps);
        float gmean = 0.0f, gymean = 0.0f;
        for (int64_t j = 0; j < v.n; ++j) {
          const int64_t ix = base + j * v.inner;
          gmean += self.grad[ix];
          gymean += self.grad[ix] * self.data[ix];
        }
        gmean *= invn;
        gymean *= invn;
        for (int64_t j = 0; j < v.n; ++j) {
          const int64_t ix = base + j * v.inner;
          p.grad[ix] += (self.grad[ix] - gmean - self.data[ix] * gymean) * inv_std;
        }
      }
    }
  });
}

Tensor mul_vec(const Tensor& x, const Tensor& v) {
  check_valid(x, "mul_vec");
  check_valid(v, "mul_vec");
  if (v.ndim() != 1 || x.ndim() < 1 || x.shape().back() != v.dim(0)) {
    throw ShapeError("mul_vec: cannot broadcast " + shape_str(v.shape()) + " over last axis of " +
                     shape_str(x.shape()));
  }
  const int d = v.dim(0);
  const int64_t rows = x.size() / d;
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<float> out(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    for (int j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * vv[j];
  }
  return make_op(x.shape(), std::move(out), {x, v}, [d, rows](TensorNode& self) {
    auto& x_ = *self.parents[0];
    auto& v_ = *self.parents[1];
    if (x_.requires_grad) {
      x_.ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        for (int j = 0; j < d; ++j) x_.grad[r * d + j] += self.grad[r * d + j] * v_.data[j];
      }
    }
    if (v_.requires_grad) {
      v_.ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        for (int j = 0; j < d; ++j) v_.grad[j] += self.grad[r * d + j] * x_.data[r * d + j];
      }
    }
  });
}

Tensor add_vec(const Tensor& x, const Tensor& v) {
  check_valid(x, "add_vec");
  check_valid(v, "add_vec");
  if (v.ndim() != 1 || x.ndim() < 1 || x.shape().back() != v.dim(0)) {
    throw ShapeError("add_vec: cannot broadcast " + shape_str(v.shape()) + " over last axis of " +
                     shape_str(x.shape()));
  }
  const int d = v.dim(0);
  const int64_t rows = x.size() / d;
  const auto& xv = x.values();
  const auto& vv = v.values();
  std::vector<float> out(xv.size());
  for (int64_t r = 0; r < rows; ++r) {
    for (int j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + vv[j];
  }
  return make_op(x.shape(), std::move(out), {x, v}, [d, rows](TensorNode& self) {
    auto& x_ = *self.parents[0];
    auto& v_ = *self.parents[1];
    if (x_.requires_grad) {
      x_.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) x_.grad[i] += self.grad[i];
    }
    if (v_.requires_grad) {
      v_.ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        for (int j = 0; j < d; ++j) v_.grad[j] += self.grad[r * d + j];
      }
    }
  });
}

Tensor bcast_mul(const Tensor& x, const Tensor& w) {
  check_valid(x, "bcast_mul");
  check_valid(w, "bcast_mul");
  if (x.ndim() != 3 || w.ndim() != 2 || x.dim(0) != w.dim(0) || x.dim(2) != w.dim(1)) {
    throw ShapeError("bcast_mul: cannot broadcast " + shape_str(w.shape()) + " over axis 1 of " +
                     shape_str(x.shape()));
  }
  const int B = x.dim(0), n = x.dim(1), d = x.dim(2);
  const auto& xv = x.values();
  const auto& wv = w.values();
  std::vector<float> out(xv.size());
  for (int b = 0; b < B; ++b) {
    const float* wr = wv.data() + static_cast<int64_t>(b) * d;
    for (int i = 0; i < n; ++i) {
      const int64_t base = (static_cast<int64_t>(b) * n + i) * d;
      for (int j = 0; j < d; ++j) out[base + j] = xv[base + j] * wr[j];
    }
  }
  return make_op(x.shape(), std::move(out), {x, w}, [B, n, d](TensorNode& self) {
    auto& x_ = *self.parents[0];
    auto& w_ = *self.parents[1];
    if (x_.requires_grad) {
      x_.ensure_grad();
      for (int b = 0; b < B; ++b) {
        const float* wr = w_.data.data() + static_cast<int64_t>(b) * d;
        for (int i = 0; i < n; ++i) {
          const int64_t base = (static_cast<int64_t>(b) * n + i) * d;
          for (int j = 0; j < d; ++j) x_.grad[base + j] += self.grad[base + j] * wr[j];
        }
      }
    }
    if (w_.requires_grad) {
      w_.ensure_grad();
      for (int b = 0; b < B; ++b) {
        float* gw = w_.grad.data() + static_cast<int64_t>(b) * d;
        for (int i = 0; i < n; ++i) {
          const int64_t base = (static_cast<int64_t>(b) * n + i) * d;
          for (int j = 0; j < d; ++j) gw[j] += self.grad[base + j] * x_.data[base + j];
        }
      }
    }
  });
}

Tensor dropout(const Tensor& x, float p, std::mt19937& rng) {
  check_valid(x, "dropout");
  if (p < 0.0f || p >= 1.0f) {
    throw ConfigError("dropout rate must be in [0,1), got " + std::to_string(p));
  }
  if (p == 0.0f) return x;
  const float keep_scale = 1.0f / (1.0f - p);
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<float> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? keep_scale : 0.0f;
  const auto& xv = x.values();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return make_op(x.shape(), std::move(out), {x}, [mask = std::move(mask)](TensorNode& self) {
    auto& p_ = *self.parents[0];
    if (!p_.requires_grad) return;
    p_.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p_.grad[i] += self.grad[i] * mask[i];
  });
}

}  // namespace mblm
