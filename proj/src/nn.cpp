#include "mblm/nn.hpp"

#include <cmath>

namespace mblm {

namespace {
constexpr float kInitStd = 0.02f;
constexpr float kMaskedLogit = -1e9f;
}  // namespace

Tensor embed(const Batch& batch, const EmbeddingLayer& layer) {
  const int N = batch.size, n = batch.seq_len;
  if (N <= 0 || n <= 0 || static_cast<int>(batch.tokens.size()) != N * n) {
    throw ContractError("embed: batch token buffer does not match size " + std::to_string(N) +
                        " x " + std::to_string(n));
  }
  const int vocab = layer.token.dim(0);
  const int d = layer.token.dim(1);
  if (n > layer.position.dim(0)) {
    throw ContractError("embed: sequence length " + std::to_string(n) +
                        " exceeds positional table of " + std::to_string(layer.position.dim(0)));
  }
  for (int i = 0; i < N * n; ++i) {
    const int id = batch.tokens[i];
    if (id < 0 || id >= vocab) {
      throw DataError("embed: token id " + std::to_string(id) + " out of range [0," +
                      std::to_string(vocab) + ") at row " + std::to_string(i / n) + " position " +
                      std::to_string(i % n));
    }
  }

  Tensor h = gather_rows(layer.token, batch.tokens);

  std::vector<int> pos(N * n);
  for (int r = 0; r < N; ++r) {
    for (int c = 0; c < n; ++c) pos[r * n + c] = c;
  }
  h = add(h, gather_rows(layer.position, pos));

  if (!batch.features.empty()) {
    if (!layer.feature) {
      throw ContractError("embed: batch carries feature ids but the layer has no feature table");
    }
    if (batch.features.size() != batch.tokens.size()) {
      throw ContractError("embed: feature ids do not match token buffer size");
    }
    h = add(h, gather_rows(*layer.feature, batch.features));
  }
  return reshape(h, {N, n, d});
}

Tensor block_forward(const Tensor& h, const TransformerBlock& block,
                     const std::vector<uint8_t>& real, BlockTrace* trace, float dropout_p,
                     std::mt19937* dropout_rng) {
  if (h.ndim() != 3) {
    throw ShapeError("block_forward: expected [N,n,d], got " + shape_str(h.shape()));
  }
  const int N = h.dim(0), n = h.dim(1), d = h.dim(2);
  const int heads = block.heads;
  if (heads <= 0 || d % heads != 0) {
    throw ConfigError("block_forward: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (!real.empty() && static_cast<int>(real.size()) != N * n) {
    throw ContractError("block_forward: padding mask size mismatch");
  }
  const int dh = d / heads;

  auto drop = [&](Tensor t) {
    if (dropout_p > 0.0f && dropout_rng) return dropout(t, dropout_p, *dropout_rng);
    return t;
  };

  Tensor x = reshape(h, {N * n, d});

  // attention sublayer
  Tensor a_in = add_vec(mul_vec(layer_norm(x, 1), block.ln1_g), block.ln1_b);
  Tensor q = add_vec(matmul(a_in, block.wq), block.bq);
  Tensor k = add_vec(matmul(a_in, block.wk), block.bk);
  Tensor v = add_vec(matmul(a_in, block.wv), block.bv);

  auto split_heads = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {N, n, heads, dh}), {0, 2, 1, 3}), {N * heads, n, dh});
  };
  Tensor qh = split_heads(q);
  Tensor kh = split_heads(k);
  Tensor vh = split_heads(v);

  Tensor scores = scale(bmm(qh, permute(kh, {0, 2, 1})), 1.0f / std::sqrt(static_cast<float>(dh)));
  if (!real.empty()) {
    // padded keys get a large negative logit and vanish from the softmax
    std::vector<float> maskv(static_cast<size_t>(N) * heads * n * n, 0.0f);
    for (int b = 0; b < N; ++b) {
      for (int t = 0; t < n; ++t) {
        if (real[b * n + t]) continue;
        for (int hd = 0; hd < heads; ++hd) {
          float* row = maskv.data() + (static_cast<int64_t>(b) * heads + hd) * n * n;
          for (int i = 0; i < n; ++i) row[static_cast<int64_t>(i) * n + t] = kMaskedLogit;
        }
      }
    }
    scores = add(scores, Tensor::of({N * heads, n, n}, std::move(maskv)));
  }
  Tensor probs = softmax(scores, 2);
  if (trace) trace->attn = probs;

  Tensor ctx = bmm(probs, vh);
  Tensor merged = reshape(permute(reshape(ctx, {N, heads, n, dh}), {0, 2, 1, 3}), {N * n, d});
  Tensor attn_out = drop(add_vec(matmul(merged, block.wo), block.bo));
  x = add(x, attn_out);

  // feed-forward sublayer
  Tensor f_in = add_vec(mul_vec(layer_norm(x, 1), block.ln2_g), block.ln2_b);
  Tensor f = gelu(add_vec(matmul(f_in, block.w1), block.b1));
  f = drop(add_vec(matmul(f, block.w2), block.b2));
  x = add(x, f);

  return reshape(x, {N, n, d});
}

Tensor classify(const Tensor& h_last, const ClassifierHead& head) {
  if (h_last.ndim() != 3 || h_last.dim(1) < 1) {
    throw ShapeError("classify: expected [N,n>=1,d], got " + shape_str(h_last.shape()));
  }
  Tensor first = select(h_last, 1, 0);
  if (head.pool_w) {
    first = tanh(add_vec(matmul(first, *head.pool_w), *head.pool_b));
  }
  return add_vec(matmul(first, head.w), head.b);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) {
    throw ShapeError("cross_entropy: expected [N,C] logits, got " + shape_str(logits.shape()));
  }
  const int N = logits.dim(0), C = logits.dim(1);
  if (static_cast<int>(labels.size()) != N) {
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(N) + " rows");
  }
  std::vector<float> onehot(static_cast<size_t>(N) * C, 0.0f);
  for (int i = 0; i < N; ++i) {
    if (labels[i] < 0 || labels[i] >= C) {
      throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0," +
                      std::to_string(C) + ") at row " + std::to_string(i));
    }
    onehot[static_cast<size_t>(i) * C + labels[i]] = 1.0f;
  }
  Tensor picked = mul(log_softmax(logits, 1), Tensor::of({N, C}, std::move(onehot)));
  return scale(sum(picked), -1.0f / static_cast<float>(N));
}

void zero_grads(std::vector<NamedParam>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

void Adam::step(std::vector<NamedParam>& params, float lr_scale) {
  if (params.size() != slots_.size()) {
    throw ContractError("Adam bound to " + std::to_string(slots_.size()) + " params, got " +
                        std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    if (!t.has_grad()) continue;
    auto& w = t.values();
    const auto& g = t.grad();
    auto& sl = slots_[i];
    if (sl.m.empty()) {
      sl.m.assign(w.size(), 0.0f);
      sl.v.assign(w.size(), 0.0f);
    }
    if (sl.m.size() != w.size()) {
      throw ContractError("Adam moment buffers do not match parameter " + params[i].name);
    }
    sl.steps += 1;
    const float b1 = cfg_.beta1, b2 = cfg_.beta2;
    const float bc1 = 1.0f - std::pow(b1, static_cast<float>(sl.steps));
    const float bc2 = 1.0f - std::pow(b2, static_cast<float>(sl.steps));
    const float lr = cfg_.lr * lr_scale;
    for (size_t j = 0; j < w.size(); ++j) {
      sl.m[j] = b1 * sl.m[j] + (1.0f - b1) * g[j];
      sl.v[j] = b2 * sl.v[j] + (1.0f - b2) * g[j] * g[j];
      w[j] -= lr * (sl.m[j] / bc1) / (std::sqrt(sl.v[j] / bc2) + cfg_.eps);
    }
  }
}

TransformerBlock make_block(int width, int heads, std::mt19937& rng) {
  if (heads <= 0 || width % heads != 0) {
    throw ConfigError("block width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  TransformerBlock b;
  b.heads = heads;
  auto w = [&](int rows, int cols) { return Tensor::randn({rows, cols}, kInitStd, rng, true); };
  auto zero = [&](int len) { return Tensor::zeros({len}, true); };
  b.wq = w(width, width);
  b.bq = zero(width);
  b.wk = w(width, width);
  b.bk = zero(width);
  b.wv = w(width, width);
  b.bv = zero(width);
  b.wo = w(width, width);
  b.bo = zero(width);
  b.w1 = w(width, 4 * width);
  b.b1 = zero(4 * width);
  b.w2 = w(4 * width, width);
  b.b2 = zero(width);
  b.ln1_g = Tensor::full({width}, 1.0f, true);
  b.ln1_b = zero(width);
  b.ln2_g = Tensor::full({width}, 1.0f, true);
  b.ln2_b = zero(width);
  return b;
}

ClassifierHead make_head(int width, int classes, bool pooler, std::mt19937& rng) {
  ClassifierHead h;
  h.w = Tensor::randn({width, classes}, kInitStd, rng, true);
  h.b = Tensor::zeros({classes}, true);
  if (pooler) {
    h.pool_w = Tensor::randn({width, width}, kInitStd, rng, true);
    h.pool_b = Tensor::zeros({width}, true);
  }
  return h;
}

EmbeddingLayer make_embedding(int vocab, int width, int max_seq, int feature_vocab,
                              std::mt19937& rng) {
  EmbeddingLayer e;
  e.token = Tensor::randn({vocab, width}, kInitStd, rng, true);
  e.position = Tensor::randn({max_seq, width}, kInitStd, rng, true);
  if (feature_vocab > 0) {
    e.feature = Tensor::randn({feature_vocab, width}, kInitStd, rng, true);
  }
  return e;
}

namespace {
Tensor clone_param(const Tensor& t) { return Tensor::of(t.shape(), t.values(), true); }
}  // namespace

TransformerBlock clone_block(const TransformerBlock& src) {
  TransformerBlock b;
  b.heads = src.heads;
  b.wq = clone_param(src.wq);
  b.bq = clone_param(src.bq);
  b.wk = clone_param(src.wk);
  b.bk = clone_param(src.bk);
  b.wv = clone_param(src.wv);
  b.bv = clone_param(src.bv);
  b.wo = clone_param(src.wo);
  b.bo = clone_param(src.bo);
  b.w1 = clone_param(src.w1);
  b.b1 = clone_param(src.b1);
  b.w2 = clone_param(src.w2);
  b.b2 = clone_param(src.b2);
  b.ln1_g = clone_param(src.ln1_g);
  b.ln1_b = clone_param(src.ln1_b);
  b.ln2_g = clone_param(src.ln2_g);
  b.ln2_b = clone_param(src.ln2_b);
  return b;
}

ClassifierHead clone_head(const ClassifierHead& src) {
  ClassifierHead h;
  h.w = clone_param(src.w);
  h.b = clone_param(src.b);
  if (src.pool_w) h.pool_w = clone_param(*src.pool_w);
  if (src.pool_b) h.pool_b = clone_param(*src.pool_b);
  return h;
}

EmbeddingLayer clone_embedding(const EmbeddingLayer& src) {
  EmbeddingLayer e;
  e.token = clone_param(src.token);
  e.position = clone_param(src.position);
  if (src.feature) e.feature = clone_param(*src.feature);
  return e;
}

void append_block_params(std::vector<NamedParam>& out, const std::string& prefix,
                         const TransformerBlock& block) {
  out.push_back({prefix + "attn.wq", block.wq});
  out.push_back({prefix + "attn.bq", block.bq});
  out.push_back({prefix + "attn.wk", block.wk});
  out.push_back({prefix + "attn.bk", block.bk});
  out.push_back({prefix + "attn.wv", block.wv});
  out.push_back({prefix + "attn.bv", block.bv});
  out.push_back({prefix + "attn.wo", block.wo});
  out.push_back({prefix + "attn.bo", block.bo});
  out.push_back({prefix + "ln1.g", block.ln1_g});
  out.push_back({prefix + "ln1.b", block.ln1_b});
  out.push_back({prefix + "ffn.w1", block.w1});
  out.push_back({prefix + "ffn.b1", block.b1});
  out.push_back({prefix + "ffn.w2", block.w2});
  out.push_back({prefix + "ffn.b2", block.b2});
  out.push_back({prefix + "ln2.g", block.ln2_g});
  out.push_back({prefix + "ln2.b", block.ln2_b});
}

void append_head_params(std::vector<NamedParam>& out, const std::string& prefix,
                        const ClassifierHead& head) {
  out.push_back({prefix + "w", head.w});
  out.push_back({prefix + "b", head.b});
  if (head.pool_w) out.push_back({prefix + "pool.w", *head.pool_w});
  if (head.pool_b) out.push_back({prefix + "pool.b", *head.pool_b});
}

void append_embedding_params(std::vector<NamedParam>& out, const EmbeddingLayer& layer) {
  out.push_back({"embed.token", layer.token});
  out.push_back({"embed.position", layer.position});
  if (layer.feature) out.push_back({"embed.feature", *layer.feature});
}

}  // namespace mblm
