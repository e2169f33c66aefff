#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "mblm/nn.hpp"
#include "support/gradcheck.hpp"

using namespace mblm;

namespace {

Batch make_batch(int N, int n, std::vector<int> tokens, std::vector<int> labels = {}) {
  Batch b;
  b.size = N;
  b.seq_len = n;
  b.tokens = std::move(tokens);
  b.real.assign(N * n, 1);
  b.labels = std::move(labels);
  return b;
}

std::vector<NamedParam> block_params(const TransformerBlock& b) {
  std::vector<NamedParam> out;
  append_block_params(out, "", b);
  return out;
}

}  // namespace

TEST_CASE("embed looks up token plus position rows") {
  std::mt19937 rng(1);
  auto layer = make_embedding(/*vocab=*/5, /*width=*/3, /*max_seq=*/4, /*feature_vocab=*/0, rng);

  // direct table lookup oracle: single token id 3 at position 0
  auto b = make_batch(1, 1, {3});
  auto h = embed(b, layer);
  CHECK(h.shape() == Shape{1, 1, 3});
  for (int j = 0; j < 3; ++j) {
    const float expect = layer.token.values()[3 * 3 + j] + layer.position.values()[j];
    CHECK(h.values()[j] == doctest::Approx(expect));
  }

  // all-zero tables give zero output
  EmbeddingLayer zeros{Tensor::zeros({5, 3}), Tensor::zeros({4, 3}), std::nullopt};
  auto hz = embed(b, zeros);
  for (float v : hz.values()) CHECK(v == 0.0f);

  // determinism
  auto h2 = embed(b, layer);
  CHECK(h2.values() == h.values());
}

TEST_CASE("embed rejects out-of-range ids naming the position") {
  std::mt19937 rng(2);
  auto layer = make_embedding(5, 3, 4, 0, rng);
  auto b = make_batch(2, 2, {0, 1, 2, 9});
  try {
    embed(b, layer);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    std::string msg = e.what();
    CHECK(msg.find("9") != std::string::npos);
    CHECK(msg.find("row 1") != std::string::npos);
    CHECK(msg.find("position 1") != std::string::npos);
  }
}

TEST_CASE("embed adds feature embeddings when configured") {
  std::mt19937 rng(3);
  auto layer = make_embedding(5, 3, 4, /*feature_vocab=*/2, rng);
  auto b = make_batch(1, 2, {1, 2});
  b.features = {0, 1};
  auto with = embed(b, layer);
  b.features.clear();
  auto without = embed(b, layer);
  for (int c = 0; c < 2; ++c) {
    for (int j = 0; j < 3; ++j) {
      const float f = layer.feature->values()[(c == 0 ? 0 : 1) * 3 + j];
      CHECK(with.values()[c * 3 + j] == doctest::Approx(without.values()[c * 3 + j] + f));
    }
  }

  EmbeddingLayer no_table{layer.token, layer.position, std::nullopt};
  b.features = {0, 1};
  CHECK_THROWS_AS(embed(b, no_table), ContractError);
}

TEST_CASE("block_forward keeps shape and batch independence") {
  std::mt19937 rng(4);
  auto block = make_block(8, 2, rng);
  Tensor h = Tensor::randn({3, 5, 8}, 1.0f, rng);
  std::vector<uint8_t> real(3 * 5, 1);
  auto out = block_forward(h, block, real);
  CHECK(out.shape() == Shape{3, 5, 8});

  // swapping two batch rows swaps the corresponding outputs
  std::vector<float> swapped(h.values());
  for (int i = 0; i < 5 * 8; ++i) std::swap(swapped[i], swapped[5 * 8 + i]);
  auto out2 = block_forward(Tensor::of({3, 5, 8}, swapped), block, real);
  for (int i = 0; i < 5 * 8; ++i) {
    CHECK(out2.values()[i] == out.values()[5 * 8 + i]);
    CHECK(out2.values()[5 * 8 + i] == out.values()[i]);
  }
}

TEST_CASE("block_forward rejects width not divisible by heads") {
  std::mt19937 rng(5);
  CHECK_THROWS_AS(make_block(6, 4, rng), ConfigError);
  auto block = make_block(8, 2, rng);
  block.heads = 3;
  Tensor h = Tensor::randn({1, 2, 8}, 1.0f, rng);
  CHECK_THROWS_AS(block_forward(h, block, {}), ConfigError);
}

TEST_CASE("single-position block matches a hand-rolled oracle") {
  std::mt19937 rng(6);
  const int d = 4;
  auto block = make_block(d, 2, rng);
  Tensor h = Tensor::randn({1, 1, d}, 1.0f, rng);
  BlockTrace trace;
  auto out = block_forward(h, block, {}, &trace);

  // with one position every attention distribution is exactly [1.0]
  for (float p : trace.attn.values()) CHECK(p == doctest::Approx(1.0));

  auto ln = [&](const std::vector<float>& x, const Tensor& g, const Tensor& b) {
    double mu = 0, var = 0;
    for (float v : x) mu += v;
    mu /= x.size();
    for (float v : x) var += (v - mu) * (v - mu);
    var /= x.size();
    std::vector<float> y(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
      y[i] = static_cast<float>((x[i] - mu) / std::sqrt(var + 1e-5)) * g.values()[i] +
             b.values()[i];
    }
    return y;
  };
  auto linear = [&](const std::vector<float>& x, const Tensor& w, const Tensor& b) {
    const int rows = w.dim(0), cols = w.dim(1);
    std::vector<float> y(cols, 0.0f);
    for (int j = 0; j < cols; ++j) {
      double acc = b.values()[j];
      for (int i = 0; i < rows; ++i) acc += x[i] * w.values()[i * cols + j];
      y[j] = static_cast<float>(acc);
    }
    return y;
  };

  std::vector<float> x(h.values());
  auto a_in = ln(x, block.ln1_g, block.ln1_b);
  auto v = linear(a_in, block.wv, block.bv);  // probs == 1 so ctx == v
  auto attn = linear(v, block.wo, block.bo);
  std::vector<float> x2(d);
  for (int i = 0; i < d; ++i) x2[i] = x[i] + attn[i];
  auto f_in = ln(x2, block.ln2_g, block.ln2_b);
  auto f1 = linear(f_in, block.w1, block.b1);
  for (auto& u : f1) u = 0.5f * u * (1.0f + std::erf(u * 0.7071067811865476f));
  auto f2 = linear(f1, block.w2, block.b2);
  for (int i = 0; i < d; ++i) {
    CHECK(out.values()[i] == doctest::Approx(x2[i] + f2[i]).epsilon(1e-4));
  }
}

TEST_CASE("attention rows over non-padded positions sum to one") {
  std::mt19937 rng(7);
  auto block = make_block(8, 2, rng);
  const int N = 2, n = 6;
  Tensor h = Tensor::randn({N, n, 8}, 1.0f, rng);
  std::vector<uint8_t> real(N * n, 1);
  real[1 * n + 4] = 0;
  real[1 * n + 5] = 0;
  BlockTrace trace;
  block_forward(h, block, real, &trace);
  const auto& probs = trace.attn.values();
  for (int b = 0; b < N; ++b) {
    for (int hd = 0; hd < 2; ++hd) {
      for (int i = 0; i < n; ++i) {
        if (!real[b * n + i]) continue;
        double total = 0, real_total = 0;
        for (int t = 0; t < n; ++t) {
          const float p = probs[((b * 2 + hd) * n + i) * n + t];
          total += p;
          if (real[b * n + t]) {
            real_total += p;
          } else {
            CHECK(p == 0.0f);
          }
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
        CHECK(real_total == doctest::Approx(1.0).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("padding invariance of logits") {
  std::mt19937 rng(8);
  auto layer = make_embedding(9, 8, 8, 0, rng);
  auto block = make_block(8, 2, rng);
  auto head = make_head(8, 3, false, rng);

  auto b1 = make_batch(2, 4, {1, 2, 3, 4, 5, 6, 7, 8});
  auto run = [&](const Batch& b) {
    auto h = embed(b, layer);
    h = block_forward(h, block, b.real);
    h = block_forward(h, block, b.real);
    return classify(h, head);
  };
  auto logits1 = run(b1);

  Batch b2 = make_batch(2, 6, {1, 2, 3, 4, 0, 0, 5, 6, 7, 8, 0, 0});
  b2.real = {1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0};
  auto logits2 = run(b2);

  for (int i = 0; i < 6; ++i) {
    CHECK(logits2.values()[i] == doctest::Approx(logits1.values()[i]).epsilon(1e-5));
  }
}

TEST_CASE("classify contracts") {
  std::mt19937 rng(9);
  Tensor h = Tensor::randn({2, 3, 4}, 1.0f, rng);

  ClassifierHead zero_head{Tensor::zeros({4, 3}, true), Tensor::of({3}, {0.5f, -1.0f, 2.0f}, true),
                           std::nullopt, std::nullopt};
  auto logits = classify(h, zero_head);
  for (int i = 0; i < 2; ++i) {
    CHECK(logits.values()[i * 3 + 0] == doctest::Approx(0.5));
    CHECK(logits.values()[i * 3 + 1] == doctest::Approx(-1.0));
    CHECK(logits.values()[i * 3 + 2] == doctest::Approx(2.0));
  }

  auto one_class = make_head(4, 1, false, rng);
  CHECK(classify(h, one_class).shape() == Shape{2, 1});

  // manual matmul oracle on the first-position vectors
  auto head = make_head(4, 3, false, rng);
  auto out = classify(h, head);
  for (int i = 0; i < 2; ++i) {
    for (int c = 0; c < 3; ++c) {
      double acc = head.b.values()[c];
      for (int j = 0; j < 4; ++j) {
        acc += h.values()[(i * 3 + 0) * 4 + j] * head.w.values()[j * 3 + c];
      }
      CHECK(out.values()[i * 3 + c] == doctest::Approx(acc).epsilon(1e-5));
    }
  }
}

TEST_CASE("cross_entropy values and bounds") {
  // uniform logits over 3 classes
  auto uniform = Tensor::of({2, 3}, {1, 1, 1, 1, 1, 1});
  CHECK(cross_entropy(uniform, {0, 2}).item() == doctest::Approx(std::log(3.0)).epsilon(1e-6));

  // confident correct prediction
  auto confident = Tensor::of({1, 3}, {1e4f, 0.0f, 0.0f});
  CHECK(cross_entropy(confident, {0}).item() == doctest::Approx(0.0));

  std::mt19937 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor logits = Tensor::of({4, 5}, gradcheck::random_values(20, rng, -5.0f, 5.0f));
    std::vector<int> labels(4);
    for (auto& l : labels) l = std::uniform_int_distribution<int>(0, 4)(rng);
    CHECK(cross_entropy(logits, labels).item() >= 0.0f);
  }

  CHECK_THROWS_AS(cross_entropy(uniform, {0, 3}), DataError);
  CHECK_THROWS_AS(cross_entropy(uniform, {0}), ContractError);
}

TEST_CASE("adam zero gradients leave fresh parameters unchanged") {
  std::vector<NamedParam> params{{"p", Tensor::of({3}, {1.0f, -2.0f, 0.5f}, true)}};
  auto before = params[0].tensor.values();
  Adam opt({.lr = 0.1f}, 1);
  params[0].tensor.node()->ensure_grad();  // explicit all-zero gradient
  opt.step(params);
  CHECK(params[0].tensor.values() == before);

  // a parameter with no gradient at all is skipped (no step increment)
  params[0].tensor.zero_grad();
  opt.step(params);
  CHECK(opt.slots()[0].steps == 1);
  CHECK(params[0].tensor.values() == before);
}

TEST_CASE("adam single step matches a hand-computed update") {
  std::vector<NamedParam> params{{"p", Tensor::of({1}, {1.0f}, true)}};
  params[0].tensor.node()->ensure_grad();
  params[0].tensor.node()->grad[0] = 0.5f;
  Adam opt({.lr = 0.1f, .beta1 = 0.9f, .beta2 = 0.999f, .eps = 1e-8f}, 1);
  opt.step(params);
  // m=0.05, v=0.00025; mhat=0.5, vhat=0.25; update = 0.1*0.5/(0.5+1e-8)
  CHECK(params[0].tensor.values()[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
}

TEST_CASE("adam approaches lr-sized steps under constant gradient") {
  std::vector<NamedParam> params{{"p", Tensor::of({1}, {0.0f}, true)}};
  Adam opt({.lr = 0.01f}, 1);
  float prev = 0.0f;
  float delta = 0.0f;
  for (int s = 0; s < 300; ++s) {
    params[0].tensor.zero_grad();
    params[0].tensor.node()->ensure_grad();
    params[0].tensor.node()->grad[0] = 0.75f;
    prev = params[0].tensor.values()[0];
    opt.step(params);
    delta = params[0].tensor.values()[0] - prev;
  }
  CHECK(std::fabs(delta) == doctest::Approx(0.01).epsilon(0.02));
  CHECK(delta < 0.0f);
}

TEST_CASE("end-to-end gradient check through embed, two blocks, classify") {
  std::mt19937 rng(11);
  const int d = 6, V = 7;
  auto layer = make_embedding(V, d, 4, 0, rng);
  auto block1 = make_block(d, 2, rng);
  auto block2 = make_block(d, 2, rng);
  auto head = make_head(d, 3, false, rng);

  auto batch = make_batch(2, 3, {1, 4, 2, 6, 0, 3}, {0, 2});

  std::vector<Tensor> leaves;
  std::vector<NamedParam> named;
  append_embedding_params(named, layer);
  append_block_params(named, "b1.", block1);
  append_block_params(named, "b2.", block2);
  append_head_params(named, "head.", head);
  for (auto& p : named) leaves.push_back(p.tensor);

  auto loss_fn = [&](std::vector<Tensor>&) {
    auto h = embed(batch, layer);
    h = block_forward(h, block1, batch.real);
    h = block_forward(h, block2, batch.real);
    return cross_entropy(classify(h, head), batch.labels);
  };
  auto res = gradcheck::check(loss_fn, leaves);
  INFO("max rel err " << res.max_rel_error);
  CHECK(res.max_rel_error < 1e-3);
}
