#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mblm/ops.hpp"
#include "mblm/tensor.hpp"

namespace mblm {

// A homogeneous mini-batch: one language, sequences padded to a common length.
struct Batch {
  int size = 0;     // N
  int seq_len = 0;  // n after padding
  std::vector<int> tokens;        // N*n token ids
  std::vector<uint8_t> real;      // N*n, 1 = real position, 0 = padding
  std::vector<int> labels;        // N, empty for unlabeled data
  std::vector<int> features;      // N*n optional feature ids
  std::vector<int> example_ids;   // index of each row in its source split
  int language = -1;              // index into the dataset's language list
};

struct EmbeddingLayer {
  Tensor token;     // [V, d]
  Tensor position;  // [n_max, d]
  std::optional<Tensor> feature;  // [F, d]
};

// Token + positional (+ optional feature) embeddings -> [N, n, d].
Tensor embed(const Batch& batch, const EmbeddingLayer& layer);

// Pre-norm transformer block: x + Attn(LN(x)), then x + FFN(LN(x)).
struct TransformerBlock {
  int heads = 1;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor w1, b1, w2, b2;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
};

// Captures attention probabilities [N*heads, n, n] for diagnostics.
struct BlockTrace {
  Tensor attn;
};

Tensor block_forward(const Tensor& h, const TransformerBlock& block,
                     const std::vector<uint8_t>& real, BlockTrace* trace = nullptr,
                     float dropout_p = 0.0f, std::mt19937* dropout_rng = nullptr);

// Single linear layer over the first-position vector of the final hidden state.
struct ClassifierHead {
  Tensor w;  // [d, C]
  Tensor b;  // [C]
  std::optional<Tensor> pool_w;  // [d, d] tanh pooler, disabled by default
  std::optional<Tensor> pool_b;  // [d]
};

Tensor classify(const Tensor& h_last, const ClassifierHead& head);

// Mean negative log-likelihood of the gold classes.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

struct NamedParam {
  std::string name;
  Tensor tensor;
};

void zero_grads(std::vector<NamedParam>& params);

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

// Adam with bias correction. Parameters that received no gradient in a step
// are skipped entirely: no moment decay, no step-count increment.
class Adam {
 public:
  struct Slot {
    std::vector<float> m;
    std::vector<float> v;
    int64_t steps = 0;
  };

  Adam(AdamConfig cfg, size_t param_count) : cfg_(cfg), slots_(param_count) {}

  void step(std::vector<NamedParam>& params, float lr_scale = 1.0f);

  const AdamConfig& config() const { return cfg_; }
  std::vector<Slot>& slots() { return slots_; }
  const std::vector<Slot>& slots() const { return slots_; }

 private:
  AdamConfig cfg_;
  std::vector<Slot> slots_;
};

// Parameter initialization used across the model: normal(0, 0.02) weights,
// zero biases, unit layer-norm gains.
TransformerBlock make_block(int width, int heads, std::mt19937& rng);
ClassifierHead make_head(int width, int classes, bool pooler, std::mt19937& rng);
EmbeddingLayer make_embedding(int vocab, int width, int max_seq, int feature_vocab,
                              std::mt19937& rng);

TransformerBlock clone_block(const TransformerBlock& src);
ClassifierHead clone_head(const ClassifierHead& src);
EmbeddingLayer clone_embedding(const EmbeddingLayer& src);

void append_block_params(std::vector<NamedParam>& out, const std::string& prefix,
                         const TransformerBlock& block);
void append_head_params(std::vector<NamedParam>& out, const std::string& prefix,
                        const ClassifierHead& head);
void append_embedding_params(std::vector<NamedParam>& out, const EmbeddingLayer& layer);

}  // namespace mblm
