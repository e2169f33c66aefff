#pragma once

#include <string>
#include <vector>

#include "mblm/nn.hpp"

namespace mblm {

// Structure variants: the full multi-branch model, its ablations, and the
// plain single-stack baseline.
enum class StructureVariant {
  Standard,
  Mblm,
  NoInnerMixers,
  NoMixersSingle,
  NoMixersAll,
  NoDetach,
  BranchesAtTop,
  BranchesAtTopMultiClassifier,
};

StructureVariant parse_variant(const std::string& name);
std::string variant_name(StructureVariant v);

struct ModelConfig {
  int layers = 4;        // L, total transformer depth
  int branch_depth = 0;  // K, layers replicated per supervised language
  int width = 32;        // d
  int heads = 4;
  int supervised = 1;    // number of language branches
  int classes = 3;
  int vocab = 16;
  int max_seq = 16;
  StructureVariant variant = StructureVariant::Standard;
  float tau = 8.0f;  // default distillation temperature carried with the model
  bool pooler = false;
  float dropout = 0.0f;
  int feature_vocab = 0;

  void validate() const;
  bool branches_at_top() const {
    return variant == StructureVariant::BranchesAtTop ||
           variant == StructureVariant::BranchesAtTopMultiClassifier;
  }
};

// Attention-like mixing submodule: one trainable vector over the sequence
// dimension scores every branch representation feature-wise.
struct MixerSubmodule {
  Tensor v;  // [max_seq]
};

struct Mixer {
  int expected_inputs = 0;
  std::vector<MixerSubmodule> submodules;  // one per output
};

// Weighted combination of branch representations: dot each input with v along
// the sequence axis (padded positions zeroed first), softmax the stacked
// scores over the branch axis, then sum the weighted inputs. `weights_out`
// captures the normalized [N, branches, d] mixing weights.
Tensor mixer_submodule_forward(const MixerSubmodule& sub, const std::vector<Tensor>& inputs,
                               const std::vector<uint8_t>& real = {},
                               Tensor* weights_out = nullptr);
std::vector<Tensor> mixer_forward(const Mixer& mixer, const std::vector<Tensor>& inputs,
                                  const std::vector<uint8_t>& real = {});

enum class Mode { Train, Infer };

class MblmModel {
 public:
  ModelConfig cfg;
  EmbeddingLayer embedding;
  std::vector<std::vector<TransformerBlock>> branches;  // [supervised][K]
  std::vector<Mixer> mixers;  // inner mixers then (when present) the outer mixer
  std::vector<TransformerBlock> shared;
  std::vector<ClassifierHead> heads;  // 1, or one per branch for multi-classifier
  std::mt19937* dropout_rng = nullptr;  // bound by the trainer when dropout > 0

  // Random init. Non-standard variants are built by copying a freshly
  // initialized standard model so branches always start identical.
  static MblmModel create(const ModelConfig& cfg, std::mt19937& rng);
  static MblmModel init_from_base(const MblmModel& base, const ModelConfig& cfg);

  Tensor forward(const Batch& batch, Mode mode) const;
  // Final hidden state [N,n,d] of a plain stack; used by masked-token
  // pretraining. Only valid for models without branches.
  Tensor encode(const Batch& batch, Mode mode) const;

  std::vector<NamedParam> parameters() const;
  int64_t parameter_count() const;
  void reinit_heads(std::mt19937& rng);

 private:
  Tensor forward_branch_region(const Tensor& h0, const Batch& batch, Mode mode) const;
  Tensor forward_no_mixers(const Tensor& h0, const Batch& batch, Mode mode) const;
  Tensor forward_multi_classifier(const Tensor& h0, const Batch& batch, Mode mode) const;
  Tensor run_shared(Tensor h, const Batch& batch, Mode mode) const;
  Tensor run_branch_chain(Tensor h, int branch, const Batch& batch, Mode mode) const;
  Tensor run_block(const Tensor& h, const TransformerBlock& block, const Batch& batch,
                   Mode mode) const;
};

// Arithmetic mean of per-model logits.
Tensor ensemble_logits(const std::vector<const MblmModel*>& models, const Batch& batch);

// Closed-form parameter count; matches MblmModel::parameter_count exactly.
int64_t analytic_param_count(const ModelConfig& cfg);

}  // namespace mblm
