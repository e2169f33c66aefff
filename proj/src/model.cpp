#include "mblm/model.hpp"

#include <algorithm>

namespace mblm {

StructureVariant parse_variant(const std::string& name) {
  if (name == "standard") return StructureVariant::Standard;
  if (name == "mblm") return StructureVariant::Mblm;
  if (name == "no-inner-mixers") return StructureVariant::NoInnerMixers;
  if (name == "no-mixers-single") return StructureVariant::NoMixersSingle;
  if (name == "no-mixers-all") return StructureVariant::NoMixersAll;
  if (name == "no-detach") return StructureVariant::NoDetach;
  if (name == "branches-at-top") return StructureVariant::BranchesAtTop;
  if (name == "branches-at-top-multi-classifier") {
    return StructureVariant::BranchesAtTopMultiClassifier;
  }
  throw ConfigError("unknown structure variant: " + name);
}

std::string variant_name(StructureVariant v) {
  switch (v) {
    case StructureVariant::Standard: return "standard";
    case StructureVariant::Mblm: return "mblm";
    case StructureVariant::NoInnerMixers: return "no-inner-mixers";
    case StructureVariant::NoMixersSingle: return "no-mixers-single";
    case StructureVariant::NoMixersAll: return "no-mixers-all";
    case StructureVariant::NoDetach: return "no-detach";
    case StructureVariant::BranchesAtTop: return "branches-at-top";
    case StructureVariant::BranchesAtTopMultiClassifier:
      return "branches-at-top-multi-classifier";
  }
  throw ConfigError("unknown structure variant value");
}

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("model needs at least one layer");
  if (branch_depth < 0 || branch_depth > layers) {
    throw ConfigError("branch depth K=" + std::to_string(branch_depth) +
                      " outside [0, L=" + std::to_string(layers) + "]");
  }
  if (width < 1 || heads < 1 || width % heads != 0) {
    throw ConfigError("width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (supervised < 1) throw ConfigError("at least one supervised language is required");
  if (classes < 1) throw ConfigError("at least one class is required");
  if (vocab < 1) throw ConfigError("vocabulary must be non-empty");
  if (max_seq < 1) throw ConfigError("maximum sequence length must be positive");
  if (!(tau > 0.0f)) throw ConfigError("temperature must be positive");
  if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("dropout must be in [0,1)");
  if (feature_vocab < 0) throw ConfigError("feature vocabulary must be non-negative");
}

Tensor mixer_submodule_forward(const MixerSubmodule& sub, const std::vector<Tensor>& inputs,
                               const std::vector<uint8_t>& real, Tensor* weights_out) {
  if (inputs.empty()) throw ContractError("mixer: no branch inputs");
  if (inputs[0].ndim() != 3) {
    throw ShapeError("mixer: expected [N,n,d] inputs, got " + shape_str(inputs[0].shape()));
  }
  for (const auto& t : inputs) {
    if (t.shape() != inputs[0].shape()) {
      throw ShapeError("mixer: branch inputs disagree, " + shape_str(inputs[0].shape()) + " vs " +
                       shape_str(t.shape()));
    }
  }
  const int B = inputs[0].dim(0), n = inputs[0].dim(1), d = inputs[0].dim(2);
  if (n != sub.v.dim(0)) {
    throw ContractError("mixer vector covers " + std::to_string(sub.v.dim(0)) +
                        " positions but inputs have " + std::to_string(n));
  }

  // Padded positions must not influence the scores.
  Tensor pad01;
  bool has_pad = false;
  if (!real.empty()) {
    if (static_cast<int>(real.size()) != B * n) {
      throw ContractError("mixer: padding mask size mismatch");
    }
    for (uint8_t r : real) {
      if (!r) {
        has_pad = true;
        break;
      }
    }
    if (has_pad) {
      std::vector<float> mv(static_cast<size_t>(B) * n * d);
      for (int b = 0; b < B; ++b) {
        for (int i = 0; i < n; ++i) {
          const float keep = real[b * n + i] ? 1.0f : 0.0f;
          std::fill_n(mv.data() + (static_cast<int64_t>(b) * n + i) * d, d, keep);
        }
      }
      pad01 = Tensor::of({B, n, d}, std::move(mv));
    }
  }

  const int count = static_cast<int>(inputs.size());
  Tensor vrow = reshape(sub.v, {1, n});
  std::vector<Tensor> scores;
  scores.reserve(count);
  for (const auto& input : inputs) {
    Tensor scored = has_pad ? mul(input, pad01) : input;
    Tensor flat = reshape(permute(scored, {1, 0, 2}), {n, B * d});
    scores.push_back(reshape(matmul(vrow, flat), {B, d}));
  }
  // per-feature weights, normalized over the branch axis
  Tensor weights = softmax(stack(scores, 1), 1);
  if (weights_out) *weights_out = weights;

  Tensor out;
  for (int l = 0; l < count; ++l) {
    Tensor term = bcast_mul(inputs[l], select(weights, 1, l));
    out = (l == 0) ? term : add(out, term);
  }
  return out;
}

std::vector<Tensor> mixer_forward(const Mixer& mixer, const std::vector<Tensor>& inputs,
                                  const std::vector<uint8_t>& real) {
  if (static_cast<int>(inputs.size()) != mixer.expected_inputs) {
    throw ContractError("mixer expected " + std::to_string(mixer.expected_inputs) +
                        " branch inputs, got " + std::to_string(inputs.size()));
  }
  std::vector<Tensor> outputs;
  outputs.reserve(mixer.submodules.size());
  for (const auto& sub : mixer.submodules) {
    outputs.push_back(mixer_submodule_forward(sub, inputs, real));
  }
  return outputs;
}

MblmModel MblmModel::create(const ModelConfig& cfg, std::mt19937& rng) {
  cfg.validate();
  if (cfg.variant == StructureVariant::Standard) {
    MblmModel m;
    m.cfg = cfg;
    m.cfg.branch_depth = 0;
    m.embedding = make_embedding(cfg.vocab, cfg.width, cfg.max_seq, cfg.feature_vocab, rng);
    m.shared.reserve(cfg.layers);
    for (int i = 0; i < cfg.layers; ++i) m.shared.push_back(make_block(cfg.width, cfg.heads, rng));
    m.heads.push_back(make_head(cfg.width, cfg.classes, cfg.pooler, rng));
    return m;
  }
  ModelConfig base_cfg = cfg;
  base_cfg.variant = StructureVariant::Standard;
  base_cfg.branch_depth = 0;
  return init_from_base(create(base_cfg, rng), cfg);
}

MblmModel MblmModel::init_from_base(const MblmModel& base, const ModelConfig& cfg) {
  cfg.validate();
  if (base.cfg.variant != StructureVariant::Standard || !base.branches.empty()) {
    throw ContractError("init_from_base requires a standard base model");
  }
  if (base.cfg.layers != cfg.layers || base.cfg.width != cfg.width ||
      base.cfg.heads != cfg.heads || base.cfg.vocab != cfg.vocab ||
      base.cfg.max_seq != cfg.max_seq || base.cfg.classes != cfg.classes ||
      base.cfg.pooler != cfg.pooler || base.cfg.feature_vocab != cfg.feature_vocab) {
    throw ConfigError("base model dimensions do not match the requested configuration");
  }

  MblmModel m;
  m.cfg = cfg;
  m.embedding = clone_embedding(base.embedding);

  const int L = cfg.layers;
  const int K = cfg.branch_depth;
  const int nsp = cfg.supervised;
  const bool at_top = cfg.branches_at_top();

  if (cfg.variant == StructureVariant::Standard || K == 0) {
    // structurally identical to the base
    m.cfg.branch_depth = 0;
    for (const auto& blk : base.shared) m.shared.push_back(clone_block(blk));
    m.heads.push_back(clone_head(base.heads[0]));
    return m;
  }

  const int branch_begin = at_top ? L - K : 0;
  for (int l = 0; l < nsp; ++l) {
    std::vector<TransformerBlock> chain;
    chain.reserve(K);
    for (int i = 0; i < K; ++i) chain.push_back(clone_block(base.shared[branch_begin + i]));
    m.branches.push_back(std::move(chain));
  }
  for (int i = 0; i < L; ++i) {
    if (i >= branch_begin && i < branch_begin + K) continue;
    m.shared.push_back(clone_block(base.shared[i]));
  }

  auto make_mixer = [&](int outputs) {
    Mixer mix;
    mix.expected_inputs = nsp;
    for (int s = 0; s < outputs; ++s) {
      mix.submodules.push_back({Tensor::zeros({cfg.max_seq}, true)});
    }
    return mix;
  };
  switch (cfg.variant) {
    case StructureVariant::Mblm:
    case StructureVariant::NoDetach:
    case StructureVariant::BranchesAtTop:
      for (int i = 0; i + 1 < K; ++i) m.mixers.push_back(make_mixer(nsp));
      m.mixers.push_back(make_mixer(1));
      break;
    case StructureVariant::NoInnerMixers:
      m.mixers.push_back(make_mixer(1));
      break;
    case StructureVariant::NoMixersSingle:
    case StructureVariant::NoMixersAll:
      break;
    case StructureVariant::BranchesAtTopMultiClassifier:
      for (int i = 0; i + 1 < K; ++i) m.mixers.push_back(make_mixer(nsp));
      break;
    case StructureVariant::Standard:
      break;
  }

  const int head_count = cfg.variant == StructureVariant::BranchesAtTopMultiClassifier ? nsp : 1;
  for (int h = 0; h < head_count; ++h) m.heads.push_back(clone_head(base.heads[0]));
  return m;
}

Tensor MblmModel::run_block(const Tensor& h, const TransformerBlock& block, const Batch& batch,
                            Mode mode) const {
  const float p = (mode == Mode::Train && dropout_rng) ? cfg.dropout : 0.0f;
  return block_forward(h, block, batch.real, nullptr, p, dropout_rng);
}

Tensor MblmModel::run_shared(Tensor h, const Batch& batch, Mode mode) const {
  for (const auto& blk : shared) h = run_block(h, blk, batch, mode);
  return h;
}

Tensor MblmModel::run_branch_chain(Tensor h, int branch, const Batch& batch, Mode mode) const {
  for (const auto& blk : branches[branch]) h = run_block(h, blk, batch, mode);
  return h;
}

Tensor MblmModel::forward_branch_region(const Tensor& h_in, const Batch& batch, Mode mode) const {
  const int nsp = cfg.supervised;
  const int K = cfg.branch_depth;
  const bool detaching = mode == Mode::Train && cfg.variant != StructureVariant::NoDetach;
  const int own = detaching ? batch.language : -1;

  // Branches whose outputs are cut from the graph at every layer are run
  // without recording; this realizes the stop-gradient rule with identical
  // values and identical (absent) gradients.
  auto branch_block = [&](const Tensor& h, int l, int i) {
    if (own >= 0 && l != own) {
      NoGradGuard guard;
      return run_block(h, branches[l][i], batch, mode);
    }
    return run_block(h, branches[l][i], batch, mode);
  };

  if (cfg.variant == StructureVariant::NoInnerMixers) {
    std::vector<Tensor> outs(nsp);
    for (int l = 0; l < nsp; ++l) {
      Tensor h = h_in;
      for (int i = 0; i < K; ++i) h = branch_block(h, l, i);
      outs[l] = h;
    }
    return mixer_forward(mixers.back(), outs, batch.real)[0];
  }

  std::vector<Tensor> cur(nsp, h_in);
  for (int i = 0; i < K; ++i) {
    std::vector<Tensor> tilde(nsp);
    for (int l = 0; l < nsp; ++l) tilde[l] = branch_block(cur[l], l, i);
    if (i + 1 < K) {
      cur = mixer_forward(mixers[i], tilde, batch.real);
    } else {
      return mixer_forward(mixers[K - 1], tilde, batch.real)[0];
    }
  }
  return h_in;  // unreachable for K >= 1
}

Tensor MblmModel::forward_no_mixers(const Tensor& h0, const Batch& batch, Mode mode) const {
  const int nsp = cfg.supervised;
  const bool supervised_lang = batch.language >= 0 && batch.language < nsp;
  Tensor h;
  if (mode == Mode::Train ||
      (supervised_lang && cfg.variant == StructureVariant::NoMixersSingle)) {
    h = run_branch_chain(h0, batch.language, batch, mode);
  } else {
    // average the branch representations after the branch stacks
    for (int l = 0; l < nsp; ++l) {
      Tensor out = run_branch_chain(h0, l, batch, mode);
      h = (l == 0) ? out : add(h, out);
    }
    h = scale(h, 1.0f / static_cast<float>(nsp));
  }
  h = run_shared(h, batch, mode);
  return classify(h, heads[0]);
}

Tensor MblmModel::forward_multi_classifier(const Tensor& h_in, const Batch& batch,
                                           Mode mode) const {
  const int nsp = cfg.supervised;
  const int K = cfg.branch_depth;
  const bool detaching = mode == Mode::Train;
  const int own = detaching ? batch.language : -1;

  std::vector<Tensor> cur(nsp, h_in);
  for (int i = 0; i < K; ++i) {
    std::vector<Tensor> tilde(nsp);
    for (int l = 0; l < nsp; ++l) {
      if (own >= 0 && l != own) {
        NoGradGuard guard;
        tilde[l] = run_block(cur[l], branches[l][i], batch, mode);
      } else {
        tilde[l] = run_block(cur[l], branches[l][i], batch, mode);
      }
    }
    if (i + 1 < K) {
      cur = mixer_forward(mixers[i], tilde, batch.real);
    } else {
      cur = std::move(tilde);
    }
  }

  const bool supervised_lang = batch.language >= 0 && batch.language < nsp;
  if (mode == Mode::Train || supervised_lang) {
    return classify(cur[batch.language], heads[batch.language]);
  }
  // zero-shot prediction averages the logits from every classifier head
  Tensor out;
  for (int l = 0; l < nsp; ++l) {
    Tensor logits = classify(cur[l], heads[l]);
    out = (l == 0) ? logits : add(out, logits);
  }
  return scale(out, 1.0f / static_cast<float>(nsp));
}

Tensor MblmModel::forward(const Batch& batch, Mode mode) const {
  if (mode == Mode::Train && !branches.empty() &&
      (batch.language < 0 || batch.language >= cfg.supervised)) {
    throw ContractError("training batch carries language tag " + std::to_string(batch.language) +
                        " outside the supervised set of " + std::to_string(cfg.supervised));
  }
  Tensor h0 = embed(batch, embedding);

  if (branches.empty()) {
    return classify(run_shared(h0, batch, mode), heads[0]);
  }

  switch (cfg.variant) {
    case StructureVariant::NoMixersSingle:
    case StructureVariant::NoMixersAll:
      return forward_no_mixers(h0, batch, mode);
    case StructureVariant::BranchesAtTop: {
      Tensor h = run_shared(h0, batch, mode);
      return classify(forward_branch_region(h, batch, mode), heads[0]);
    }
    case StructureVariant::BranchesAtTopMultiClassifier: {
      Tensor h = run_shared(h0, batch, mode);
      return forward_multi_classifier(h, batch, mode);
    }
    default: {
      Tensor h = forward_branch_region(h0, batch, mode);
      return classify(run_shared(h, batch, mode), heads[0]);
    }
  }
}

Tensor MblmModel::encode(const Batch& batch, Mode mode) const {
  if (!branches.empty()) {
    throw ContractError("encode is only defined for models without language branches");
  }
  return run_shared(embed(batch, embedding), batch, mode);
}

std::vector<NamedParam> MblmModel::parameters() const {
  std::vector<NamedParam> out;
  append_embedding_params(out, embedding);
  for (size_t l = 0; l < branches.size(); ++l) {
    for (size_t i = 0; i < branches[l].size(); ++i) {
      append_block_params(out, "branch." + std::to_string(l) + ".layer." + std::to_string(i) + ".",
                          branches[l][i]);
    }
  }
  for (size_t mi = 0; mi < mixers.size(); ++mi) {
    for (size_t si = 0; si < mixers[mi].submodules.size(); ++si) {
      out.push_back({"mixer." + std::to_string(mi) + "." + std::to_string(si) + ".v",
                     mixers[mi].submodules[si].v});
    }
  }
  for (size_t i = 0; i < shared.size(); ++i) {
    append_block_params(out, "shared." + std::to_string(i) + ".", shared[i]);
  }
  if (heads.size() == 1) {
    append_head_params(out, "head.", heads[0]);
  } else {
    for (size_t h = 0; h < heads.size(); ++h) {
      append_head_params(out, "head." + std::to_string(h) + ".", heads[h]);
    }
  }
  return out;
}

int64_t MblmModel::parameter_count() const {
  int64_t total = 0;
  for (const auto& p : parameters()) total += p.tensor.size();
  return total;
}

void MblmModel::reinit_heads(std::mt19937& rng) {
  for (auto& h : heads) h = make_head(cfg.width, cfg.classes, cfg.pooler, rng);
}

Tensor ensemble_logits(const std::vector<const MblmModel*>& models, const Batch& batch) {
  if (models.size() < 2) throw ContractError("ensemble needs at least two models");
  for (const auto* m : models) {
    if (m->cfg.classes != models[0]->cfg.classes) {
      throw ConfigError("ensemble members disagree on class count");
    }
  }
  NoGradGuard guard;
  Tensor out;
  for (size_t i = 0; i < models.size(); ++i) {
    Tensor logits = models[i]->forward(batch, Mode::Infer);
    out = (i == 0) ? logits : add(out, logits);
  }
  return scale(out, 1.0f / static_cast<float>(models.size()));
}

int64_t analytic_param_count(const ModelConfig& cfg) {
  const int64_t d = cfg.width;
  const int64_t per_block = 12 * d * d + 13 * d;
  const int64_t embed = static_cast<int64_t>(cfg.vocab) * d +
                        static_cast<int64_t>(cfg.max_seq) * d +
                        static_cast<int64_t>(cfg.feature_vocab) * d;
  const int64_t head =
      d * cfg.classes + cfg.classes + (cfg.pooler ? d * d + d : 0);
  const int64_t L = cfg.layers, K = cfg.branch_depth, nsp = cfg.supervised;

  if (cfg.variant == StructureVariant::Standard || K == 0) {
    return embed + L * per_block + head;
  }

  const int64_t encoder = (nsp * K + (L - K)) * per_block;
  int64_t mixer = 0;
  switch (cfg.variant) {
    case StructureVariant::Mblm:
    case StructureVariant::NoDetach:
    case StructureVariant::BranchesAtTop:
      mixer = (K - 1) * nsp * cfg.max_seq + cfg.max_seq;
      break;
    case StructureVariant::NoInnerMixers:
      mixer = cfg.max_seq;
      break;
    case StructureVariant::BranchesAtTopMultiClassifier:
      mixer = (K - 1) * nsp * cfg.max_seq;
      break;
    default:
      break;
  }
  const int64_t heads =
      cfg.variant == StructureVariant::BranchesAtTopMultiClassifier ? nsp * head : head;
  return embed + encoder + mixer + heads;
}

}  // namespace mblm
