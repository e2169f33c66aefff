#include "mblm/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mblm {

TrainMode parse_train_mode(const std::string& name) {
  if (name == "multikd") return TrainMode::MultiKD;
  if (name == "monokd") return TrainMode::MonoKD;
  if (name == "multitrain") return TrainMode::MultiTrain;
  throw ConfigError("unknown training mode: " + name);
}

std::string train_mode_name(TrainMode mode) {
  switch (mode) {
    case TrainMode::MultiKD: return "multikd";
    case TrainMode::MonoKD: return "monokd";
    case TrainMode::MultiTrain: return "multitrain";
  }
  throw ConfigError("unknown training mode value");
}

void TrainPlan::validate() const {
  if (!(tau > 0.0f)) throw ConfigError("temperature must be positive");
  if (!(lr > 0.0f)) throw ConfigError("learning rate must be positive");
  if (epochs < 1) throw ConfigError("at least one epoch is required");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (warmup_steps < 0) throw ConfigError("warmup steps must be non-negative");
  if (mode == TrainMode::MonoKD && languages.size() > 1) {
    throw ConfigError("single-teacher distillation uses exactly one language");
  }
}

Tensor soften(const Tensor& logits, float tau) {
  if (!(tau > 0.0f)) throw ConfigError("temperature must be positive");
  if (logits.ndim() != 2) {
    throw ShapeError("soften expects [N,C] logits, got " + shape_str(logits.shape()));
  }
  return softmax(scale(logits, 1.0f / tau), 1);
}

Tensor kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, float tau) {
  if (!(tau > 0.0f)) throw ConfigError("temperature must be positive");
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ContractError("kd_loss: teacher logits " + shape_str(teacher_logits.shape()) +
                        " do not match student logits " + shape_str(student_logits.shape()));
  }
  if (student_logits.ndim() != 2) {
    throw ShapeError("kd_loss expects [N,C] logits, got " + shape_str(student_logits.shape()));
  }
  const int N = student_logits.dim(0);
  Tensor teacher_probs = soften(detach(teacher_logits), tau);
  Tensor student_logp = log_softmax(scale(student_logits, 1.0f / tau), 1);
  return scale(sum(mul(teacher_probs, student_logp)), -1.0f / static_cast<float>(N));
}

TeacherCache TeacherCache::build(const std::vector<const MblmModel*>& teachers_by_language,
                                 const DatasetBundle& data, const std::vector<int>& languages,
                                 int batch_size, int pad_to) {
  TeacherCache cache;
  cache.rows_.resize(data.languages.size());
  for (int lang : languages) {
    if (lang < 0 || lang >= static_cast<int>(teachers_by_language.size()) ||
        teachers_by_language[lang] == nullptr) {
      throw ConfigError("no teacher available for supervised language " +
                        (lang >= 0 && lang < static_cast<int>(data.languages.size())
                             ? data.languages[lang].id
                             : std::to_string(lang)));
    }
    const MblmModel& teacher = *teachers_by_language[lang];
    cache.classes_ = teacher.cfg.classes;
    const auto& split = data.split(lang, Split::Train);
    if (split.examples.empty()) {
      throw ConfigError("language " + data.languages[lang].id + " has no training data");
    }
    auto& rows = cache.rows_[lang];
    rows.assign(split.examples.size() * static_cast<size_t>(cache.classes_), 0.0f);
    NoGradGuard guard;
    BatchIterator it(split, batch_size, pad_to, /*seed=*/0, /*shuffle=*/false);
    while (auto batch = it.next()) {
      Tensor logits = teacher.forward(*batch, Mode::Infer);
      for (int r = 0; r < batch->size; ++r) {
        const int id = batch->example_ids[r];
        std::copy_n(logits.values().data() + static_cast<int64_t>(r) * cache.classes_,
                    cache.classes_,
                    rows.data() + static_cast<int64_t>(id) * cache.classes_);
      }
    }
  }
  return cache;
}

Tensor TeacherCache::batch_logits(const Batch& batch) const {
  if (batch.language < 0 || batch.language >= static_cast<int>(rows_.size()) ||
      rows_[batch.language].empty()) {
    throw ContractError("teacher cache has no logits for language " +
                        std::to_string(batch.language));
  }
  const auto& rows = rows_[batch.language];
  std::vector<float> out(static_cast<size_t>(batch.size) * classes_);
  for (int r = 0; r < batch.size; ++r) {
    const int id = batch.example_ids[r];
    std::copy_n(rows.data() + static_cast<int64_t>(id) * classes_, classes_,
                out.data() + static_cast<int64_t>(r) * classes_);
  }
  return Tensor::of({batch.size, classes_}, std::move(out));
}

uint64_t stream_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  // splitmix64 over the combined words
  uint64_t x = seed;
  for (uint64_t w : {a + 1, b + 1, c + 1}) {
    x += 0x9e3779b97f4a7c15ull * w;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    x = z ^ (z >> 31);
  }
  return x;
}

LanguageSampler::LanguageSampler(std::vector<int> languages, uint64_t seed, int epoch)
    : languages_(std::move(languages)),
      rng_(static_cast<uint32_t>(stream_seed(seed, 0x1a, static_cast<uint64_t>(epoch)))) {
  if (languages_.empty()) throw ContractError("language sampler needs at least one language");
}

int LanguageSampler::next() {
  std::uniform_int_distribution<size_t> pick(0, languages_.size() - 1);
  return languages_[pick(rng_)];
}

Trainer::Trainer(MblmModel& student, const DatasetBundle& data, TrainPlan plan,
                 const TeacherCache* teachers)
    : student_(student),
      data_(data),
      plan_(std::move(plan)),
      teachers_(teachers),
      params_(student.parameters()),
      opt_({.lr = plan_.lr}, params_.size()) {
  plan_.validate();
  if (plan_.languages.empty()) {
    for (int l = 0; l < data.config.supervised; ++l) plan_.languages.push_back(l);
    if (plan_.mode == TrainMode::MonoKD) plan_.languages.resize(1);
  }
  const bool needs_teachers = plan_.mode != TrainMode::MultiTrain;
  if (needs_teachers && teachers_ == nullptr) {
    throw ConfigError("distillation requires teacher logits");
  }
  steps_per_epoch_ = 0;
  for (int lang : plan_.languages) {
    if (lang < 0 || lang >= data.config.supervised) {
      throw ConfigError("language index " + std::to_string(lang) + " is not supervised");
    }
    const auto& split = data.split(lang, Split::Train);
    if (split.examples.empty()) {
      throw ConfigError("language " + data.languages[lang].id + " has no training data");
    }
    steps_per_epoch_ += static_cast<int>((split.examples.size() + plan_.batch_size - 1) /
                                         plan_.batch_size);
  }
}

void Trainer::run_epoch(int epoch) { run_steps_internal(epoch, steps_per_epoch_, true, nullptr); }

std::vector<double> Trainer::time_steps(int warmup, int count) {
  std::vector<double> seconds;
  seconds.reserve(count);
  run_steps_internal(/*epoch=*/0, warmup + count, /*record=*/false, &seconds);
  if (static_cast<int>(seconds.size()) > count) {
    seconds.erase(seconds.begin(), seconds.end() - count);
  }
  return seconds;
}

void Trainer::run_steps_internal(int epoch, int max_steps, bool record,
                                 std::vector<double>* step_seconds) {
  LanguageSampler sampler(plan_.languages, plan_.seed, epoch);
  dropout_rng_.seed(static_cast<uint32_t>(stream_seed(plan_.seed, 0xd0, epoch)));
  student_.dropout_rng = student_.cfg.dropout > 0.0f ? &dropout_rng_ : nullptr;

  struct LangStream {
    std::optional<BatchIterator> it;
    int wraps = 0;
  };
  std::vector<LangStream> streams(data_.languages.size());
  for (int lang : plan_.languages) {
    streams[lang].it.emplace(data_.split(lang, Split::Train), plan_.batch_size,
                             student_.cfg.max_seq,
                             stream_seed(plan_.seed, 0xba + lang, epoch, 0));
  }

  int64_t global_step = static_cast<int64_t>(epoch) * steps_per_epoch_;
  for (int s = 0; s < max_steps; ++s, ++global_step) {
    const auto step_begin = std::chrono::steady_clock::now();
    const int lang = sampler.next();
    auto& stream = streams[lang];
    auto batch = stream.it->next();
    if (!batch) {
      stream.it->reset(stream_seed(plan_.seed, 0xba + lang, epoch, ++stream.wraps));
      batch = stream.it->next();
    }

    Tensor loss;
    if (plan_.mode == TrainMode::MultiTrain) {
      loss = cross_entropy(student_.forward(*batch, Mode::Train), batch->labels);
    } else {
      Tensor teacher = teachers_->batch_logits(*batch);
      loss = kd_loss(teacher, student_.forward(*batch, Mode::Train), plan_.tau);
    }

    float lr_scale = 1.0f;
    if (plan_.warmup_steps > 0) {
      lr_scale = std::min(1.0f, static_cast<float>(global_step + 1) /
                                    static_cast<float>(plan_.warmup_steps));
    }
    zero_grads(params_);
    backward(loss);
    opt_.step(params_, lr_scale);
    if (record) history_.push_back({global_step, lang, loss.item(), plan_.lr * lr_scale});
    if (step_seconds) {
      step_seconds->push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - step_begin).count());
    }
  }
  student_.dropout_rng = nullptr;
}

void Trainer::run_epochs(int start_epoch, int end_epoch,
                         const std::function<void(int)>& on_epoch_end) {
  for (int e = start_epoch; e < end_epoch; ++e) {
    run_epoch(e);
    if (on_epoch_end) on_epoch_end(e);
  }
}

std::vector<StepRecord> multikd_train(MblmModel& student,
                                      const std::vector<const MblmModel*>& teachers_by_language,
                                      const DatasetBundle& data, const TrainPlan& plan) {
  TrainPlan resolved = plan;
  if (resolved.languages.empty()) {
    for (int l = 0; l < data.config.supervised; ++l) resolved.languages.push_back(l);
  }
  TeacherCache cache = TeacherCache::build(teachers_by_language, data, resolved.languages,
                                           resolved.batch_size, student.cfg.max_seq);
  Trainer trainer(student, data, resolved, &cache);
  trainer.run_epochs(0, resolved.epochs);
  return trainer.history();
}

std::vector<StepRecord> monokd_train(MblmModel& student, const MblmModel& teacher,
                                     const DatasetBundle& data, const TrainPlan& plan) {
  TrainPlan resolved = plan;
  resolved.mode = TrainMode::MonoKD;
  if (resolved.languages.empty()) resolved.languages = {0};
  std::vector<const MblmModel*> teachers(data.languages.size(), nullptr);
  teachers[resolved.languages[0]] = &teacher;
  TeacherCache cache = TeacherCache::build(teachers, data, resolved.languages,
                                           resolved.batch_size, student.cfg.max_seq);
  Trainer trainer(student, data, resolved, &cache);
  trainer.run_epochs(0, resolved.epochs);
  return trainer.history();
}

std::vector<StepRecord> fine_tune(MblmModel& model, const DatasetBundle& data,
                                  const TrainPlan& plan) {
  TrainPlan resolved = plan;
  resolved.mode = TrainMode::MultiTrain;
  Trainer trainer(model, data, resolved, nullptr);
  trainer.run_epochs(0, resolved.epochs);
  return trainer.history();
}

Metric parse_metric(const std::string& name) {
  if (name == "accuracy") return Metric::Accuracy;
  if (name == "mae") return Metric::Mae;
  throw ConfigError("unknown metric: " + name);
}

std::string metric_name(Metric metric) {
  return metric == Metric::Accuracy ? "accuracy" : "mae";
}

EvalResult evaluate_with(const LogitsFn& logits_fn, const DatasetBundle& data, Split split,
                         Metric metric, int pad_to) {
  EvalResult res;
  const int langs = static_cast<int>(data.languages.size());
  res.per_language.resize(langs, 0.0);
  for (int l = 0; l < langs; ++l) {
    const auto& sd = data.split(l, split);
    if (sd.examples.empty()) {
      throw DataError("language " + data.languages[l].id + " has an empty " +
                      split_name(split) + " split");
    }
    int64_t correct = 0;
    int64_t abs_err = 0;
    int64_t total = 0;
    BatchIterator it(sd, 64, pad_to, /*seed=*/0, /*shuffle=*/false);
    while (auto batch = it.next()) {
      Tensor logits = logits_fn(*batch);
      const int C = logits.dim(1);
      for (int r = 0; r < batch->size; ++r) {
        const float* row = logits.values().data() + static_cast<int64_t>(r) * C;
        int arg = 0;
        for (int c = 1; c < C; ++c) {
          if (row[c] > row[arg]) arg = c;
        }
        correct += arg == batch->labels[r];
        abs_err += std::abs(arg - batch->labels[r]);
        ++total;
      }
    }
    res.per_language[l] = metric == Metric::Accuracy
                              ? static_cast<double>(correct) / static_cast<double>(total)
                              : static_cast<double>(abs_err) / static_cast<double>(total);
  }

  const int nsp = data.config.supervised;
  double sup = 0.0, zs = 0.0, all = 0.0;
  for (int l = 0; l < langs; ++l) {
    all += res.per_language[l];
    (l < nsp ? sup : zs) += res.per_language[l];
  }
  res.avg_supervised = nsp > 0 ? sup / nsp : 0.0;
  res.avg_zero_shot = langs > nsp ? zs / (langs - nsp) : 0.0;
  res.avg_all = langs > 0 ? all / langs : 0.0;
  return res;
}

EvalResult evaluate(const MblmModel& model, const DatasetBundle& data, Split split,
                    Metric metric) {
  return evaluate_with(
      [&](const Batch& batch) {
        NoGradGuard guard;
        return model.forward(batch, Mode::Infer);
      },
      data, split, metric, model.cfg.max_seq);
}

EvalResult evaluate_ensemble(const std::vector<const MblmModel*>& models,
                             const DatasetBundle& data, Split split, Metric metric) {
  if (models.empty()) throw ContractError("ensemble evaluation needs models");
  return evaluate_with(
      [&](const Batch& batch) { return ensemble_logits(models, batch); }, data, split, metric,
      models[0]->cfg.max_seq);
}

void pretrain_masked(MblmModel& model, const DatasetBundle& data, const PretrainPlan& plan,
                     std::vector<float>* loss_curve) {
  if (plan.steps < 0) throw ConfigError("pretraining step count must be non-negative");
  if (plan.mask_rate <= 0.0f || plan.mask_rate >= 1.0f) {
    throw ConfigError("mask rate must be in (0,1)");
  }
  if (!model.branches.empty()) {
    throw ContractError("pretraining runs on the plain shared stack only");
  }
  std::vector<int> langs = plan.languages;
  if (langs.empty()) {
    langs.resize(data.languages.size());
    std::iota(langs.begin(), langs.end(), 0);
  }
  for (int l : langs) {
    if (l < 0 || l >= static_cast<int>(data.languages.size()) ||
        data.split(l, Split::Unlabeled).examples.empty()) {
      throw ConfigError("language index " + std::to_string(l) + " has no unlabeled pool");
    }
  }

  const int d = model.cfg.width;
  const int V = model.cfg.vocab;
  std::mt19937 init_rng(static_cast<uint32_t>(stream_seed(plan.seed, 0x11)));
  Tensor mlm_w = Tensor::randn({d, V}, 0.02f, init_rng, true);
  Tensor mlm_b = Tensor::zeros({V}, true);

  std::vector<NamedParam> params = model.parameters();
  params.push_back({"mlm.w", mlm_w});
  params.push_back({"mlm.b", mlm_b});
  Adam opt({.lr = plan.lr}, params.size());

  struct LangStream {
    std::optional<BatchIterator> it;
    int wraps = 0;
  };
  std::vector<LangStream> streams(data.languages.size());
  for (int l : langs) {
    streams[l].it.emplace(data.split(l, Split::Unlabeled), plan.batch_size, model.cfg.max_seq,
                          stream_seed(plan.seed, 0x22 + l, 0));
  }
  LanguageSampler sampler(langs, plan.seed, /*epoch=*/0);

  for (int step = 0; step < plan.steps; ++step) {
    const int lang = sampler.next();
    auto& stream = streams[lang];
    auto batch = stream.it->next();
    if (!batch) {
      stream.it->reset(stream_seed(plan.seed, 0x22 + lang, ++stream.wraps));
      batch = stream.it->next();
    }

    // mask a random subset of non-special positions, predict the originals
    std::mt19937 mask_rng(static_cast<uint32_t>(stream_seed(plan.seed, 0x33, step)));
    std::bernoulli_distribution pick(plan.mask_rate);
    Batch masked = *batch;
    std::vector<std::pair<int, int>> targets;  // (flat position, original id)
    std::vector<int> maskable;
    std::vector<int> sep_at(masked.size, masked.seq_len);
    if (plan.mask_second_side) {
      for (int r = 0; r < masked.size; ++r) {
        for (int c = 0; c < masked.seq_len; ++c) {
          if (masked.tokens[r * masked.seq_len + c] == kSepToken) {
            sep_at[r] = c;
            break;
          }
        }
      }
    }
    for (int i = 0; i < masked.size * masked.seq_len; ++i) {
      if (!masked.real[i] || masked.tokens[i] < kSpecialTokens) continue;
      if (plan.mask_second_side && i % masked.seq_len <= sep_at[i / masked.seq_len]) continue;
      maskable.push_back(i);
      if (pick(mask_rng)) {
        targets.emplace_back(i, masked.tokens[i]);
        masked.tokens[i] = kMaskToken;
      }
    }
    if (targets.empty() && !maskable.empty()) {
      const int i = maskable[mask_rng() % maskable.size()];
      targets.emplace_back(i, masked.tokens[i]);
      masked.tokens[i] = kMaskToken;
    }
    if (targets.empty()) continue;

    Tensor h = model.encode(masked, Mode::Train);
    Tensor logits = add_vec(matmul(reshape(h, {masked.size * masked.seq_len, d}), mlm_w), mlm_b);
    Tensor logp = log_softmax(logits, 1);
    std::vector<float> onehot(static_cast<size_t>(masked.size) * masked.seq_len * V, 0.0f);
    for (const auto& [pos, original] : targets) {
      onehot[static_cast<size_t>(pos) * V + original] = 1.0f;
    }
    Tensor picked = mul(logp, Tensor::of({masked.size * masked.seq_len, V}, std::move(onehot)));
    Tensor loss = scale(sum(picked), -1.0f / static_cast<float>(targets.size()));

    zero_grads(params);
    backward(loss);
    opt.step(params);
    if (loss_curve) loss_curve->push_back(loss.item());
  }
}

}  // namespace mblm
