#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mblm/data.hpp"
#include "mblm/model.hpp"

namespace mblm {

enum class TrainMode { MultiKD, MonoKD, MultiTrain };
TrainMode parse_train_mode(const std::string& name);
std::string train_mode_name(TrainMode mode);

struct TrainPlan {
  TrainMode mode = TrainMode::MultiKD;
  float tau = 8.0f;
  float lr = 1e-3f;
  int epochs = 5;
  int batch_size = 32;
  uint64_t seed = 1;
  int warmup_steps = 0;
  std::vector<int> languages;  // supervised language indices; empty = all

  void validate() const;
};

struct StepRecord {
  int64_t step = 0;
  int language = 0;
  float loss = 0.0f;
  float lr = 0.0f;
};

// Temperature-softened class probabilities.
Tensor soften(const Tensor& logits, float tau);

// Cross-entropy between softened teacher and student distributions; the
// teacher side never receives gradients. Gradient w.r.t. student logits is
// (p_student - p_teacher) / (N * tau).
Tensor kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, float tau);

// Frozen teacher logits precomputed per training example; batches are served
// by example id, so results are independent of batch composition.
class TeacherCache {
 public:
  static TeacherCache build(const std::vector<const MblmModel*>& teachers_by_language,
                            const DatasetBundle& data, const std::vector<int>& languages,
                            int batch_size, int pad_to);
  Tensor batch_logits(const Batch& batch) const;
  int classes() const { return classes_; }

 private:
  int classes_ = 0;
  std::vector<std::vector<float>> rows_;  // [language] -> example-major logits
};

// Uniform per-iteration language choice, reseeded per epoch so training can
// resume at epoch granularity without serializing generator state.
class LanguageSampler {
 public:
  LanguageSampler(std::vector<int> languages, uint64_t seed, int epoch);
  int next();

 private:
  std::vector<int> languages_;
  std::mt19937 rng_;
};

uint64_t stream_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0);

// The sampling loop shared by distillation and hard-label fine-tuning:
// pick a language, pick its next batch, take one optimizer step.
class Trainer {
 public:
  Trainer(MblmModel& student, const DatasetBundle& data, TrainPlan plan,
          const TeacherCache* teachers);

  void run_epoch(int epoch);
  void run_epochs(int start_epoch, int end_epoch,
                  const std::function<void(int)>& on_epoch_end = {});
  // Wall-clock seconds for `count` optimizer steps after `warmup` unrecorded
  // ones; used by the efficiency accounting.
  std::vector<double> time_steps(int warmup, int count);


  int steps_per_epoch() const { return steps_per_epoch_; }
  const std::vector<StepRecord>& history() const { return history_; }
  std::vector<StepRecord>& history() { return history_; }
  Adam& optimizer() { return opt_; }
  std::vector<NamedParam>& params() { return params_; }
  const TrainPlan& plan() const { return plan_; }

 private:
  void run_steps_internal(int epoch, int max_steps, bool record,
                          std::vector<double>* step_seconds);

  MblmModel& student_;
  const DatasetBundle& data_;
  TrainPlan plan_;
  const TeacherCache* teachers_;
  std::vector<NamedParam> params_;
  Adam opt_;
  std::vector<StepRecord> history_;
  int steps_per_epoch_ = 0;
  std::mt19937 dropout_rng_;
};

// Convenience entry points for the three training procedures.
std::vector<StepRecord> multikd_train(MblmModel& student,
                                      const std::vector<const MblmModel*>& teachers_by_language,
                                      const DatasetBundle& data, const TrainPlan& plan);
std::vector<StepRecord> monokd_train(MblmModel& student, const MblmModel& teacher,
                                     const DatasetBundle& data, const TrainPlan& plan);
std::vector<StepRecord> fine_tune(MblmModel& model, const DatasetBundle& data,
                                  const TrainPlan& plan);

enum class Metric { Accuracy, Mae };
Metric parse_metric(const std::string& name);
std::string metric_name(Metric metric);

struct EvalResult {
  std::vector<double> per_language;
  double avg_supervised = 0.0;
  double avg_zero_shot = 0.0;
  double avg_all = 0.0;
};

using LogitsFn = std::function<Tensor(const Batch&)>;

EvalResult evaluate_with(const LogitsFn& logits_fn, const DatasetBundle& data, Split split,
                         Metric metric, int pad_to);
EvalResult evaluate(const MblmModel& model, const DatasetBundle& data, Split split, Metric metric);
EvalResult evaluate_ensemble(const std::vector<const MblmModel*>& models,
                             const DatasetBundle& data, Split split, Metric metric);

// Masked-token prediction over the unlabeled pools of every language; gives
// the shared encoder a cross-lingual substrate before any task training.
struct PretrainPlan {
  int steps = 2000;
  float lr = 1e-3f;
  int batch_size = 32;
  float mask_rate = 0.15f;
  uint64_t seed = 101;
  bool mask_second_side = false;  // restrict masking to the second sequence
  std::vector<int> languages;     // empty = all languages
};

void pretrain_masked(MblmModel& model, const DatasetBundle& data, const PretrainPlan& plan,
                     std::vector<float>* loss_curve = nullptr);

}  // namespace mblm
