#include "mblm/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

namespace mblm {

namespace fs = std::filesystem;

std::string run_name(TrainMode mode, StructureVariant variant) {
  return train_mode_name(mode) + "-" + variant_name(variant);
}

fs::path dataset_file(const fs::path& out) { return out / "dataset.jsonl"; }
fs::path substrate_file(const fs::path& out) { return out / "substrate.ckpt"; }
fs::path teacher_file(const fs::path& out, int language) {
  return out / "teachers" / ("lang" + std::to_string(language) + ".ckpt");
}
fs::path run_directory(const fs::path& out, const std::string& name, uint64_t seed) {
  return out / "runs" / name / ("seed" + std::to_string(seed));
}

const std::vector<StructureVariant>& ablation_variants() {
  static const std::vector<StructureVariant> variants = {
      StructureVariant::Standard,
      StructureVariant::Mblm,
      StructureVariant::NoInnerMixers,
      StructureVariant::NoMixersSingle,
      StructureVariant::NoMixersAll,
      StructureVariant::NoDetach,
      StructureVariant::BranchesAtTop,
      StructureVariant::BranchesAtTopMultiClassifier,
  };
  return variants;
}

namespace {

DatasetBundle load_bundle(const ExperimentConfig& cfg, const fs::path& out) {
  const fs::path path = dataset_file(out);
  if (!fs::exists(path)) {
    throw DataError("no dataset at " + path.string() + "; run `generate` first");
  }
  DatasetBundle bundle = read_dataset(path.string());
  const TaskConfig& disk = bundle.config;
  const TaskConfig& want = cfg.dataset;
  if (disk.kind != want.kind || disk.classes != want.classes || disk.side_len != want.side_len ||
      disk.alphabet != want.alphabet || disk.supervised != want.supervised ||
      disk.zero_shot != want.zero_shot || disk.train_per_language != want.train_per_language ||
      disk.dev_per_language != want.dev_per_language ||
      disk.test_per_language != want.test_per_language ||
      disk.unlabeled_per_language != want.unlabeled_per_language || disk.seed != want.seed) {
    throw ConfigError("dataset at " + path.string() +
                      " was generated from a different configuration; regenerate it");
  }
  return bundle;
}

}  // namespace

MblmModel build_run_student(const ExperimentConfig& cfg, StructureVariant variant,
                            const fs::path& out, uint64_t seed, int branch_depth_override) {
  const ModelConfig scfg = student_model_config(cfg, variant, branch_depth_override);
  MblmModel base;
  if (cfg.train.use_substrate) {
    const fs::path path = substrate_file(out);
    if (!fs::exists(path)) {
      throw ConfigError("no substrate checkpoint at " + path.string() +
                        "; run `pretrain` first or set use_substrate = off");
    }
    base = load_checkpoint(path.string());
    if (base.cfg.variant != StructureVariant::Standard || base.cfg.layers != scfg.layers ||
        base.cfg.width != scfg.width || base.cfg.heads != scfg.heads ||
        base.cfg.vocab != scfg.vocab || base.cfg.max_seq != scfg.max_seq ||
        base.cfg.classes != scfg.classes || base.cfg.pooler != scfg.pooler) {
      throw ConfigError("substrate checkpoint does not match the model configuration");
    }
  } else {
    ModelConfig bcfg = scfg;
    bcfg.variant = StructureVariant::Standard;
    bcfg.branch_depth = 0;
    std::mt19937 rng(static_cast<uint32_t>(stream_seed(seed, 0xb0)));
    base = MblmModel::create(bcfg, rng);
  }
  MblmModel student = MblmModel::init_from_base(base, scfg);
  std::mt19937 head_rng(static_cast<uint32_t>(stream_seed(seed, 0x6ead)));
  student.reinit_heads(head_rng);
  return student;
}

namespace {

struct RunState {
  int completed_epochs = 0;
  int epochs = 0;
  int best_epoch = -1;
  double best_dev = 0.0;
  std::vector<double> dev_history;
  std::string hash;
};

void write_run_state(const fs::path& path, const RunState& state, const RunSpec& spec) {
  nlohmann::json j{{"completed_epochs", state.completed_epochs},
                   {"epochs", state.epochs},
                   {"best_epoch", state.best_epoch},
                   {"best_dev", state.best_dev},
                   {"dev_history", state.dev_history},
                   {"config_hash", state.hash},
                   {"run", spec.name},
                   {"seed", spec.seed}};
  std::ofstream out(path, std::ios::trunc);
  out << j.dump(2) << "\n";
  if (!out) throw DataError("failed while writing " + path.string());
}

RunState read_run_state(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    RunState state;
    state.completed_epochs = j.at("completed_epochs").get<int>();
    state.epochs = j.at("epochs").get<int>();
    state.best_epoch = j.at("best_epoch").get<int>();
    state.best_dev = j.at("best_dev").get<double>();
    state.dev_history = j.at("dev_history").get<std::vector<double>>();
    state.hash = j.at("config_hash").get<std::string>();
    return state;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + " is malformed: " + e.what());
  }
}

void write_history(const fs::path& path, const std::vector<StepRecord>& history) {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& rec : history) {
    nlohmann::json j{
        {"step", rec.step}, {"language", rec.language}, {"loss", rec.loss}, {"lr", rec.lr}};
    out << j.dump() << "\n";
  }
  if (!out) throw DataError("failed while writing " + path.string());
}

std::vector<StepRecord> read_history(const fs::path& path) {
  std::vector<StepRecord> history;
  std::ifstream in(path);
  if (!in) return history;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    history.push_back({j.at("step").get<int64_t>(), j.at("language").get<int>(),
                       j.at("loss").get<float>(), j.at("lr").get<float>()});
  }
  return history;
}

RunMetrics make_metrics(const ExperimentConfig& cfg, const DatasetBundle& bundle,
                        const RunSpec& spec, int best_epoch, const EvalResult& acc,
                        const EvalResult& mae) {
  RunMetrics m;
  m.run = spec.name;
  m.seed = spec.seed;
  m.hash = config_hash(cfg);
  m.best_epoch = best_epoch;
  for (size_t l = 0; l < bundle.languages.size(); ++l) {
    m.values[bundle.languages[l].id]["accuracy"] = acc.per_language[l];
    m.values[bundle.languages[l].id]["mae"] = mae.per_language[l];
  }
  m.values["AVG(S)"]["accuracy"] = acc.avg_supervised;
  m.values["AVG(Z)"]["accuracy"] = acc.avg_zero_shot;
  m.values["AVG(A)"]["accuracy"] = acc.avg_all;
  m.values["AVG(S)"]["mae"] = mae.avg_supervised;
  m.values["AVG(Z)"]["mae"] = mae.avg_zero_shot;
  m.values["AVG(A)"]["mae"] = mae.avg_all;
  return m;
}

double split_accuracy(const MblmModel& model, const DatasetBundle& data, int language,
                      Split split) {
  const auto& sd = data.split(language, split);
  if (sd.examples.empty()) {
    throw DataError("language " + data.languages[language].id + " has an empty " +
                    split_name(split) + " split");
  }
  NoGradGuard guard;
  BatchIterator it(sd, 64, model.cfg.max_seq, 0, false);
  int64_t correct = 0, total = 0;
  while (auto batch = it.next()) {
    Tensor logits = model.forward(*batch, Mode::Infer);
    const int C = logits.dim(1);
    for (int r = 0; r < batch->size; ++r) {
      const float* row = logits.values().data() + static_cast<int64_t>(r) * C;
      int arg = 0;
      for (int c = 1; c < C; ++c) {
        if (row[c] > row[arg]) arg = c;
      }
      correct += arg == batch->labels[r];
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

std::vector<int> supervised_languages(const ExperimentConfig& cfg, TrainMode mode) {
  if (mode == TrainMode::MonoKD) return {0};
  std::vector<int> langs(cfg.dataset.supervised);
  std::iota(langs.begin(), langs.end(), 0);
  return langs;
}

TrainPlan make_plan(const ExperimentConfig& cfg, const RunSpec& spec) {
  TrainPlan plan;
  plan.mode = spec.mode;
  plan.tau = cfg.train.temperature;
  plan.lr = cfg.train.lr;
  plan.epochs = cfg.train.epochs;
  plan.batch_size = cfg.train.batch_size;
  plan.seed = spec.seed;
  plan.warmup_steps = cfg.train.warmup_steps;
  plan.languages = supervised_languages(cfg, spec.mode);
  return plan;
}

// Loads the teachers a plan needs; the returned pointers index by language.
struct TeacherPack {
  std::vector<MblmModel> store;
  std::vector<const MblmModel*> by_language;
};

TeacherPack load_teachers(const ExperimentConfig& cfg, const fs::path& out,
                          const std::vector<int>& languages, const DatasetBundle& bundle) {
  TeacherPack pack;
  pack.by_language.assign(bundle.languages.size(), nullptr);
  pack.store.reserve(languages.size());
  for (int lang : languages) {
    const fs::path path = teacher_file(out, lang);
    if (!fs::exists(path)) {
      throw ConfigError("missing teacher checkpoint for language " + bundle.languages[lang].id +
                        " at " + path.string() + "; run `train-teacher` first");
    }
    pack.store.push_back(load_checkpoint(path.string()));
    pack.by_language[lang] = &pack.store.back();
  }
  return pack;
}

double mean_of(const std::vector<double>& xs) {
  return xs.empty() ? 0.0 : std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
}

double stddev_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double mu = mean_of(xs);
  double ss = 0;
  for (double x : xs) ss += (x - mu) * (x - mu);
  return std::sqrt(ss / (xs.size() - 1));
}

}  // namespace

int cmd_generate(const ExperimentConfig& cfg, const fs::path& out, bool force) {
  fs::create_directories(out);
  const fs::path path = dataset_file(out);
  if (fs::exists(path) && !force) {
    throw ConfigError("dataset already exists at " + path.string() +
                      "; pass --force to regenerate");
  }
  DatasetBundle bundle = build_splits(cfg.dataset);
  write_dataset(bundle, path.string());
  int64_t n = 0;
  for (const auto& per_lang : bundle.data) {
    for (const auto& split : per_lang) n += split.examples.size();
  }
  std::cout << "generated " << n << " examples across " << bundle.languages.size()
            << " languages -> " << path.string() << "\n";
  return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg, const fs::path& out, bool force) {
  const fs::path path = substrate_file(out);
  if (fs::exists(path) && !force) {
    throw ConfigError("substrate already exists at " + path.string() +
                      "; pass --force to redo pretraining");
  }
  DatasetBundle bundle = load_bundle(cfg, out);

  ModelConfig scfg = student_model_config(cfg, StructureVariant::Standard);
  std::mt19937 rng(static_cast<uint32_t>(stream_seed(cfg.train.pretrain_seed, 0x5eed)));
  MblmModel model = MblmModel::create(scfg, rng);

  PretrainPlan plan;
  plan.steps = cfg.train.pretrain_steps;
  plan.lr = cfg.train.pretrain_lr;
  plan.batch_size = cfg.train.pretrain_batch_size;
  plan.mask_rate = cfg.train.pretrain_mask_rate;
  plan.mask_second_side = cfg.train.pretrain_mask_second_side;
  plan.seed = cfg.train.pretrain_seed;

  std::vector<float> curve;
  pretrain_masked(model, bundle, plan, &curve);
  save_checkpoint(model, path.string());
  const float first = curve.empty() ? 0.0f : curve.front();
  const float last = curve.empty() ? 0.0f : curve.back();
  std::cout << "pretrained substrate for " << plan.steps << " steps (masked-token loss " << first
            << " -> " << last << ") -> " << path.string() << "\n";
  return 0;
}

int cmd_train_teacher(const ExperimentConfig& cfg, const fs::path& out, bool force) {
  DatasetBundle bundle = load_bundle(cfg, out);
  fs::create_directories(out / "teachers");

  std::ostringstream table;
  table << "language\tsplit\tmetric\tvalue\n";
  for (int lang = 0; lang < cfg.dataset.supervised; ++lang) {
    const fs::path path = teacher_file(out, lang);
    if (fs::exists(path) && !force) {
      throw ConfigError("teacher already exists at " + path.string() +
                        "; pass --force to retrain");
    }
    ModelConfig tcfg = teacher_model_config(cfg);
    std::mt19937 rng(static_cast<uint32_t>(stream_seed(cfg.train.teacher_seed, lang)));
    MblmModel teacher = MblmModel::create(tcfg, rng);

    // monolingual masked-token pretraining before task fine-tuning
    if (cfg.train.teacher_pretrain_steps > 0) {
      PretrainPlan pp;
      pp.steps = cfg.train.teacher_pretrain_steps;
      pp.lr = cfg.train.pretrain_lr;
      pp.batch_size = cfg.train.pretrain_batch_size;
      pp.mask_rate = cfg.train.pretrain_mask_rate;
      pp.mask_second_side = cfg.train.pretrain_mask_second_side;
      pp.seed = stream_seed(cfg.train.teacher_seed, lang, 3);
      pp.languages = {lang};
      pretrain_masked(teacher, bundle, pp);
    }

    // several fine-tuning attempts from the shared pretrained state; the
    // dev-best attempt becomes the teacher
    std::vector<std::vector<float>> pretrained;
    for (const auto& p : teacher.parameters()) pretrained.push_back(p.tensor.values());

    double best = -1.0;
    std::vector<std::vector<float>> best_params;
    for (int attempt = 0; attempt < cfg.train.teacher_attempts; ++attempt) {
      auto params = teacher.parameters();
      for (size_t i = 0; i < params.size(); ++i) params[i].tensor.values() = pretrained[i];

      TrainPlan plan;
      plan.mode = TrainMode::MultiTrain;
      plan.lr = cfg.train.teacher_lr;
      plan.epochs = cfg.train.teacher_epochs;
      plan.batch_size = cfg.train.teacher_batch_size;
      plan.seed = stream_seed(cfg.train.teacher_seed, lang, 7 + attempt);
      plan.warmup_steps = cfg.train.warmup_steps;
      plan.languages = {lang};

      Trainer trainer(teacher, bundle, plan, nullptr);
      trainer.run_epochs(0, plan.epochs, [&](int) {
        const double dev = split_accuracy(teacher, bundle, lang, Split::Dev);
        if (dev > best) {
          best = dev;
          best_params.clear();
          for (const auto& p : teacher.parameters()) best_params.push_back(p.tensor.values());
        }
      });
    }
    {
      auto params = teacher.parameters();
      for (size_t i = 0; i < params.size(); ++i) params[i].tensor.values() = best_params[i];
    }

    save_checkpoint(teacher, path.string());
    const double train_acc = split_accuracy(teacher, bundle, lang, Split::Train);
    const double test_acc = split_accuracy(teacher, bundle, lang, Split::Test);
    const std::string id = bundle.languages[lang].id;
    table << id << "\ttrain\taccuracy\t" << train_acc << "\n";
    table << id << "\tdev\taccuracy\t" << best << "\n";
    table << id << "\ttest\taccuracy\t" << test_acc << "\n";
    std::cout << "teacher " << id << ": train " << train_acc << ", dev " << best << ", test "
              << test_acc << " -> " << path.string() << "\n";
  }
  std::ofstream metrics(out / "teachers" / "metrics.tsv", std::ios::trunc);
  metrics << table.str();
  return 0;
}

RunOutcome execute_run(const ExperimentConfig& cfg, const fs::path& out, const RunSpec& spec,
                       bool force, bool resume, const RunHooks& hooks) {
  const fs::path dir = run_directory(out, spec.name, spec.seed);
  const fs::path state_path = dir / "state.json";
  if (fs::exists(state_path)) {
    if (force) {
      fs::remove_all(dir);
    } else if (!resume) {
      throw ConfigError("run directory " + dir.string() +
                        " already exists; pass --resume to continue or --force to redo");
    }
  }
  fs::create_directories(dir);

  DatasetBundle bundle = load_bundle(cfg, out);
  const ModelConfig scfg = student_model_config(cfg, spec.variant, spec.branch_depth_override);
  MblmModel student = build_run_student(cfg, spec.variant, out, spec.seed,
                                        spec.branch_depth_override);

  TrainPlan plan = make_plan(cfg, spec);
  std::optional<TeacherPack> teachers;
  std::optional<TeacherCache> cache;
  if (spec.mode != TrainMode::MultiTrain) {
    teachers.emplace(load_teachers(cfg, out, plan.languages, bundle));
    cache.emplace(TeacherCache::build(teachers->by_language, bundle, plan.languages,
                                      plan.batch_size, scfg.max_seq));
  }
  Trainer trainer(student, bundle, plan, cache ? &*cache : nullptr);

  RunState state;
  state.epochs = plan.epochs;
  state.hash = config_hash(cfg);
  if (resume && fs::exists(state_path)) {
    state = read_run_state(state_path);
    if (state.hash != config_hash(cfg)) {
      throw ConfigError("cannot resume " + dir.string() + " with a different configuration");
    }
    if (state.completed_epochs > 0) {
      restore_parameters(student, (dir / "last.ckpt").string());
      load_adam_state(trainer.optimizer(), trainer.params(), (dir / "last.adam").string());
      trainer.history() = read_history(dir / "history.jsonl");
    }
  } else {
    std::ofstream echo(dir / "config.ini", std::ios::trunc);
    echo << "# run = " << spec.name << ", seed = " << spec.seed
         << ", config_hash = " << config_hash(cfg) << "\n";
    echo << cfg.canonical();
  }

  const bool lower_is_better = cfg.train.metric == Metric::Mae;
  const int stop_at = hooks.stop_after_epochs >= 0
                          ? std::min(plan.epochs, hooks.stop_after_epochs)
                          : plan.epochs;

  trainer.run_epochs(state.completed_epochs, stop_at, [&](int epoch) {
    const EvalResult dev = evaluate(student, bundle, Split::Dev, cfg.train.metric);
    state.dev_history.push_back(dev.avg_all);
    const bool better = state.best_epoch < 0 || (lower_is_better ? dev.avg_all < state.best_dev
                                                                 : dev.avg_all > state.best_dev);
    if (better) {
      state.best_epoch = epoch;
      state.best_dev = dev.avg_all;
      save_checkpoint(student, (dir / "best.ckpt").string());
    }
    save_checkpoint(student, (dir / "last.ckpt").string());
    save_adam_state(trainer.optimizer(), trainer.params(), (dir / "last.adam").string());
    write_history(dir / "history.jsonl", trainer.history());
    state.completed_epochs = epoch + 1;
    write_run_state(state_path, state, spec);
  });

  RunOutcome outcome;
  outcome.dir = dir;
  outcome.best_epoch = state.best_epoch;
  outcome.best_dev = state.best_dev;
  if (state.completed_epochs == plan.epochs) {
    restore_parameters(student, (dir / "best.ckpt").string());
    outcome.test_accuracy = evaluate(student, bundle, Split::Test, Metric::Accuracy);
    outcome.test_mae = evaluate(student, bundle, Split::Test, Metric::Mae);
    write_metrics_file((dir / "metrics.tsv").string(),
                       make_metrics(cfg, bundle, spec, state.best_epoch, outcome.test_accuracy,
                                    outcome.test_mae));
    outcome.complete = true;
  }
  return outcome;
}

int cmd_run(const ExperimentConfig& cfg, const fs::path& out, const std::vector<uint64_t>& seeds,
            std::optional<StructureVariant> variant_override, bool force, bool resume) {
  const StructureVariant variant = variant_override.value_or(cfg.model.variant);
  const std::string name = run_name(cfg.train.mode, variant);
  std::vector<double> avg_s, avg_z, avg_a;
  for (uint64_t seed : seeds) {
    RunSpec spec{cfg.train.mode, variant, seed, -1, name};
    RunOutcome res = execute_run(cfg, out, spec, force, resume);
    if (!res.complete) {
      std::cout << name << " seed " << seed << ": stopped after partial training\n";
      continue;
    }
    std::cout << name << " seed " << seed << ": best epoch " << res.best_epoch << ", AVG(S) "
              << res.test_accuracy.avg_supervised << ", AVG(Z) " << res.test_accuracy.avg_zero_shot
              << ", AVG(A) " << res.test_accuracy.avg_all << "\n";
    avg_s.push_back(res.test_accuracy.avg_supervised);
    avg_z.push_back(res.test_accuracy.avg_zero_shot);
    avg_a.push_back(res.test_accuracy.avg_all);
  }
  if (avg_s.size() > 1) {
    std::cout << name << " over " << avg_s.size() << " seeds: AVG(S) " << mean_of(avg_s) << "+-"
              << stddev_of(avg_s) << ", AVG(Z) " << mean_of(avg_z) << "+-" << stddev_of(avg_z)
              << ", AVG(A) " << mean_of(avg_a) << "+-" << stddev_of(avg_a) << "\n";
  }
  return 0;
}

int cmd_depth_sweep(const ExperimentConfig& cfg, const fs::path& out,
                    const std::vector<int>& depths, const std::vector<uint64_t>& seeds,
                    bool force) {
  for (int k : depths) {
    if (k < 0 || k > cfg.model.layers) {
      throw ConfigError("branch depth " + std::to_string(k) + " outside [0, L=" +
                        std::to_string(cfg.model.layers) + "]");
    }
  }
  // the sweep trains the branched model directly on hard labels
  std::ostringstream csv;
  csv << "branch_depth,avg_s_mean,avg_s_std,avg_z_mean,avg_z_std,avg_a_mean,avg_a_std\n";
  for (int k : depths) {
    const StructureVariant variant = k == 0 ? StructureVariant::Standard : StructureVariant::Mblm;
    const std::string name = "depth-k" + std::to_string(k);
    std::vector<double> s, z, a;
    for (uint64_t seed : seeds) {
      RunSpec spec{TrainMode::MultiTrain, variant, seed, k, name};
      RunOutcome res = execute_run(cfg, out, spec, force, /*resume=*/false);
      s.push_back(res.test_accuracy.avg_supervised);
      z.push_back(res.test_accuracy.avg_zero_shot);
      a.push_back(res.test_accuracy.avg_all);
    }
    csv << k << "," << mean_of(s) << "," << stddev_of(s) << "," << mean_of(z) << ","
        << stddev_of(z) << "," << mean_of(a) << "," << stddev_of(a) << "\n";
    std::cout << "K=" << k << ": AVG(S) " << mean_of(s) << ", AVG(Z) " << mean_of(z) << "\n";
  }
  fs::create_directories(out / "reports");
  std::ofstream file(out / "reports" / "depth_sweep.csv", std::ios::trunc);
  file << csv.str();
  std::cout << "wrote " << (out / "reports" / "depth_sweep.csv").string() << "\n";
  return 0;
}

int cmd_ablate(const ExperimentConfig& cfg, const fs::path& out,
               const std::vector<uint64_t>& seeds, bool force) {
  std::vector<std::string> language_ids;
  {
    DatasetBundle bundle = load_bundle(cfg, out);
    for (const auto& l : bundle.languages) language_ids.push_back(l.id);
  }
  ReportTable table(language_ids, cfg.dataset.supervised);
  std::ostringstream params_log;
  params_log << "variant\tparameters\n";
  for (StructureVariant variant : ablation_variants()) {
    const std::string name = run_name(TrainMode::MultiKD, variant);
    for (uint64_t seed : seeds) {
      RunSpec spec{TrainMode::MultiKD, variant, seed, -1, name};
      const fs::path metrics_path = run_directory(out, name, seed) / "metrics.tsv";
      if (!fs::exists(metrics_path) || force) {
        execute_run(cfg, out, spec, force, /*resume=*/false);
      }
      RunMetrics m = read_metrics_file(metrics_path.string());
      for (const auto& id : language_ids) table.add(name, id, m.values.at(id).at("accuracy"));
    }
    params_log << variant_name(variant) << "\t"
               << analytic_param_count(student_model_config(cfg, variant)) << "\n";
  }
  fs::create_directories(out / "reports");
  std::ofstream tsv(out / "reports" / "ablation.tsv", std::ios::trunc);
  tsv << table.render_tsv("accuracy", {config_hash(cfg)});
  tsv << "\n" << params_log.str();
  std::ofstream txt(out / "reports" / "ablation.txt", std::ios::trunc);
  const std::string rendered = table.render_text("accuracy");
  txt << rendered;
  std::cout << rendered;
  return 0;
}

int cmd_efficiency(const ExperimentConfig& cfg, const fs::path& out,
                   const std::vector<uint64_t>& seeds, bool force) {
  if (seeds.size() < 2) throw ConfigError("efficiency accounting needs at least two seeds");
  DatasetBundle bundle = load_bundle(cfg, out);

  // accuracy aggregates come from (or create) the distillation runs
  auto ensure_run = [&](StructureVariant variant, uint64_t seed) {
    const std::string name = run_name(TrainMode::MultiKD, variant);
    const fs::path metrics_path = run_directory(out, name, seed) / "metrics.tsv";
    if (!fs::exists(metrics_path) || force) {
      execute_run(cfg, out, {TrainMode::MultiKD, variant, seed, -1, name}, force, false);
    }
    return read_metrics_file(metrics_path.string());
  };

  std::vector<double> std_s, std_z, std_a, mblm_s, mblm_z, mblm_a;
  for (uint64_t seed : seeds) {
    RunMetrics ms = ensure_run(StructureVariant::Standard, seed);
    std_s.push_back(ms.values.at("AVG(S)").at("accuracy"));
    std_z.push_back(ms.values.at("AVG(Z)").at("accuracy"));
    std_a.push_back(ms.values.at("AVG(A)").at("accuracy"));
    RunMetrics mm = ensure_run(StructureVariant::Mblm, seed);
    mblm_s.push_back(mm.values.at("AVG(S)").at("accuracy"));
    mblm_z.push_back(mm.values.at("AVG(Z)").at("accuracy"));
    mblm_a.push_back(mm.values.at("AVG(A)").at("accuracy"));
  }

  // two-model ensemble over the first two seeds
  const std::string std_name = run_name(TrainMode::MultiKD, StructureVariant::Standard);
  MblmModel m0 =
      load_checkpoint((run_directory(out, std_name, seeds[0]) / "best.ckpt").string());
  MblmModel m1 =
      load_checkpoint((run_directory(out, std_name, seeds[1]) / "best.ckpt").string());
  EvalResult ens = evaluate_ensemble({&m0, &m1}, bundle, Split::Test, Metric::Accuracy);

  // parameter accounting
  const int64_t std_params = analytic_param_count(student_model_config(cfg, StructureVariant::Standard));
  const int64_t mblm_params = analytic_param_count(student_model_config(cfg, StructureVariant::Mblm));
  const int64_t ens_params = 2 * std_params;

  // wall-clock per optimizer step, identical data and plan
  auto time_variant = [&](StructureVariant variant) {
    const uint64_t seed = seeds[0];
    MblmModel student = build_run_student(cfg, variant, out, seed);
    TrainPlan plan = make_plan(cfg, {TrainMode::MultiKD, variant, seed, -1, ""});
    TeacherPack teachers = load_teachers(cfg, out, plan.languages, bundle);
    TeacherCache cache = TeacherCache::build(teachers.by_language, bundle, plan.languages,
                                             plan.batch_size, student.cfg.max_seq);
    Trainer trainer(student, bundle, plan, &cache);
    const int steps = std::min(cfg.train.efficiency_steps, trainer.steps_per_epoch() - 3);
    return trainer.time_steps(/*warmup=*/3, std::max(1, steps));
  };
  const auto std_times = time_variant(StructureVariant::Standard);
  const auto mblm_times = time_variant(StructureVariant::Mblm);
  const double std_ms = mean_of(std_times) * 1e3;
  const double mblm_ms = mean_of(mblm_times) * 1e3;
  const double time_ratio = mblm_ms / std_ms;

  std::ostringstream tsv;
  tsv << "# config_hash=" << config_hash(cfg) << "\n";
  tsv << "model\tparams\tparams_ratio\tstep_ms_mean\tstep_ms_std\ttime_ratio\tavg_s\tavg_z\tavg_a\n";
  tsv << "standard\t" << std_params << "\t1\t" << std_ms << "\t" << stddev_of(std_times) * 1e3
      << "\t1\t" << mean_of(std_s) << "\t" << mean_of(std_z) << "\t" << mean_of(std_a) << "\n";
  tsv << "ens2\t" << ens_params << "\t2\t\t\t2\t" << ens.avg_supervised << "\t" << ens.avg_zero_shot
      << "\t" << ens.avg_all << "\n";
  tsv << "mblm\t" << mblm_params << "\t"
      << static_cast<double>(mblm_params) / static_cast<double>(std_params) << "\t" << mblm_ms
      << "\t" << stddev_of(mblm_times) * 1e3 << "\t" << time_ratio << "\t" << mean_of(mblm_s)
      << "\t" << mean_of(mblm_z) << "\t" << mean_of(mblm_a) << "\n";

  fs::create_directories(out / "reports");
  std::ofstream file(out / "reports" / "efficiency.tsv", std::ios::trunc);
  file << tsv.str();
  std::cout << tsv.str();
  std::cout << "params ratio "
            << static_cast<double>(mblm_params) / static_cast<double>(std_params)
            << ", step time ratio " << time_ratio << "\n";
  return 0;
}

int cmd_report(const fs::path& out) {
  const fs::path runs = out / "runs";
  if (!fs::exists(runs)) throw DataError("no runs directory under " + out.string());

  std::vector<RunMetrics> all;
  std::vector<fs::path> run_dirs;
  for (const auto& entry : fs::directory_iterator(runs)) run_dirs.push_back(entry.path());
  std::sort(run_dirs.begin(), run_dirs.end());
  for (const auto& run_dir : run_dirs) {
    if (!fs::is_directory(run_dir)) continue;
    std::vector<fs::path> seed_dirs;
    for (const auto& seed_dir : fs::directory_iterator(run_dir)) seed_dirs.push_back(seed_dir.path());
    std::sort(seed_dirs.begin(), seed_dirs.end());
    for (const auto& seed_dir : seed_dirs) {
      const fs::path metrics = seed_dir / "metrics.tsv";
      if (fs::exists(metrics)) all.push_back(read_metrics_file(metrics.string()));
    }
  }
  if (all.empty()) throw DataError("no completed runs found under " + runs.string());

  // language columns: everything that is not an aggregate, supervised first
  std::vector<std::string> languages;
  for (const auto& [language, _] : all.front().values) {
    if (language.rfind("AVG", 0) != 0) languages.push_back(language);
  }
  std::sort(languages.begin(), languages.end(), [](const std::string& a, const std::string& b) {
    const bool sa = a.rfind("sup", 0) == 0, sb = b.rfind("sup", 0) == 0;
    if (sa != sb) return sa;
    return a < b;
  });
  int supervised = 0;
  for (const auto& l : languages) supervised += l.rfind("sup", 0) == 0;

  std::vector<std::string> hashes;
  fs::create_directories(out / "reports");
  for (const std::string metric : {"accuracy", "mae"}) {
    ReportTable table(languages, supervised);
    for (const auto& m : all) {
      for (const auto& l : languages) {
        auto lit = m.values.find(l);
        if (lit == m.values.end()) continue;
        auto vit = lit->second.find(metric);
        if (vit != lit->second.end()) table.add(m.run, l, vit->second);
      }
      if (metric == "accuracy" &&
          std::find(hashes.begin(), hashes.end(), m.hash) == hashes.end()) {
        hashes.push_back(m.hash);
      }
    }
    std::ofstream tsv(out / "reports" / ("summary_" + metric + ".tsv"), std::ios::trunc);
    tsv << table.render_tsv(metric, hashes);
    std::ofstream txt(out / "reports" / ("summary_" + metric + ".txt"), std::ios::trunc);
    const std::string rendered = table.render_text(metric);
    txt << rendered;
    if (metric == "accuracy") std::cout << rendered;
  }
  std::cout << "wrote " << (out / "reports").string() << "/summary_{accuracy,mae}.{tsv,txt}\n";
  return 0;
}

namespace {

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> seeds;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (part.empty()) continue;
    try {
      seeds.push_back(std::stoull(part));
    } catch (const std::exception&) {
      throw ConfigError("bad seed value '" + part + "'");
    }
  }
  if (seeds.empty()) throw ConfigError("empty seed list");
  return seeds;
}

std::vector<int> parse_depth_list(const std::string& text) {
  std::vector<int> depths;
  std::istringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    if (part.empty()) continue;
    try {
      depths.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw ConfigError("bad depth value '" + part + "'");
    }
  }
  if (depths.empty()) throw ConfigError("empty depth list");
  return depths;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"multi-branch multilingual model experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "experiments";
  std::string seeds_text;
  uint64_t single_seed = 0;
  bool has_single_seed = false;
  std::string variant_text;
  std::string depths_text = "0,1,2";
  bool force = false;
  bool resume = false;

  auto add_common = [&](CLI::App* cmd, bool needs_config) {
    if (needs_config) {
      cmd->add_option("--config", config_path, "experiment configuration file")->required();
    }
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_flag("--force", force, "overwrite existing outputs");
    return cmd;
  };
  auto add_seeds = [&](CLI::App* cmd) {
    cmd->add_option("--seeds", seeds_text, "comma-separated seed list");
    cmd->add_option_function<uint64_t>(
        "--seed",
        [&](const uint64_t& v) {
          single_seed = v;
          has_single_seed = true;
        },
        "single seed");
  };

  auto* generate = add_common(app.add_subcommand("generate", "build the synthetic dataset"), true);
  auto* pretrain =
      add_common(app.add_subcommand("pretrain", "masked-token pretraining of the substrate"), true);
  auto* teacher = add_common(
      app.add_subcommand("train-teacher", "fine-tune one monolingual teacher per language"), true);
  auto* run = add_common(app.add_subcommand("run", "train and evaluate the configured plan"), true);
  add_seeds(run);
  run->add_option("--variant", variant_text, "student structure variant");
  run->add_flag("--resume", resume, "continue an interrupted run");
  auto* sweep =
      add_common(app.add_subcommand("depth-sweep", "train at several branch depths"), true);
  add_seeds(sweep);
  sweep->add_option("--depths", depths_text, "comma-separated branch depths");
  auto* ablate = add_common(
      app.add_subcommand("ablate", "run every structure variant in the distillation setting"),
      true);
  add_seeds(ablate);
  auto* efficiency = add_common(
      app.add_subcommand("efficiency", "parameter and step-time accounting"), true);
  add_seeds(efficiency);
  auto* report = app.add_subcommand("report", "aggregate run metrics into tables");
  report->add_option("--out", out_dir, "output directory");

  std::vector<std::string> argv_like = args;
  argv_like.insert(argv_like.begin(), "mblm");
  std::vector<char*> argv;
  argv.reserve(argv_like.size());
  for (auto& a : argv_like) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
    if (!seeds_text.empty()) seeds = parse_seed_list(seeds_text);
    if (has_single_seed) seeds = {single_seed};

    const fs::path out(out_dir);
    if (report->parsed()) return cmd_report(out);

    const ExperimentConfig cfg = load_experiment_config(config_path);
    if (generate->parsed()) return cmd_generate(cfg, out, force);
    if (pretrain->parsed()) return cmd_pretrain(cfg, out, force);
    if (teacher->parsed()) return cmd_train_teacher(cfg, out, force);
    if (run->parsed()) {
      std::optional<StructureVariant> variant;
      if (!variant_text.empty()) variant = parse_variant(variant_text);
      return cmd_run(cfg, out, seeds, variant, force, resume);
    }
    if (sweep->parsed()) return cmd_depth_sweep(cfg, out, parse_depth_list(depths_text), seeds, force);
    if (ablate->parsed()) return cmd_ablate(cfg, out, seeds, force);
    if (efficiency->parsed()) return cmd_efficiency(cfg, out, seeds, force);
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const ContractError& e) {
    std::cerr << "contract error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace mblm
