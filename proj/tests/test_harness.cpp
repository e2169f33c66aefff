#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "mblm/experiment.hpp"

using namespace mblm;
namespace fs = std::filesystem;

namespace {

const char* kConfigText = R"(
[dataset]
task = pattern-match
classes = 3
side_len = 6
alphabet = 12
supervised = 2
zero_shot = 2
train_per_language = 96
dev_per_language = 24
test_per_language = 24
unlabeled_per_language = 48
seed = 7

[model]
layers = 2
branch_depth = 1
width = 16
heads = 2
variant = mblm

[train]
mode = multikd
epochs = 3
batch_size = 16
lr = 1e-3
pretrain_steps = 40
teacher_layers = 2
teacher_width = 24
teacher_heads = 2
teacher_epochs = 2
efficiency_steps = 4
)";

struct Workspace {
  fs::path root;
  fs::path config_path;
  ExperimentConfig cfg;
};

// One shared workspace with dataset, substrate, and teachers; building it is
// the expensive part, so every test case reuses it.
const Workspace& ws() {
  static Workspace w = [] {
    Workspace out;
    out.root = fs::temp_directory_path() / "mblm_harness_ws";
    fs::remove_all(out.root);
    fs::create_directories(out.root);
    out.cfg = parse_experiment_config(kConfigText);
    out.config_path = out.root / "config.ini";
    std::ofstream(out.config_path) << kConfigText;
    cmd_generate(out.cfg, out.root, false);
    cmd_pretrain(out.cfg, out.root, false);
    cmd_train_teacher(out.cfg, out.root, false);
    return out;
  }();
  return w;
}

std::string file_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("generate is idempotent per seed and refuses to clobber") {
  const fs::path dir = fs::temp_directory_path() / "mblm_gen_test";
  fs::remove_all(dir);
  ExperimentConfig cfg = ws().cfg;

  cmd_generate(cfg, dir, false);
  const std::string first = file_bytes(dataset_file(dir));

  // refusal without --force
  CHECK_THROWS_AS(cmd_generate(cfg, dir, false), ConfigError);

  cmd_generate(cfg, dir, true);
  CHECK(file_bytes(dataset_file(dir)) == first);

  // a different seed produces different bytes
  cfg.dataset.seed = 8;
  cmd_generate(cfg, dir, true);
  CHECK(file_bytes(dataset_file(dir)) != first);

  // config echo in the header parses back to the generating configuration
  cfg.dataset.seed = 7;
  cmd_generate(cfg, dir, true);
  DatasetBundle bundle = read_dataset(dataset_file(dir).string());
  CHECK(bundle.config.seed == cfg.dataset.seed);
  CHECK(bundle.config.classes == cfg.dataset.classes);
  CHECK(bundle.config.side_len == cfg.dataset.side_len);
  CHECK(bundle.config.alphabet == cfg.dataset.alphabet);
  CHECK(bundle.config.supervised == cfg.dataset.supervised);
  CHECK(bundle.config.zero_shot == cfg.dataset.zero_shot);
  CHECK(task_kind_name(bundle.config.kind) == task_kind_name(cfg.dataset.kind));
  fs::remove_all(dir);
}

TEST_CASE("run produces one metrics file per seed with recombinable stats") {
  const auto& w = ws();
  cmd_run(w.cfg, w.root, {1, 2}, std::nullopt, /*force=*/true, /*resume=*/false);

  std::vector<RunMetrics> per_seed;
  for (uint64_t seed : {1, 2}) {
    const fs::path metrics = run_directory(w.root, "multikd-mblm", seed) / "metrics.tsv";
    REQUIRE(fs::exists(metrics));
    per_seed.push_back(read_metrics_file(metrics.string()));
    CHECK(per_seed.back().seed == seed);
    CHECK(per_seed.back().hash == config_hash(w.cfg));
  }

  // the report's mean and std must recombine exactly from the raw files
  cmd_report(w.root);
  const fs::path tsv = w.root / "reports" / "summary_accuracy.tsv";
  REQUIRE(fs::exists(tsv));
  std::ifstream in(tsv);
  std::string line;
  bool checked_any = false;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string method, language, mean_s, std_s, n_s;
    if (!std::getline(row, method, '\t') || method != "multikd-mblm") continue;
    std::getline(row, language, '\t');
    std::getline(row, mean_s, '\t');
    std::getline(row, std_s, '\t');
    std::getline(row, n_s, '\t');
    if (language.rfind("AVG", 0) == 0) continue;
    const double a = per_seed[0].values.at(language).at("accuracy");
    const double b = per_seed[1].values.at(language).at("accuracy");
    const double mean = (a + b) / 2.0;
    const double sd = std::sqrt((a - mean) * (a - mean) + (b - mean) * (b - mean));
    CHECK(std::stod(mean_s) == doctest::Approx(mean).epsilon(1e-9));
    CHECK(std::stod(std_s) == doctest::Approx(sd).epsilon(1e-9));
    checked_any = true;
  }
  CHECK(checked_any);
}

TEST_CASE("re-running with the same seed reproduces metrics bit-identically") {
  const auto& w = ws();
  RunSpec spec{TrainMode::MultiKD, StructureVariant::Mblm, 11, -1, "determinism-check"};
  execute_run(w.cfg, w.root, spec, /*force=*/true, /*resume=*/false);
  const std::string first = file_bytes(run_directory(w.root, spec.name, 11) / "metrics.tsv");
  execute_run(w.cfg, w.root, spec, /*force=*/true, /*resume=*/false);
  CHECK(file_bytes(run_directory(w.root, spec.name, 11) / "metrics.tsv") == first);
}

TEST_CASE("an interrupted run resumes to the same result") {
  const auto& w = ws();
  RunSpec spec{TrainMode::MultiKD, StructureVariant::Mblm, 12, -1, "resume-check"};

  // stop after one epoch, then resume to completion
  RunHooks stop;
  stop.stop_after_epochs = 1;
  RunOutcome partial = execute_run(w.cfg, w.root, spec, /*force=*/true, /*resume=*/false, stop);
  CHECK_FALSE(partial.complete);
  RunOutcome resumed = execute_run(w.cfg, w.root, spec, /*force=*/false, /*resume=*/true);
  CHECK(resumed.complete);
  const std::string via_resume = file_bytes(partial.dir / "metrics.tsv");
  const std::string history_resume = file_bytes(partial.dir / "history.jsonl");

  // uninterrupted reference
  RunOutcome full = execute_run(w.cfg, w.root, spec, /*force=*/true, /*resume=*/false);
  CHECK(file_bytes(full.dir / "metrics.tsv") == via_resume);
  CHECK(file_bytes(full.dir / "history.jsonl") == history_resume);

  // an unfinished run without --resume or --force is refused
  execute_run(w.cfg, w.root, spec, /*force=*/true, /*resume=*/false, stop);
  CHECK_THROWS_AS(execute_run(w.cfg, w.root, spec, false, false), ConfigError);
  execute_run(w.cfg, w.root, spec, /*force=*/false, /*resume=*/true);
}

TEST_CASE("depth sweep at K=0 equals the standard variant run") {
  const auto& w = ws();
  ExperimentConfig cfg = w.cfg;
  cfg.train.mode = TrainMode::MultiTrain;

  cmd_depth_sweep(cfg, w.root, {0, 1}, {21}, /*force=*/true);
  REQUIRE(fs::exists(w.root / "reports" / "depth_sweep.csv"));

  RunSpec standard{TrainMode::MultiTrain, StructureVariant::Standard, 21, -1,
                   "multitrain-standard"};
  execute_run(cfg, w.root, standard, /*force=*/true, /*resume=*/false);

  RunMetrics from_sweep =
      read_metrics_file((run_directory(w.root, "depth-k0", 21) / "metrics.tsv").string());
  RunMetrics from_standard = read_metrics_file(
      (run_directory(w.root, "multitrain-standard", 21) / "metrics.tsv").string());
  REQUIRE(from_sweep.values.size() == from_standard.values.size());
  for (const auto& [language, by_metric] : from_sweep.values) {
    for (const auto& [metric, value] : by_metric) {
      CHECK(value == from_standard.values.at(language).at(metric));
    }
  }

  // the emitted curve covers exactly the requested depths
  std::ifstream csv(w.root / "reports" / "depth_sweep.csv");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "branch_depth,avg_s_mean,avg_s_std,avg_z_mean,avg_z_std,avg_a_mean,avg_a_std");
  std::vector<int> ks;
  while (std::getline(csv, line)) {
    if (!line.empty()) ks.push_back(std::stoi(line.substr(0, line.find(','))));
  }
  CHECK(ks == std::vector<int>{0, 1});
}

TEST_CASE("ablation covers exactly the eight variants with paired inits") {
  const auto& w = ws();
  cmd_ablate(w.cfg, w.root, {1}, /*force=*/false);  // reuses runs where they exist

  const fs::path tsv = w.root / "reports" / "ablation.tsv";
  REQUIRE(fs::exists(tsv));
  std::ifstream in(tsv);
  std::string line;
  std::set<std::string> methods;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    const std::string first = line.substr(0, tab);
    if (first.rfind("multikd-", 0) == 0) methods.insert(first);
  }
  CHECK(methods.size() == 8);

  // paired seeds: the no-detach student starts from the mblm student's state
  auto a = build_run_student(w.cfg, StructureVariant::Mblm, w.root, 1);
  auto b = build_run_student(w.cfg, StructureVariant::NoDetach, w.root, 1);
  auto pa = a.parameters();
  auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor.values() == pb[i].tensor.values());
  }

  // parameter counts are logged and distinct where the structures differ
  std::ifstream tsv2(tsv);
  std::map<std::string, int64_t> counts;
  while (std::getline(tsv2, line)) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.rfind("multikd-", 0) == 0) continue;
    const std::string key = line.substr(0, tab);
    try {
      counts[key] = std::stoll(line.substr(tab + 1));
    } catch (...) {
    }
  }
  CHECK(counts.at("mblm") > counts.at("standard"));
  CHECK(counts.at("mblm") > counts.at("no-mixers-single"));
  CHECK(counts.at("mblm") == counts.at("no-detach"));
}

TEST_CASE("efficiency accounting reports parameter and time ratios") {
  const auto& w = ws();
  cmd_efficiency(w.cfg, w.root, {1, 2}, /*force=*/false);
  const fs::path tsv = w.root / "reports" / "efficiency.tsv";
  REQUIRE(fs::exists(tsv));

  std::ifstream in(tsv);
  std::string line;
  std::map<std::string, std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("model\t", 0) == 0) continue;
    std::istringstream row(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(row, field, '\t')) fields.push_back(field);
    if (!fields.empty()) rows[fields[0]] = fields;
  }
  REQUIRE(rows.count("standard"));
  REQUIRE(rows.count("ens2"));
  REQUIRE(rows.count("mblm"));

  const int64_t std_params = std::stoll(rows["standard"][1]);
  CHECK(std::stoll(rows["ens2"][1]) == 2 * std_params);
  const int64_t mblm_params = std::stoll(rows["mblm"][1]);
  CHECK(mblm_params ==
        analytic_param_count(student_model_config(w.cfg, StructureVariant::Mblm)));
  CHECK(std::stod(rows["mblm"][2]) ==
        doctest::Approx(static_cast<double>(mblm_params) / std_params));
  CHECK(std::stod(rows["mblm"][5]) > 0.0);  // time ratio measured
}

TEST_CASE("cli maps error categories to distinct exit codes") {
  const auto& w = ws();

  // parse failure inside the config file -> config error
  const fs::path bad = w.root / "bad_config.ini";
  std::ofstream(bad) << "[dataset]\nthis_is_not_a_key = 3\n";
  CHECK(run_cli({"generate", "--config", bad.string(), "--out",
                 (w.root / "never").string()}) == 2);

  // missing artifacts -> data error
  CHECK(run_cli({"report", "--out", (w.root / "hollow").string()}) == 3);

  // happy path -> 0
  CHECK(run_cli({"report", "--out", w.root.string()}) == 0);
}

TEST_CASE("cli run command honours seeds and variant overrides") {
  const auto& w = ws();
  CHECK(run_cli({"run", "--config", w.config_path.string(), "--out", w.root.string(), "--seed",
                 "31", "--variant", "standard", "--force"}) == 0);
  CHECK(fs::exists(run_directory(w.root, "multikd-standard", 31) / "metrics.tsv"));
}
