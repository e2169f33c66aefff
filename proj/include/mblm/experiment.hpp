#pragma once

#include <filesystem>
#include <optional>

#include "mblm/checkpoint.hpp"
#include "mblm/config.hpp"
#include "mblm/distill.hpp"
#include "mblm/report.hpp"

namespace mblm {

// One training run: a procedure, a student structure, and a seed.
struct RunSpec {
  TrainMode mode = TrainMode::MultiKD;
  StructureVariant variant = StructureVariant::Standard;
  uint64_t seed = 1;
  int branch_depth_override = -1;
  std::string name;  // run directory name under out/runs/
};

std::string run_name(TrainMode mode, StructureVariant variant);

// Test hook: stop a run after this many completed epochs, leaving resumable
// state behind.
struct RunHooks {
  int stop_after_epochs = -1;
};

struct RunOutcome {
  bool complete = false;
  int best_epoch = -1;
  double best_dev = 0.0;
  EvalResult test_accuracy;
  EvalResult test_mae;
  std::filesystem::path dir;
};

// Directory layout under the output root.
std::filesystem::path dataset_file(const std::filesystem::path& out);
std::filesystem::path substrate_file(const std::filesystem::path& out);
std::filesystem::path teacher_file(const std::filesystem::path& out, int language);
std::filesystem::path run_directory(const std::filesystem::path& out, const std::string& name,
                                    uint64_t seed);

// Builds a run's student exactly as execute_run does: substrate (or seeded
// random) base, branch replication, fresh head per seed.
MblmModel build_run_student(const ExperimentConfig& cfg, StructureVariant variant,
                            const std::filesystem::path& out, uint64_t seed,
                            int branch_depth_override = -1);

int cmd_generate(const ExperimentConfig& cfg, const std::filesystem::path& out, bool force);
int cmd_pretrain(const ExperimentConfig& cfg, const std::filesystem::path& out, bool force);
int cmd_train_teacher(const ExperimentConfig& cfg, const std::filesystem::path& out, bool force);

RunOutcome execute_run(const ExperimentConfig& cfg, const std::filesystem::path& out,
                       const RunSpec& spec, bool force, bool resume, const RunHooks& hooks = {});

int cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& out,
            const std::vector<uint64_t>& seeds, std::optional<StructureVariant> variant_override,
            bool force, bool resume);
int cmd_depth_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out,
                    const std::vector<int>& depths, const std::vector<uint64_t>& seeds,
                    bool force);
int cmd_ablate(const ExperimentConfig& cfg, const std::filesystem::path& out,
               const std::vector<uint64_t>& seeds, bool force);
int cmd_efficiency(const ExperimentConfig& cfg, const std::filesystem::path& out,
                   const std::vector<uint64_t>& seeds, bool force);
int cmd_report(const std::filesystem::path& out);

// The ablation suite's fixed row order.
const std::vector<StructureVariant>& ablation_variants();

// Full command-line entry point; returns the process exit code.
// args excludes the program name.
int run_cli(const std::vector<std::string>& args);

}  // namespace mblm
