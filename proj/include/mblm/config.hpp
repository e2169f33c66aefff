#pragma once

#include <map>
#include <string>

#include "mblm/data.hpp"
#include "mblm/distill.hpp"
#include "mblm/model.hpp"

namespace mblm {

// Flat key-value configuration with [dataset] / [model] / [train] sections.
using IniSections = std::map<std::string, std::map<std::string, std::string>>;

IniSections parse_ini(const std::string& text);

struct ExperimentConfig {
  TaskConfig dataset;

  struct ModelSection {
    int layers = 4;
    int branch_depth = 2;
    int width = 32;
    int heads = 4;
    StructureVariant variant = StructureVariant::Standard;
    bool pooler = false;
    float dropout = 0.0f;
  } model;

  struct TrainSection {
    TrainMode mode = TrainMode::MultiKD;
    float temperature = 8.0f;
    float lr = 1e-3f;
    int epochs = 6;
    int batch_size = 32;
    int warmup_steps = 0;
    Metric metric = Metric::Accuracy;
    bool use_substrate = true;
    int pretrain_steps = 2000;
    float pretrain_lr = 1e-3f;
    int pretrain_batch_size = 32;
    float pretrain_mask_rate = 0.15f;
    bool pretrain_mask_second_side = false;
    uint64_t pretrain_seed = 101;
    int teacher_pretrain_steps = 800;
    float teacher_dropout = 0.1f;
    int teacher_layers = 4;
    int teacher_width = 64;
    int teacher_heads = 4;
    int teacher_epochs = 8;
    int teacher_attempts = 3;
    float teacher_lr = 1e-3f;
    int teacher_batch_size = 32;
    uint64_t teacher_seed = 202;
    int efficiency_steps = 30;
  } train;

  void validate() const;
  // Resolved sorted key=value rendering; the config hash is derived from it.
  std::string canonical() const;
};

ExperimentConfig config_from_sections(const IniSections& sections);
ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config(const std::string& text);

std::string config_hash(const ExperimentConfig& cfg);

ModelConfig student_model_config(const ExperimentConfig& cfg, StructureVariant variant,
                                 int branch_depth_override = -1);
ModelConfig teacher_model_config(const ExperimentConfig& cfg);

}  // namespace mblm
