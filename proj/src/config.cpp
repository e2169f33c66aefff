#include "mblm/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace mblm {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "on" || value == "true" || value == "1" || value == "yes") return true;
  if (value == "off" || value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("key " + key + " expects on/off, got '" + value + "'");
}

int parse_int(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const int v = std::stoi(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " expects an integer, got '" + value + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const uint64_t v = std::stoull(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " expects a non-negative integer, got '" + value + "'");
  }
}

float parse_float(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    const float v = std::stof(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " expects a number, got '" + value + "'");
  }
}

// Reads one section with typo detection: every provided key must be consumed.
class SectionReader {
 public:
  SectionReader(const IniSections& sections, const std::string& name) : name_(name) {
    auto it = sections.find(name);
    if (it != sections.end()) entries_ = it->second;
  }

  std::string take(const std::string& key, const std::string& fallback) {
    auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    seen_.insert(key);
    return it->second;
  }

  void finish() const {
    for (const auto& [key, value] : entries_) {
      if (!seen_.count(key)) {
        throw ConfigError("unknown key '" + key + "' in section [" + name_ + "]");
      }
    }
  }

 private:
  std::string name_;
  std::map<std::string, std::string> entries_;
  std::set<std::string> seen_;
};

std::string fmt_float(float v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

}  // namespace

IniSections parse_ini(const std::string& text) {
  IniSections sections;
  std::istringstream in(text);
  std::string line;
  std::string current;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto comment = line.find_first_of("#;");
    if (comment != std::string::npos) line.erase(comment);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      }
      current = trim(line.substr(1, line.size() - 2));
      if (current.empty()) {
        throw ConfigError("line " + std::to_string(line_no) + ": empty section name");
      }
      sections[current];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    }
    if (current.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": key outside any section");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    }
    sections[current][key] = value;
  }
  return sections;
}

ExperimentConfig config_from_sections(const IniSections& sections) {
  for (const auto& [name, _] : sections) {
    if (name != "dataset" && name != "model" && name != "train") {
      throw ConfigError("unknown section [" + name + "]");
    }
  }
  ExperimentConfig cfg;

  SectionReader ds(sections, "dataset");
  cfg.dataset.kind = parse_task_kind(ds.take("task", task_kind_name(cfg.dataset.kind)));
  cfg.dataset.classes = parse_int("classes", ds.take("classes", std::to_string(cfg.dataset.classes)));
  cfg.dataset.side_len =
      parse_int("side_len", ds.take("side_len", std::to_string(cfg.dataset.side_len)));
  cfg.dataset.alphabet =
      parse_int("alphabet", ds.take("alphabet", std::to_string(cfg.dataset.alphabet)));
  cfg.dataset.supervised =
      parse_int("supervised", ds.take("supervised", std::to_string(cfg.dataset.supervised)));
  cfg.dataset.zero_shot =
      parse_int("zero_shot", ds.take("zero_shot", std::to_string(cfg.dataset.zero_shot)));
  cfg.dataset.train_per_language = parse_int(
      "train_per_language",
      ds.take("train_per_language", std::to_string(cfg.dataset.train_per_language)));
  cfg.dataset.dev_per_language = parse_int(
      "dev_per_language", ds.take("dev_per_language", std::to_string(cfg.dataset.dev_per_language)));
  cfg.dataset.test_per_language = parse_int(
      "test_per_language",
      ds.take("test_per_language", std::to_string(cfg.dataset.test_per_language)));
  cfg.dataset.unlabeled_per_language = parse_int(
      "unlabeled_per_language",
      ds.take("unlabeled_per_language", std::to_string(cfg.dataset.unlabeled_per_language)));
  cfg.dataset.seed = parse_u64("seed", ds.take("seed", std::to_string(cfg.dataset.seed)));
  ds.finish();

  SectionReader md(sections, "model");
  cfg.model.layers = parse_int("layers", md.take("layers", std::to_string(cfg.model.layers)));
  cfg.model.branch_depth =
      parse_int("branch_depth", md.take("branch_depth", std::to_string(cfg.model.branch_depth)));
  cfg.model.width = parse_int("width", md.take("width", std::to_string(cfg.model.width)));
  cfg.model.heads = parse_int("heads", md.take("heads", std::to_string(cfg.model.heads)));
  cfg.model.variant = parse_variant(md.take("variant", variant_name(cfg.model.variant)));
  cfg.model.pooler = parse_bool("pooler", md.take("pooler", cfg.model.pooler ? "on" : "off"));
  cfg.model.dropout = parse_float("dropout", md.take("dropout", fmt_float(cfg.model.dropout)));
  md.finish();

  SectionReader tr(sections, "train");
  cfg.train.mode = parse_train_mode(tr.take("mode", train_mode_name(cfg.train.mode)));
  cfg.train.temperature =
      parse_float("temperature", tr.take("temperature", fmt_float(cfg.train.temperature)));
  cfg.train.lr = parse_float("lr", tr.take("lr", fmt_float(cfg.train.lr)));
  cfg.train.epochs = parse_int("epochs", tr.take("epochs", std::to_string(cfg.train.epochs)));
  cfg.train.batch_size =
      parse_int("batch_size", tr.take("batch_size", std::to_string(cfg.train.batch_size)));
  cfg.train.warmup_steps =
      parse_int("warmup_steps", tr.take("warmup_steps", std::to_string(cfg.train.warmup_steps)));
  cfg.train.metric = parse_metric(tr.take("metric", metric_name(cfg.train.metric)));
  cfg.train.use_substrate =
      parse_bool("use_substrate", tr.take("use_substrate", cfg.train.use_substrate ? "on" : "off"));
  cfg.train.pretrain_steps = parse_int(
      "pretrain_steps", tr.take("pretrain_steps", std::to_string(cfg.train.pretrain_steps)));
  cfg.train.pretrain_lr =
      parse_float("pretrain_lr", tr.take("pretrain_lr", fmt_float(cfg.train.pretrain_lr)));
  cfg.train.pretrain_batch_size =
      parse_int("pretrain_batch_size",
                tr.take("pretrain_batch_size", std::to_string(cfg.train.pretrain_batch_size)));
  cfg.train.pretrain_mask_rate = parse_float(
      "pretrain_mask_rate", tr.take("pretrain_mask_rate", fmt_float(cfg.train.pretrain_mask_rate)));
  cfg.train.pretrain_mask_second_side = parse_bool(
      "pretrain_mask_second_side",
      tr.take("pretrain_mask_second_side", cfg.train.pretrain_mask_second_side ? "on" : "off"));
  cfg.train.pretrain_seed =
      parse_u64("pretrain_seed", tr.take("pretrain_seed", std::to_string(cfg.train.pretrain_seed)));
  cfg.train.teacher_dropout = parse_float(
      "teacher_dropout", tr.take("teacher_dropout", fmt_float(cfg.train.teacher_dropout)));
  cfg.train.teacher_pretrain_steps =
      parse_int("teacher_pretrain_steps",
                tr.take("teacher_pretrain_steps", std::to_string(cfg.train.teacher_pretrain_steps)));
  cfg.train.teacher_layers = parse_int(
      "teacher_layers", tr.take("teacher_layers", std::to_string(cfg.train.teacher_layers)));
  cfg.train.teacher_width = parse_int(
      "teacher_width", tr.take("teacher_width", std::to_string(cfg.train.teacher_width)));
  cfg.train.teacher_heads = parse_int(
      "teacher_heads", tr.take("teacher_heads", std::to_string(cfg.train.teacher_heads)));
  cfg.train.teacher_epochs = parse_int(
      "teacher_epochs", tr.take("teacher_epochs", std::to_string(cfg.train.teacher_epochs)));
  cfg.train.teacher_attempts = parse_int(
      "teacher_attempts", tr.take("teacher_attempts", std::to_string(cfg.train.teacher_attempts)));
  cfg.train.teacher_lr =
      parse_float("teacher_lr", tr.take("teacher_lr", fmt_float(cfg.train.teacher_lr)));
  cfg.train.teacher_batch_size =
      parse_int("teacher_batch_size",
                tr.take("teacher_batch_size", std::to_string(cfg.train.teacher_batch_size)));
  cfg.train.teacher_seed =
      parse_u64("teacher_seed", tr.take("teacher_seed", std::to_string(cfg.train.teacher_seed)));
  cfg.train.efficiency_steps = parse_int(
      "efficiency_steps", tr.take("efficiency_steps", std::to_string(cfg.train.efficiency_steps)));
  tr.finish();

  cfg.validate();
  return cfg;
}

void ExperimentConfig::validate() const {
  dataset.validate();
  student_model_config(*this, model.variant).validate();
  teacher_model_config(*this).validate();
  if (!(train.temperature > 0.0f)) throw ConfigError("temperature must be positive");
  if (!(train.lr > 0.0f) || !(train.teacher_lr > 0.0f) || !(train.pretrain_lr > 0.0f)) {
    throw ConfigError("learning rates must be positive");
  }
  if (train.epochs < 1 || train.teacher_epochs < 1) {
    throw ConfigError("epoch counts must be positive");
  }
  if (train.teacher_attempts < 1) throw ConfigError("teacher_attempts must be positive");
  if (train.batch_size < 1 || train.teacher_batch_size < 1 || train.pretrain_batch_size < 1) {
    throw ConfigError("batch sizes must be positive");
  }
  if (train.pretrain_steps < 0) throw ConfigError("pretrain_steps must be non-negative");
  if (train.teacher_pretrain_steps < 0) {
    throw ConfigError("teacher_pretrain_steps must be non-negative");
  }
  if (train.teacher_dropout < 0.0f || train.teacher_dropout >= 1.0f) {
    throw ConfigError("teacher_dropout must be in [0,1)");
  }
  if (train.pretrain_mask_rate <= 0.0f || train.pretrain_mask_rate >= 1.0f) {
    throw ConfigError("pretrain_mask_rate must be in (0,1)");
  }
  if (train.warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
  if (train.efficiency_steps < 1) throw ConfigError("efficiency_steps must be positive");
  if (train.use_substrate && train.pretrain_steps == 0) {
    throw ConfigError("use_substrate needs pretrain_steps > 0");
  }
}

std::string ExperimentConfig::canonical() const {
  std::ostringstream out;
  out << "[dataset]\n";
  out << "alphabet = " << dataset.alphabet << "\n";
  out << "classes = " << dataset.classes << "\n";
  out << "dev_per_language = " << dataset.dev_per_language << "\n";
  out << "seed = " << dataset.seed << "\n";
  out << "side_len = " << dataset.side_len << "\n";
  out << "supervised = " << dataset.supervised << "\n";
  out << "task = " << task_kind_name(dataset.kind) << "\n";
  out << "test_per_language = " << dataset.test_per_language << "\n";
  out << "train_per_language = " << dataset.train_per_language << "\n";
  out << "unlabeled_per_language = " << dataset.unlabeled_per_language << "\n";
  out << "zero_shot = " << dataset.zero_shot << "\n";
  out << "[model]\n";
  out << "branch_depth = " << model.branch_depth << "\n";
  out << "dropout = " << fmt_float(model.dropout) << "\n";
  out << "heads = " << model.heads << "\n";
  out << "layers = " << model.layers << "\n";
  out << "pooler = " << (model.pooler ? "on" : "off") << "\n";
  out << "variant = " << variant_name(model.variant) << "\n";
  out << "width = " << model.width << "\n";
  out << "[train]\n";
  out << "batch_size = " << train.batch_size << "\n";
  out << "efficiency_steps = " << train.efficiency_steps << "\n";
  out << "epochs = " << train.epochs << "\n";
  out << "lr = " << fmt_float(train.lr) << "\n";
  out << "metric = " << metric_name(train.metric) << "\n";
  out << "mode = " << train_mode_name(train.mode) << "\n";
  out << "pretrain_batch_size = " << train.pretrain_batch_size << "\n";
  out << "pretrain_lr = " << fmt_float(train.pretrain_lr) << "\n";
  out << "pretrain_mask_rate = " << fmt_float(train.pretrain_mask_rate) << "\n";
  out << "pretrain_mask_second_side = " << (train.pretrain_mask_second_side ? "on" : "off")
      << "\n";
  out << "pretrain_seed = " << train.pretrain_seed << "\n";
  out << "pretrain_steps = " << train.pretrain_steps << "\n";
  out << "teacher_attempts = " << train.teacher_attempts << "\n";
  out << "teacher_batch_size = " << train.teacher_batch_size << "\n";
  out << "teacher_epochs = " << train.teacher_epochs << "\n";
  out << "teacher_heads = " << train.teacher_heads << "\n";
  out << "teacher_layers = " << train.teacher_layers << "\n";
  out << "teacher_dropout = " << fmt_float(train.teacher_dropout) << "\n";
  out << "teacher_lr = " << fmt_float(train.teacher_lr) << "\n";
  out << "teacher_pretrain_steps = " << train.teacher_pretrain_steps << "\n";
  out << "teacher_seed = " << train.teacher_seed << "\n";
  out << "teacher_width = " << train.teacher_width << "\n";
  out << "temperature = " << fmt_float(train.temperature) << "\n";
  out << "use_substrate = " << (train.use_substrate ? "on" : "off") << "\n";
  out << "warmup_steps = " << train.warmup_steps << "\n";
  return out.str();
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  return config_from_sections(parse_ini(text));
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

std::string config_hash(const ExperimentConfig& cfg) {
  uint64_t h = 1469598103934665603ull;
  for (char c : cfg.canonical()) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ModelConfig student_model_config(const ExperimentConfig& cfg, StructureVariant variant,
                                 int branch_depth_override) {
  ModelConfig m;
  m.layers = cfg.model.layers;
  m.branch_depth = variant == StructureVariant::Standard
                       ? 0
                       : (branch_depth_override >= 0 ? branch_depth_override
                                                     : cfg.model.branch_depth);
  m.width = cfg.model.width;
  m.heads = cfg.model.heads;
  m.supervised = cfg.dataset.supervised;
  m.classes = cfg.dataset.classes;
  m.vocab = cfg.dataset.vocab();
  m.max_seq = cfg.dataset.seq_len();
  m.variant = variant;
  m.tau = cfg.train.temperature;
  m.pooler = cfg.model.pooler;
  m.dropout = cfg.model.dropout;
  return m;
}

ModelConfig teacher_model_config(const ExperimentConfig& cfg) {
  ModelConfig m;
  m.layers = cfg.train.teacher_layers;
  m.branch_depth = 0;
  m.width = cfg.train.teacher_width;
  m.heads = cfg.train.teacher_heads;
  m.supervised = cfg.dataset.supervised;
  m.classes = cfg.dataset.classes;
  m.vocab = cfg.dataset.vocab();
  m.max_seq = cfg.dataset.seq_len();
  m.variant = StructureVariant::Standard;
  m.tau = cfg.train.temperature;
  m.dropout = cfg.train.teacher_dropout;
  return m;
}

}  // namespace mblm
