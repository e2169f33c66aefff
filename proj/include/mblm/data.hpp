#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mblm/nn.hpp"

namespace mblm {

// Shared special tokens; every language maps them to themselves.
constexpr int kPadToken = 0;
constexpr int kClsToken = 1;
constexpr int kSepToken = 2;
constexpr int kMaskToken = 3;
constexpr int kSpecialTokens = 4;

enum class TaskKind { PatternMatch, Relation };
enum class Split { Train, Dev, Test, Unlabeled };

TaskKind parse_task_kind(const std::string& name);
std::string task_kind_name(TaskKind kind);
std::string split_name(Split split);

struct TaskConfig {
  TaskKind kind = TaskKind::PatternMatch;
  int classes = 3;
  int side_len = 7;   // tokens per sequence side
  int alphabet = 16;  // per-language base alphabet size
  int supervised = 3;
  int zero_shot = 5;
  int train_per_language = 1920;
  int dev_per_language = 192;
  int test_per_language = 384;
  int unlabeled_per_language = 960;
  uint64_t seed = 7;

  int languages() const { return supervised + zero_shot; }
  int vocab() const { return kSpecialTokens + languages() * alphabet; }
  int seq_len() const { return 2 + 2 * side_len; }  // [cls] a [sep] b
  void validate() const;
};

// A language is a bijective renaming of the base vocabulary into its own
// token-id block; language 0 is the base itself (identity permutation).
struct LanguageSpec {
  std::string id;
  int index = 0;
  bool supervised = false;
  std::vector<int> permutation;  // full-vocabulary bijection
};

struct Example {
  std::vector<int> tokens;
  int label = -1;  // -1 for unlabeled data
  int language = 0;
};

struct SplitData {
  std::vector<Example> examples;
};

struct DatasetBundle {
  TaskConfig config;
  std::vector<LanguageSpec> languages;
  std::vector<std::array<SplitData, 4>> data;  // [language][split]

  const SplitData& split(int language, Split s) const;
  SplitData& split(int language, Split s);
};

// Abstract base-task example before any language renaming; sides are tokens
// in [0, alphabet).
struct BaseExample {
  std::vector<int> a;
  std::vector<int> b;
  int label = 0;
};

// Streams unique, class-balanced base examples. Uniqueness spans everything
// drawn from one generator, which keeps all splits and pools disjoint.
class BaseGenerator {
 public:
  BaseGenerator(const TaskConfig& cfg, uint64_t seed);
  std::vector<BaseExample> take(int count);

 private:
  BaseExample make(int target_class);
  TaskConfig cfg_;
  std::mt19937 rng_;
  std::vector<uint64_t> seen_;  // sorted-on-demand hash set kept simple
};

// Bucketing rule of the pattern-match task: position-aligned match counts
// folded into `classes` labels.
int match_count_bucket(int count, int classes);

std::vector<int> compose_tokens(const BaseExample& base);
Example derive_example(const BaseExample& base, const LanguageSpec& spec);
std::vector<Example> derive_cipher_language(const std::vector<BaseExample>& base,
                                            const LanguageSpec& spec);

DatasetBundle build_splits(const TaskConfig& cfg);

void write_dataset(const DatasetBundle& bundle, const std::string& path);
DatasetBundle read_dataset(const std::string& path);

// Shuffled single-pass iterator over one split; the final partial batch is
// kept. Sequences are padded to `pad_to`.
class BatchIterator {
 public:
  BatchIterator(const SplitData& split, int batch_size, int pad_to, uint64_t seed,
                bool shuffle = true);
  std::optional<Batch> next();
  void reset(uint64_t seed);
  int batches_per_pass() const;

 private:
  const SplitData* split_;
  int batch_size_;
  int pad_to_;
  bool shuffle_;
  std::vector<int> order_;
  size_t pos_ = 0;
};

}  // namespace mblm
