#include "mblm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_set>

#include <json.hpp>

namespace mblm {

namespace {

uint64_t hash_base_example(const BaseExample& e) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  for (int t : e.a) mix(static_cast<uint64_t>(t) + 1);
  mix(0xfeedfacecafebeefull);  // separates the two sides
  for (int t : e.b) mix(static_cast<uint64_t>(t) + 1);
  return h;
}

}  // namespace

TaskKind parse_task_kind(const std::string& name) {
  if (name == "pattern-match") return TaskKind::PatternMatch;
  if (name == "relation") return TaskKind::Relation;
  throw ConfigError("unknown task kind: " + name);
}

std::string task_kind_name(TaskKind kind) {
  return kind == TaskKind::PatternMatch ? "pattern-match" : "relation";
}

std::string split_name(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Dev: return "dev";
    case Split::Test: return "test";
    case Split::Unlabeled: return "unlabeled";
  }
  throw ContractError("unknown split value");
}

namespace {
Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "dev") return Split::Dev;
  if (name == "test") return Split::Test;
  if (name == "unlabeled") return Split::Unlabeled;
  throw DataError("unknown split name: " + name);
}
}  // namespace

void TaskConfig::validate() const {
  if (classes != 3 && classes != 5) {
    throw ConfigError("class count must be 3 or 5, got " + std::to_string(classes));
  }
  if (side_len < 5) throw ConfigError("sequence sides need at least 5 tokens");
  if (kind == TaskKind::Relation && classes > side_len) {
    throw ConfigError("relation task needs side_len >= classes");
  }
  if (alphabet < 4) throw ConfigError("base alphabet needs at least 4 tokens");
  if (supervised < 1) throw ConfigError("at least one supervised language is required");
  if (zero_shot < 0) throw ConfigError("zero-shot language count must be non-negative");
  for (int size : {train_per_language, dev_per_language, test_per_language}) {
    if (size < classes || size % classes != 0) {
      throw ConfigError("split sizes must be positive multiples of the class count");
    }
  }
  if (unlabeled_per_language < 0) throw ConfigError("unlabeled pool size must be non-negative");

  // every language draws fresh base examples; the pair space must dwarf that
  const double space = std::pow(static_cast<double>(alphabet), side_len);
  const double needed =
      static_cast<double>(train_per_language) * supervised + dev_per_language +
      test_per_language + static_cast<double>(unlabeled_per_language) * languages();
  if (space < 50.0 * needed) {
    throw ConfigError("requested sizes exceed the task's enumeration capacity");
  }
}

const SplitData& DatasetBundle::split(int language, Split s) const {
  if (language < 0 || language >= static_cast<int>(data.size())) {
    throw ContractError("language index " + std::to_string(language) + " out of range");
  }
  return data[language][static_cast<int>(s)];
}

SplitData& DatasetBundle::split(int language, Split s) {
  if (language < 0 || language >= static_cast<int>(data.size())) {
    throw ContractError("language index " + std::to_string(language) + " out of range");
  }
  return data[language][static_cast<int>(s)];
}

int match_count_bucket(int count, int classes) {
  if (classes == 5) return std::min(count, 4);
  if (count <= 1) return 0;
  if (count <= 3) return 1;
  return 2;
}

namespace {

// Inclusive match-count range generating a given class.
std::pair<int, int> bucket_range(int cls, int classes, int side_len) {
  if (classes == 5) return cls < 4 ? std::pair{cls, cls} : std::pair{4, side_len};
  if (cls == 0) return {0, 1};
  if (cls == 1) return {2, 3};
  return {4, side_len};
}

bool is_aperiodic(const std::vector<int>& a) {
  const int m = static_cast<int>(a.size());
  for (int s = 1; s < m; ++s) {
    bool equal = true;
    for (int i = 0; i < m && equal; ++i) equal = a[i] == a[(i + s) % m];
    if (equal) return false;
  }
  return true;
}

}  // namespace

BaseGenerator::BaseGenerator(const TaskConfig& cfg, uint64_t seed)
    : cfg_(cfg), rng_(static_cast<uint32_t>(seed ^ (seed >> 32))) {}

BaseExample BaseGenerator::make(int target_class) {
  const int m = cfg_.side_len;
  const int W = cfg_.alphabet;
  std::uniform_int_distribution<int> tok(0, W - 1);
  BaseExample e;
  e.label = target_class;
  e.a.resize(m);
  e.b.resize(m);

  if (cfg_.kind == TaskKind::Relation) {
    // label = cyclic offset of b relative to a; a must be aperiodic so the
    // offset is unique
    do {
      for (auto& t : e.a) t = tok(rng_);
    } while (!is_aperiodic(e.a));
    for (int i = 0; i < m; ++i) e.b[i] = e.a[(i + target_class) % m];
    return e;
  }

  const auto [lo, hi] = bucket_range(target_class, cfg_.classes, m);
  const int matches = std::uniform_int_distribution<int>(lo, hi)(rng_);
  for (auto& t : e.a) t = tok(rng_);
  std::vector<int> positions(m);
  for (int i = 0; i < m; ++i) positions[i] = i;
  std::shuffle(positions.begin(), positions.end(), rng_);
  std::bernoulli_distribution reuse(0.5);
  std::uniform_int_distribution<int> pos(0, m - 1);
  for (int i = 0; i < m; ++i) {
    const int p = positions[i];
    if (i < matches) {
      e.b[p] = e.a[p];
      continue;
    }
    // half the mismatches reuse tokens from a's own bag so that pure
    // bag-of-tokens overlap does not reveal the label
    int candidate = -1;
    if (reuse(rng_)) {
      const int from = e.a[pos(rng_)];
      if (from != e.a[p]) candidate = from;
    }
    if (candidate < 0) {
      int t = std::uniform_int_distribution<int>(0, W - 2)(rng_);
      if (t >= e.a[p]) ++t;
      candidate = t;
    }
    e.b[p] = candidate;
  }
  return e;
}

std::vector<BaseExample> BaseGenerator::take(int count) {
  if (count % cfg_.classes != 0) {
    throw ConfigError("pool size " + std::to_string(count) +
                      " is not a multiple of the class count");
  }
  std::vector<BaseExample> out;
  out.reserve(count);
  std::unordered_set<uint64_t> drawn(seen_.begin(), seen_.end());
  for (int cls = 0; cls < cfg_.classes; ++cls) {
    int remaining = count / cfg_.classes;
    int attempts = 0;
    while (remaining > 0) {
      if (++attempts > 1000 * count) {
        throw ConfigError("could not draw enough distinct examples; shrink the split sizes");
      }
      BaseExample e = make(cls);
      const uint64_t key = hash_base_example(e);
      if (!drawn.insert(key).second) continue;
      seen_.push_back(key);
      out.push_back(std::move(e));
      --remaining;
    }
  }
  std::shuffle(out.begin(), out.end(), rng_);
  return out;
}

std::vector<int> compose_tokens(const BaseExample& base) {
  std::vector<int> tokens;
  tokens.reserve(2 + base.a.size() + base.b.size());
  tokens.push_back(kClsToken);
  for (int t : base.a) tokens.push_back(kSpecialTokens + t);
  tokens.push_back(kSepToken);
  for (int t : base.b) tokens.push_back(kSpecialTokens + t);
  return tokens;
}

namespace {

void check_bijection(const LanguageSpec& spec) {
  std::vector<char> hit(spec.permutation.size(), 0);
  for (int target : spec.permutation) {
    if (target < 0 || target >= static_cast<int>(spec.permutation.size()) || hit[target]) {
      throw ConfigError("language " + spec.id + " has a non-bijective vocabulary map");
    }
    hit[target] = 1;
  }
  for (int s = 0; s < kSpecialTokens && s < static_cast<int>(spec.permutation.size()); ++s) {
    if (spec.permutation[s] != s) {
      throw ConfigError("language " + spec.id + " remaps a special token");
    }
  }
}

LanguageSpec make_language(const TaskConfig& cfg, int index, std::mt19937& rng) {
  LanguageSpec spec;
  spec.index = index;
  spec.supervised = index < cfg.supervised;
  spec.id = (spec.supervised ? "sup" : "zs") +
            std::to_string(spec.supervised ? index : index - cfg.supervised);
  const int V = cfg.vocab();
  const int W = cfg.alphabet;
  spec.permutation.resize(V);
  for (int i = 0; i < V; ++i) spec.permutation[i] = i;
  if (index > 0) {
    std::vector<int> sigma(W);
    for (int w = 0; w < W; ++w) sigma[w] = w;
    std::shuffle(sigma.begin(), sigma.end(), rng);
    // swap the base block with this language's block, scrambled by sigma
    for (int w = 0; w < W; ++w) {
      const int from = kSpecialTokens + w;
      const int to = kSpecialTokens + index * W + sigma[w];
      spec.permutation[from] = to;
      spec.permutation[to] = from;
    }
  }
  return spec;
}

}  // namespace

Example derive_example(const BaseExample& base, const LanguageSpec& spec) {
  Example out;
  out.label = base.label;
  out.language = spec.index;
  out.tokens = compose_tokens(base);
  for (auto& t : out.tokens) t = spec.permutation[t];
  return out;
}

std::vector<Example> derive_cipher_language(const std::vector<BaseExample>& base,
                                            const LanguageSpec& spec) {
  check_bijection(spec);
  std::vector<Example> out;
  out.reserve(base.size());
  for (const auto& e : base) out.push_back(derive_example(e, spec));
  return out;
}

DatasetBundle build_splits(const TaskConfig& cfg) {
  cfg.validate();
  DatasetBundle bundle;
  bundle.config = cfg;

  std::mt19937 lang_rng(static_cast<uint32_t>(cfg.seed * 2654435761ull + 17));
  for (int l = 0; l < cfg.languages(); ++l) {
    bundle.languages.push_back(make_language(cfg, l, lang_rng));
  }

  BaseGenerator gen(cfg, cfg.seed);
  // training pools are drawn separately per supervised language: the
  // supervised sets are not parallel
  std::vector<std::vector<BaseExample>> train_pools;
  for (int l = 0; l < cfg.supervised; ++l) train_pools.push_back(gen.take(cfg.train_per_language));
  // dev/test are shared base examples rendered into every language
  const auto base_dev = gen.take(cfg.dev_per_language);
  const auto base_test = gen.take(cfg.test_per_language);

  bundle.data.resize(cfg.languages());
  for (int l = 0; l < cfg.languages(); ++l) {
    const auto& spec = bundle.languages[l];
    if (l < cfg.supervised) {
      bundle.split(l, Split::Train).examples = derive_cipher_language(train_pools[l], spec);
    }
    bundle.split(l, Split::Dev).examples = derive_cipher_language(base_dev, spec);
    bundle.split(l, Split::Test).examples = derive_cipher_language(base_test, spec);
    if (cfg.unlabeled_per_language > 0) {
      auto pool = gen.take(cfg.unlabeled_per_language);
      auto& unl = bundle.split(l, Split::Unlabeled).examples;
      unl = derive_cipher_language(pool, spec);
      for (auto& e : unl) e.label = -1;
    }
  }
  return bundle;
}

void write_dataset(const DatasetBundle& bundle, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");

  nlohmann::json header;
  header["record"] = "header";
  header["version"] = 1;
  header["task"] = {{"kind", task_kind_name(bundle.config.kind)},
                    {"classes", bundle.config.classes},
                    {"side_len", bundle.config.side_len},
                    {"alphabet", bundle.config.alphabet},
                    {"supervised", bundle.config.supervised},
                    {"zero_shot", bundle.config.zero_shot},
                    {"train_per_language", bundle.config.train_per_language},
                    {"dev_per_language", bundle.config.dev_per_language},
                    {"test_per_language", bundle.config.test_per_language},
                    {"unlabeled_per_language", bundle.config.unlabeled_per_language},
                    {"seed", bundle.config.seed}};
  nlohmann::json langs = nlohmann::json::array();
  for (const auto& spec : bundle.languages) {
    langs.push_back({{"id", spec.id},
                     {"index", spec.index},
                     {"role", spec.supervised ? "supervised" : "zero-shot"},
                     {"permutation", spec.permutation}});
  }
  header["languages"] = langs;
  out << header.dump() << "\n";

  for (size_t l = 0; l < bundle.data.size(); ++l) {
    for (Split s : {Split::Train, Split::Dev, Split::Test, Split::Unlabeled}) {
      for (const auto& e : bundle.data[l][static_cast<int>(s)].examples) {
        nlohmann::json rec{{"record", "example"},
                           {"language", static_cast<int>(l)},
                           {"split", split_name(s)},
                           {"tokens", e.tokens},
                           {"label", e.label}};
        out << rec.dump() << "\n";
      }
    }
  }
  if (!out) throw DataError("failed while writing " + path);
}

DatasetBundle read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + " is empty");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + " header is not valid JSON: " + e.what());
  }
  if (header.value("record", "") != "header") {
    throw DataError(path + " does not start with a header record");
  }

  DatasetBundle bundle;
  try {
    const auto& t = header.at("task");
    bundle.config.kind = parse_task_kind(t.at("kind").get<std::string>());
    bundle.config.classes = t.at("classes").get<int>();
    bundle.config.side_len = t.at("side_len").get<int>();
    bundle.config.alphabet = t.at("alphabet").get<int>();
    bundle.config.supervised = t.at("supervised").get<int>();
    bundle.config.zero_shot = t.at("zero_shot").get<int>();
    bundle.config.train_per_language = t.at("train_per_language").get<int>();
    bundle.config.dev_per_language = t.at("dev_per_language").get<int>();
    bundle.config.test_per_language = t.at("test_per_language").get<int>();
    bundle.config.unlabeled_per_language = t.at("unlabeled_per_language").get<int>();
    bundle.config.seed = t.at("seed").get<uint64_t>();
    for (const auto& lj : header.at("languages")) {
      LanguageSpec spec;
      spec.id = lj.at("id").get<std::string>();
      spec.index = lj.at("index").get<int>();
      spec.supervised = lj.at("role").get<std::string>() == "supervised";
      spec.permutation = lj.at("permutation").get<std::vector<int>>();
      check_bijection(spec);
      bundle.languages.push_back(std::move(spec));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + " has a malformed header: " + e.what());
  }
  if (static_cast<int>(bundle.languages.size()) != bundle.config.languages()) {
    throw DataError(path + " declares the wrong number of languages");
  }
  bundle.data.resize(bundle.languages.size());

  size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
      if (rec.value("record", "") != "example") {
        throw DataError(path + ":" + std::to_string(line_no) + " is not an example record");
      }
      Example e;
      e.language = rec.at("language").get<int>();
      e.tokens = rec.at("tokens").get<std::vector<int>>();
      e.label = rec.at("label").get<int>();
      const Split s = parse_split(rec.at("split").get<std::string>());
      if (e.language < 0 || e.language >= static_cast<int>(bundle.data.size())) {
        throw DataError(path + ":" + std::to_string(line_no) + " has an unknown language");
      }
      bundle.data[e.language][static_cast<int>(s)].examples.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw DataError(path + ":" + std::to_string(line_no) + " is malformed: " + ex.what());
    }
  }

  for (int l = bundle.config.supervised; l < bundle.config.languages(); ++l) {
    if (!bundle.split(l, Split::Train).examples.empty()) {
      throw DataError(path + ": zero-shot language " + bundle.languages[l].id +
                      " carries training data");
    }
  }
  return bundle;
}

BatchIterator::BatchIterator(const SplitData& split, int batch_size, int pad_to, uint64_t seed,
                             bool shuffle)
    : split_(&split), batch_size_(batch_size), pad_to_(pad_to), shuffle_(shuffle) {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (split.examples.empty()) throw DataError("cannot iterate an empty split");
  order_.resize(split.examples.size());
  for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
  reset(seed);
}

void BatchIterator::reset(uint64_t seed) {
  pos_ = 0;
  if (shuffle_) {
    std::mt19937 rng(static_cast<uint32_t>(seed ^ (seed >> 32)));
    std::shuffle(order_.begin(), order_.end(), rng);
  }
}

int BatchIterator::batches_per_pass() const {
  return static_cast<int>((order_.size() + batch_size_ - 1) / batch_size_);
}

std::optional<Batch> BatchIterator::next() {
  if (pos_ >= order_.size()) return std::nullopt;
  const size_t end = std::min(order_.size(), pos_ + batch_size_);
  Batch batch;
  batch.size = static_cast<int>(end - pos_);
  batch.seq_len = pad_to_;
  batch.tokens.assign(static_cast<size_t>(batch.size) * pad_to_, kPadToken);
  batch.real.assign(static_cast<size_t>(batch.size) * pad_to_, 0);
  batch.labels.reserve(batch.size);
  batch.example_ids.reserve(batch.size);
  batch.language = split_->examples[order_[pos_]].language;
  for (size_t r = 0; pos_ < end; ++pos_, ++r) {
    const Example& e = split_->examples[order_[pos_]];
    if (e.language != batch.language) {
      throw ContractError("split mixes languages; batches must be homogeneous");
    }
    if (static_cast<int>(e.tokens.size()) > pad_to_) {
      throw ContractError("example of length " + std::to_string(e.tokens.size()) +
                          " exceeds padded length " + std::to_string(pad_to_));
    }
    std::copy(e.tokens.begin(), e.tokens.end(), batch.tokens.begin() + r * pad_to_);
    std::fill_n(batch.real.begin() + r * pad_to_, e.tokens.size(), 1);
    batch.labels.push_back(e.label);
    batch.example_ids.push_back(order_[pos_]);
  }
  return batch;
}

}  // namespace mblm
