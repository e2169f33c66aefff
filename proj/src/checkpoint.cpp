#include "mblm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace mblm {

namespace {

constexpr char kMagic[8] = {'M', 'B', 'L', 'M', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian hosts are not supported");

void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void put_f32_array(std::ostream& out, const std::vector<float>& data) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(float)));
  } else {
    for (float f : data) {
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
}

std::vector<float> get_f32_array(std::istream& in, size_t count) {
  std::vector<float> data(count);
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
  } else {
    for (auto& f : data) {
      const uint32_t bits = get_u32(in);
      std::memcpy(&f, &bits, 4);
    }
  }
  return data;
}

}  // namespace

void write_array_file(const std::string& path, const ArrayFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  put_u32(out, kVersion);
  const std::string meta = file.meta.dump();
  put_u32(out, static_cast<uint32_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put_u32(out, static_cast<uint32_t>(file.entries.size()));
  for (const auto& [name, tensor] : file.entries) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<uint32_t>(tensor.ndim()));
    for (int dim : tensor.shape()) put_u32(out, static_cast<uint32_t>(dim));
    put_f32_array(out, tensor.values());
  }
  if (!out) throw DataError("failed while writing " + path);
}

ArrayFile read_array_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw DataError(path + " is not a checkpoint container");
  }
  const uint32_t version = get_u32(in);
  if (version != kVersion) {
    throw DataError(path + " has unsupported container version " + std::to_string(version));
  }
  const uint32_t meta_len = get_u32(in);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), meta_len);
  ArrayFile file;
  try {
    file.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + " carries invalid metadata: " + e.what());
  }
  const uint32_t count = get_u32(in);
  file.entries.reserve(count);
  for (uint32_t e = 0; e < count; ++e) {
    const uint32_t name_len = get_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const uint32_t ndim = get_u32(in);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(get_u32(in));
    const int64_t numel = shape_numel(shape);
    auto data = get_f32_array(in, static_cast<size_t>(numel));
    if (!in) throw DataError(path + " is truncated at entry " + name);
    file.entries.emplace_back(std::move(name), Tensor::of(std::move(shape), std::move(data)));
  }
  return file;
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"layers", cfg.layers},
                        {"branch_depth", cfg.branch_depth},
                        {"width", cfg.width},
                        {"heads", cfg.heads},
                        {"supervised", cfg.supervised},
                        {"classes", cfg.classes},
                        {"vocab", cfg.vocab},
                        {"max_seq", cfg.max_seq},
                        {"variant", variant_name(cfg.variant)},
                        {"tau", cfg.tau},
                        {"pooler", cfg.pooler},
                        {"dropout", cfg.dropout},
                        {"feature_vocab", cfg.feature_vocab}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  try {
    cfg.layers = j.at("layers").get<int>();
    cfg.branch_depth = j.at("branch_depth").get<int>();
    cfg.width = j.at("width").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.supervised = j.at("supervised").get<int>();
    cfg.classes = j.at("classes").get<int>();
    cfg.vocab = j.at("vocab").get<int>();
    cfg.max_seq = j.at("max_seq").get<int>();
    cfg.variant = parse_variant(j.at("variant").get<std::string>());
    cfg.tau = j.at("tau").get<float>();
    cfg.pooler = j.at("pooler").get<bool>();
    cfg.dropout = j.at("dropout").get<float>();
    cfg.feature_vocab = j.at("feature_vocab").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model configuration document: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void save_checkpoint(const MblmModel& model, const std::string& path) {
  ArrayFile file;
  file.meta = nlohmann::json{{"format", "model"}, {"config", config_to_json(model.cfg)}};
  for (const auto& p : model.parameters()) file.entries.emplace_back(p.name, p.tensor);
  write_array_file(path, file);
}

namespace {
void fill_parameters(MblmModel& model, const ArrayFile& file, const std::string& path) {
  auto params = model.parameters();
  std::map<std::string, Tensor*> by_name;
  for (auto& p : params) by_name[p.name] = &p.tensor;
  size_t filled = 0;
  for (const auto& [name, tensor] : file.entries) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError(path + " carries unknown parameter " + name);
    if (it->second->shape() != tensor.shape()) {
      throw DataError(path + ": parameter " + name + " has shape " + shape_str(tensor.shape()) +
                      ", expected " + shape_str(it->second->shape()));
    }
    it->second->values() = tensor.values();
    ++filled;
  }
  if (filled != params.size()) {
    throw DataError(path + " provides " + std::to_string(filled) + " of " +
                    std::to_string(params.size()) + " parameters");
  }
}
}  // namespace

MblmModel load_checkpoint(const std::string& path) {
  ArrayFile file = read_array_file(path);
  if (file.meta.value("format", "") != "model") {
    throw DataError(path + " is not a model checkpoint");
  }
  ModelConfig cfg = config_from_json(file.meta.at("config"));
  std::mt19937 rng(0);
  MblmModel model = MblmModel::create(cfg, rng);
  fill_parameters(model, file, path);
  return model;
}

void restore_parameters(MblmModel& model, const std::string& path) {
  ArrayFile file = read_array_file(path);
  if (file.meta.value("format", "") != "model") {
    throw DataError(path + " is not a model checkpoint");
  }
  fill_parameters(model, file, path);
}

void save_adam_state(const Adam& opt, const std::vector<NamedParam>& params,
                     const std::string& path) {
  const auto& slots = opt.slots();
  if (slots.size() != params.size()) {
    throw ContractError("optimizer state does not match the parameter list");
  }
  ArrayFile file;
  std::vector<int64_t> steps(slots.size());
  for (size_t i = 0; i < slots.size(); ++i) steps[i] = slots[i].steps;
  file.meta = nlohmann::json{{"format", "adam"}, {"steps", steps}};
  for (size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].m.empty()) continue;
    const Shape& shape = params[i].tensor.shape();
    file.entries.emplace_back("m." + params[i].name, Tensor::of(shape, slots[i].m));
    file.entries.emplace_back("v." + params[i].name, Tensor::of(shape, slots[i].v));
  }
  write_array_file(path, file);
}

void load_adam_state(Adam& opt, const std::vector<NamedParam>& params, const std::string& path) {
  ArrayFile file = read_array_file(path);
  if (file.meta.value("format", "") != "adam") {
    throw DataError(path + " is not optimizer state");
  }
  auto& slots = opt.slots();
  if (slots.size() != params.size()) {
    throw ContractError("optimizer state does not match the parameter list");
  }
  const auto steps = file.meta.at("steps").get<std::vector<int64_t>>();
  if (steps.size() != slots.size()) {
    throw DataError(path + " carries state for a different parameter count");
  }
  std::map<std::string, Tensor> by_name;
  for (auto& [name, tensor] : file.entries) by_name.emplace(name, tensor);
  for (size_t i = 0; i < slots.size(); ++i) {
    slots[i] = Adam::Slot{};
    slots[i].steps = steps[i];
    auto m_it = by_name.find("m." + params[i].name);
    auto v_it = by_name.find("v." + params[i].name);
    if (m_it == by_name.end() || v_it == by_name.end()) continue;
    if (m_it->second.size() != params[i].tensor.size()) {
      throw DataError(path + ": moment buffers for " + params[i].name + " have the wrong size");
    }
    slots[i].m = m_it->second.values();
    slots[i].v = v_it->second.values();
  }
}

}  // namespace mblm
