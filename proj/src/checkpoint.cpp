#include "perft/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "perft/errors.hpp"
#include "perft/run_config.hpp"

namespace perft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename U>
U to_little_endian(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    if constexpr (sizeof(U) == 8) return __builtin_bswap64(v);
    else return __builtin_bswap32(v);
  }
  return v;
}

std::size_t element_size(StorageDtype d) { return d == StorageDtype::float64 ? 8 : 4; }

std::string file_stem_for(const std::string& name, StorageDtype dtype) {
  std::string out = name;
  for (auto& c : out) {
    if (c == '/' || c == '\\') c = '_';
  }
  return out + (dtype == StorageDtype::float64 ? ".f64" : ".f32");
}

template <typename F, typename U>
void write_values(std::ofstream& out, const Tensor& t) {
  for (double d : t.data()) {
    const F v = static_cast<F>(d);
    U bits;
    std::memcpy(&bits, &v, sizeof bits);
    bits = to_little_endian(bits);
    out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
}

template <typename F, typename U>
void read_values(std::ifstream& in, std::vector<double>& data) {
  for (auto& d : data) {
    U bits;
    in.read(reinterpret_cast<char*>(&bits), sizeof bits);
    bits = to_little_endian(bits);
    F v;
    std::memcpy(&v, &bits, sizeof v);
    d = static_cast<double>(v);
  }
}

void write_tensor(const fs::path& path, const Tensor& t, StorageDtype dtype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  if (dtype == StorageDtype::float64) write_values<double, std::uint64_t>(out, t);
  else write_values<float, std::uint32_t>(out, t);
  if (!out) throw IoError("short write to " + path.string());
}

Tensor read_tensor(const fs::path& path, const std::vector<std::size_t>& shape, StorageDtype dtype) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("cannot open " + path.string());
  std::size_t count = 1;
  for (auto d : shape) count *= d;
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * element_size(dtype)) {
    throw IoError(path.string() + ": expected " + std::to_string(count * element_size(dtype)) + " bytes, found " +
                  std::to_string(bytes));
  }
  in.seekg(0);
  std::vector<double> data(count);
  if (dtype == StorageDtype::float64) read_values<double, std::uint64_t>(in, data);
  else read_values<float, std::uint32_t>(in, data);
  if (!in) throw IoError("short read from " + path.string());
  return Tensor(shape, std::move(data));
}

}  // namespace

std::string_view storage_dtype_name(StorageDtype d) { return d == StorageDtype::float64 ? "float64" : "float32"; }

StorageDtype parse_storage_dtype(std::string_view name) {
  if (name == "float64") return StorageDtype::float64;
  if (name == "float32") return StorageDtype::float32;
  throw ConfigError("unknown storage dtype '" + std::string(name) + "' (expected float64 or float32)");
}

void write_weight_dump(const fs::path& dir, std::span<const DumpEntry> entries, const json& metadata,
                       StorageDtype dtype) {
  std::error_code ec;
  fs::create_directories(dir / "tensors", ec);
  if (ec) throw IoError("cannot create " + (dir / "tensors").string() + ": " + ec.message());
  json manifest;
  manifest["format"] = kDumpFormat;
  manifest["version"] = kDumpVersion;
  manifest["dtype"] = storage_dtype_name(dtype);
  manifest["byte_order"] = "little";
  manifest["metadata"] = metadata;
  json list = json::array();
  std::set<std::string> names;
  for (const auto& e : entries) {
    if (!names.insert(e.name).second) throw InputError("duplicate tensor name " + e.name);
    const std::string file = "tensors/" + file_stem_for(e.name, dtype);
    write_tensor(dir / file, e.value, dtype);
    list.push_back({{"name", e.name}, {"role", e.role}, {"shape", e.value.shape()}, {"file", file}});
  }
  manifest["tensors"] = list;
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

std::vector<DumpEntry> read_weight_dump(const fs::path& dir, json* metadata) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw IoError("cannot open " + mpath.string());
  json manifest;
  try {
    manifest = json::parse(in);
    if (manifest.value("format", "") != kDumpFormat) throw IoError(mpath.string() + ": not a perft-lab weight dump");
    if (manifest.value("version", 0) != kDumpVersion) {
      throw IoError(mpath.string() + ": unsupported version " + manifest["version"].dump());
    }
    StorageDtype dtype;
    try {
      dtype = parse_storage_dtype(manifest.value("dtype", "float64"));
    } catch (const ConfigError& e) {
      throw IoError(mpath.string() + ": " + e.what());
    }
    std::vector<DumpEntry> out;
    for (const auto& t : manifest.at("tensors")) {
      out.push_back({t.at("name").get<std::string>(), t.at("role").get<std::string>(),
                     read_tensor(dir / t.at("file").get<std::string>(),
                                 t.at("shape").get<std::vector<std::size_t>>(), dtype)});
    }
    if (metadata) *metadata = manifest.value("metadata", json::object());
    return out;
  } catch (const json::exception& e) {
    throw IoError(mpath.string() + ": malformed manifest: " + e.what());
  }
}

void save_checkpoint(const LanguageModel& model, const fs::path& dir, StorageDtype dtype) {
  std::set<const Parameter*> backbone;
  for (const auto* p : model.backbone_parameters()) backbone.insert(p);
  std::vector<DumpEntry> entries;
  for (const auto* p : model.parameters()) {
    std::string role = "backbone";
    if (!backbone.count(p)) role = p->name.find(".peft.router") != std::string::npos ? "peft_router" : "adapter";
    entries.push_back({p->name, role, p->value});
  }
  json meta;
  meta["model"] = to_json(model.config());
  meta["perft"] = model.perft() ? to_json(*model.perft()) : json(nullptr);
  write_weight_dump(dir, entries, meta, dtype);
}

LanguageModel load_checkpoint(const fs::path& dir) {
  json meta;
  auto entries = read_weight_dump(dir, &meta);
  if (!meta.contains("model")) throw IoError(dir.string() + ": checkpoint metadata lacks a model config");
  LanguageModel model;
  try {
    model = LanguageModel(parse_model_config(meta["model"]), 0);
    if (meta.contains("perft") && !meta["perft"].is_null()) model.attach(parse_perft_config(meta["perft"]), 0);
  } catch (const ConfigError& e) {
    throw IoError(dir.string() + ": bad checkpoint config: " + e.what());
  }
  std::set<std::string> loaded;
  for (auto& e : entries) {
    Parameter* p = model.find(e.name);
    if (!p) throw IoError(dir.string() + ": unexpected tensor " + e.name);
    if (p->value.shape() != e.value.shape()) {
      throw IoError(dir.string() + ": tensor " + e.name + " has shape " + shape_string(e.value.shape()) +
                    ", model expects " + shape_string(p->value.shape()));
    }
    p->value = std::move(e.value);
    loaded.insert(e.name);
  }
  for (const auto* p : model.parameters()) {
    if (!loaded.count(p->name)) throw IoError(dir.string() + ": missing tensor " + p->name);
  }
  model.apply_freeze_partition();
  return model;
}

}  // namespace perft
