#include "segkit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace segkit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is written as host doubles and assumes little-endian");

namespace {
constexpr const char* kFormatVersion = "segkit-ckpt-1";
}

void TensorStore::put(const std::string& name, Shape shape, std::vector<double> values) {
  if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
    throw std::invalid_argument("store: value count does not match shape for '" + name + "'");
  }
  entries.push_back(StoreEntry{name, std::move(shape), std::move(values)});
}

const StoreEntry* TensorStore::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

void TensorStore::save(const std::string& path) const {
  nlohmann::json header;
  header["version"] = kFormatVersion;
  header["dtype"] = "f64";
  header["meta"] = meta.is_null() ? nlohmann::json::object() : meta;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& e : entries) {
    tensors.push_back({{"name", e.name}, {"shape", e.shape}});
  }
  header["tensors"] = std::move(tensors);
  std::string htext = header.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error(path + ": cannot open checkpoint for writing");
  uint64_t hlen = htext.size();
  uint8_t lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<uint8_t>(hlen >> (8 * i));
  f.write(reinterpret_cast<const char*>(lenbuf), 8);
  f.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& e : entries) {
    f.write(reinterpret_cast<const char*>(e.values.data()),
            static_cast<std::streamsize>(e.values.size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error(path + ": short checkpoint write");
}

TensorStore TensorStore::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open checkpoint");
  uint8_t lenbuf[8];
  f.read(reinterpret_cast<char*>(lenbuf), 8);
  if (!f) throw std::runtime_error(path + ": truncated checkpoint header length");
  uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i) hlen |= static_cast<uint64_t>(lenbuf[i]) << (8 * i);
  if (hlen > (1u << 26)) throw std::runtime_error(path + ": implausible header size");
  std::string htext(hlen, '\0');
  f.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error(path + ": truncated checkpoint header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(htext);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path + ": checkpoint header parse error: " + e.what());
  }
  if (header.value("version", "") != kFormatVersion) {
    throw std::runtime_error(path + ": unsupported checkpoint version '" +
                             header.value("version", "<missing>") + "'");
  }
  if (header.value("dtype", "") != "f64") {
    throw std::runtime_error(path + ": unsupported dtype '" + header.value("dtype", "") + "'");
  }

  TensorStore store;
  store.meta = header.value("meta", nlohmann::json::object());
  for (const auto& t : header.at("tensors")) {
    StoreEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    int64_t n = shape_numel(e.shape);
    e.values.resize(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(e.values.data()),
           static_cast<std::streamsize>(n * sizeof(double)));
    if (!f) throw std::runtime_error(path + ": truncated payload for tensor '" + e.name + "'");
    store.entries.push_back(std::move(e));
  }
  return store;
}

// ---------------------------------------------------------------------------
// Model spec <-> JSON

nlohmann::json model_spec_to_json(const ModelSpec& spec) {
  nlohmann::json j;
  j["family"] = to_string(spec.family);
  j["depth"] = spec.depth;
  j["base_width"] = spec.base_width;
  j["width_multiplier"] = spec.width_multiplier;
  j["dilation_scheme"] = spec.dilation_scheme;
  j["gcn_kernel"] = spec.gcn_kernel;
  j["batch_norm"] = spec.batch_norm;
  j["br_relu"] = spec.br_relu;
  j["out_channels"] = spec.out_channels;
  return j;
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  spec.family = family_from_string(j.at("family").get<std::string>());
  spec.depth = j.value("depth", 4);
  spec.base_width = j.value("base_width", 32);
  spec.width_multiplier = j.value("width_multiplier", 1);
  spec.dilation_scheme = j.value("dilation_scheme", std::vector<int>{});
  spec.gcn_kernel = j.value("gcn_kernel", 0);
  spec.batch_norm = j.value("batch_norm", true);
  spec.br_relu = j.value("br_relu", false);
  spec.out_channels = j.value("out_channels", 1);
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------
// Model checkpoints

void save_checkpoint(const std::string& path, Model& model, const AdamState* opt, int epoch,
                     double best_val_dice, const nlohmann::json& extra_meta) {
  TensorStore store;
  store.meta["model_spec"] = model_spec_to_json(model.spec());
  store.meta["epoch"] = epoch;
  store.meta["best_val_dice"] = best_val_dice;
  store.meta["has_optimizer"] = opt != nullptr;
  if (opt) store.meta["adam_step"] = opt->step;
  if (!extra_meta.is_null()) store.meta["extra"] = extra_meta;

  for (auto& [name, t] : model.parameters()) {
    store.put("param." + name, t.shape(), t.values());
  }
  for (auto& [name, buf] : model.buffers()) {
    store.put("buffer." + name, {static_cast<int>(buf->size())}, *buf);
  }
  if (opt) {
    auto& params = model.parameters();
    if (opt->m.size() != params.size() || opt->v.size() != params.size()) {
      throw std::invalid_argument("checkpoint: optimizer state does not match parameter list");
    }
    for (size_t i = 0; i < params.size(); ++i) {
      store.put("opt.m." + params[i].first, params[i].second.shape(), opt->m[i]);
      store.put("opt.v." + params[i].first, params[i].second.shape(), opt->v[i]);
    }
  }
  store.save(path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  TensorStore store = TensorStore::load(path);
  LoadedCheckpoint out;
  out.meta = store.meta;
  out.epoch = store.meta.value("epoch", -1);
  out.best_val_dice = store.meta.value("best_val_dice", -1.0);
  ModelSpec spec = model_spec_from_json(store.meta.at("model_spec"));
  out.model = Model::build(spec, /*seed=*/0);  // values are overwritten below

  for (auto& [name, t] : out.model.parameters()) {
    const StoreEntry* e = store.find("param." + name);
    if (!e) throw std::runtime_error(path + ": checkpoint missing parameter '" + name + "'");
    if (e->shape != t.shape()) {
      throw std::runtime_error(path + ": shape mismatch for '" + name + "': stored " +
                               shape_str(e->shape) + " vs model " + shape_str(t.shape()));
    }
    t.values() = e->values;
  }
  for (auto& [name, buf] : out.model.buffers()) {
    const StoreEntry* e = store.find("buffer." + name);
    if (!e) throw std::runtime_error(path + ": checkpoint missing buffer '" + name + "'");
    *buf = e->values;
  }
  out.has_opt = store.meta.value("has_optimizer", false);
  if (out.has_opt) {
    out.opt.step = store.meta.value("adam_step", static_cast<int64_t>(0));
    auto& params = out.model.parameters();
    out.opt.m.resize(params.size());
    out.opt.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      const StoreEntry* em = store.find("opt.m." + params[i].first);
      const StoreEntry* ev = store.find("opt.v." + params[i].first);
      if (!em || !ev) {
        throw std::runtime_error(path + ": checkpoint missing optimizer state for '" +
                                 params[i].first + "'");
      }
      out.opt.m[i] = em->values;
      out.opt.v[i] = ev->values;
    }
  }
  return out;
}

}  // namespace segkit
