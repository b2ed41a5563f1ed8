#include "segkit/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace segkit {

namespace {

[[noreturn]] void bad(const std::string& origin, int line, const std::string& why) {
  throw std::invalid_argument(origin + ":" + std::to_string(line) + ": " + why);
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& origin, int line) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad(origin, line, "expected a boolean, got '" + v + "'");
}

double parse_double(const std::string& v, const std::string& origin, int line) {
  try {
    size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return d;
  } catch (...) {
    bad(origin, line, "expected a number, got '" + v + "'");
  }
}

int parse_int(const std::string& v, const std::string& origin, int line) {
  try {
    size_t used = 0;
    long d = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return static_cast<int>(d);
  } catch (...) {
    bad(origin, line, "expected an integer, got '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& v, const std::string& origin, int line) {
  try {
    size_t used = 0;
    unsigned long long d = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument("");
    return static_cast<uint64_t>(d);
  } catch (...) {
    bad(origin, line, "expected an unsigned integer, got '" + v + "'");
  }
}

std::vector<int> parse_int_list(const std::string& v, const std::string& origin, int line) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_int(item, origin, line));
  }
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument(path + ": cannot open config file");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_text(ss.str(), path);
}

ExperimentConfig ExperimentConfig::parse_text(const std::string& text,
                                              const std::string& origin) {
  ExperimentConfig cfg;
  using Setter = std::function<void(const std::string&, int)>;
  std::map<std::string, std::map<std::string, Setter>> schema;

  auto& model = schema["model"];
  model["family"] = [&](const std::string& v, int) { cfg.setup.model.family = family_from_string(v); };
  model["depth"] = [&](const std::string& v, int l) { cfg.setup.model.depth = parse_int(v, origin, l); };
  model["base_width"] = [&](const std::string& v, int l) { cfg.setup.model.base_width = parse_int(v, origin, l); };
  model["width_multiplier"] = [&](const std::string& v, int l) { cfg.setup.model.width_multiplier = parse_int(v, origin, l); };
  model["dilation_scheme"] = [&](const std::string& v, int l) { cfg.setup.model.dilation_scheme = parse_int_list(v, origin, l); };
  model["gcn_kernel"] = [&](const std::string& v, int l) { cfg.setup.model.gcn_kernel = parse_int(v, origin, l); };
  model["batch_norm"] = [&](const std::string& v, int l) { cfg.setup.model.batch_norm = parse_bool(v, origin, l); };
  model["br_relu"] = [&](const std::string& v, int l) { cfg.setup.model.br_relu = parse_bool(v, origin, l); };

  auto& loss = schema["loss"];
  loss["kind"] = [&](const std::string& v, int) { cfg.setup.loss.kind = loss_kind_from_string(v); };
  loss["gamma"] = [&](const std::string& v, int l) { cfg.setup.loss.gamma = parse_double(v, origin, l); };
  loss["lambda"] = [&](const std::string& v, int l) { cfg.setup.loss.lambda = parse_double(v, origin, l); };
  loss["tau"] = [&](const std::string& v, int l) { cfg.setup.loss.tau = parse_double(v, origin, l); };
  loss["eps"] = [&](const std::string& v, int l) { cfg.setup.loss.eps = parse_double(v, origin, l); };
  loss["clamp_delta"] = [&](const std::string& v, int l) { cfg.setup.loss.clamp_delta = parse_double(v, origin, l); };
  loss["per_sample"] = [&](const std::string& v, int l) { cfg.setup.loss.per_sample = parse_bool(v, origin, l); };

  auto& train = schema["train"];
  train["epochs"] = [&](const std::string& v, int l) { cfg.setup.train.epochs = parse_int(v, origin, l); };
  train["batch_size"] = [&](const std::string& v, int l) { cfg.setup.train.batch_size = parse_int(v, origin, l); };
  train["grad_accum"] = [&](const std::string& v, int l) { cfg.setup.train.grad_accum = parse_int(v, origin, l); };
  train["lr_max"] = [&](const std::string& v, int l) { cfg.setup.train.lr_max = parse_double(v, origin, l); };
  train["lr_min"] = [&](const std::string& v, int l) { cfg.setup.train.lr_min = parse_double(v, origin, l); };
  train["cycle_length"] = [&](const std::string& v, int l) { cfg.setup.train.cycle_length = parse_int(v, origin, l); };
  train["weight_decay"] = [&](const std::string& v, int l) { cfg.setup.train.weight_decay = parse_double(v, origin, l); };
  train["beta1"] = [&](const std::string& v, int l) { cfg.setup.train.beta1 = parse_double(v, origin, l); };
  train["beta2"] = [&](const std::string& v, int l) { cfg.setup.train.beta2 = parse_double(v, origin, l); };
  train["adam_eps"] = [&](const std::string& v, int l) { cfg.setup.train.adam_eps = parse_double(v, origin, l); };
  train["seed"] = [&](const std::string& v, int l) { cfg.setup.train.seed = parse_u64(v, origin, l); };
  train["threads"] = [&](const std::string& v, int l) { cfg.setup.train.threads = parse_int(v, origin, l); };
  train["threshold"] = [&](const std::string& v, int l) { cfg.setup.train.threshold = parse_double(v, origin, l); };

  auto& data = schema["data"];
  data["manifest"] = [&](const std::string& v, int) { cfg.manifest_path = v; };
  data["augment"] = [&](const std::string& v, int l) { cfg.setup.data.augment = parse_bool(v, origin, l); };
  data["clahe"] = [&](const std::string& v, int l) { cfg.setup.data.clahe_enabled = parse_bool(v, origin, l); };
  data["clahe_clip"] = [&](const std::string& v, int l) { cfg.setup.data.clahe_clip = parse_double(v, origin, l); };
  data["clahe_tiles_r"] = [&](const std::string& v, int l) { cfg.setup.data.clahe_tiles_r = parse_int(v, origin, l); };
  data["clahe_tiles_c"] = [&](const std::string& v, int l) { cfg.setup.data.clahe_tiles_c = parse_int(v, origin, l); };
  data["oversample"] = [&](const std::string& v, int l) { cfg.setup.data.oversample_enabled = parse_bool(v, origin, l); };
  data["oversample_threshold"] = [&](const std::string& v, int l) { cfg.setup.data.oversample_threshold = parse_double(v, origin, l); };
  data["oversample_factor"] = [&](const std::string& v, int l) { cfg.setup.data.oversample_factor = parse_int(v, origin, l); };

  auto& output = schema["output"];
  output["dir"] = [&](const std::string& v, int) { cfg.output_dir = v; };

  std::istringstream lines(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(lines, raw)) {
    ++line_no;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') bad(origin, line_no, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (schema.find(section) == schema.end()) {
        bad(origin, line_no, "unknown section '" + section + "'");
      }
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) bad(origin, line_no, "expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (section.empty()) bad(origin, line_no, "key '" + key + "' appears before any section");
    auto& keys = schema[section];
    auto it = keys.find(key);
    if (it == keys.end()) {
      bad(origin, line_no, "unknown key '" + key + "' in section [" + section + "]");
    }
    try {
      it->second(value, line_no);
    } catch (const std::invalid_argument& e) {
      std::string what = e.what();
      if (what.rfind(origin, 0) == 0) throw;  // already carries file:line
      bad(origin, line_no, what);
    }
  }
  return cfg;
}

std::string ExperimentConfig::to_ini() const {
  std::ostringstream os;
  os << "[model]\n";
  os << "family = " << to_string(setup.model.family) << "\n";
  os << "depth = " << setup.model.depth << "\n";
  os << "base_width = " << setup.model.base_width << "\n";
  os << "width_multiplier = " << setup.model.width_multiplier << "\n";
  os << "dilation_scheme =";
  auto dil = setup.model.effective_dilations();
  for (size_t i = 0; i < dil.size(); ++i) os << (i ? "," : " ") << dil[i];
  os << "\n";
  os << "gcn_kernel = " << setup.model.gcn_kernel << "\n";
  os << "batch_norm = " << (setup.model.batch_norm ? "true" : "false") << "\n";
  os << "br_relu = " << (setup.model.br_relu ? "true" : "false") << "\n";
  os << "\n[loss]\n";
  os << "kind = " << to_string(setup.loss.kind) << "\n";
  os << "gamma = " << fmt(setup.loss.gamma) << "\n";
  os << "lambda = " << fmt(setup.loss.lambda) << "\n";
  os << "tau = " << fmt(setup.loss.tau) << "\n";
  os << "eps = " << fmt(setup.loss.eps) << "\n";
  os << "clamp_delta = " << fmt(setup.loss.clamp_delta) << "\n";
  os << "per_sample = " << (setup.loss.per_sample ? "true" : "false") << "\n";
  os << "\n[train]\n";
  os << "epochs = " << setup.train.epochs << "\n";
  os << "batch_size = " << setup.train.batch_size << "\n";
  os << "grad_accum = " << setup.train.grad_accum << "\n";
  os << "lr_max = " << fmt(setup.train.lr_max) << "\n";
  os << "lr_min = " << fmt(setup.train.lr_min) << "\n";
  os << "cycle_length = " << setup.train.cycle_length << "\n";
  os << "weight_decay = " << fmt(setup.train.weight_decay) << "\n";
  os << "beta1 = " << fmt(setup.train.beta1) << "\n";
  os << "beta2 = " << fmt(setup.train.beta2) << "\n";
  os << "adam_eps = " << fmt(setup.train.adam_eps) << "\n";
  os << "seed = " << setup.train.seed << "\n";
  os << "threads = " << setup.train.threads << "\n";
  os << "threshold = " << fmt(setup.train.threshold) << "\n";
  os << "\n[data]\n";
  os << "manifest = " << manifest_path << "\n";
  os << "augment = " << (setup.data.augment ? "true" : "false") << "\n";
  os << "clahe = " << (setup.data.clahe_enabled ? "true" : "false") << "\n";
  os << "clahe_clip = " << fmt(setup.data.clahe_clip) << "\n";
  os << "clahe_tiles_r = " << setup.data.clahe_tiles_r << "\n";
  os << "clahe_tiles_c = " << setup.data.clahe_tiles_c << "\n";
  os << "oversample = " << (setup.data.oversample_enabled ? "true" : "false") << "\n";
  os << "oversample_threshold = " << fmt(setup.data.oversample_threshold) << "\n";
  os << "oversample_factor = " << setup.data.oversample_factor << "\n";
  os << "\n[output]\n";
  os << "dir = " << output_dir << "\n";
  return os.str();
}

}  // namespace segkit
