#include "sdconv/config.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "sdconv/error.hpp"
#include "sdconv/layers.hpp"

namespace sdconv {

namespace {

struct Binding {
  std::string key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

long long parse_int(const std::string& key, const std::string& text) {
  try {
    size_t used = 0;
    long long v = std::stoll(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + text + "'");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& text) {
  try {
    size_t used = 0;
    uint64_t v = std::stoull(text, &used);
    if (used != text.size() || text.find('-') != std::string::npos)
      throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + text + "'");
  }
}

double parse_float(const std::string& key, const std::string& text) {
  try {
    size_t used = 0;
    double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + text + "'");
  }
}

std::string fmt_float(double v) {
  std::ostringstream out;
  out.precision(9);
  out << v;
  return out.str();
}

#define STR_FIELD(name, member)                                             \
  Binding {                                                                 \
    name, [](TrainConfig& c, const std::string& v) { c.member = v; },       \
        [](const TrainConfig& c) { return c.member; }                       \
  }
#define INT_FIELD(name, member)                                                            \
  Binding {                                                                                \
    name, [](TrainConfig& c, const std::string& v) { c.member = int(parse_int(name, v)); },\
        [](const TrainConfig& c) { return std::to_string(c.member); }                      \
  }
#define I64_FIELD(name, member)                                                      \
  Binding {                                                                          \
    name, [](TrainConfig& c, const std::string& v) { c.member = parse_int(name, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.member); }                \
  }
#define FLT_FIELD(name, member)                                                               \
  Binding {                                                                                   \
    name, [](TrainConfig& c, const std::string& v) { c.member = float(parse_float(name, v)); }, \
        [](const TrainConfig& c) { return fmt_float(double(c.member)); }                      \
  }

const std::vector<Binding>& bindings() {
  static const std::vector<Binding> table = {
      STR_FIELD("dataset", dataset),
      STR_FIELD("data_dir", data_dir),
      STR_FIELD("model", model),
      INT_FIELD("k", num_experts),
      INT_FIELD("r", reduce_ratio),
      FLT_FIELD("sharpness", sharpness),
      FLT_FIELD("s", target_sparsity),
      INT_FIELD("n", prune_iterations),
      INT_FIELD("epochs", epochs),
      INT_FIELD("batch_size", batch_size),
      FLT_FIELD("max_lr", max_lr),
      FLT_FIELD("warmup_epochs", warmup_epochs),
      FLT_FIELD("lambda_s", lambda_s),
      FLT_FIELD("lambda_r", lambda_r),
      FLT_FIELD("momentum", momentum),
      Binding{"seed",
              [](TrainConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); },
              [](const TrainConfig& c) { return std::to_string(c.seed); }},
      STR_FIELD("mask_mode", mask_mode),
      FLT_FIELD("attn_temp_start", attn_temp_start),
      FLT_FIELD("attn_temp_end", attn_temp_end),
      FLT_FIELD("attn_anneal_epochs", attn_anneal_epochs),
      I64_FIELD("train_limit", train_limit),
      I64_FIELD("eval_limit", eval_limit),
      STR_FIELD("out_dir", out_dir),
      STR_FIELD("resume_path", resume_path),
      INT_FIELD("stop_after_epochs", stop_after_epochs),
  };
  return table;
}

#undef STR_FIELD
#undef INT_FIELD
#undef I64_FIELD
#undef FLT_FIELD

const Binding& find_binding(const std::string& key) {
  for (const Binding& b : bindings())
    if (b.key == key) return b;
  throw ConfigError("unknown key '" + key + "'");
}

void apply_line(TrainConfig& cfg, const std::string& line, const std::string& where) {
  std::string text = line;
  // trim
  auto notspace = [](unsigned char c) { return !std::isspace(c); };
  text.erase(text.begin(), std::find_if(text.begin(), text.end(), notspace));
  text.erase(std::find_if(text.rbegin(), text.rend(), notspace).base(), text.end());
  if (text.empty() || text[0] == '#') return;
  size_t eq = text.find('=');
  if (eq == std::string::npos)
    throw ConfigError("malformed assignment '" + text + "'" + where + " (expected key=value)");
  std::string key = text.substr(0, eq);
  std::string value = text.substr(eq + 1);
  key.erase(std::find_if(key.rbegin(), key.rend(), notspace).base(), key.end());
  value.erase(value.begin(), std::find_if(value.begin(), value.end(), notspace));
  find_binding(key).set(cfg, value);
}

void flatten_json(TrainConfig& cfg, const nlohmann::json& node, const std::string& prefix) {
  for (auto it = node.begin(); it != node.end(); ++it) {
    std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    const nlohmann::json& v = it.value();
    if (v.is_object()) {
      flatten_json(cfg, v, key);
    } else if (v.is_string()) {
      find_binding(key).set(cfg, v.get<std::string>());
    } else if (v.is_number_integer()) {
      find_binding(key).set(cfg, std::to_string(v.get<long long>()));
    } else if (v.is_number_unsigned()) {
      find_binding(key).set(cfg, std::to_string(v.get<unsigned long long>()));
    } else if (v.is_number_float()) {
      find_binding(key).set(cfg, fmt_float(v.get<double>()));
    } else {
      throw ConfigError("key '" + key + "': unsupported JSON value type");
    }
  }
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Binding& b : bindings()) keys.push_back(b.key);
  std::sort(keys.begin(), keys.end());
  return keys;
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
  apply_line(cfg, assignment, " in override");
}

std::string to_text(const TrainConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> rows;
  for (const Binding& b : bindings()) rows.emplace_back(b.key, b.get(cfg));
  std::sort(rows.begin(), rows.end());
  std::string out;
  for (const auto& [k, v] : rows) out += k + "=" + v + "\n";
  return out;
}

TrainConfig config_from_text(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) apply_line(cfg, line, "");
  return cfg;
}

void validate(const TrainConfig& cfg) {
  if (cfg.dataset != "mnist" && cfg.dataset != "cifar10")
    throw ConfigError("key 'dataset': expected mnist or cifar10, got '" + cfg.dataset + "'");
  if (cfg.model != "toy")
    throw ConfigError("key 'model': only 'toy' is trainable (zoo ids are cost-analysis only)");
  if (cfg.num_experts < 1) throw ConfigError("key 'k': must be >= 1");
  if (cfg.reduce_ratio < 1) throw ConfigError("key 'r': must be >= 1");
  if (!(cfg.sharpness > 0.0f)) throw ConfigError("key 'sharpness': must be > 0");
  if (!(cfg.target_sparsity >= 0.0f && cfg.target_sparsity < 1.0f))
    throw ConfigError("key 's': target sparsity must be in [0, 1)");
  if (cfg.prune_iterations < 1) throw ConfigError("key 'n': must be >= 1");
  if (cfg.epochs < 1) throw ConfigError("key 'epochs': must be >= 1");
  if (cfg.batch_size < 1) throw ConfigError("key 'batch_size': must be >= 1");
  if (!(cfg.max_lr > 0.0f)) throw ConfigError("key 'max_lr': must be > 0");
  if (cfg.warmup_epochs < 0.0f || cfg.warmup_epochs >= float(cfg.epochs))
    throw ConfigError("key 'warmup_epochs': must be in [0, epochs)");
  if (cfg.lambda_s < 0.0f) throw ConfigError("key 'lambda_s': must be >= 0");
  if (cfg.lambda_r < 0.0f) throw ConfigError("key 'lambda_r': must be >= 0");
  if (!(cfg.momentum >= 0.0f && cfg.momentum < 1.0f))
    throw ConfigError("key 'momentum': must be in [0, 1)");
  mask_mode_from_string(cfg.mask_mode);  // throws ConfigError on unknown mode
  if (!(cfg.attn_temp_start > 0.0f)) throw ConfigError("key 'attn_temp_start': must be > 0");
  if (!(cfg.attn_temp_end > 0.0f)) throw ConfigError("key 'attn_temp_end': must be > 0");
  if (cfg.attn_anneal_epochs < 0.0f)
    throw ConfigError("key 'attn_anneal_epochs': must be >= 0");
  if (cfg.train_limit < 0) throw ConfigError("key 'train_limit': must be >= 0");
  if (cfg.eval_limit < 0) throw ConfigError("key 'eval_limit': must be >= 0");
  if (cfg.stop_after_epochs < 0 || cfg.stop_after_epochs > cfg.epochs)
    throw ConfigError("key 'stop_after_epochs': must be in [0, epochs]");
  MaskMode mode = mask_mode_from_string(cfg.mask_mode);
  if ((mode == MaskMode::kStatic || mode == MaskMode::kDynamicDense) &&
      cfg.target_sparsity != 0.0f)
    throw ConfigError("key 'mask_mode': '" + cfg.mask_mode +
                      "' has no prunable masks; requires s=0");
}

TrainConfig parse_train_config(const std::string& path,
                               const std::vector<std::string>& overrides) {
  TrainConfig cfg;
  if (!path.empty()) {
    std::ifstream file(path);
    if (!file) throw ConfigError("cannot open config file: " + path);
    std::string text((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    // JSON when the first non-space character opens an object
    size_t first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
      nlohmann::json doc;
      try {
        doc = nlohmann::json::parse(text);
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
      }
      if (!doc.is_object()) throw ConfigError("config file " + path + ": top level must be an object");
      flatten_json(cfg, doc, "");
    } else {
      std::istringstream in(text);
      std::string line;
      int line_no = 0;
      while (std::getline(in, line)) {
        ++line_no;
        apply_line(cfg, line, " at " + path + ":" + std::to_string(line_no));
      }
    }
  }
  for (const std::string& assignment : overrides) apply_override(cfg, assignment);
  validate(cfg);
  return cfg;
}

}  // namespace sdconv
