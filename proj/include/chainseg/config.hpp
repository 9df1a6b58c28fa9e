#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainseg/network.hpp"
#include "chainseg/training.hpp"

namespace chainseg {

// Malformed or inconsistent run configuration. Carries the line number or the
// dotted key path, so a typo in a config file points at itself.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

#define CS_CFG_CHECK(cond, msg)            \
  do {                                     \
    if (!(cond)) {                         \
      std::ostringstream os_;              \
      os_ << msg;                          \
      throw ::chainseg::ConfigError(os_.str()); \
    }                                      \
  } while (0)

// ---------------------------------------------------------------------------
// INI dialect: [section] headers, `key = value` lines, `#` or `;` comments.
// Values end at the first comment character; keys are unique per section.
// Sections and keys are held sorted, so the serialized form (and the hash on
// top of it) does not depend on the order the file was written in.
// ---------------------------------------------------------------------------

class IniFile {
 public:
  struct Entry {
    std::string value;
    int line = 0;  // 0 for entries set programmatically
  };

  static IniFile parse(const std::string& text) {
    IniFile ini;
    std::istringstream is(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(is, raw)) {
      ++line_no;
      const auto cut = raw.find_first_of("#;");
      std::string line = trim(cut == std::string::npos ? raw : raw.substr(0, cut));
      if (line.empty()) continue;
      if (line.front() == '[') {
        CS_CFG_CHECK(line.back() == ']' && line.size() > 2,
                     "config line " << line_no << ": malformed section header '" << line << "'");
        section = trim(line.substr(1, line.size() - 2));
        CS_CFG_CHECK(!section.empty(), "config line " << line_no << ": empty section name");
        CS_CFG_CHECK(!ini.sections_.count(section),
                     "config line " << line_no << ": duplicate section [" << section << "]");
        ini.sections_[section];
        continue;
      }
      const auto eq = line.find('=');
      CS_CFG_CHECK(eq != std::string::npos,
                   "config line " << line_no << ": expected 'key = value', got '" << line << "'");
      CS_CFG_CHECK(!section.empty(),
                   "config line " << line_no << ": key outside any [section]");
      const std::string key = trim(line.substr(0, eq));
      CS_CFG_CHECK(!key.empty(), "config line " << line_no << ": empty key");
      auto& sec = ini.sections_[section];
      CS_CFG_CHECK(!sec.count(key), "config line " << line_no << ": duplicate key '" << key
                                                   << "' in section [" << section << "]");
      sec[key] = Entry{trim(line.substr(eq + 1)), line_no};
    }
    return ini;
  }

  static IniFile load(const std::string& path) {
    std::ifstream is(path);
    CS_CFG_CHECK(is.good(), "config: cannot open '" << path << "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse(buf.str());
  }

  void set(const std::string& section, const std::string& key, const std::string& value) {
    sections_[section][key] = Entry{value, 0};
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) != 0;
  }

  bool has_section(const std::string& section) const { return sections_.count(section) != 0; }

  const std::string& get(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    CS_CFG_CHECK(s != sections_.end(), "config: missing section [" << section << "]");
    auto k = s->second.find(key);
    CS_CFG_CHECK(k != s->second.end(), "config: missing key '" << section << "." << key << "'");
    return k->second.value;
  }

  std::string get_or(const std::string& section, const std::string& key,
                     const std::string& fallback) const {
    return has(section, key) ? get(section, key) : fallback;
  }

  int64_t get_i64(const std::string& section, const std::string& key) const {
    return parse_i64(get(section, key), section, key);
  }
  int64_t get_i64_or(const std::string& section, const std::string& key, int64_t fallback) const {
    return has(section, key) ? get_i64(section, key) : fallback;
  }

  double get_f64(const std::string& section, const std::string& key) const {
    const std::string& v = get(section, key);
    size_t used = 0;
    double out = 0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    CS_CFG_CHECK(used == v.size() && !v.empty(),
                 "config: '" << section << "." << key << "' is not a number: '" << v << "'");
    return out;
  }
  double get_f64_or(const std::string& section, const std::string& key, double fallback) const {
    return has(section, key) ? get_f64(section, key) : fallback;
  }

  bool get_bool(const std::string& section, const std::string& key) const {
    const std::string& v = get(section, key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    CS_CFG_CHECK(false, "config: '" << section << "." << key << "' must be true/false/1/0, got '"
                                    << v << "'");
    return false;
  }
  bool get_bool_or(const std::string& section, const std::string& key, bool fallback) const {
    return has(section, key) ? get_bool(section, key) : fallback;
  }

  std::vector<int64_t> get_i64_list(const std::string& section, const std::string& key) const {
    const std::string& v = get(section, key);
    std::vector<int64_t> out;
    std::istringstream is(v);
    std::string item;
    while (std::getline(is, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(parse_i64(item, section, key));
    }
    CS_CFG_CHECK(!out.empty(),
                 "config: '" << section << "." << key << "' holds no values: '" << v << "'");
    return out;
  }

  // Sorted canonical form; two files with the same content in any order
  // serialize identically.
  std::string canonical() const {
    std::ostringstream os;
    bool first = true;
    for (const auto& [name, keys] : sections_) {
      if (!first) os << "\n";
      first = false;
      os << "[" << name << "]\n";
      for (const auto& [key, entry] : keys) os << key << " = " << entry.value << "\n";
    }
    return os.str();
  }

  // FNV-1a over the canonical text: a stable fingerprint of the settings.
  uint64_t hash() const {
    const std::string text = canonical();
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return h;
  }

  const std::map<std::string, std::map<std::string, Entry>>& sections() const {
    return sections_;
  }

  // Rejects keys that no loader consumes; a misspelled setting fails loudly
  // instead of silently falling back to a default.
  void check_known(const std::map<std::string, std::vector<std::string>>& known) const {
    for (const auto& [name, keys] : sections_) {
      auto it = known.find(name);
      CS_CFG_CHECK(it != known.end(), "config: unknown section [" << name << "]");
      for (const auto& [key, entry] : keys) {
        bool ok = false;
        for (const auto& k : it->second) ok = ok || k == key;
        CS_CFG_CHECK(ok, "config line " << entry.line << ": unknown key '" << name << "." << key
                                        << "'");
      }
    }
  }

 private:
  static std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static int64_t parse_i64(const std::string& v, const std::string& section,
                           const std::string& key) {
    size_t used = 0;
    int64_t out = 0;
    try {
      out = std::stoll(v, &used);
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    CS_CFG_CHECK(used == v.size() && !v.empty(),
                 "config: '" << section << "." << key << "' is not an integer: '" << v << "'");
    return out;
  }

  std::map<std::string, std::map<std::string, Entry>> sections_;
};

// ---------------------------------------------------------------------------
// Typed views over the [model], [train], and [augment] sections.
// ---------------------------------------------------------------------------

namespace detail {

inline const std::map<std::string, std::vector<std::string>>& known_run_keys() {
  static const std::map<std::string, std::vector<std::string>> keys = {
      {"model",
       {"levels", "depths", "channels", "connection", "gpa", "fha", "decoder_channels",
        "input_h", "input_w", "seed"}},
      {"train", {"lr", "batch", "epochs", "loss", "seed", "early_stop_patience"}},
      {"augment",
       {"p_rotate", "rotation_degrees", "p_translate", "translation_fraction", "p_blur",
        "blur_sigma", "p_jitter", "p_flip"}},
  };
  return keys;
}

inline MagnitudeRange range_from(const IniFile& ini, const std::string& key) {
  const std::string& v = ini.get("augment", key);
  const auto comma = v.find(',');
  CS_CFG_CHECK(comma != std::string::npos && v.find(',', comma + 1) == std::string::npos,
               "config: 'augment." << key << "' wants 'lo,hi', got '" << v << "'");
  auto num = [&](std::string s) {
    const auto a = s.find_first_not_of(" \t");
    const auto b = s.find_last_not_of(" \t");
    s = a == std::string::npos ? "" : s.substr(a, b - a + 1);
    size_t used = 0;
    double out = 0;
    try {
      out = std::stod(s, &used);
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    CS_CFG_CHECK(!s.empty() && used == s.size(),
                 "config: 'augment." << key << "' wants 'lo,hi', got '" << v << "'");
    return out;
  };
  MagnitudeRange r;
  r.lo = num(v.substr(0, comma));
  r.hi = num(v.substr(comma + 1));
  return r;
}

}  // namespace detail

// Reads [model]. `levels`, `depths`, `channels`, and `decoder_channels` are
// required; the rest fall back to the struct defaults.
inline ModelConfig model_config_from_ini(const IniFile& ini) {
  ModelConfig c;
  c.encoder.num_levels = ini.get_i64("model", "levels");
  c.encoder.depth_per_level = ini.get_i64_list("model", "depths");
  c.encoder.channels_per_level = ini.get_i64_list("model", "channels");
  const std::string cm = ini.get_or("model", "connection", "dense");
  CS_CFG_CHECK(cm == "residual" || cm == "dense",
               "config: 'model.connection' must be residual or dense, got '" << cm << "'");
  c.encoder.connection_mode =
      cm == "residual" ? ConnectionMode::kResidual : ConnectionMode::kDense;
  const std::string gm = ini.get_or("model", "gpa", "full");
  if (gm == "full")
    c.gpa_mode = GpaMode::kFull;
  else if (gm == "ppa_only")
    c.gpa_mode = GpaMode::kPpaOnly;
  else if (gm == "gcm_only")
    c.gpa_mode = GpaMode::kGcmOnly;
  else if (gm == "off")
    c.gpa_mode = GpaMode::kOff;
  else
    CS_CFG_CHECK(false, "config: 'model.gpa' must be off, gcm_only, ppa_only, or full, got '"
                            << gm << "'");
  c.fha_enabled = ini.get_bool_or("model", "fha", true);
  c.encoder.feedback_enabled = c.fha_enabled;
  c.decoder_channels = ini.get_i64_list("model", "decoder_channels");
  c.input_h = ini.get_i64_or("model", "input_h", 32);
  c.input_w = ini.get_i64_or("model", "input_w", 32);
  c.seed = ini.get_i64_or("model", "seed", 0);
  return c;
}

// Reads [train] and, when present, [augment].
inline TrainConfig train_config_from_ini(const IniFile& ini) {
  TrainConfig c;
  c.learning_rate = ini.get_f64_or("train", "lr", c.learning_rate);
  c.batch_size = ini.get_i64_or("train", "batch", c.batch_size);
  c.epochs = ini.get_i64_or("train", "epochs", c.epochs);
  const std::string loss = ini.get_or("train", "loss", "balanced_bce");
  if (loss == "bce")
    c.loss = LossKind::kBce;
  else if (loss == "balanced_bce")
    c.loss = LossKind::kClassBalancedBce;
  else
    CS_CFG_CHECK(false,
                 "config: 'train.loss' must be bce or balanced_bce, got '" << loss << "'");
  c.seed = static_cast<uint64_t>(ini.get_i64_or("train", "seed", 0));
  if (ini.has("train", "early_stop_patience"))
    c.early_stop_patience = ini.get_i64("train", "early_stop_patience");

  if (ini.has_section("augment")) {
    auto& a = c.augment;
    a.p_rotate = ini.get_f64_or("augment", "p_rotate", 0.0);
    if (ini.has("augment", "rotation_degrees"))
      a.rotation_degrees = detail::range_from(ini, "rotation_degrees");
    a.p_translate = ini.get_f64_or("augment", "p_translate", 0.0);
    if (ini.has("augment", "translation_fraction"))
      a.translation_fraction = detail::range_from(ini, "translation_fraction");
    a.p_blur = ini.get_f64_or("augment", "p_blur", 0.0);
    if (ini.has("augment", "blur_sigma"))
      a.blur_sigma = detail::range_from(ini, "blur_sigma");
    a.p_shuffle = ini.get_f64_or("augment", "p_jitter", 0.0);
    a.channel_shuffle = a.p_shuffle > 0.0;
    a.p_flip = ini.get_f64_or("augment", "p_flip", 0.0);
    a.flip = a.p_flip > 0.0;
  }
  return c;
}

// Full round trip: the canonical form of the result parses back to the same
// configs and hashes identically.
inline IniFile ini_from(const ModelConfig& m, const TrainConfig& t) {
  IniFile ini;
  auto i64s = [](const std::vector<int64_t>& v) { return detail::join_i64(v); };
  auto f64 = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  ini.set("model", "levels", std::to_string(m.encoder.num_levels));
  ini.set("model", "depths", i64s(m.encoder.depth_per_level));
  ini.set("model", "channels", i64s(m.encoder.channels_per_level));
  ini.set("model", "connection", detail::mode_name(m.encoder.connection_mode));
  ini.set("model", "gpa", detail::mode_name(m.gpa_mode));
  ini.set("model", "fha", m.fha_enabled ? "true" : "false");
  ini.set("model", "decoder_channels", i64s(m.decoder_channels));
  ini.set("model", "input_h", std::to_string(m.input_h));
  ini.set("model", "input_w", std::to_string(m.input_w));
  ini.set("model", "seed", std::to_string(m.seed));

  ini.set("train", "lr", f64(t.learning_rate));
  ini.set("train", "batch", std::to_string(t.batch_size));
  ini.set("train", "epochs", std::to_string(t.epochs));
  ini.set("train", "loss", t.loss == LossKind::kBce ? "bce" : "balanced_bce");
  ini.set("train", "seed", std::to_string(t.seed));
  if (t.early_stop_patience)
    ini.set("train", "early_stop_patience", std::to_string(*t.early_stop_patience));

  const auto& a = t.augment;
  auto range = [&f64](const MagnitudeRange& r) { return f64(r.lo) + "," + f64(r.hi); };
  ini.set("augment", "p_rotate", f64(a.p_rotate));
  ini.set("augment", "rotation_degrees", range(a.rotation_degrees));
  ini.set("augment", "p_translate", f64(a.p_translate));
  ini.set("augment", "translation_fraction", range(a.translation_fraction));
  ini.set("augment", "p_blur", f64(a.p_blur));
  ini.set("augment", "blur_sigma", range(a.blur_sigma));
  ini.set("augment", "p_jitter", f64(a.p_shuffle));
  ini.set("augment", "p_flip", f64(a.p_flip));
  return ini;
}

// Parses, rejects unknown keys, and materializes both configs at once.
inline std::pair<ModelConfig, TrainConfig> run_configs_from_text(const std::string& text) {
  IniFile ini = IniFile::parse(text);
  ini.check_known(detail::known_run_keys());
  return {model_config_from_ini(ini), train_config_from_ini(ini)};
}

}  // namespace chainseg
