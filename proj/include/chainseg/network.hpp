#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "chainseg/core/serialize.hpp"
#include "chainseg/fafc.hpp"
#include "chainseg/gpa.hpp"

namespace chainseg {

// Full-model configuration. `fha_enabled` is authoritative for the feedback
// attention: the embedded encoder config's flag is overwritten from it when
// the model is built, so a config round-tripped through text reproduces the
// same model.
struct ModelConfig {
  EncoderConfig encoder;
  GpaMode gpa_mode = GpaMode::kFull;
  bool fha_enabled = true;
  std::vector<int64_t> decoder_channels;  // one entry per decode stage, deep to shallow
  int64_t input_h = 32;
  int64_t input_w = 32;
  int64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;

  void validate() const {
    encoder.validate();
    const int64_t div = int64_t(1) << (encoder.num_levels - 1);
    CS_CHECK(input_h >= div && input_h % div == 0,
             "model: input_h " << input_h << " not divisible by " << div);
    CS_CHECK(input_w >= div && input_w % div == 0,
             "model: input_w " << input_w << " not divisible by " << div);
    CS_CHECK(static_cast<int64_t>(decoder_channels.size()) == encoder.num_levels - 1,
             "model: decoder_channels has " << decoder_channels.size() << " entries for "
                                            << encoder.num_levels << " levels (want levels-1)");
    for (int64_t c : decoder_channels)
      CS_CHECK(c >= 1, "model: decoder channel counts must be >= 1, got " << c);
    CS_CHECK(!(fha_enabled && encoder.num_levels == 1),
             "model: fha_enabled requires num_levels >= 2");
  }
};

namespace detail {

inline const char* mode_name(ConnectionMode m) {
  return m == ConnectionMode::kResidual ? "residual" : "dense";
}
inline const char* mode_name(GpaMode m) {
  switch (m) {
    case GpaMode::kFull: return "full";
    case GpaMode::kPpaOnly: return "ppa_only";
    case GpaMode::kGcmOnly: return "gcm_only";
    case GpaMode::kOff: return "off";
  }
  return "full";
}
inline std::string join_i64(const std::vector<int64_t>& v) {
  std::ostringstream os;
  for (size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}
inline std::vector<int64_t> split_i64(const std::string& s) {
  std::vector<int64_t> out;
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ','))
    if (!item.empty()) out.push_back(std::stoll(item));
  return out;
}

}  // namespace detail

// key=value text block, one line per field; the checkpoint manifest format.
inline std::string model_config_to_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "num_levels=" << c.encoder.num_levels << "\n"
     << "depth_per_level=" << detail::join_i64(c.encoder.depth_per_level) << "\n"
     << "channels_per_level=" << detail::join_i64(c.encoder.channels_per_level) << "\n"
     << "connection_mode=" << detail::mode_name(c.encoder.connection_mode) << "\n"
     << "fha_enabled=" << (c.fha_enabled ? 1 : 0) << "\n"
     << "gpa_mode=" << detail::mode_name(c.gpa_mode) << "\n"
     << "decoder_channels=" << detail::join_i64(c.decoder_channels) << "\n"
     << "input_h=" << c.input_h << "\n"
     << "input_w=" << c.input_w << "\n"
     << "seed=" << c.seed << "\n";
  return os.str();
}

inline ModelConfig model_config_from_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    CS_CHECK(eq != std::string::npos, "model config: malformed line '" << line << "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto need = [&](const char* key) {
    auto it = kv.find(key);
    CS_CHECK(it != kv.end(), "model config: missing key '" << key << "'");
    return it->second;
  };
  ModelConfig c;
  c.encoder.num_levels = std::stoll(need("num_levels"));
  c.encoder.depth_per_level = detail::split_i64(need("depth_per_level"));
  c.encoder.channels_per_level = detail::split_i64(need("channels_per_level"));
  const std::string cm = need("connection_mode");
  CS_CHECK(cm == "residual" || cm == "dense", "model config: unknown connection_mode '" << cm
                                                  << "'");
  c.encoder.connection_mode = cm == "residual" ? ConnectionMode::kResidual
                                               : ConnectionMode::kDense;
  c.fha_enabled = need("fha_enabled") == "1";
  c.encoder.feedback_enabled = c.fha_enabled;
  const std::string gm = need("gpa_mode");
  if (gm == "full") c.gpa_mode = GpaMode::kFull;
  else if (gm == "ppa_only") c.gpa_mode = GpaMode::kPpaOnly;
  else if (gm == "gcm_only") c.gpa_mode = GpaMode::kGcmOnly;
  else if (gm == "off") c.gpa_mode = GpaMode::kOff;
  else CS_CHECK(false, "model config: unknown gpa_mode '" << gm << "'");
  c.decoder_channels = detail::split_i64(need("decoder_channels"));
  c.input_h = std::stoll(need("input_h"));
  c.input_w = std::stoll(need("input_w"));
  c.seed = std::stoll(need("seed"));
  return c;
}

// Ablation rows: each step adds parameters on top of the previous one and
// removes none, so the parameter-name sets nest. `base` should be the full
// configuration; the row name says which pieces stay.
//   baseline      chain depth 1 everywhere, residual, no feedback, no gpa
//   fafc_residual full chain depths, residual side connections
//   fafc_dense    + dense injection of older side features
//   fha           + feedback attention on every level
//   gpa_gcm       + global context block only
//   gpa_ppa       + pyramid cascade only
//   full          everything
inline ModelConfig ablation_config(const ModelConfig& base, const std::string& row) {
  ModelConfig c = base;
  c.gpa_mode = GpaMode::kFull;
  c.fha_enabled = true;
  c.encoder.feedback_enabled = true;
  c.encoder.connection_mode = ConnectionMode::kDense;
  if (row == "full") return c;
  if (row == "gpa_gcm") {
    c.gpa_mode = GpaMode::kGcmOnly;
    return c;
  }
  if (row == "gpa_ppa") {
    c.gpa_mode = GpaMode::kPpaOnly;
    return c;
  }
  c.gpa_mode = GpaMode::kOff;
  if (row == "fha") return c;
  c.fha_enabled = false;
  c.encoder.feedback_enabled = false;
  if (row == "fafc_dense") return c;
  c.encoder.connection_mode = ConnectionMode::kResidual;
  if (row == "fafc_residual") return c;
  if (row == "baseline") {
    for (auto& d : c.encoder.depth_per_level) d = 1;
    return c;
  }
  CS_CHECK(false, "ablation_config: unknown row '" << row << "'");
  return c;
}

inline const std::array<const char*, 7>& ablation_rows() {
  static const std::array<const char*, 7> rows = {
      "baseline", "fafc_residual", "fafc_dense", "fha", "gpa_gcm", "gpa_ppa", "full"};
  return rows;
}

// Encoder -> GPA on the deepest feature -> light decoder. The decoder is a
// plain skip-connected upsampler: each stage is [2x bilinear upsample,
// concatenate the matching encoder level, 3x3 conv, relu]; a 1x1 conv plus
// sigmoid produces the 1-channel probability map at input resolution. No
// normalization anywhere in the decoder, so zero weights give exactly 0.5.
// Input is single-channel.
template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg)
      : cfg_(normalize(std::move(cfg))),
        rng_(static_cast<uint64_t>(cfg_.seed)),
        encoder_(store_, cfg_.encoder, 1, rng_),
        gpa_(store_, "gpa", cfg_.gpa_mode, cfg_.encoder.channels_per_level.back(), rng_) {
    const int64_t L = cfg_.encoder.num_levels;
    const auto& cpl = cfg_.encoder.channels_per_level;
    for (int64_t j = 1; j <= L - 1; ++j) {
      const int64_t prev_c = j == 1 ? cpl[static_cast<size_t>(L - 1)]
                                    : cfg_.decoder_channels[static_cast<size_t>(j - 2)];
      const int64_t skip_c = cpl[static_cast<size_t>(L - j - 1)];
      const int64_t out_c = cfg_.decoder_channels[static_cast<size_t>(j - 1)];
      const std::string k = "dec.s" + std::to_string(j);
      store_.create(k + ".w", {out_c, prev_c + skip_c, 3, 3}, Init::kHeNormal, rng_,
                    (prev_c + skip_c) * 9);
      store_.create(k + ".b", {out_c}, Init::kZeros, rng_);
    }
    // Zero head: the first forward is exactly 0.5 everywhere, so the loss
    // starts symmetric and the logits cannot saturate at initialization.
    // Upstream parameters engage from the second optimizer step on.
    const int64_t head_in =
        L == 1 ? cpl[0] : cfg_.decoder_channels[static_cast<size_t>(L - 2)];
    store_.create("dec.head.w", {1, head_in, 1, 1}, Init::kZeros, rng_);
    store_.create("dec.head.b", {1}, Init::kZeros, rng_);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& store() { return store_; }
  const ParamStore<T>& store() const { return store_; }
  Rng& rng() { return rng_; }
  const FafcEncoder<T>& encoder() const { return encoder_; }
  GpaUnit<T>& gpa() { return gpa_; }

  Var<T> forward(const Var<T>& batch) const { return forward_trace(batch).prob; }

  // Forward pass that keeps the intermediates needed by activation-map
  // visualization: the bridge feature and the pre-sigmoid logits.
  struct Trace {
    Var<T> gpa_out;
    Var<T> logits;
    Var<T> prob;
  };
  Trace forward_trace(const Var<T>& batch) const {
    check_rank(batch->value, 4, "model_forward");
    CS_CHECK(batch->value.dim(2) == cfg_.input_h && batch->value.dim(3) == cfg_.input_w,
             "model_forward: expected input size (" << cfg_.input_h << "," << cfg_.input_w
                 << "), got (" << batch->value.dim(2) << "," << batch->value.dim(3) << ")");
    auto [outs, st] = encoder_.forward(batch);
    auto top = gpa_.forward(outs.back());
    outs.pop_back();  // the deepest level enters through the gpa output
    Trace tr;
    tr.gpa_out = top;
    tr.logits = decode_logits(outs, top);
    tr.prob = ops::sigmoid(tr.logits);
    return tr;
  }

  // `skips` are the shallow L-1 encoder outputs ordered shallow -> deep; the
  // deepest level arrives as `gpa_output`. Exposed separately so the decoder
  // contract is testable.
  Var<T> decode(const std::vector<Var<T>>& skips, const Var<T>& gpa_output) const {
    return ops::sigmoid(decode_logits(skips, gpa_output));
  }

  Var<T> decode_logits(const std::vector<Var<T>>& skips, const Var<T>& gpa_output) const {
    const int64_t L = cfg_.encoder.num_levels;
    CS_CHECK(static_cast<int64_t>(skips.size()) == L - 1,
             "decode: got " << skips.size() << " skip features for " << L
                            << " levels (want levels-1)");
    check_rank(gpa_output->value, 4, "decode");
    CS_CHECK(gpa_output->value.dim(1) == cfg_.encoder.channels_per_level.back(),
             "decode: gpa output has " << gpa_output->value.dim(1) << " channels, the deepest "
                 << "level has " << cfg_.encoder.channels_per_level.back());
    Var<T> x = gpa_output;
    for (int64_t j = 1; j <= L - 1; ++j) {
      auto up = ops::bilinear_upsample(x, 2);
      const auto& skip = skips[static_cast<size_t>(L - j - 1)];
      CS_CHECK(up->value.dim(2) == skip->value.dim(2) && up->value.dim(3) == skip->value.dim(3),
               "decode: stage " << j << " resolution " << up->value.shape_string()
                   << " does not match skip " << skip->value.shape_string());
      const std::string k = "dec.s" + std::to_string(j);
      x = ops::relu(ops::conv2d(ops::concat_channels(std::vector<Var<T>>{up, skip}),
                                store_.get(k + ".w"), store_.get(k + ".b"), 1, 1));
    }
    return ops::conv2d(x, store_.get("dec.head.w"), store_.get("dec.head.b"), 1, 0);
  }

 private:
  static ModelConfig normalize(ModelConfig cfg) {
    cfg.encoder.feedback_enabled = cfg.fha_enabled;
    cfg.validate();
    return cfg;
  }

  ModelConfig cfg_;
  ParamStore<T> store_;
  Rng rng_;
  FafcEncoder<T> encoder_;
  GpaUnit<T> gpa_;
};

// Everything needed to resume or evaluate a run. Round-trips bitwise.
template <typename T>
struct Checkpoint {
  ModelConfig config;
  int64_t epoch = 0;
  double best_metric = 0.0;
  std::array<uint64_t, 6> rng_state{};
  std::map<std::string, Tensor<T>> params;
};

namespace detail {
inline constexpr char kCkptMagic[9] = "CSEGCKPT";
inline constexpr uint32_t kCkptVersion = 1;
inline constexpr uint32_t kCkptFooter = 0x444e5343;  // "CSND"
template <typename T>
constexpr uint8_t dtype_tag() {
  return std::is_same_v<T, float> ? 1 : 2;
}
}  // namespace detail

// Binary layout (all integers little-endian): magic, version u32, dtype u8
// (1=f32, 2=f64), config text, epoch i64, best_metric f64, rng-state word
// count u32 + words u64, param count u64, then per param [name, rank u32,
// dims i64, raw IEEE bits], and a footer word to catch truncation.
template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    CS_CHECK(os.good(), "checkpoint: cannot open '" << tmp.string() << "' for writing");
    os.write(detail::kCkptMagic, 8);
    io::write_u32(os, detail::kCkptVersion);
    io::write_u8(os, detail::dtype_tag<T>());
    io::write_str(os, model_config_to_text(ck.config));
    io::write_i64(os, ck.epoch);
    io::write_f64(os, ck.best_metric);
    io::write_u32(os, static_cast<uint32_t>(ck.rng_state.size()));
    for (uint64_t w : ck.rng_state) io::write_u64(os, w);
    io::write_u64(os, ck.params.size());
    for (const auto& [name, tensor] : ck.params) {
      io::write_str(os, name);
      io::write_tensor(os, tensor);
    }
    io::write_u32(os, detail::kCkptFooter);
    os.flush();
    CS_CHECK(os.good(), "checkpoint: write to '" << tmp.string() << "' failed");
  }
  fs::rename(tmp, target);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  CS_CHECK(is.good(), "checkpoint: cannot open '" << path << "'");
  char magic[8];
  is.read(magic, 8);
  CS_CHECK(is.gcount() == 8 && std::equal(magic, magic + 8, detail::kCkptMagic),
           "checkpoint: '" << path << "' is not a checkpoint file");
  const uint32_t version = io::read_u32(is);
  CS_CHECK(version == detail::kCkptVersion,
           "checkpoint: unsupported version " << version);
  const uint8_t tag = io::read_u8(is);
  CS_CHECK(tag == detail::dtype_tag<T>(), "checkpoint: dtype tag " << int(tag)
           << " does not match the requested scalar type (want "
           << int(detail::dtype_tag<T>()) << ")");
  Checkpoint<T> ck;
  ck.config = model_config_from_text(io::read_str(is));
  ck.epoch = io::read_i64(is);
  ck.best_metric = io::read_f64(is);
  const uint32_t words = io::read_u32(is);
  CS_CHECK(words == ck.rng_state.size(), "checkpoint: rng state has " << words << " words");
  for (auto& w : ck.rng_state) w = io::read_u64(is);
  const uint64_t count = io::read_u64(is);
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = io::read_str(is);
    ck.params.emplace(std::move(name), io::read_tensor<T>(is));
  }
  CS_CHECK(io::read_u32(is) == detail::kCkptFooter, "checkpoint: truncated file");
  return ck;
}

// Capture the model's current parameters (by value).
template <typename T>
Checkpoint<T> snapshot(const Model<T>& model, int64_t epoch, double best_metric,
                       const std::array<uint64_t, 6>& rng_state) {
  Checkpoint<T> ck;
  ck.config = model.config();
  ck.epoch = epoch;
  ck.best_metric = best_metric;
  ck.rng_state = rng_state;
  for (const auto& name : model.store().names())
    ck.params.emplace(name, model.store().get(name)->value);
  return ck;
}

// Copy checkpoint parameters into the model. The name sets must match
// exactly in both directions; shapes are checked per parameter.
template <typename T>
void restore(Model<T>& model, const Checkpoint<T>& ck) {
  CS_CHECK(model.store().size() == ck.params.size(),
           "restore: model has " << model.store().size() << " parameters, checkpoint has "
                                 << ck.params.size());
  for (const auto& name : model.store().names()) {
    auto it = ck.params.find(name);
    CS_CHECK(it != ck.params.end(), "restore: checkpoint is missing parameter '" << name << "'");
    auto& dst = model.store().get(name)->value;
    CS_CHECK(dst.same_shape(it->second), "restore: parameter '" << name << "' has shape "
             << it->second.shape_string() << " in the checkpoint, model wants "
             << dst.shape_string());
    std::copy(it->second.data(), it->second.data() + it->second.numel(), dst.data());
  }
}

}  // namespace chainseg
