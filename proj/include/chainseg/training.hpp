#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "chainseg/core/serialize.hpp"
#include "chainseg/datasets.hpp"
#include "chainseg/evaluation.hpp"
#include "chainseg/network.hpp"

namespace chainseg {

enum class LossKind { kBce, kClassBalancedBce };
enum class OptimizerKind { kAdam };

// ---------------------------------------------------------------------------
// Loss. One fused graph op: clamping, weighting, and the mean live together so
// the backward pass is a single expression.
// ---------------------------------------------------------------------------

// Mean binary cross-entropy with optional inverse-class-frequency weights
// w_pos = N/(2*N_pos+eps), w_neg = N/(2*N_neg+eps); the weights average to one
// over the pixels, so a pred of exactly 0.5 scores ln 2 under either kind.
// Predictions are clamped to [eps, 1-eps]; `clamp_count_out` reports how many
// pixels needed it (clamped pixels get zero gradient).
template <typename T>
Var<T> bce_loss(const Var<T>& pred, const Tensor<T>& target, LossKind kind, double eps = 1e-7,
                int64_t* clamp_count_out = nullptr) {
  CS_CHECK(pred->value.same_shape(target),
           "bce_loss: pred " << pred->value.shape_string() << " and target "
                             << target.shape_string() << " differ");
  CS_CHECK(eps >= 0.0 && eps < 0.5, "bce_loss: eps must lie in [0, 0.5), got " << eps);
  const int64_t n = target.numel();
  CS_CHECK(n > 0, "bce_loss: empty tensors");

  int64_t n_pos = 0;
  for (int64_t i = 0; i < n; ++i) {
    CS_CHECK(target[i] == T(0) || target[i] == T(1),
             "bce_loss: target value " << target[i] << " at flat index " << i);
    n_pos += target[i] == T(1) ? 1 : 0;
  }
  const int64_t n_neg = n - n_pos;
  double w_pos = 1.0, w_neg = 1.0;
  if (kind == LossKind::kClassBalancedBce) {
    w_pos = double(n) / (2.0 * double(n_pos) + eps);
    w_neg = double(n) / (2.0 * double(n_neg) + eps);
  }

  const double lo = eps, hi = 1.0 - eps;
  double sum = 0.0;
  int64_t clamped = 0;
  for (int64_t i = 0; i < n; ++i) {
    double p = static_cast<double>(pred->value[i]);
    if (p < lo || p > hi) {
      p = std::clamp(p, lo, hi);
      ++clamped;
    }
    sum += target[i] == T(1) ? -w_pos * std::log(p) : -w_neg * std::log1p(-p);
  }
  if (clamp_count_out) *clamp_count_out = clamped;

  Tensor<T> out({1});
  out[0] = static_cast<T>(sum / double(n));
  return make_op<T>(
      std::move(out), {pred},
      [t = target, w_pos, w_neg, lo, hi, n](Node<T>& node) {
        auto& x = *node.inputs[0];
        if (!x.requires_grad) return;
        auto& gx = x.ensure_grad();
        const T g0 = node.grad[0];
        for (int64_t i = 0; i < n; ++i) {
          const double p = static_cast<double>(x.value[i]);
          if (p < lo || p > hi) continue;  // saturated by the clamp
          const double d =
              t[i] == T(1) ? -w_pos / p : w_neg / (1.0 - p);
          gx[i] += static_cast<T>(d / double(n)) * g0;
        }
      });
}

// ---------------------------------------------------------------------------
// Augmentation. Geometry applies to image and mask alike (nearest-neighbor on
// the mask keeps it binary); photometry touches only the image.
// ---------------------------------------------------------------------------

// Magnitude range; samples draw uniformly from [lo, hi].
struct MagnitudeRange {
  double lo = 0.0, hi = 0.0;

  bool operator==(const MagnitudeRange&) const = default;
};

struct AugmentConfig {
  MagnitudeRange rotation_degrees;      // magnitude, sign drawn separately
  MagnitudeRange translation_fraction;  // per-axis fraction of the image side
  MagnitudeRange blur_sigma;
  bool channel_shuffle = false;  // single-channel slices: additive intensity jitter
  bool flip = false;
  double p_rotate = 0, p_translate = 0, p_blur = 0, p_shuffle = 0, p_flip = 0;

  bool operator==(const AugmentConfig&) const = default;

  void validate() const {
    for (double p : {p_rotate, p_translate, p_blur, p_shuffle, p_flip})
      CS_CHECK(p >= 0.0 && p <= 1.0, "augment: probability " << p << " outside [0,1]");
    for (const auto& r : {rotation_degrees, translation_fraction, blur_sigma})
      CS_CHECK(r.lo >= 0.0 && r.hi >= r.lo,
               "augment: range [" << r.lo << "," << r.hi << "] must be non-negative");
  }
};

// Additive jitter magnitude standing in for channel shuffling on 1-channel
// data (intensities are z-scored, so this is a quarter sigma).
inline constexpr double kIntensityJitterMax = 0.25;

// Rotation about the image center. Multiples of 90 degrees on square images
// are exact index permutations; anything else resamples (bilinear image,
// nearest mask) with zero outside the frame.
inline SegmentationSample rotate_sample(const SegmentationSample& s, double degrees) {
  const int64_t h = s.image.dim(0), w = s.image.dim(1);
  SegmentationSample out = s;
  const double quarter = degrees / 90.0;
  if (h == w && std::abs(quarter - std::round(quarter)) < 1e-9) {
    int k = static_cast<int>(llround(quarter)) % 4;
    if (k < 0) k += 4;
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        // One counterclockwise quarter turn reads from (x, w-1-y).
        int64_t sy = y, sx = x;
        for (int q = 0; q < k; ++q) {
          const int64_t ty = sx, tx = w - 1 - sy;
          sy = ty;
          sx = tx;
        }
        out.image.at(y, x) = s.image.at(sy, sx);
        out.mask.at(y, x) = s.mask.at(sy, sx);
      }
    return out;
  }

  const double rad = degrees * 3.14159265358979323846 / 180.0;
  const double c = std::cos(rad), sn = std::sin(rad);
  const double cy = double(h - 1) / 2.0, cx = double(w - 1) / 2.0;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      // Inverse map: rotate the output coordinate backwards.
      const double dy = double(y) - cy, dx = double(x) - cx;
      const double sy = c * dy + sn * dx + cy;
      const double sx = -sn * dy + c * dx + cx;
      const int64_t y0 = static_cast<int64_t>(std::floor(sy));
      const int64_t x0 = static_cast<int64_t>(std::floor(sx));
      const double fy = sy - double(y0), fx = sx - double(x0);
      auto pix = [&](int64_t yy, int64_t xx) -> double {
        return (yy >= 0 && yy < h && xx >= 0 && xx < w) ? s.image.at(yy, xx) : 0.0;
      };
      out.image.at(y, x) = (1 - fy) * ((1 - fx) * pix(y0, x0) + fx * pix(y0, x0 + 1)) +
                           fy * ((1 - fx) * pix(y0 + 1, x0) + fx * pix(y0 + 1, x0 + 1));
      const int64_t ny = llround(sy), nx = llround(sx);
      out.mask.at(y, x) =
          (ny >= 0 && ny < h && nx >= 0 && nx < w) ? s.mask.at(ny, nx) : uint8_t(0);
    }
  return out;
}

// Integer pixel shift with zero fill.
inline SegmentationSample translate_sample(const SegmentationSample& s, int64_t dy, int64_t dx) {
  const int64_t h = s.image.dim(0), w = s.image.dim(1);
  SegmentationSample out = s;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const int64_t sy = y - dy, sx = x - dx;
      const bool in = sy >= 0 && sy < h && sx >= 0 && sx < w;
      out.image.at(y, x) = in ? s.image.at(sy, sx) : 0.0;
      out.mask.at(y, x) = in ? s.mask.at(sy, sx) : uint8_t(0);
    }
  return out;
}

inline SegmentationSample flip_sample(const SegmentationSample& s, bool horizontal) {
  const int64_t h = s.image.dim(0), w = s.image.dim(1);
  SegmentationSample out = s;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      const int64_t sy = horizontal ? y : h - 1 - y;
      const int64_t sx = horizontal ? w - 1 - x : x;
      out.image.at(y, x) = s.image.at(sy, sx);
      out.mask.at(y, x) = s.mask.at(sy, sx);
    }
  return out;
}

// Separable Gaussian blur of the image only, edge-replicated.
inline SegmentationSample blur_sample(const SegmentationSample& s, double sigma) {
  if (sigma <= 1e-6) return s;
  const int64_t h = s.image.dim(0), w = s.image.dim(1);
  const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<size_t>(2 * radius + 1));
  double ksum = 0;
  for (int64_t i = -radius; i <= radius; ++i) {
    k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * double(i * i) / (sigma * sigma));
    ksum += k[static_cast<size_t>(i + radius)];
  }
  for (double& v : k) v /= ksum;

  SegmentationSample out = s;
  Tensor<double> tmp({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double v = 0;
      for (int64_t i = -radius; i <= radius; ++i)
        v += k[static_cast<size_t>(i + radius)] * s.image.at(y, std::clamp(x + i, int64_t(0), w - 1));
      tmp.at(y, x) = v;
    }
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      double v = 0;
      for (int64_t i = -radius; i <= radius; ++i)
        v += k[static_cast<size_t>(i + radius)] * tmp.at(std::clamp(y + i, int64_t(0), h - 1), x);
      out.image.at(y, x) = v;
    }
  return out;
}

// Draws each op's trigger in a fixed order so the rng stream is stable.
inline SegmentationSample augment(const SegmentationSample& s, const AugmentConfig& cfg,
                                  Rng& rng) {
  cfg.validate();
  SegmentationSample out = s;
  if (rng.uniform() < cfg.p_rotate) {
    const double mag = rng.uniform(cfg.rotation_degrees.lo, cfg.rotation_degrees.hi);
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    out = rotate_sample(out, sign * mag);
  }
  if (rng.uniform() < cfg.p_translate) {
    const int64_t side = std::max(out.image.dim(0), out.image.dim(1));
    const double my = rng.uniform(cfg.translation_fraction.lo, cfg.translation_fraction.hi);
    const double sy = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double mx = rng.uniform(cfg.translation_fraction.lo, cfg.translation_fraction.hi);
    const double sx = rng.uniform() < 0.5 ? -1.0 : 1.0;
    out = translate_sample(out, llround(sy * my * double(side)), llround(sx * mx * double(side)));
  }
  if (rng.uniform() < cfg.p_flip && cfg.flip) out = flip_sample(out, rng.uniform() < 0.5);
  if (rng.uniform() < cfg.p_blur)
    out = blur_sample(out, rng.uniform(cfg.blur_sigma.lo, cfg.blur_sigma.hi));
  if (rng.uniform() < cfg.p_shuffle && cfg.channel_shuffle) {
    const double delta = rng.uniform(-kIntensityJitterMax, kIntensityJitterMax);
    for (int64_t i = 0; i < out.image.numel(); ++i) out.image[i] += delta;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 2.0e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline constexpr char kAdamMagic[8] = {'C', 'S', 'E', 'G', 'A', 'D', 'A', 'M'};

// Adam over every parameter in the store, in creation order. Moments are kept
// in the parameter dtype. A parameter whose gradient was never produced this
// step decays its moments as if the gradient were zero.
template <typename T>
class Adam {
 public:
  Adam(ParamStore<T>& store, AdamConfig cfg) : store_(store), cfg_(cfg) {
    for (const auto& name : store.names()) {
      const auto& shape = store.get(name)->value.shape();
      m_.emplace(name, Tensor<T>(shape));
      v_.emplace(name, Tensor<T>(shape));
    }
  }

  const AdamConfig& config() const { return cfg_; }
  int64_t step_count() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    for (const auto& name : store_.names()) {
      auto p = store_.get(name);
      auto& m = m_.at(name);
      auto& v = v_.at(name);
      const bool has_g = p->grad_ready;
      for (int64_t i = 0; i < p->value.numel(); ++i) {
        const T g = has_g ? p->grad[i] : T(0);
        m[i] = b1 * m[i] + (T(1) - b1) * g;
        v[i] = b2 * v[i] + (T(1) - b2) * g * g;
        const double mh = static_cast<double>(m[i]) / bc1;
        const double vh = static_cast<double>(v[i]) / bc2;
        p->value[i] -= static_cast<T>(cfg_.learning_rate * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

  void save(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      CS_CHECK(os.good(), "adam save: cannot open '" << tmp << "'");
      os.write(kAdamMagic, 8);
      io::write_u32(os, 1);
      io::write_u8(os, std::is_same_v<T, float> ? 1 : 2);
      io::write_i64(os, t_);
      io::write_u32(os, static_cast<uint32_t>(store_.size()));
      for (const auto& name : store_.names()) {
        io::write_str(os, name);
        io::write_tensor(os, m_.at(name));
        io::write_tensor(os, v_.at(name));
      }
      CS_CHECK(os.good(), "adam save: write failed on '" << tmp << "'");
    }
    std::filesystem::rename(tmp, path);
  }

  void load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    CS_CHECK(is.good(), "adam load: cannot open '" << path << "'");
    char magic[8];
    is.read(magic, 8);
    CS_CHECK(is.gcount() == 8 && std::memcmp(magic, kAdamMagic, 8) == 0,
             "adam load: '" << path << "' is not an optimizer state file");
    CS_CHECK(io::read_u32(is) == 1, "adam load: unsupported version");
    const uint8_t dtype = io::read_u8(is);
    CS_CHECK(dtype == (std::is_same_v<T, float> ? 1 : 2),
             "adam load: dtype tag " << int(dtype) << " does not match the build");
    t_ = io::read_i64(is);
    const uint32_t count = io::read_u32(is);
    CS_CHECK(count == store_.size(), "adam load: " << count << " parameters in file, store has "
                                                   << store_.size());
    for (const auto& name : store_.names()) {
      const std::string got = io::read_str(is);
      CS_CHECK(got == name, "adam load: parameter order mismatch, wanted '" << name << "', got '"
                                                                            << got << "'");
      auto m = io::read_tensor<T>(is);
      auto v = io::read_tensor<T>(is);
      CS_CHECK(m.same_shape(store_.get(name)->value) && v.same_shape(store_.get(name)->value),
               "adam load: moment shape mismatch for '" << name << "'");
      m_.at(name) = std::move(m);
      v_.at(name) = std::move(v);
    }
  }

 private:
  ParamStore<T>& store_;
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, Tensor<T>> m_;
  std::map<std::string, Tensor<T>> v_;
};

// ---------------------------------------------------------------------------
// The loop.
// ---------------------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 2.0e-5;
  int64_t batch_size = 32;
  int64_t epochs = 300;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  LossKind loss = LossKind::kClassBalancedBce;
  AugmentConfig augment;
  uint64_t seed = 0;
  std::string checkpoint_dir;  // empty disables persistence
  std::optional<int64_t> early_stop_patience;

  void validate() const {
    CS_CHECK(learning_rate > 0.0, "train: learning_rate must be positive, got " << learning_rate);
    CS_CHECK(batch_size >= 1, "train: batch_size must be at least 1, got " << batch_size);
    CS_CHECK(epochs >= 1, "train: epochs must be at least 1, got " << epochs);
    if (early_stop_patience)
      CS_CHECK(*early_stop_patience >= 1, "train: early_stop_patience must be at least 1");
    augment.validate();
  }
};

struct EpochRecord {
  int64_t epoch = 0;
  double train_loss = 0;
  double val_dsc = 0;
  double val_miou = 0;
  double wall_seconds = 0;
};

// Append-only record of the run, one entry per completed epoch.
struct HistoryLog {
  std::vector<EpochRecord> entries;
};

inline std::string history_to_text(const HistoryLog& log) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& e : log.entries)
    os << "epoch=" << e.epoch << " train_loss=" << e.train_loss << " val_dsc=" << e.val_dsc
       << " val_miou=" << e.val_miou << " wall_s=" << e.wall_seconds << "\n";
  return os.str();
}

inline HistoryLog history_from_text(const std::string& text) {
  HistoryLog log;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    EpochRecord e;
    std::istringstream ls(line);
    std::string field;
    while (ls >> field) {
      const auto eq = field.find('=');
      CS_CHECK(eq != std::string::npos, "history: malformed field '" << field << "'");
      const std::string key = field.substr(0, eq);
      const std::string val = field.substr(eq + 1);
      if (key == "epoch")
        e.epoch = std::stoll(val);
      else if (key == "train_loss")
        e.train_loss = std::stod(val);
      else if (key == "val_dsc")
        e.val_dsc = std::stod(val);
      else if (key == "val_miou")
        e.val_miou = std::stod(val);
      else if (key == "wall_s")
        e.wall_seconds = std::stod(val);
      else
        CS_CHECK(false, "history: unknown field '" << key << "'");
    }
    log.entries.push_back(e);
  }
  return log;
}

inline void write_history(const std::string& path, const HistoryLog& log) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    CS_CHECK(os.good(), "write_history: cannot open '" << tmp << "'");
    os << history_to_text(log);
    CS_CHECK(os.good(), "write_history: write failed");
  }
  std::filesystem::rename(tmp, path);
}

inline HistoryLog read_history(const std::string& path) {
  std::ifstream is(path);
  CS_CHECK(is.good(), "read_history: cannot open '" << path << "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return history_from_text(buf.str());
}

template <typename T>
struct TrainResult {
  Checkpoint<T> best;
  HistoryLog history;
};

namespace detail {

template <typename T>
Tensor<T> batch_masks(const std::vector<SegmentationSample>& batch) {
  const int64_t h = batch[0].mask.dim(0), w = batch[0].mask.dim(1);
  Tensor<T> t({static_cast<int64_t>(batch.size()), 1, h, w});
  for (size_t k = 0; k < batch.size(); ++k)
    for (int64_t i = 0; i < h * w; ++i)
      t[static_cast<int64_t>(k) * h * w + i] = static_cast<T>(batch[k].mask[i]);
  return t;
}

inline void check_disjoint(const std::vector<SegmentationSample>& a,
                           const std::vector<SegmentationSample>& b) {
  std::set<std::pair<std::string, int64_t>> keys;
  for (const auto& s : a) keys.emplace(s.subject_id, s.slice_index);
  for (const auto& s : b)
    CS_CHECK(!keys.count({s.subject_id, s.slice_index}),
             "train: sample '" << s.subject_id << "/" << s.slice_index
                               << "' appears in both train and val sets");
}

}  // namespace detail

// Runs the optimizer loop. Per epoch: seeded shuffle, per-sample augmentation,
// Adam steps on the batch loss, then validation DSC/mIoU; the best-validation
// snapshot is kept (by lowest train loss when `val_set` is empty, so
// overfit-style runs without a held-out split still produce a checkpoint).
// With `checkpoint_dir` set, last.ckpt / best.ckpt / optimizer.bin /
// history.log are persisted every epoch and `resume` continues an interrupted
// run from them, rng and optimizer state included. A non-finite loss aborts
// with the offending batch written next to the checkpoints.
template <typename T>
TrainResult<T> train(Model<T>& model, const std::vector<SegmentationSample>& train_set,
                     const std::vector<SegmentationSample>& val_set, const TrainConfig& cfg,
                     bool resume = false) {
  cfg.validate();
  CS_CHECK(!train_set.empty(), "train: empty training set");
  if (!val_set.empty()) detail::check_disjoint(train_set, val_set);
  for (const auto& s : train_set) s.validate();
  for (const auto& s : val_set) s.validate();
  CS_CHECK(cfg.optimizer == OptimizerKind::kAdam, "train: unknown optimizer");

  const std::string dir = cfg.checkpoint_dir;
  const auto path_in_dir = [&dir](const char* leaf) {
    return (std::filesystem::path(dir) / leaf).string();
  };
  if (!dir.empty()) std::filesystem::create_directories(dir);

  Adam<T> opt(model.store(), {cfg.learning_rate, 0.9, 0.999, 1e-8});
  Rng rng(Rng::mix(cfg.seed, 0x7261696eULL));  // decoupled from the init stream
  HistoryLog history;
  int64_t start_epoch = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  Checkpoint<T> best = snapshot(model, 0, best_metric, rng.save_state());

  if (resume && !dir.empty() && std::filesystem::exists(path_in_dir("last.ckpt"))) {
    const auto last = load_checkpoint<T>(path_in_dir("last.ckpt"));
    CS_CHECK(last.config == model.config(),
             "train resume: checkpoint config does not match the model");
    restore(model, last);
    opt.load(path_in_dir("optimizer.bin"));
    rng.load_state(last.rng_state);
    history = read_history(path_in_dir("history.log"));
    start_epoch = last.epoch;
    best_metric = last.best_metric;
    if (std::filesystem::exists(path_in_dir("best.ckpt")))
      best = load_checkpoint<T>(path_in_dir("best.ckpt"));
    if (start_epoch >= cfg.epochs) return {best, history};
  }

  const auto n = static_cast<int64_t>(train_set.size());
  std::vector<int64_t> order(static_cast<size_t>(n));

  int64_t epochs_since_best = 0;
  for (int64_t epoch = start_epoch + 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Re-derived from identity every epoch so the visit order is a pure
    // function of the rng state at the epoch boundary; a resumed run then
    // shuffles exactly like the uninterrupted one.
    std::iota(order.begin(), order.end(), int64_t(0));
    rng.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    for (int64_t first = 0; first < n; first += cfg.batch_size) {
      const int64_t count = std::min(cfg.batch_size, n - first);
      std::vector<SegmentationSample> batch;
      batch.reserve(static_cast<size_t>(count));
      for (int64_t k = 0; k < count; ++k)
        batch.push_back(
            augment(train_set[static_cast<size_t>(order[static_cast<size_t>(first + k)])],
                    cfg.augment, rng));

      auto x = make_var<T>(batch_images<T>(batch, 0, batch.size()));
      auto pred = model.forward(x);
      auto loss = bce_loss(pred, detail::batch_masks<T>(batch), cfg.loss);
      const double loss_val = static_cast<double>(loss->value[0]);
      if (!std::isfinite(loss_val)) {
        std::string where = "batch at sample offset " + std::to_string(first);
        if (!dir.empty()) {
          write_samples(path_in_dir("diagnostic_batch.bin"), batch);
          where += ", batch written to " + path_in_dir("diagnostic_batch.bin");
        }
        throw NumericError("train: non-finite loss " + std::to_string(loss_val) + " at epoch " +
                           std::to_string(epoch) + ", " + where);
      }
      loss_sum += loss_val * double(count);

      model.store().zero_grad();
      backward(loss);
      opt.step();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(n);
    if (!val_set.empty()) {
      const auto rep = evaluate_model(model, val_set, 0.5, cfg.batch_size);
      rec.val_dsc = rep.mean.dsc;
      rec.val_miou = rep.mean.miou;
    }
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.entries.push_back(rec);

    const double metric = val_set.empty() ? -rec.train_loss : rec.val_dsc;
    ++epochs_since_best;
    if (metric > best_metric) {
      best_metric = metric;
      best = snapshot(model, epoch, best_metric, rng.save_state());
      epochs_since_best = 0;
      if (!dir.empty()) save_checkpoint(path_in_dir("best.ckpt"), best);
    }
    if (!dir.empty()) {
      save_checkpoint(path_in_dir("last.ckpt"),
                      snapshot(model, epoch, best_metric, rng.save_state()));
      opt.save(path_in_dir("optimizer.bin"));
      write_history(path_in_dir("history.log"), history);
    }
    if (cfg.early_stop_patience && epochs_since_best >= *cfg.early_stop_patience) break;
  }
  return {best, history};
}

}  // namespace chainseg
