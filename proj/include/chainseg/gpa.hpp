#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>

#include "chainseg/core/ops.hpp"
#include "chainseg/core/params.hpp"

namespace chainseg {

enum class GpaMode { kFull, kPpaOnly, kGcmOnly, kOff };

// Multi-scale view of one feature map: scale r holds (N, C/r, r*H, r*W).
// levels[1] is the source feature itself.
template <typename T>
struct PyramidSet {
  std::map<int64_t, Var<T>> levels;
};

// Pair-wise fusion of two adjacent pyramid scales. The lower-resolution,
// wider input f_lo (C channels, H x W) and the higher-resolution, narrower
// input f_hi (C/2 channels, 2H x 2W) gate each other:
//   mask_hi = sigmoid(1x1conv(relu(2x bilinear upsample(f_lo))))   at f_hi's size
//   mask_lo = sigmoid(1x1conv(relu(3x3 stride-2 conv(f_hi))))      at f_lo's size
//   out     = 1x1conv(concat(1x1conv(mask_lo * f_lo), avgpool2(mask_hi * f_hi)))
// The strided transform realizes the resolution-halving the concat needs:
// both products must land at f_lo's size, so the high-resolution mask source
// is brought down by convolution, not up.
// Output: f_lo's shape. No normalization layers anywhere in this block.
template <typename T>
class PairFuse {
 public:
  // Intermediates exposed for tests: both masks and both gated branches.
  struct Trace {
    Var<T> mask_hi, mask_lo, branch_lo, branch_hi;
  };

  PairFuse() = default;
  PairFuse(ParamStore<T>& store, const std::string& prefix, int64_t c_lo, Rng& rng)
      : store_(&store), prefix_(prefix), c_lo_(c_lo), c_hi_(c_lo / 2) {
    CS_CHECK(c_lo >= 2 && c_lo % 2 == 0,
             "pair_fuse: low-scale channel count must be even and >= 2, got " << c_lo);
    auto conv = [&](const std::string& name, int64_t out_c, int64_t in_c, int64_t k) {
      store.create(prefix + "." + name + ".w", {out_c, in_c, k, k}, Init::kHeNormal, rng,
                   in_c * k * k);
      store.create(prefix + "." + name + ".b", {out_c}, Init::kZeros, rng);
    };
    conv("mask_hi", c_hi_, c_lo_, 1);
    conv("mask_lo.down", c_hi_, c_hi_, 3);
    conv("mask_lo.proj", c_lo_, c_hi_, 1);
    conv("lo", c_lo_, c_lo_, 1);
    conv("out", c_lo_, c_lo_ + c_hi_, 1);
  }

  int64_t channels_low() const { return c_lo_; }
  int64_t channels_high() const { return c_hi_; }

  Var<T> forward(const Var<T>& f_lo, const Var<T>& f_hi, Trace* trace = nullptr) const {
    check_rank(f_lo->value, 4, "pair_fuse");
    check_rank(f_hi->value, 4, "pair_fuse");
    CS_CHECK(f_lo->value.dim(1) == c_lo_, "pair_fuse: expected " << c_lo_
             << " low-scale channels, got " << f_lo->value.dim(1));
    CS_CHECK(f_hi->value.dim(1) == c_hi_, "pair_fuse: expected " << c_hi_
             << " high-scale channels, got " << f_hi->value.dim(1));
    CS_CHECK(f_hi->value.dim(2) == 2 * f_lo->value.dim(2) &&
                 f_hi->value.dim(3) == 2 * f_lo->value.dim(3),
             "pair_fuse: scale ratio must be exactly 2, got " << f_lo->value.shape_string()
                 << " vs " << f_hi->value.shape_string());

    auto mask_hi = ops::sigmoid(conv(ops::relu(ops::bilinear_upsample(f_lo, 2)), "mask_hi", 1, 0));
    auto mask_lo = ops::sigmoid(
        conv(ops::relu(conv(f_hi, "mask_lo.down", 2, 1)), "mask_lo.proj", 1, 0));
    auto branch_lo = conv(ops::mul(mask_lo, f_lo), "lo", 1, 0);
    auto branch_hi = ops::avg_pool2(ops::mul(mask_hi, f_hi));
    if (trace) *trace = {mask_hi, mask_lo, branch_lo, branch_hi};
    return conv(ops::concat_channels(std::vector<Var<T>>{branch_lo, branch_hi}), "out", 1, 0);
  }

 private:
  Var<T> conv(const Var<T>& x, const std::string& name, int64_t stride, int64_t pad) const {
    return ops::conv2d(x, store_->get(prefix_ + "." + name + ".w"),
                       store_->get(prefix_ + "." + name + ".b"), stride, pad);
  }

  ParamStore<T>* store_ = nullptr;
  std::string prefix_;
  int64_t c_lo_ = 0, c_hi_ = 0;
};

// Global context block. The feature is pixel-wise L2-normalized (bounding
// every correlation entry to [-1, 1]), correlated against itself across all
// pixel pairs, and the correlation re-weights the embedding:
//   R   = reshape(f_norm) to (N, C, P), P = H*W
//   f_c = (R^T R)^T          (N, P, P) pixel-pair correlation
//   f_g = reshape(R f_c)     back to f's shape
//   out = f + alpha * (f * f_g),  alpha learnable, initialized to 0
// Zero alpha makes the block an exact identity, so it trains from a residual
// start. The correlation is checked finite; skipping normalization (test hook)
// is what makes overflow reachable.
template <typename T>
class GcmModule {
 public:
  // Intermediates exposed for tests: f_norm, the correlation, the context map.
  struct State {
    Var<T> normalized, correlation, context;
  };

  GcmModule() = default;
  GcmModule(ParamStore<T>& store, const std::string& prefix, Rng& rng) {
    alpha_ = store.create(prefix + ".alpha", {1}, Init::kZeros, rng);
  }

  // Test hook: bypass the normalization so the correlation scale law (s^2 on
  // f_c, s^3 on f_g) and the overflow guard become observable.
  void set_normalize_enabled(bool on) { normalize_enabled_ = on; }
  const Var<T>& alpha() const { return alpha_; }

  Var<T> forward(const Var<T>& f, State* state = nullptr) const {
    check_rank(f->value, 4, "gcm_forward");
    const int64_t N = f->value.dim(0), C = f->value.dim(1);
    const int64_t P = f->value.dim(2) * f->value.dim(3);
    auto f_norm = normalize_enabled_ ? ops::pixel_l2_normalize(f) : f;
    auto R = ops::reshape(f_norm, {N, C, P});
    auto f_c = ops::transpose12(ops::bmm(ops::transpose12(R), R));
    T worst = T(0);
    for (int64_t i = 0; i < f_c->value.numel(); ++i) {
      if (!std::isfinite(f_c->value[i])) {
        for (int64_t j = 0; j < f_norm->value.numel(); ++j)
          worst = std::max(worst, std::abs(f_norm->value[j]));
        std::ostringstream os;
        os << "gcm_forward: non-finite correlation entry at flat index " << i
           << "; largest embedding magnitude " << worst
           << " (normalization bounds this to 1)";
        throw NumericError(os.str());
      }
    }
    auto f_g = ops::reshape(ops::bmm(R, f_c), f->value.shape());
    auto out = ops::add(f, ops::scale(ops::mul(f, f_g), alpha_));
    if (state) *state = {f_norm, f_c, f_g};
    return out;
  }

 private:
  Var<T> alpha_;
  bool normalize_enabled_ = true;
};

// Global pyramid attention head applied to the deepest encoder feature.
// full: GCM after the pyramid cascade; the ablation modes drop one or both
// stages, and off is a pass-through.
template <typename T>
class GpaUnit {
 public:
  GpaUnit(ParamStore<T>& store, const std::string& prefix, GpaMode mode, int64_t channels,
          Rng& rng)
      : store_(&store), prefix_(prefix), mode_(mode), channels_(channels) {
    CS_CHECK(channels >= 1, "gpa: channels must be >= 1, got " << channels);
    if (has_ppa()) {
      CS_CHECK(channels % 8 == 0,
               "gpa: channels must be divisible by 8 to build the pyramid, got " << channels);
      for (int64_t r : {2, 4, 8}) {
        const std::string k = prefix + ".pyr.r" + std::to_string(r);
        store.create(k + ".w", {channels / r, channels, 1, 1}, Init::kHeNormal, rng, channels);
        store.create(k + ".b", {channels / r}, Init::kZeros, rng);
      }
      pf_[0] = PairFuse<T>(store, prefix + ".pf1", channels / 4, rng);
      pf_[1] = PairFuse<T>(store, prefix + ".pf2", channels / 2, rng);
      pf_[2] = PairFuse<T>(store, prefix + ".pf3", channels, rng);
    }
    if (has_gcm()) gcm_ = GcmModule<T>(store, prefix + ".gcm", rng);
  }

  GpaMode mode() const { return mode_; }
  int64_t channels() const { return channels_; }
  bool has_ppa() const { return mode_ == GpaMode::kFull || mode_ == GpaMode::kPpaOnly; }
  bool has_gcm() const { return mode_ == GpaMode::kFull || mode_ == GpaMode::kGcmOnly; }
  const PairFuse<T>& pair_fuse(int stage) const {
    CS_CHECK(has_ppa(), "gpa: no pyramid stages in this mode");
    CS_CHECK(stage >= 1 && stage <= 3, "gpa: pair-fuse stage must be 1..3, got " << stage);
    return pf_[stage - 1];
  }
  GcmModule<T>& gcm() {
    CS_CHECK(has_gcm(), "gpa: no global context block in this mode");
    return gcm_;
  }

  // Scale-r levels: r-times bilinear upsample, then 1x1 reduction to C/r.
  PyramidSet<T> build_pyramid(const Var<T>& f_top) const {
    CS_CHECK(has_ppa(), "gpa: no pyramid in this mode");
    check_input(f_top);
    PyramidSet<T> p;
    p.levels[1] = f_top;
    for (int64_t r : {2, 4, 8}) {
      const std::string k = prefix_ + ".pyr.r" + std::to_string(r);
      p.levels[r] = ops::conv2d(ops::bilinear_upsample(f_top, r), store_->get(k + ".w"),
                                store_->get(k + ".b"), 1, 0);
    }
    return p;
  }

  // Cascade from the largest scale pair down: each fusion's output plays the
  // high-resolution role against the next smaller scale.
  Var<T> ppa_forward(const PyramidSet<T>& p) const {
    CS_CHECK(has_ppa(), "gpa: no pyramid in this mode");
    CS_CHECK(p.levels.count(1) && p.levels.count(2) && p.levels.count(4) && p.levels.count(8),
             "ppa_forward: pyramid must hold scales {1,2,4,8}");
    auto f1 = pf_[0].forward(p.levels.at(4), p.levels.at(8));
    auto f2 = pf_[1].forward(p.levels.at(2), f1);
    return pf_[2].forward(p.levels.at(1), f2);
  }

  Var<T> forward(const Var<T>& x) const {
    check_input(x);
    switch (mode_) {
      case GpaMode::kOff:
        return x;
      case GpaMode::kGcmOnly:
        return gcm_.forward(x);
      case GpaMode::kPpaOnly:
        return ppa_forward(build_pyramid(x));
      case GpaMode::kFull:
        return gcm_.forward(ppa_forward(build_pyramid(x)));
    }
    CS_CHECK(false, "gpa: invalid mode");
    return x;
  }

 private:
  void check_input(const Var<T>& x) const {
    check_rank(x->value, 4, "gpa_forward");
    CS_CHECK(x->value.dim(1) == channels_, "gpa_forward: expected " << channels_
             << " channels, got " << x->value.dim(1));
  }

  ParamStore<T>* store_;
  std::string prefix_;
  GpaMode mode_;
  int64_t channels_;
  PairFuse<T> pf_[3];
  GcmModule<T> gcm_;
};

}  // namespace chainseg
