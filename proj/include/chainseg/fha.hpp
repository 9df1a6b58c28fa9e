#pragma once

#include "chainseg/core/ops.hpp"
#include "chainseg/core/params.hpp"

namespace chainseg {

// Feature handover attention: a spatial gate computed from the backbone
// feature and a channel gate computed from the feedback feature, each applied
// as a residual multiplicative merge (out = x ⊗ A ⊕ x).
//
// Attention map representations:
//   spatial map  (N, 1, H, W)  — one 2-axis map per batch item
//   channel map  (N, C, 1, 1)  — one vector over channels per batch item
// Both are sigmoid outputs, so entries live in the open interval (0, 1).
template <typename T>
class FhaModule {
 public:
  FhaModule(ParamStore<T>& store, const std::string& prefix, int64_t channels_low,
            int64_t channels_high, Rng& rng, int64_t reduction = 4)
      : c_low_(channels_low), c_high_(channels_high) {
    CS_CHECK(channels_low >= 1, "fha: channels_low must be >= 1, got " << channels_low);
    CS_CHECK(channels_high >= 1, "fha: channels_high must be >= 1, got " << channels_high);
    CS_CHECK(reduction >= 1, "fha: reduction must be >= 1, got " << reduction);
    // Channel count below the reduction ratio falls back to ratio 1.
    const int64_t red = channels_high < reduction ? 1 : reduction;
    hidden_ = channels_high / red;

    sp_w_ = store.create(prefix + ".sp.w", {1, 2, 7, 7}, Init::kHeNormal, rng, 2 * 49);
    sp_b_ = store.create(prefix + ".sp.b", {1}, Init::kZeros, rng);
    fc1_w_ = store.create(prefix + ".ch.fc1.w", {hidden_, channels_high}, Init::kHeNormal,
                          rng, channels_high);
    fc1_b_ = store.create(prefix + ".ch.fc1.b", {hidden_}, Init::kZeros, rng);
    fc2_w_ = store.create(prefix + ".ch.fc2.w", {channels_high, hidden_}, Init::kHeNormal,
                          rng, hidden_);
    fc2_b_ = store.create(prefix + ".ch.fc2.b", {channels_high}, Init::kZeros, rng);
    if (channels_high != channels_low) {
      proj_w_ = store.create(prefix + ".ch.proj.w", {channels_low, channels_high, 1, 1},
                             Init::kHeNormal, rng, channels_high);
      proj_b_ = store.create(prefix + ".ch.proj.b", {channels_low}, Init::kZeros, rng);
    }
  }

  // Channel-axis mean and max pooled into a 2-channel descriptor, 7x7 conv,
  // sigmoid.
  Var<T> spatial_attention(const Var<T>& f_low) const {
    check_rank(f_low->value, 4, "spatial_attention");
    CS_CHECK(f_low->value.dim(1) >= 1, "spatial_attention: need >= 1 channel");
    auto desc = ops::concat_channels<T>({ops::channel_mean(f_low), ops::channel_max(f_low)});
    return ops::sigmoid(ops::conv2d(desc, sp_w_, sp_b_, 1, 3));
  }

  // Spatial mean- and max-pooled channel vectors through a shared bottleneck,
  // summed, sigmoid. Output has f_high's channel count.
  Var<T> channel_attention(const Var<T>& f_high) const {
    check_rank(f_high->value, 4, "channel_attention");
    CS_CHECK(f_high->value.dim(1) == c_high_, "channel_attention: expected " << c_high_
             << " channels, got " << f_high->value.dim(1));
    const int64_t N = f_high->value.dim(0);
    auto bottleneck = [&](const Var<T>& pooled) {
      auto v = ops::reshape(pooled, {N, c_high_});
      return ops::linear(ops::relu(ops::linear(v, fc1_w_, fc1_b_)), fc2_w_, fc2_b_);
    };
    auto summed = ops::add(bottleneck(ops::spatial_mean(f_high)),
                           bottleneck(ops::spatial_max(f_high)));
    return ops::reshape(ops::sigmoid(summed), {N, c_high_, 1, 1});
  }

  // f_low' = f_low ⊗ A_s ⊕ f_low, then out = f_low' ⊗ A_c ⊕ f_low'. When the
  // channel counts differ, A_c is mapped to f_low's width by a learned 1x1
  // projection before the second merge.
  Var<T> merge(const Var<T>& f_low, const Var<T>& f_high) const {
    check_rank(f_low->value, 4, "fha_merge");
    check_rank(f_high->value, 4, "fha_merge");
    CS_CHECK(f_low->value.dim(0) == f_high->value.dim(0) &&
                 f_low->value.dim(2) == f_high->value.dim(2) &&
                 f_low->value.dim(3) == f_high->value.dim(3),
             "fha_merge: batch/spatial mismatch " << f_low->value.shape_string() << " vs "
                                                  << f_high->value.shape_string());
    CS_CHECK(f_low->value.dim(1) == c_low_, "fha_merge: f_low has " << f_low->value.dim(1)
             << " channels, module built for " << c_low_);
    auto a_s = spatial_attention(f_low);
    auto f1 = ops::add(ops::mul_spatial(f_low, a_s), f_low);
    auto a_c = channel_attention(f_high);
    if (proj_w_) a_c = ops::conv2d(a_c, proj_w_, proj_b_, 1, 0);
    return ops::add(ops::mul_channel(f1, a_c), f1);
  }

  int64_t channels_low() const { return c_low_; }
  int64_t channels_high() const { return c_high_; }
  int64_t hidden() const { return hidden_; }

 private:
  int64_t c_low_, c_high_, hidden_ = 0;
  Var<T> sp_w_, sp_b_, fc1_w_, fc1_b_, fc2_w_, fc2_b_, proj_w_, proj_b_;
};

}  // namespace chainseg
