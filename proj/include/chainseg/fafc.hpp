#pragma once

#include <map>
#include <utility>

#include "chainseg/core/ops.hpp"
#include "chainseg/core/params.hpp"
#include "chainseg/fha.hpp"

namespace chainseg {

enum class ConnectionMode { kResidual, kDense };

struct EncoderConfig {
  int64_t num_levels = 3;
  std::vector<int64_t> depth_per_level;     // main-chain length c at each level
  std::vector<int64_t> channels_per_level;  // feature width at each level
  ConnectionMode connection_mode = ConnectionMode::kResidual;
  bool feedback_enabled = true;  // chain tails re-enter the backbone through FHA

  bool operator==(const EncoderConfig&) const = default;

  void validate() const {
    CS_CHECK(num_levels >= 1, "encoder: num_levels must be >= 1, got " << num_levels);
    CS_CHECK(static_cast<int64_t>(depth_per_level.size()) == num_levels,
             "encoder: depth_per_level has " << depth_per_level.size() << " entries for "
                                             << num_levels << " levels");
    CS_CHECK(static_cast<int64_t>(channels_per_level.size()) == num_levels,
             "encoder: channels_per_level has " << channels_per_level.size()
                                                << " entries for " << num_levels << " levels");
    for (int64_t i = 0; i < num_levels; ++i) {
      CS_CHECK(depth_per_level[static_cast<size_t>(i)] >= 1,
               "encoder: depth at level " << (i + 1) << " must be >= 1");
      CS_CHECK(channels_per_level[static_cast<size_t>(i)] >= 1,
               "encoder: channels at level " << (i + 1) << " must be >= 1");
    }
  }
};

// One forward pass worth of chain features, 1-based indices.
//   main[(n,i)]   = f̂ₙⁱ, the i-th main-chain feature of level n
//   side[(n,i)]   = the side feature entering level n at depth i (produced by
//                   a strided projection of level n-1's depth-i feature, so it
//                   already lives at level n's spatial size)
//   feedback[n]   = f̂ₙᶜ, the chain tail of level n
// Every stored map at level n has spatial size (H/2^(n-1), W/2^(n-1)).
template <typename T>
struct ChainState {
  std::map<std::pair<int64_t, int64_t>, Var<T>> main;
  std::map<std::pair<int64_t, int64_t>, Var<T>> side;
  std::map<int64_t, Var<T>> feedback;
};

// Feature aggregation feedback chain encoder.
//
// Level entry (n >= 2) combines three branches:
//   omega branch  Ω([maxpool(f̂ₙ₋₁¹), side]) — the previous backbone node and
//                 the entry side feature, concatenated and convolved;
//   phi branch    Φ(tail, backbone) = maxpool(FHA-merge(backbone, tail))
//                 projected to this level's width by 1x1 convolution; with
//                 feedback disabled the FHA step is skipped and Φ degenerates
//                 to a plain max-pooled backbone.
// Chain steps (i >= 2) are residual: f̂ₙⁱ = x ⊕ Ω(x) where x injects the
// matching-depth side feature by element-wise addition; dense mode adds a
// second, separately parameterized injection of all older levels' side
// features (1x1-projected), so zeroing those weights reproduces residual mode
// exactly.
//
// The per-level output is the post-FHA backbone feature: FHA-merge(f̂ₙ¹, f̂ₙᶜ)
// when feedback is on, else f̂ₙ¹ itself. With depth 1 everywhere and feedback
// off the encoder degenerates to the plain backbone.
template <typename T>
class FafcEncoder {
 public:
  FafcEncoder(ParamStore<T>& store, EncoderConfig cfg, int64_t in_channels, Rng& rng)
      : store_(&store), cfg_(std::move(cfg)), in_channels_(in_channels) {
    cfg_.validate();
    CS_CHECK(in_channels >= 1, "encoder: in_channels must be >= 1, got " << in_channels);
    const int64_t N = cfg_.num_levels;
    for (int64_t n = 1; n <= N; ++n) {
      const int64_t cn = channels(n);
      // Entry block.
      if (n == 1) {
        create_omega(1, 1, in_channels_, rng);
        create_conv1x1(key(1, 1, "proj"), cn, in_channels_, rng);
      } else {
        int64_t omega_in = channels(n - 1);
        if (side_exists(n, 2)) omega_in += cn;
        create_omega(n, 1, omega_in, rng);
        create_conv1x1(key(n, 1, "phi"), cn, channels(n - 1), rng);
      }
      // Chain steps.
      for (int64_t i = 2; i <= depth(n); ++i) {
        create_omega(n, i, cn, rng);
        if (cfg_.connection_mode == ConnectionMode::kDense) {
          const int64_t older = older_side_channels(n, i);
          if (older > 0) create_conv1x1(key(n, i, "extra"), cn, older, rng);
        }
      }
      // Side projections feeding level n+1.
      if (n < N) {
        for (int64_t i = 2; i <= std::min(depth(n), depth(n + 1)); ++i) {
          const std::string k = key(n, i, "side");
          store.create(k + ".w", {channels(n + 1), cn, 3, 3}, Init::kHeNormal, rng, cn * 9);
          store.create(k + ".b", {channels(n + 1)}, Init::kZeros, rng);
        }
      }
      if (cfg_.feedback_enabled)
        fha_.emplace(n, FhaModule<T>(store, "enc.l" + std::to_string(n) + ".fha", cn, cn, rng));
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  // Ω: concatenate (if several inputs), 3x3 convolution, group normalization,
  // ReLU. Output width is channels_per_level[level].
  Var<T> level_process_omega(const std::vector<Var<T>>& inputs, int64_t level,
                             int64_t dep) const {
    CS_CHECK(!inputs.empty(), "level_process_omega: no inputs");
    CS_CHECK(level >= 1 && level <= cfg_.num_levels,
             "level_process_omega: level " << level << " out of range");
    CS_CHECK(dep >= 1 && dep <= depth(level),
             "level_process_omega: depth " << dep << " out of range at level " << level);
    auto x = inputs.size() == 1 ? inputs[0] : ops::concat_channels(inputs);
    const std::string k = key(level, dep, "omega");
    auto y = ops::conv2d(x, store_->get(k + ".w"), store_->get(k + ".b"), 1, 1);
    const int64_t cn = channels(level);
    y = ops::group_norm(y, store_->get(k + ".g"), store_->get(k + ".be"), norm_groups(cn));
    return ops::relu(y);
  }

  // Φ: FHA merge of (backbone, tail) followed by 2x max-pooling; with
  // feedback disabled, just the max-pooled backbone.
  Var<T> cross_level_process_phi(const Var<T>& tail_feature, const Var<T>& backbone_feature,
                                 int64_t level) const {
    CS_CHECK(tail_feature->value.same_shape(backbone_feature->value),
             "cross_level_process_phi: tail " << tail_feature->value.shape_string()
                 << " vs backbone " << backbone_feature->value.shape_string());
    if (!cfg_.feedback_enabled) return ops::max_pool2(backbone_feature);
    return ops::max_pool2(fha_.at(level).merge(backbone_feature, tail_feature));
  }

  const FhaModule<T>& fha(int64_t level) const { return fha_.at(level); }

  std::pair<std::vector<Var<T>>, ChainState<T>> forward(const Var<T>& image) const {
    check_rank(image->value, 4, "fafc_forward");
    CS_CHECK(image->value.dim(1) == in_channels_, "fafc_forward: expected " << in_channels_
             << " input channels, got " << image->value.dim(1));
    const int64_t H = image->value.dim(2), W = image->value.dim(3);
    const int64_t div = int64_t(1) << (cfg_.num_levels - 1);
    CS_CHECK(H % div == 0, "fafc_forward: height " << H << " not divisible by " << div);
    CS_CHECK(W % div == 0, "fafc_forward: width " << W << " not divisible by " << div);

    ChainState<T> st;
    std::vector<Var<T>> outputs;
    for (int64_t n = 1; n <= cfg_.num_levels; ++n) {
      // Backbone node f̂ₙ¹.
      Var<T> f1;
      if (n == 1) {
        auto om = level_process_omega({image}, 1, 1);
        auto pr = conv1x1(image, key(1, 1, "proj"));
        f1 = ops::add(om, pr);
      } else {
        auto pooled = ops::max_pool2(st.main.at({n - 1, 1}));
        std::vector<Var<T>> om_in = {pooled};
        if (auto it = st.side.find({n, 2}); it != st.side.end()) om_in.push_back(it->second);
        auto om = level_process_omega(om_in, n, 1);
        auto phi = ops::max_pool2(outputs.back());  // == cross_level_process_phi(tail, f̂ₙ₋₁¹)
        f1 = ops::add(om, conv1x1(phi, key(n, 1, "phi")));
      }
      st.main[{n, 1}] = f1;

      // Main chain.
      Var<T> prev = f1;
      for (int64_t i = 2; i <= depth(n); ++i) {
        Var<T> x = prev;
        if (auto it = st.side.find({n, i}); it != st.side.end()) x = ops::add(x, it->second);
        if (cfg_.connection_mode == ConnectionMode::kDense && older_side_channels(n, i) > 0)
          x = ops::add(x, conv1x1(gather_older_sides(st, n, i), key(n, i, "extra")));
        prev = ops::add(x, level_process_omega({x}, n, i));
        st.main[{n, i}] = prev;
      }
      st.feedback[n] = prev;

      // Per-level output: the post-FHA backbone feature.
      outputs.push_back(cfg_.feedback_enabled ? fha_.at(n).merge(f1, prev) : f1);

      // Side features for the next level.
      if (n < cfg_.num_levels)
        for (int64_t i = 2; i <= std::min(depth(n), depth(n + 1)); ++i) {
          const std::string k = key(n, i, "side");
          st.side[{n + 1, i}] =
              ops::conv2d(st.main.at({n, i}), store_->get(k + ".w"), store_->get(k + ".b"), 2, 1);
        }
    }
    return {std::move(outputs), std::move(st)};
  }

  static int64_t norm_groups(int64_t c) {
    if (c % 4 == 0) return 4;
    if (c % 2 == 0) return 2;
    return 1;
  }

 private:
  int64_t depth(int64_t n) const { return cfg_.depth_per_level[static_cast<size_t>(n - 1)]; }
  int64_t channels(int64_t n) const {
    return cfg_.channels_per_level[static_cast<size_t>(n - 1)];
  }
  static std::string key(int64_t n, int64_t i, const char* what) {
    return "enc.l" + std::to_string(n) + ".d" + std::to_string(i) + "." + what;
  }

  // Side feature entering level n at depth i (from level n-1).
  bool side_exists(int64_t n, int64_t i) const {
    return n >= 2 && i >= 2 && i <= std::min(depth(n - 1), depth(n));
  }

  // Total channels of all side features entering levels 2..n-1 at depth i
  // (the dense-mode extras for level n).
  int64_t older_side_channels(int64_t n, int64_t i) const {
    if (cfg_.connection_mode != ConnectionMode::kDense) return 0;
    int64_t total = 0;
    for (int64_t k = 2; k < n; ++k)
      if (side_exists(k, i)) total += channels(k);
    return total;
  }

  Var<T> gather_older_sides(const ChainState<T>& st, int64_t n, int64_t i) const {
    std::vector<Var<T>> parts;
    for (int64_t k = 2; k < n; ++k)
      if (side_exists(k, i)) {
        Var<T> s = st.side.at({k, i});
        for (int64_t hop = k; hop < n; ++hop) s = ops::max_pool2(s);
        parts.push_back(s);
      }
    return parts.size() == 1 ? parts[0] : ops::concat_channels(parts);
  }

  Var<T> conv1x1(const Var<T>& x, const std::string& k) const {
    return ops::conv2d(x, store_->get(k + ".w"), store_->get(k + ".b"), 1, 0);
  }

  void create_omega(int64_t n, int64_t i, int64_t in_ch, Rng& rng) {
    const std::string k = key(n, i, "omega");
    const int64_t cn = channels(n);
    store_->create(k + ".w", {cn, in_ch, 3, 3}, Init::kHeNormal, rng, in_ch * 9);
    store_->create(k + ".b", {cn}, Init::kZeros, rng);
    store_->create(k + ".g", {cn}, Init::kOnes, rng);
    store_->create(k + ".be", {cn}, Init::kZeros, rng);
  }

  void create_conv1x1(const std::string& k, int64_t out_ch, int64_t in_ch, Rng& rng) {
    store_->create(k + ".w", {out_ch, in_ch, 1, 1}, Init::kHeNormal, rng, in_ch);
    store_->create(k + ".b", {out_ch}, Init::kZeros, rng);
  }

  ParamStore<T>* store_;
  EncoderConfig cfg_;
  int64_t in_channels_;
  std::map<int64_t, FhaModule<T>> fha_;
};

}  // namespace chainseg
