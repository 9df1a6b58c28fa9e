#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "chainseg/fafc.hpp"
#include "gradcheck.hpp"

using namespace chainseg;
using cstest::grad_check;
using cstest::random_tensor;
using cstest::random_var;

namespace {

EncoderConfig make_cfg(int64_t levels, std::vector<int64_t> depths,
                       std::vector<int64_t> chans, ConnectionMode mode, bool feedback) {
  EncoderConfig c;
  c.num_levels = levels;
  c.depth_per_level = std::move(depths);
  c.channels_per_level = std::move(chans);
  c.connection_mode = mode;
  c.feedback_enabled = feedback;
  return c;
}

}  // namespace

TEST_CASE("encoder output shapes follow the halving law (spec example)") {
  Rng rng(1);
  ParamStore<double> store;
  FafcEncoder<double> enc(store, make_cfg(3, {2, 2, 2}, {4, 8, 16}, ConnectionMode::kResidual, true),
                          1, rng);
  auto img = random_var({1, 1, 32, 32}, rng);
  auto [outs, st] = enc.forward(img);
  REQUIRE(outs.size() == 3);
  REQUIRE(outs[0]->value.shape() == std::vector<int64_t>{1, 4, 32, 32});
  REQUIRE(outs[1]->value.shape() == std::vector<int64_t>{1, 8, 16, 16});
  REQUIRE(outs[2]->value.shape() == std::vector<int64_t>{1, 16, 8, 8});
}

TEST_CASE("chain state is fully populated with level-consistent sizes") {
  Rng rng(2);
  ParamStore<double> store;
  const auto cfg = make_cfg(3, {3, 2, 3}, {4, 4, 8}, ConnectionMode::kDense, true);
  FafcEncoder<double> enc(store, cfg, 1, rng);
  auto img = random_var({2, 1, 16, 16}, rng);
  auto [outs, st] = enc.forward(img);

  for (int64_t n = 1; n <= 3; ++n) {
    const int64_t hw = 16 >> (n - 1);
    for (int64_t i = 1; i <= cfg.depth_per_level[static_cast<size_t>(n - 1)]; ++i) {
      auto& f = st.main.at({n, i});
      REQUIRE(f->value.dim(2) == hw);
      REQUIRE(f->value.dim(3) == hw);
      REQUIRE(f->value.dim(1) == cfg.channels_per_level[static_cast<size_t>(n - 1)]);
    }
    REQUIRE(st.feedback.count(n) == 1);
    REQUIRE(st.feedback.at(n) == st.main.at({n, cfg.depth_per_level[static_cast<size_t>(n - 1)]}));
  }
  // Depth-mismatch rule: side into level n exists only for depths present in
  // both adjacent levels (and never at depth 1).
  // depths = [3,2,3]: into level 2 -> i=2 only; into level 3 -> i=2 only.
  REQUIRE(st.side.size() == 2);
  REQUIRE(st.side.count({2, 2}) == 1);
  REQUIRE(st.side.count({3, 2}) == 1);
  REQUIRE(st.side.at({2, 2})->value.dim(2) == 8);
  REQUIRE(st.side.at({3, 2})->value.dim(2) == 4);
  for (const auto& [k, f] : st.side) {
    REQUIRE(k.second >= 2);
    REQUIRE(k.second <= cfg.depth_per_level[static_cast<size_t>(k.first - 1)]);
  }
}

TEST_CASE("shape law holds over randomized configs") {
  Rng rng(3);
  for (int trial = 0; trial < 12; ++trial) {
    const int64_t levels = 2 + rng.uniform_int(3);
    const int64_t size = 16 << rng.uniform_int(2);
    std::vector<int64_t> depths, chans;
    for (int64_t n = 0; n < levels; ++n) {
      depths.push_back(1 + rng.uniform_int(3));
      chans.push_back(2 << rng.uniform_int(2));
    }
    const bool fb = rng.uniform() < 0.5;
    const auto mode = rng.uniform() < 0.5 ? ConnectionMode::kResidual : ConnectionMode::kDense;
    ParamStore<double> store;
    FafcEncoder<double> enc(store, make_cfg(levels, depths, chans, mode, fb), 1, rng);
    auto img = random_var({1, 1, size, size}, rng);
    auto [outs, st] = enc.forward(img);
    REQUIRE(static_cast<int64_t>(outs.size()) == levels);
    for (int64_t n = 1; n <= levels; ++n) {
      REQUIRE(outs[static_cast<size_t>(n - 1)]->value.dim(1) == chans[static_cast<size_t>(n - 1)]);
      REQUIRE(outs[static_cast<size_t>(n - 1)]->value.dim(2) == size >> (n - 1));
      REQUIRE(outs[static_cast<size_t>(n - 1)]->value.dim(3) == size >> (n - 1));
    }
  }
}

TEST_CASE("single-level degenerate config") {
  Rng rng(4);
  ParamStore<double> store;
  FafcEncoder<double> enc(store, make_cfg(1, {3}, {4}, ConnectionMode::kResidual, false), 1, rng);
  auto img = random_var({1, 1, 8, 8}, rng);
  auto [outs, st] = enc.forward(img);
  REQUIRE(outs.size() == 1);
  REQUIRE(st.side.empty());
  REQUIRE(st.main.size() == 3);
  for (const auto& [k, f] : st.main) REQUIRE(k.first == 1);
}

TEST_CASE("forward is deterministic") {
  Rng rng(5);
  ParamStore<float> store;
  FafcEncoder<float> enc(store, make_cfg(3, {2, 2, 2}, {4, 4, 8}, ConnectionMode::kDense, true),
                         1, rng);
  auto img = random_var({1, 1, 16, 16}, rng);
  auto imgf = make_var(img->value.cast<float>());
  auto [o1, s1] = enc.forward(imgf);
  auto [o2, s2] = enc.forward(imgf);
  for (size_t i = 0; i < o1.size(); ++i)
    REQUIRE(std::memcmp(o1[i]->value.data(), o2[i]->value.data(),
                        sizeof(float) * static_cast<size_t>(o1[i]->value.numel())) == 0);
}

TEST_CASE("identical seeds build identical parameters") {
  Rng r1(9), r2(9);
  ParamStore<double> s1, s2;
  const auto cfg = make_cfg(2, {2, 2}, {2, 4}, ConnectionMode::kDense, true);
  FafcEncoder<double> e1(s1, cfg, 1, r1);
  FafcEncoder<double> e2(s2, cfg, 1, r2);
  REQUIRE(s1.names() == s2.names());
  for (const auto& name : s1.names()) {
    const auto& a = s1.get(name)->value;
    const auto& b = s2.get(name)->value;
    REQUIRE(a.shape() == b.shape());
    for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
  }
}

TEST_CASE("omega block: zero weights produce the all-zero map") {
  Rng rng(6);
  ParamStore<double> store;
  FafcEncoder<double> enc(store, make_cfg(2, {2, 2}, {4, 4}, ConnectionMode::kResidual, false),
                          1, rng);
  store.get("enc.l2.d2.omega.w")->value.fill(0.0);
  store.get("enc.l2.d2.omega.b")->value.fill(0.0);
  auto x = random_var({1, 4, 8, 8}, rng);
  auto y = enc.level_process_omega({x}, 2, 2);
  for (int64_t i = 0; i < y->value.numel(); ++i) REQUIRE(y->value[i] == 0.0);

  // Concatenation path: two inputs, output width fixed by the level.
  ParamStore<double> store2;
  Rng rng2(7);
  FafcEncoder<double> enc2(store2, make_cfg(2, {2, 2}, {4, 8}, ConnectionMode::kResidual, true),
                           1, rng2);
  auto a = random_var({1, 4, 8, 8}, rng2);   // pooled backbone width (level 1)
  auto b = random_var({1, 8, 8, 8}, rng2);   // entry side width (level 2)
  auto y2 = enc2.level_process_omega({a, b}, 2, 1);
  REQUIRE(y2->value.shape() == std::vector<int64_t>{1, 8, 8, 8});
  auto bad = random_var({1, 4, 4, 4}, rng2);
  REQUIRE_THROWS_WITH(enc2.level_process_omega({a, bad}, 2, 1),
                      Catch::Matchers::ContainsSubstring("mismatch"));
}

TEST_CASE("phi: merge-then-pool with identity fallback when masks are zeroed") {
  Rng rng(8);
  ParamStore<double> store;
  FafcEncoder<double> enc(store, make_cfg(2, {2, 2}, {8, 8}, ConnectionMode::kResidual, true),
                          1, rng);
  auto tail = random_var({1, 8, 16, 16}, rng);
  auto backbone = random_var({1, 8, 16, 16}, rng);
  auto y = enc.cross_level_process_phi(tail, backbone, 1);
  REQUIRE(y->value.shape() == std::vector<int64_t>{1, 8, 8, 8});

  // Force both attention masks of level 1's FHA to exact zero.
  store.get("enc.l1.fha.sp.w")->value.fill(0.0);
  store.get("enc.l1.fha.sp.b")->value.fill(-1000.0);
  store.get("enc.l1.fha.ch.fc1.w")->value.fill(0.0);
  store.get("enc.l1.fha.ch.fc1.b")->value.fill(0.0);
  store.get("enc.l1.fha.ch.fc2.w")->value.fill(0.0);
  store.get("enc.l1.fha.ch.fc2.b")->value.fill(-500.0);
  auto forced = enc.cross_level_process_phi(tail, backbone, 1);
  auto plain = ops::max_pool2(backbone);
  for (int64_t i = 0; i < plain->value.numel(); ++i)
    REQUIRE(forced->value[i] == plain->value[i]);

  // Feedback disabled: phi is exactly the pooled backbone, and no FHA
  // parameters exist anywhere in the store.
  Rng rng3(10);
  ParamStore<double> store3;
  FafcEncoder<double> enc3(store3, make_cfg(2, {2, 2}, {8, 8}, ConnectionMode::kResidual, false),
                           1, rng3);
  auto off = enc3.cross_level_process_phi(tail, backbone, 1);
  for (int64_t i = 0; i < plain->value.numel(); ++i) REQUIRE(off->value[i] == plain->value[i]);
  for (const auto& name : store3.names())
    REQUIRE(name.find(".fha.") == std::string::npos);
}

TEST_CASE("dense mode with zeroed extra weights reproduces residual mode bit-for-bit") {
  const auto base = make_cfg(3, {2, 2, 2}, {2, 4, 4}, ConnectionMode::kResidual, true);
  auto dense_cfg = base;
  dense_cfg.connection_mode = ConnectionMode::kDense;

  Rng r1(20), r2(21);
  ParamStore<double> rs, ds;
  FafcEncoder<double> re(rs, base, 1, r1);
  FafcEncoder<double> de(ds, dense_cfg, 1, r2);

  // Dense adds injection parameters and removes none.
  for (const auto& name : rs.names()) REQUIRE(ds.has(name));
  REQUIRE(ds.has("enc.l3.d2.extra.w"));

  for (const auto& name : ds.names()) {
    if (name.find(".extra.") != std::string::npos) {
      ds.get(name)->value.fill(0.0);
    } else {
      auto& dst = ds.get(name)->value;
      const auto& src = rs.get(name)->value;
      REQUIRE(dst.shape() == src.shape());
      std::copy(src.data(), src.data() + src.numel(), dst.data());
    }
  }
  auto img = cstest::random_var({1, 1, 16, 16}, r1);
  auto [ro, rst] = re.forward(img);
  auto [eo, dst_state] = de.forward(img);
  for (size_t i = 0; i < ro.size(); ++i)
    for (int64_t j = 0; j < ro[i]->value.numel(); ++j)
      REQUIRE(eo[i]->value[j] == ro[i]->value[j]);
}

TEST_CASE("encoder gradients match central differences on the micro config") {
  Rng rng(30);
  ParamStore<double> store;
  FafcEncoder<double> enc(store, make_cfg(2, {2, 2}, {2, 4}, ConnectionMode::kDense, true),
                          1, rng);
  auto img = random_var({1, 1, 16, 16}, rng);
  auto p1 = random_tensor({1, 2, 16, 16}, rng);
  auto p2 = random_tensor({1, 4, 8, 8}, rng);
  std::vector<Var<double>> leaves = {img};
  for (const auto& name : store.names()) leaves.push_back(store.get(name));
  auto build = [&] {
    auto [outs, st] = enc.forward(img);
    return ops::add(ops::dot_const(outs[0], p1), ops::dot_const(outs[1], p2));
  };
  auto r = grad_check(build, leaves, rng, 1);
  const std::string worst =
      r.worst_leaf == 0 ? "image" : store.names()[r.worst_leaf - 1];
  INFO("max rel err " << r.max_rel << " over " << r.probes << " probes; worst " << worst
                      << "[" << r.worst_idx << "] analytic " << r.worst_analytic
                      << " numeric " << r.worst_numeric);
  REQUIRE(r.probes >= 20);
  REQUIRE(r.max_rel <= 1e-3);
}

TEST_CASE("input validation names the offense") {
  Rng rng(40);
  ParamStore<double> store;
  FafcEncoder<double> enc(store, make_cfg(3, {1, 1, 1}, {2, 2, 2}, ConnectionMode::kResidual, false),
                          1, rng);
  auto bad_c = random_var({1, 2, 16, 16}, rng);
  REQUIRE_THROWS_WITH(enc.forward(bad_c), Catch::Matchers::ContainsSubstring("input channels"));
  auto bad_s = random_var({1, 1, 10, 16}, rng);
  REQUIRE_THROWS_WITH(enc.forward(bad_s), Catch::Matchers::ContainsSubstring("divisible"));

  EncoderConfig broken;
  broken.num_levels = 2;
  broken.depth_per_level = {1};
  broken.channels_per_level = {2, 2};
  REQUIRE_THROWS_WITH(broken.validate(), Catch::Matchers::ContainsSubstring("depth_per_level"));
}

TEST_CASE("entry omega consumes the side feature when present") {
  Rng rng(50);
  ParamStore<double> store;
  FafcEncoder<double> enc(store, make_cfg(2, {2, 2}, {4, 8}, ConnectionMode::kResidual, false),
                          1, rng);
  REQUIRE(store.get("enc.l2.d1.omega.w")->value.shape() == std::vector<int64_t>{8, 12, 3, 3});

  // No chains at the previous level -> no side -> entry sees the backbone only.
  Rng rng2(51);
  ParamStore<double> store2;
  FafcEncoder<double> enc2(store2, make_cfg(2, {1, 2}, {4, 8}, ConnectionMode::kResidual, false),
                           1, rng2);
  REQUIRE(store2.get("enc.l2.d1.omega.w")->value.shape() == std::vector<int64_t>{8, 4, 3, 3});
}
