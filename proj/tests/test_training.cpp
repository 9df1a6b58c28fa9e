#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "chainseg/training.hpp"
#include "gradcheck.hpp"

using namespace chainseg;
using cstest::grad_check;
using cstest::random_tensor;

namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("chainseg_tr_" + std::to_string(Catch::rngSeed()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

ModelConfig micro_config(uint64_t seed = 3) {
  ModelConfig c;
  c.encoder.num_levels = 2;
  c.encoder.depth_per_level = {2, 2};
  c.encoder.channels_per_level = {4, 8};
  c.encoder.connection_mode = ConnectionMode::kDense;
  c.encoder.feedback_enabled = true;
  c.gpa_mode = GpaMode::kFull;
  c.fha_enabled = true;
  c.decoder_channels = {4};
  c.input_h = 16;
  c.input_w = 16;
  c.seed = seed;
  return c;
}

SegmentationSample checker_sample(int64_t h, int64_t w) {
  SegmentationSample s;
  s.image = Tensor<double>({h, w});
  s.mask = Tensor<uint8_t>({h, w});
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      s.image.at(y, x) = double((y * w + x) % 7) - 3.0;
      s.mask.at(y, x) = (y + x) % 2 == 0 ? 1 : 0;
    }
  s.subject_id = "checker";
  return s;
}

bool same_params(const ParamStore<float>& a, const ParamStore<float>& b) {
  if (a.names() != b.names()) return false;
  for (const auto& name : a.names()) {
    const auto& ta = a.get(name)->value;
    const auto& tb = b.get(name)->value;
    if (ta.shape() != tb.shape()) return false;
    if (std::memcmp(ta.data(), tb.data(), sizeof(float) * size_t(ta.numel())) != 0) return false;
  }
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

TEST_CASE("bce loss vanishes on a perfect prediction") {
  Tensor<double> t({1, 1, 4, 4});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = i % 3 == 0 ? 1.0 : 0.0;
  Tensor<double> p(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) p[i] = t[i];
  auto pred = make_var(std::move(p), true);

  for (auto kind : {LossKind::kBce, LossKind::kClassBalancedBce}) {
    auto loss = bce_loss(pred, t, kind, 1e-7);
    REQUIRE(loss->value[0] >= 0.0);
    REQUIRE(loss->value[0] <= 1e-6);
  }
}

TEST_CASE("class weights degenerate to one on a balanced target") {
  // Checkerboard: exactly half the pixels are positive, so with eps=0 the
  // balanced weights are exactly 1 and both kinds produce the same bits.
  Rng rng(31);
  Tensor<double> t({1, 1, 6, 6});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = i % 2 == 0 ? 1.0 : 0.0;
  auto pred = make_var(random_tensor({1, 1, 6, 6}, rng, 0.05, 0.95), true);

  auto plain = bce_loss(pred, t, LossKind::kBce, 0.0);
  auto balanced = bce_loss(pred, t, LossKind::kClassBalancedBce, 0.0);
  REQUIRE(plain->value[0] == balanced->value[0]);

  backward(plain);
  auto g1 = pred->grad;
  pred->drop_grad();
  backward(balanced);
  const auto& g2 = pred->grad;
  REQUIRE(std::memcmp(g1.data(), g2.data(), sizeof(double) * size_t(g1.numel())) == 0);
}

TEST_CASE("an all-half prediction scores ln 2") {
  Tensor<double> t({1, 1, 5, 5});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = i < 7 ? 1.0 : 0.0;  // unbalanced on purpose
  Tensor<double> half(t.shape());
  half.fill(0.5);
  auto pred = make_var(std::move(half), true);

  // Plain: every pixel contributes exactly -log(1/2).
  auto plain = bce_loss(pred, t, LossKind::kBce, 0.0);
  REQUIRE(std::abs(plain->value[0] - std::log(2.0)) <= 1e-12);

  // Balanced: the weights average to one over the pixels, so the mean is
  // still ln 2 up to the eps regularizer in the weight denominators.
  auto balanced = bce_loss(pred, t, LossKind::kClassBalancedBce, 1e-7);
  REQUIRE(std::abs(balanced->value[0] - std::log(2.0)) <= 1e-6);
}

TEST_CASE("out-of-range predictions are clamped, counted, and get zero gradient") {
  Tensor<double> t({1, 1, 1, 6});
  t[0] = 1.0;
  t[1] = 1.0;
  t[2] = 1.0;
  Tensor<double> p(t.shape());
  p[0] = -0.1;  // clamped low
  p[1] = 1.5;   // clamped high
  p[2] = 1.0;   // above 1-eps: clamped
  p[3] = 0.4;
  p[4] = 0.6;
  p[5] = 0.2;
  auto pred = make_var(std::move(p), true);

  int64_t clamped = -1;
  auto loss = bce_loss(pred, t, LossKind::kBce, 1e-7, &clamped);
  REQUIRE(clamped == 3);
  REQUIRE(std::isfinite(double(loss->value[0])));

  backward(loss);
  REQUIRE(pred->grad[0] == 0.0);
  REQUIRE(pred->grad[1] == 0.0);
  REQUIRE(pred->grad[2] == 0.0);
  REQUIRE(pred->grad[3] != 0.0);
  REQUIRE(pred->grad[4] != 0.0);
  REQUIRE(pred->grad[5] != 0.0);
}

TEST_CASE("bce loss validates its inputs") {
  using Catch::Matchers::ContainsSubstring;
  Rng rng(1);
  auto pred = make_var(random_tensor({1, 1, 2, 2}, rng, 0.1, 0.9), true);
  Tensor<double> bad_shape({1, 1, 2, 3});
  REQUIRE_THROWS_WITH(bce_loss(pred, bad_shape, LossKind::kBce), ContainsSubstring("differ"));

  Tensor<double> bad_value({1, 1, 2, 2});
  bad_value[1] = 0.5;
  REQUIRE_THROWS_WITH(bce_loss(pred, bad_value, LossKind::kBce),
                      ContainsSubstring("target value"));

  Tensor<double> t({1, 1, 2, 2});
  REQUIRE_THROWS_WITH(bce_loss(pred, t, LossKind::kBce, 0.7), ContainsSubstring("eps"));
}

TEST_CASE("loss is invariant under a joint pixel permutation") {
  Rng rng(17);
  const int64_t n = 24;
  Tensor<double> t({1, 1, 1, n});
  Tensor<double> p({1, 1, 1, n});
  for (int64_t i = 0; i < n; ++i) {
    t[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
    p[i] = rng.uniform(0.05, 0.95);
  }
  std::vector<int64_t> perm(static_cast<size_t>(n));
  std::iota(perm.begin(), perm.end(), int64_t(0));
  rng.shuffle(perm.begin(), perm.end());
  Tensor<double> tp(t.shape()), pp(p.shape());
  for (int64_t i = 0; i < n; ++i) {
    tp[i] = t[perm[size_t(i)]];
    pp[i] = p[perm[size_t(i)]];
  }

  for (auto kind : {LossKind::kBce, LossKind::kClassBalancedBce}) {
    auto a = bce_loss(make_var(Tensor<double>(p), true), t, kind);
    auto b = bce_loss(make_var(Tensor<double>(pp), true), tp, kind);
    REQUIRE(std::abs(double(a->value[0]) - double(b->value[0])) <= 1e-12);
  }
}

TEST_CASE("loss stays finite and non-negative under fuzzing") {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t n = 1 + int64_t(rng.uniform_int(40));
    Tensor<double> t({1, 1, 1, n});
    Tensor<double> p({1, 1, 1, n});
    for (int64_t i = 0; i < n; ++i) {
      t[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
      p[i] = rng.uniform(-0.2, 1.2);  // deliberately strays outside [0,1]
    }
    auto pred = make_var(std::move(p), true);
    for (auto kind : {LossKind::kBce, LossKind::kClassBalancedBce}) {
      auto loss = bce_loss(pred, t, kind);
      REQUIRE(std::isfinite(double(loss->value[0])));
      REQUIRE(loss->value[0] >= 0.0);
    }
  }
}

TEST_CASE("loss gradient matches finite differences") {
  Rng rng(47);
  Tensor<double> t({1, 1, 6, 6});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
  auto pred = cstest::random_var({1, 1, 6, 6}, rng, 0.1, 0.9);

  for (auto kind : {LossKind::kBce, LossKind::kClassBalancedBce}) {
    auto res = grad_check([&] { return bce_loss(pred, t, kind); }, {pred}, rng, 12);
    INFO("kind " << int(kind) << " max rel " << res.max_rel);
    REQUIRE(res.max_rel <= 1e-3);
  }
}

// ---------------------------------------------------------------------------
// Augmentation primitives
// ---------------------------------------------------------------------------

TEST_CASE("quarter-turn rotations are exact index permutations") {
  auto s = checker_sample(6, 6);

  auto r90 = rotate_sample(s, 90.0);
  auto r180a = rotate_sample(r90, 90.0);
  auto r180b = rotate_sample(s, 180.0);
  REQUIRE(std::memcmp(r180a.image.data(), r180b.image.data(),
                      sizeof(double) * size_t(s.image.numel())) == 0);
  REQUIRE(std::memcmp(r180a.mask.data(), r180b.mask.data(), size_t(s.mask.numel())) == 0);

  auto full = rotate_sample(rotate_sample(r180a, 90.0), 90.0);
  REQUIRE(std::memcmp(full.image.data(), s.image.data(),
                      sizeof(double) * size_t(s.image.numel())) == 0);
  REQUIRE(std::memcmp(full.mask.data(), s.mask.data(), size_t(s.mask.numel())) == 0);

  auto back = rotate_sample(s, -90.0);
  auto forth = rotate_sample(back, 90.0);
  REQUIRE(std::memcmp(forth.image.data(), s.image.data(),
                      sizeof(double) * size_t(s.image.numel())) == 0);
}

TEST_CASE("one quarter turn reads from the transposed far column") {
  SegmentationSample s;
  s.image = Tensor<double>({2, 2});
  s.mask = Tensor<uint8_t>({2, 2});
  s.image.at(0, 0) = 1;
  s.image.at(0, 1) = 2;
  s.image.at(1, 0) = 3;
  s.image.at(1, 1) = 4;
  auto r = rotate_sample(s, 90.0);
  REQUIRE(r.image.at(0, 0) == 2.0);
  REQUIRE(r.image.at(0, 1) == 4.0);
  REQUIRE(r.image.at(1, 0) == 1.0);
  REQUIRE(r.image.at(1, 1) == 3.0);
}

TEST_CASE("arbitrary-angle rotation keeps the mask binary and the center fixed") {
  auto s = checker_sample(9, 9);
  s.mask = Tensor<uint8_t>({9, 9});
  s.mask.at(4, 4) = 1;
  auto r = rotate_sample(s, 37.0);
  r.validate();
  REQUIRE(r.mask.at(4, 4) == 1);  // the exact center maps to itself
  REQUIRE(r.image.at(4, 4) == Catch::Approx(s.image.at(4, 4)).margin(1e-9));
}

TEST_CASE("translation shifts content and zero-fills the vacated edge") {
  auto s = checker_sample(3, 3);
  auto t = translate_sample(s, 1, 0);
  for (int64_t x = 0; x < 3; ++x) {
    REQUIRE(t.image.at(0, x) == 0.0);
    REQUIRE(t.mask.at(0, x) == 0);
  }
  for (int64_t y = 1; y < 3; ++y)
    for (int64_t x = 0; x < 3; ++x) {
      REQUIRE(t.image.at(y, x) == s.image.at(y - 1, x));
      REQUIRE(t.mask.at(y, x) == s.mask.at(y - 1, x));
    }

  auto round = translate_sample(translate_sample(s, 0, 2), 0, -2);
  // Content pushed off the edge is lost; the middle column survives.
  REQUIRE(round.image.at(1, 0) == s.image.at(1, 0));
  REQUIRE(round.image.at(1, 2) == 0.0);
}

TEST_CASE("flips are involutions") {
  auto s = checker_sample(4, 5);
  for (bool horizontal : {true, false}) {
    auto f = flip_sample(s, horizontal);
    REQUIRE(f.image.at(0, 0) == (horizontal ? s.image.at(0, 4) : s.image.at(3, 0)));
    auto ff = flip_sample(f, horizontal);
    REQUIRE(std::memcmp(ff.image.data(), s.image.data(),
                        sizeof(double) * size_t(s.image.numel())) == 0);
    REQUIRE(std::memcmp(ff.mask.data(), s.mask.data(), size_t(s.mask.numel())) == 0);
  }
}

TEST_CASE("blur preserves constants, total mass, and the mask") {
  SegmentationSample s = checker_sample(8, 8);
  SegmentationSample flat = s;
  flat.image.fill(3.25);
  auto b = blur_sample(flat, 1.3);
  for (int64_t i = 0; i < b.image.numel(); ++i)
    REQUIRE(b.image[i] == Catch::Approx(3.25).margin(1e-12));

  auto bs = blur_sample(s, 0.8);
  REQUIRE(std::memcmp(bs.mask.data(), s.mask.data(), size_t(s.mask.numel())) == 0);
  // Smoothing shrinks the value spread.
  auto spread = [](const Tensor<double>& t) {
    double lo = t[0], hi = t[0];
    for (int64_t i = 0; i < t.numel(); ++i) {
      lo = std::min(lo, t[i]);
      hi = std::max(hi, t[i]);
    }
    return hi - lo;
  };
  REQUIRE(spread(bs.image) < spread(s.image));

  // Sub-threshold sigma is the identity.
  auto same = blur_sample(s, 1e-7);
  REQUIRE(std::memcmp(same.image.data(), s.image.data(),
                      sizeof(double) * size_t(s.image.numel())) == 0);
}

TEST_CASE("augment with zero probabilities is the identity") {
  auto s = checker_sample(8, 8);
  Rng rng(5);
  AugmentConfig cfg;  // all probabilities default to zero
  auto out = augment(s, cfg, rng);
  REQUIRE(std::memcmp(out.image.data(), s.image.data(),
                      sizeof(double) * size_t(s.image.numel())) == 0);
  REQUIRE(std::memcmp(out.mask.data(), s.mask.data(), size_t(s.mask.numel())) == 0);
}

TEST_CASE("augment keeps masks binary under every op at full probability") {
  AugmentConfig cfg;
  cfg.rotation_degrees = {0.0, 40.0};
  cfg.translation_fraction = {0.0, 0.2};
  cfg.blur_sigma = {0.2, 1.0};
  cfg.channel_shuffle = true;
  cfg.flip = true;
  cfg.p_rotate = cfg.p_translate = cfg.p_blur = cfg.p_shuffle = cfg.p_flip = 1.0;
  cfg.validate();

  Rng rng(71);
  auto samples = synth_dataset(6, 16, 9);
  for (const auto& s : samples) {
    auto out = augment(s, cfg, rng);
    out.validate();
    REQUIRE(out.image.shape() == s.image.shape());
  }
}

TEST_CASE("intensity jitter shifts the image by one bounded constant") {
  auto s = checker_sample(8, 8);
  AugmentConfig cfg;
  cfg.channel_shuffle = true;
  cfg.p_shuffle = 1.0;
  Rng rng(13);
  auto out = augment(s, cfg, rng);
  const double delta = out.image.at(0, 0) - s.image.at(0, 0);
  REQUIRE(std::abs(delta) <= kIntensityJitterMax);
  for (int64_t i = 0; i < s.image.numel(); ++i)
    REQUIRE(out.image[i] == Catch::Approx(s.image[i] + delta).margin(1e-15));
  REQUIRE(std::memcmp(out.mask.data(), s.mask.data(), size_t(s.mask.numel())) == 0);
}

TEST_CASE("augment is deterministic given the rng state") {
  AugmentConfig cfg;
  cfg.rotation_degrees = {0.0, 30.0};
  cfg.translation_fraction = {0.0, 0.1};
  cfg.blur_sigma = {0.2, 0.8};
  cfg.flip = true;
  cfg.channel_shuffle = true;
  cfg.p_rotate = cfg.p_translate = cfg.p_blur = cfg.p_shuffle = cfg.p_flip = 0.5;

  auto s = synth_dataset(1, 16, 2)[0];
  Rng r1(100), r2(100);
  for (int k = 0; k < 10; ++k) {
    auto a = augment(s, cfg, r1);
    auto b = augment(s, cfg, r2);
    REQUIRE(std::memcmp(a.image.data(), b.image.data(),
                        sizeof(double) * size_t(a.image.numel())) == 0);
    REQUIRE(std::memcmp(a.mask.data(), b.mask.data(), size_t(a.mask.numel())) == 0);
  }

  AugmentConfig bad;
  bad.p_rotate = 1.5;
  Rng r3(1);
  REQUIRE_THROWS_WITH(augment(s, bad, r3), Catch::Matchers::ContainsSubstring("probability"));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

TEST_CASE("adam with zero step leaves parameters bitwise untouched") {
  ParamStore<float> store;
  Rng rng(6);
  auto p = store.create("w", {3, 4}, Init::kHeNormal, rng, 12);
  auto before = p->value;

  Adam<float> opt(store, {0.0, 0.9, 0.999, 1e-8});
  auto& g = p->ensure_grad();
  for (int64_t i = 0; i < g.numel(); ++i) g[i] = 0.7f;
  opt.step();
  opt.step();
  REQUIRE(std::memcmp(p->value.data(), before.data(), sizeof(float) * size_t(g.numel())) == 0);
  REQUIRE(opt.step_count() == 2);
}

TEST_CASE("adam follows the moment recursion exactly") {
  ParamStore<double> store;
  Rng rng(1);
  auto p = store.create("w", {1}, Init::kOnes, rng);
  const AdamConfig cfg{1e-2, 0.9, 0.999, 1e-8};
  Adam<double> opt(store, cfg);

  // Mirror of the update rule, kept in lockstep. The complements are spelled
  // as subtractions so the rounding matches the implementation bit for bit.
  double m = 0, v = 0, theta = 1.0;
  for (int t = 1; t <= 5; ++t) {
    const double g = 0.5;
    auto& grad = p->ensure_grad();
    grad[0] = g;
    opt.step();

    m = 0.9 * m + (1.0 - 0.9) * g;
    v = 0.999 * v + (1.0 - 0.999) * g * g;
    const double mh = m / (1.0 - std::pow(0.9, double(t)));
    const double vh = v / (1.0 - std::pow(0.999, double(t)));
    theta -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.eps);
    REQUIRE(p->value[0] == theta);
  }

  // With a constant gradient the bias-corrected ratio is g/|g| up to eps.
  const double step1 = 1.0 - cfg.learning_rate * 0.5 / (0.5 + cfg.eps);
  REQUIRE(std::abs((1.0 - step1) - cfg.learning_rate) <= 1e-9);
}

TEST_CASE("a missing gradient decays the moments like a zero gradient") {
  ParamStore<double> store;
  Rng rng(1);
  auto p = store.create("w", {1}, Init::kOnes, rng);
  p->value[0] = 2.0;
  Adam<double> opt(store, {1e-3, 0.9, 0.999, 1e-8});

  auto& g = p->ensure_grad();
  g[0] = 1.0;
  opt.step();
  const double after_first = p->value[0];
  REQUIRE(after_first != 2.0);

  // Mirror the two steps, one with g=1 and one with g=0, spelling every
  // intermediate exactly like the implementation does.
  double m = 0.9 * 0.0 + (1.0 - 0.9) * 1.0;
  double v = 0.999 * 0.0 + (1.0 - 0.999) * 1.0;
  double theta = 2.0;
  theta -= 1e-3 * (m / (1.0 - std::pow(0.9, 1.0))) /
           (std::sqrt(v / (1.0 - std::pow(0.999, 1.0))) + 1e-8);
  REQUIRE(p->value[0] == theta);

  p->drop_grad();  // simulates zero_grad(): the gradient tensor disappears
  opt.step();
  m = 0.9 * m + (1.0 - 0.9) * 0.0;
  v = 0.999 * v + (1.0 - 0.999) * 0.0;
  const double mh = m / (1.0 - std::pow(0.9, 2.0));
  const double vh = v / (1.0 - std::pow(0.999, 2.0));
  theta -= 1e-3 * mh / (std::sqrt(vh) + 1e-8);
  REQUIRE(p->value[0] == theta);
}

TEST_CASE("adam state survives a save/load round trip") {
  TempDir td;

  auto build_store = [&](ParamStore<float>& store) {
    Rng r(8);
    store.create("a", {2, 3}, Init::kHeNormal, r, 6);
    store.create("b", {4}, Init::kHeNormal, r, 4);
  };

  ParamStore<float> s1;
  build_store(s1);
  Adam<float> o1(s1, {1e-3, 0.9, 0.999, 1e-8});
  auto fill_grads = [](ParamStore<float>& s, float scale) {
    int64_t k = 0;
    for (const auto& name : s.names()) {
      auto& g = s.get(name)->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = scale * float(++k);
    }
  };
  fill_grads(s1, 0.01f);
  o1.step();
  fill_grads(s1, -0.02f);
  o1.step();
  o1.save(td.file("opt.bin"));

  // Clone the parameter values, load the optimizer state, and verify the next
  // step matches the uninterrupted run bit for bit.
  ParamStore<float> s2;
  build_store(s2);
  for (const auto& name : s1.names()) s2.get(name)->value = s1.get(name)->value;
  Adam<float> o2(s2, {1e-3, 0.9, 0.999, 1e-8});
  o2.load(td.file("opt.bin"));
  REQUIRE(o2.step_count() == 2);

  fill_grads(s1, 0.005f);
  o1.step();
  fill_grads(s2, 0.005f);
  o2.step();
  REQUIRE(same_params(s1, s2));
}

TEST_CASE("adam load rejects foreign and mismatched state") {
  using Catch::Matchers::ContainsSubstring;
  TempDir td;
  Rng rng(2);

  ParamStore<float> s1;
  s1.create("w", {2}, Init::kZeros, rng);
  Adam<float> o1(s1, {1e-3, 0.9, 0.999, 1e-8});
  o1.save(td.file("opt.bin"));

  {
    std::ofstream os(td.file("junk.bin"), std::ios::binary);
    os << "NOTADAMX plus trailing garbage";
  }
  REQUIRE_THROWS_WITH(o1.load(td.file("junk.bin")),
                      ContainsSubstring("not an optimizer state file"));

  ParamStore<double> sd;
  sd.create("w", {2}, Init::kZeros, rng);
  Adam<double> od(sd, {1e-3, 0.9, 0.999, 1e-8});
  REQUIRE_THROWS_WITH(od.load(td.file("opt.bin")),
                      ContainsSubstring("does not match the build"));

  ParamStore<float> s3;
  s3.create("w", {2}, Init::kZeros, rng);
  s3.create("x", {2}, Init::kZeros, rng);
  Adam<float> o3(s3, {1e-3, 0.9, 0.999, 1e-8});
  REQUIRE_THROWS_WITH(o3.load(td.file("opt.bin")), ContainsSubstring("parameters in file"));

  ParamStore<float> s4;
  s4.create("v", {2}, Init::kZeros, rng);
  Adam<float> o4(s4, {1e-3, 0.9, 0.999, 1e-8});
  REQUIRE_THROWS_WITH(o4.load(td.file("opt.bin")),
                      ContainsSubstring("parameter order mismatch"));
}

// ---------------------------------------------------------------------------
// History log
// ---------------------------------------------------------------------------

TEST_CASE("history round-trips through its text form exactly") {
  HistoryLog log;
  log.entries.push_back({1, std::log(2.0), 0.0, 0.5, 1.25});
  log.entries.push_back({2, 1.0 / 3.0, 0.87654321987654321, 0.25, 13.0});
  log.entries.push_back({300, 1e-17, 1.0, 1.0 - 1e-16, 0.0});

  const auto text = history_to_text(log);
  const auto back = history_from_text(text);
  REQUIRE(back.entries.size() == log.entries.size());
  for (size_t i = 0; i < log.entries.size(); ++i) {
    REQUIRE(back.entries[i].epoch == log.entries[i].epoch);
    REQUIRE(back.entries[i].train_loss == log.entries[i].train_loss);
    REQUIRE(back.entries[i].val_dsc == log.entries[i].val_dsc);
    REQUIRE(back.entries[i].val_miou == log.entries[i].val_miou);
    REQUIRE(back.entries[i].wall_seconds == log.entries[i].wall_seconds);
  }

  TempDir td;
  write_history(td.file("history.log"), log);
  const auto disk = read_history(td.file("history.log"));
  REQUIRE(disk.entries.size() == 3);
  REQUIRE(disk.entries[2].train_loss == 1e-17);

  REQUIRE_THROWS_WITH(history_from_text("epoch=1 bogus_field=3\n"),
                      Catch::Matchers::ContainsSubstring("unknown field"));
  REQUIRE_THROWS_WITH(history_from_text("epoch 1\n"),
                      Catch::Matchers::ContainsSubstring("malformed"));
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

TEST_CASE("one epoch produces one record and a full checkpoint set") {
  TempDir td;
  Model<float> m(micro_config());
  auto data = synth_dataset(4, 16, 11);

  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 4;
  cfg.epochs = 1;
  cfg.seed = 5;
  cfg.checkpoint_dir = td.file("run");

  auto res = train(m, data, {}, cfg);
  REQUIRE(res.history.entries.size() == 1);
  // The head starts at zero, so the first forward emits exactly 0.5 and the
  // single full-set batch scores ln 2 up to the weight regularizer.
  REQUIRE(res.history.entries[0].train_loss == Catch::Approx(std::log(2.0)).margin(1e-6));
  REQUIRE(res.history.entries[0].epoch == 1);

  for (const char* leaf : {"last.ckpt", "best.ckpt", "optimizer.bin", "history.log"})
    REQUIRE(fs::exists(fs::path(cfg.checkpoint_dir) / leaf));

  // Empty validation split: best tracks the lowest train loss.
  REQUIRE(res.best.best_metric == -res.history.entries[0].train_loss);
}

TEST_CASE("training is reproducible from the seed") {
  auto data = synth_dataset(6, 16, 21);
  std::vector<SegmentationSample> val(data.begin() + 4, data.end());
  data.resize(4);

  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 2;
  cfg.epochs = 3;
  cfg.seed = 9;
  cfg.augment.rotation_degrees = {0.0, 20.0};
  cfg.augment.p_rotate = 0.5;
  cfg.augment.flip = true;
  cfg.augment.p_flip = 0.5;

  Model<float> m1(micro_config());
  Model<float> m2(micro_config());
  auto r1 = train(m1, data, val, cfg);
  auto r2 = train(m2, data, val, cfg);

  REQUIRE(r1.history.entries.size() == r2.history.entries.size());
  for (size_t i = 0; i < r1.history.entries.size(); ++i) {
    REQUIRE(r1.history.entries[i].train_loss == r2.history.entries[i].train_loss);
    REQUIRE(r1.history.entries[i].val_dsc == r2.history.entries[i].val_dsc);
    REQUIRE(r1.history.entries[i].val_miou == r2.history.entries[i].val_miou);
  }
  REQUIRE(same_params(m1.store(), m2.store()));
}

TEST_CASE("an interrupted run resumes to the same bits as a straight one") {
  TempDir td;
  auto data = synth_dataset(6, 16, 33);
  std::vector<SegmentationSample> val(data.begin() + 4, data.end());
  data.resize(4);

  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 2;
  cfg.seed = 3;
  cfg.augment.translation_fraction = {0.0, 0.1};
  cfg.augment.p_translate = 0.5;

  // Straight 4-epoch run.
  cfg.epochs = 4;
  cfg.checkpoint_dir = td.file("straight");
  Model<float> ms(micro_config());
  auto rs = train(ms, data, val, cfg);

  // Interrupted: 2 epochs, then resume to 4 on a fresh model object.
  cfg.checkpoint_dir = td.file("resumed");
  cfg.epochs = 2;
  Model<float> m1(micro_config());
  train(m1, data, val, cfg);
  cfg.epochs = 4;
  Model<float> m2(micro_config());
  auto rr = train(m2, data, val, cfg, true);

  REQUIRE(same_params(ms.store(), m2.store()));
  REQUIRE(rs.history.entries.size() == rr.history.entries.size());
  for (size_t i = 0; i < rs.history.entries.size(); ++i) {
    REQUIRE(rs.history.entries[i].epoch == rr.history.entries[i].epoch);
    REQUIRE(rs.history.entries[i].train_loss == rr.history.entries[i].train_loss);
    REQUIRE(rs.history.entries[i].val_dsc == rr.history.entries[i].val_dsc);
  }

  // Resuming a finished run trains zero further epochs.
  Model<float> m3(micro_config());
  auto rf = train(m3, data, val, cfg, true);
  REQUIRE(rf.history.entries.size() == 4);
  REQUIRE(same_params(m2.store(), m3.store()));
}

TEST_CASE("train rejects overlapping splits and reports non-finite losses") {
  TempDir td;
  auto data = synth_dataset(4, 16, 44);

  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 4;
  cfg.epochs = 1;

  Model<float> m(micro_config());
  std::vector<SegmentationSample> val = {data[1]};
  REQUIRE_THROWS_WITH(train(m, data, val, cfg),
                      Catch::Matchers::ContainsSubstring("appears in both"));

  // Poison the head bias: every logit turns NaN, the first loss is non-finite,
  // and the offending batch lands on disk for inspection. (An inner conv
  // weight would not do: group norm and relu can launder a NaN back to zero.)
  cfg.checkpoint_dir = td.file("nan_run");
  m.store().get("dec.head.b")->value[0] = std::numeric_limits<float>::quiet_NaN();
  REQUIRE_THROWS_AS(train(m, data, {}, cfg), NumericError);
  REQUIRE(fs::exists(fs::path(cfg.checkpoint_dir) / "diagnostic_batch.bin"));
  const auto batch = read_samples((fs::path(cfg.checkpoint_dir) / "diagnostic_batch.bin").string());
  REQUIRE(batch.size() == 4);
}

TEST_CASE("early stopping halts a stalled run") {
  auto data = synth_dataset(6, 16, 55);
  std::vector<SegmentationSample> val(data.begin() + 4, data.end());
  data.resize(4);
  // Empty-foreground validation masks plus a strongly negative head bias pin
  // the validation dice at its ceiling of 1.0 from the first epoch on (empty
  // prediction against empty target), so no later epoch can improve on it.
  for (auto& s : val) s.mask = Tensor<uint8_t>(s.mask.shape());

  TrainConfig cfg;
  cfg.learning_rate = 1e-12;  // far below float resolution: the bias stays put
  cfg.batch_size = 4;
  cfg.epochs = 10;
  cfg.early_stop_patience = 1;

  Model<float> m(micro_config());
  m.store().get("dec.head.b")->value[0] = -50.0f;
  auto res = train(m, data, val, cfg);
  // Epoch 1 sets the best; epoch 2 fails to beat it and trips the patience.
  REQUIRE(res.history.entries.size() == 2);
  REQUIRE(res.history.entries[0].val_dsc == 1.0);
}

TEST_CASE("config validation refuses nonsensical settings") {
  using Catch::Matchers::ContainsSubstring;
  auto data = synth_dataset(2, 16, 66);
  Model<float> m(micro_config());

  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  REQUIRE_THROWS_WITH(train(m, data, {}, cfg), ContainsSubstring("learning_rate"));
  cfg.learning_rate = 1e-3;
  cfg.batch_size = 0;
  REQUIRE_THROWS_WITH(train(m, data, {}, cfg), ContainsSubstring("batch_size"));
  cfg.batch_size = 2;
  cfg.epochs = 0;
  REQUIRE_THROWS_WITH(train(m, data, {}, cfg), ContainsSubstring("epochs"));
  cfg.epochs = 1;
  REQUIRE_THROWS_WITH(train(m, {}, {}, cfg), ContainsSubstring("empty training set"));
}

// ---------------------------------------------------------------------------
// End-to-end overfit sanity
// ---------------------------------------------------------------------------

TEST_CASE("the model overfits a tiny set and attends to the right pixels") {
  Model<float> m(micro_config(3));
  auto data = synth_dataset(8, 16, 42);

  TrainConfig cfg;
  cfg.learning_rate = 3e-3;
  cfg.batch_size = 8;
  cfg.epochs = 200;
  cfg.seed = 3;

  auto res = train(m, data, {}, cfg);
  REQUIRE(res.history.entries.size() == 200);

  // Loss went down: compare the median of the first and last deciles.
  auto median_of = [&](size_t lo, size_t hi) {
    std::vector<double> v;
    for (size_t i = lo; i < hi; ++i) v.push_back(res.history.entries[i].train_loss);
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  REQUIRE(median_of(180, 200) < median_of(0, 20));

  // Training-set dice after restoring the best snapshot.
  Model<float> best(micro_config(3));
  restore(best, res.best);
  const auto rep = evaluate_model(best, data);
  INFO("train dsc " << rep.mean.dsc);
  REQUIRE(rep.mean.dsc >= 0.95);

  // The activation map concentrates inside the true masks: mean heat over
  // foreground pixels exceeds mean heat over background.
  double in_sum = 0, out_sum = 0;
  int64_t in_n = 0, out_n = 0;
  for (const auto& s : data) {
    const auto heat = cam(best, s);
    for (int64_t i = 0; i < heat.numel(); ++i) {
      if (s.mask[i]) {
        in_sum += heat[i];
        ++in_n;
      } else {
        out_sum += heat[i];
        ++out_n;
      }
    }
  }
  const double inside = in_sum / double(in_n);
  const double outside = out_sum / double(out_n);
  INFO("cam inside " << inside << " outside " << outside);
  REQUIRE(inside > outside);
}
