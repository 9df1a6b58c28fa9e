#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "chainseg/core/rng.hpp"
#include "chainseg/core/serialize.hpp"
#include "chainseg/core/tensor.hpp"
#include "chainseg/io/volume.hpp"

namespace chainseg {

// One 2D training example: a normalized intensity slice and its binary mask.
struct SegmentationSample {
  Tensor<double> image;   // (H, W)
  Tensor<uint8_t> mask;   // (H, W), values in {0, 1}
  std::string subject_id;
  int64_t slice_index = 0;
  bool is_noise = false;

  void validate() const {
    check_rank(image, 2, "sample image");
    CS_CHECK(image.same_shape(mask),
             "sample: image " << image.shape_string() << " and mask " << mask.shape_string()
                              << " differ");
    for (int64_t i = 0; i < image.numel(); ++i)
      CS_CHECK(std::isfinite(image[i]), "sample: non-finite intensity at flat index " << i);
    for (int64_t i = 0; i < mask.numel(); ++i)
      CS_CHECK(mask[i] == 0 || mask[i] == 1,
               "sample: mask value " << int(mask[i]) << " at flat index " << i);
  }
};

// A 3D scan plus its integer label volume, axes ordered (depth, row, column).
struct VolumeRecord {
  Tensor<double> voxels;
  Tensor<int32_t> labels;
  std::array<double, 3> spacing = {1.0, 1.0, 1.0};
  std::string subject_id;

  void validate() const {
    check_rank(voxels, 3, "volume voxels");
    CS_CHECK(voxels.same_shape(labels),
             "volume '" << subject_id << "': voxels " << voxels.shape_string() << " and labels "
                        << labels.shape_string() << " differ");
    for (double s : spacing)
      CS_CHECK(s > 0.0, "volume '" << subject_id << "': non-positive spacing " << s);
  }
};

// ---------------------------------------------------------------------------
// Volume files. Two on-disk forms are accepted: NIfTI-1 (.nii / .nii.gz, image
// and label as separate files) and a self-contained raw container:
//
//   bytes 0..7   magic "CSEGVOL1"
//   u32          version (1)
//   string       subject_id            (u32 length + bytes)
//   3 x i64      dims (depth, rows, cols)
//   3 x f64      spacing (mm, same axis order)
//   d*r*c x f64  voxels, little-endian, row-major
//   d*r*c x i32  labels, little-endian, row-major
// ---------------------------------------------------------------------------

inline constexpr char kVolumeMagic[8] = {'C', 'S', 'E', 'G', 'V', 'O', 'L', '1'};

inline void write_volume(const std::string& path, const VolumeRecord& v) {
  v.validate();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    CS_CHECK(os.good(), "write_volume: cannot open '" << tmp << "'");
    os.write(kVolumeMagic, 8);
    io::write_u32(os, 1);
    io::write_str(os, v.subject_id);
    for (int i = 0; i < 3; ++i) io::write_i64(os, v.voxels.dim(i));
    for (double s : v.spacing) io::write_f64(os, s);
    for (int64_t i = 0; i < v.voxels.numel(); ++i) io::write_f64(os, v.voxels[i]);
    for (int64_t i = 0; i < v.labels.numel(); ++i)
      io::write_u32(os, std::bit_cast<uint32_t>(v.labels[i]));
    CS_CHECK(os.good(), "write_volume: write failed on '" << tmp << "'");
  }
  std::filesystem::rename(tmp, path);
}

inline VolumeRecord read_volume(std::istream& is, const std::string& who) {
  char magic[8];
  is.read(magic, 8);
  CS_CHECK(is.gcount() == 8 && std::memcmp(magic, kVolumeMagic, 8) == 0,
           who << ": not a raw volume file (bad magic)");
  const uint32_t version = io::read_u32(is);
  CS_CHECK(version == 1, who << ": unsupported volume version " << version);
  VolumeRecord v;
  v.subject_id = io::read_str(is);
  std::vector<int64_t> dims(3);
  for (auto& d : dims) {
    d = io::read_i64(is);
    CS_CHECK(d >= 1 && d < (int64_t(1) << 20), who << ": implausible dimension " << d);
  }
  for (double& s : v.spacing) s = io::read_f64(is);
  v.voxels = Tensor<double>(dims);
  v.labels = Tensor<int32_t>(dims);
  for (int64_t i = 0; i < v.voxels.numel(); ++i) v.voxels[i] = io::read_f64(is);
  for (int64_t i = 0; i < v.labels.numel(); ++i)
    v.labels[i] = std::bit_cast<int32_t>(io::read_u32(is));
  v.validate();
  return v;
}

namespace detail {

inline Tensor<int32_t> labels_from_real(const Tensor<double>& t, const std::string& who) {
  Tensor<int32_t> out(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double r = std::round(t[i]);
    CS_CHECK(std::abs(t[i] - r) < 1e-3,
             who << ": non-integer label value " << t[i] << " at flat index " << i);
    out[i] = static_cast<int32_t>(r);
  }
  return out;
}

inline void check_hippocampus_labels(const Tensor<int32_t>& labels, const std::string& who) {
  for (int64_t i = 0; i < labels.numel(); ++i)
    CS_CHECK(labels[i] >= 0 && labels[i] <= 2,
             who << ": label value " << labels[i] << " at flat index " << i
                 << " outside {0,1,2}");
}

inline std::string stem_of(const std::string& path) {
  auto p = std::filesystem::path(path).filename().string();
  // Strip a trailing .gz, then the format extension.
  for (int k = 0; k < 2; ++k) {
    const auto dot = p.rfind('.');
    if (dot == std::string::npos) break;
    p = p.substr(0, dot);
  }
  return p;
}

}  // namespace detail

// Loads a volume from either on-disk form. For NIfTI the labels come from the
// optional second file (zero labels when absent); the raw container carries
// both and must be passed alone.
inline VolumeRecord load_volume(const std::string& image_path,
                                const std::string& label_path = "",
                                const std::string& subject_id = "") {
  auto bytes = io::read_file_bytes(image_path);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kVolumeMagic, 8) == 0) {
    CS_CHECK(label_path.empty(),
             "load_volume: raw container '" << image_path << "' already holds labels");
    std::istringstream is(std::string(reinterpret_cast<char*>(bytes.data()), bytes.size()),
                          std::ios::binary);
    VolumeRecord v = read_volume(is, "load_volume '" + image_path + "'");
    detail::check_hippocampus_labels(v.labels, "load_volume '" + image_path + "'");
    if (!subject_id.empty()) v.subject_id = subject_id;
    return v;
  }

  auto img = io::read_nifti_bytes(std::move(bytes), "load_volume '" + image_path + "'");
  VolumeRecord v;
  v.voxels = std::move(img.voxels);
  v.spacing = img.spacing;
  v.subject_id = subject_id.empty() ? detail::stem_of(image_path) : subject_id;
  if (label_path.empty()) {
    v.labels = Tensor<int32_t>(v.voxels.shape());
  } else {
    auto lab = io::read_nifti(label_path);
    CS_CHECK(lab.voxels.same_shape(v.voxels),
             "load_volume: image " << v.voxels.shape_string() << " and label "
                                   << lab.voxels.shape_string() << " volumes differ ('"
                                   << image_path << "' vs '" << label_path << "')");
    v.labels = detail::labels_from_real(lab.voxels, "load_volume '" + label_path + "'");
    detail::check_hippocampus_labels(v.labels, "load_volume '" + label_path + "'");
  }
  v.validate();
  return v;
}

// ---------------------------------------------------------------------------
// Preprocessing pipeline.
// ---------------------------------------------------------------------------

// Crops a size^3 cube centered on the rounded foreground centroid (labels > 0),
// zero-padding wherever the window leaves the volume, then z-scores the cube's
// intensities. `center_override` substitutes for the centroid when the label
// volume is empty. `origin_out` reports the chosen window origin per axis.
inline VolumeRecord extract_roi(const VolumeRecord& v, int64_t size = 32,
                                const std::optional<std::array<int64_t, 3>>& center_override = {},
                                std::array<int64_t, 3>* origin_out = nullptr) {
  v.validate();
  CS_CHECK(size >= 1, "extract_roi: size must be positive, got " << size);

  std::array<int64_t, 3> center;
  if (center_override) {
    center = *center_override;
  } else {
    double sum[3] = {0, 0, 0};
    int64_t count = 0;
    const auto& sh = v.labels.shape();
    for (int64_t d = 0; d < sh[0]; ++d)
      for (int64_t r = 0; r < sh[1]; ++r)
        for (int64_t c = 0; c < sh[2]; ++c)
          if (v.labels.at(d, r, c) > 0) {
            sum[0] += double(d);
            sum[1] += double(r);
            sum[2] += double(c);
            ++count;
          }
    CS_CHECK(count > 0,
             "extract_roi: volume '" << v.subject_id
                                     << "' has empty foreground and no center override");
    for (int i = 0; i < 3; ++i) center[i] = llround(sum[i] / double(count));
  }

  std::array<int64_t, 3> origin;
  for (int i = 0; i < 3; ++i) origin[i] = center[i] - size / 2;
  if (origin_out) *origin_out = origin;

  VolumeRecord out;
  out.voxels = Tensor<double>({size, size, size});
  out.labels = Tensor<int32_t>({size, size, size});
  out.spacing = v.spacing;
  out.subject_id = v.subject_id;
  const auto& sh = v.voxels.shape();
  for (int64_t d = 0; d < size; ++d)
    for (int64_t r = 0; r < size; ++r)
      for (int64_t c = 0; c < size; ++c) {
        const int64_t sd = origin[0] + d, sr = origin[1] + r, sc = origin[2] + c;
        if (sd >= 0 && sd < sh[0] && sr >= 0 && sr < sh[1] && sc >= 0 && sc < sh[2]) {
          out.voxels.at(d, r, c) = v.voxels.at(sd, sr, sc);
          out.labels.at(d, r, c) = v.labels.at(sd, sr, sc);
        }
      }

  // Per-cube z-score (population variance).
  const int64_t n = out.voxels.numel();
  double mean = 0;
  for (int64_t i = 0; i < n; ++i) mean += out.voxels[i];
  mean /= double(n);
  double var = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = out.voxels[i] - mean;
    var += d * d;
  }
  var /= double(n);
  const double inv = 1.0 / std::sqrt(var + 1e-12);
  for (int64_t i = 0; i < n; ++i) out.voxels[i] = (out.voxels[i] - mean) * inv;
  return out;
}

// Cuts an ROI cube into depth-axis slices: the contiguous nonzero-mask run
// around the maximal-area slice, clipped to at most `max_slices` (window kept
// centered on that slice) and padded with adjacent empty slices up to
// `min_slices`, alternating below/above and starting below.
inline std::vector<SegmentationSample> slice_volume(const VolumeRecord& v,
                                                    int64_t min_slices = 12,
                                                    int64_t max_slices = 20) {
  v.validate();
  CS_CHECK(min_slices >= 1 && max_slices >= min_slices,
           "slice_volume: bad slice bounds [" << min_slices << "," << max_slices << "]");
  const auto& sh = v.voxels.shape();
  const int64_t depth = sh[0];

  std::vector<int64_t> area(static_cast<size_t>(depth), 0);
  for (int64_t d = 0; d < depth; ++d)
    for (int64_t r = 0; r < sh[1]; ++r)
      for (int64_t c = 0; c < sh[2]; ++c)
        if (v.labels.at(d, r, c) > 0) ++area[static_cast<size_t>(d)];

  const auto best = std::max_element(area.begin(), area.end());
  if (*best == 0) return {};
  const int64_t peak = best - area.begin();

  int64_t lo = peak, hi = peak;
  while (lo > 0 && area[static_cast<size_t>(lo - 1)] > 0) --lo;
  while (hi + 1 < depth && area[static_cast<size_t>(hi + 1)] > 0) ++hi;

  if (hi - lo + 1 > max_slices) {
    int64_t start = peak - (max_slices - 1) / 2;
    start = std::clamp(start, lo, hi - max_slices + 1);
    lo = start;
    hi = start + max_slices - 1;
  }
  bool below = true;
  while (hi - lo + 1 < min_slices && (lo > 0 || hi + 1 < depth)) {
    if (below ? lo > 0 : hi + 1 >= depth)
      --lo;
    else
      ++hi;
    below = !below;
  }

  std::vector<SegmentationSample> out;
  for (int64_t d = lo; d <= hi; ++d) {
    SegmentationSample s;
    s.image = Tensor<double>({sh[1], sh[2]});
    s.mask = Tensor<uint8_t>({sh[1], sh[2]});
    for (int64_t r = 0; r < sh[1]; ++r)
      for (int64_t c = 0; c < sh[2]; ++c) {
        s.image.at(r, c) = v.voxels.at(d, r, c);
        s.mask.at(r, c) = v.labels.at(d, r, c) > 0 ? 1 : 0;
      }
    s.subject_id = v.subject_id;
    s.slice_index = d;
    s.is_noise = false;
    out.push_back(std::move(s));
  }
  return out;
}

// Appends empty-mask slices drawn from label-free depths of the pool volumes
// until noise makes up `fraction` of the final total. Returns the shortfall
// (how many requested slices the pool could not supply) through
// `shortfall_out` when given.
inline std::vector<SegmentationSample> inject_noise_slices(
    std::vector<SegmentationSample> samples, const std::vector<VolumeRecord>& volume_pool,
    double fraction, Rng& rng, int64_t* shortfall_out = nullptr) {
  CS_CHECK(fraction >= 0.0 && fraction < 1.0,
           "inject_noise_slices: fraction must lie in [0,1), got " << fraction);
  if (shortfall_out) *shortfall_out = 0;
  if (fraction == 0.0 || samples.empty()) return samples;

  // n noise slices out of (orig + n) total at ratio `fraction`.
  const auto orig = static_cast<int64_t>(samples.size());
  const int64_t want = llround(fraction * double(orig) / (1.0 - fraction));

  std::vector<std::pair<size_t, int64_t>> candidates;  // (pool index, depth)
  for (size_t pi = 0; pi < volume_pool.size(); ++pi) {
    const auto& v = volume_pool[pi];
    v.validate();
    CS_CHECK(v.voxels.dim(1) == samples[0].image.dim(0) &&
                 v.voxels.dim(2) == samples[0].image.dim(1),
             "inject_noise_slices: pool volume '" << v.subject_id << "' slices are "
                 << v.voxels.dim(1) << "x" << v.voxels.dim(2) << ", samples are "
                 << samples[0].image.dim(0) << "x" << samples[0].image.dim(1));
    for (int64_t d = 0; d < v.voxels.dim(0); ++d) {
      bool empty = true;
      for (int64_t r = 0; empty && r < v.voxels.dim(1); ++r)
        for (int64_t c = 0; c < v.voxels.dim(2); ++c)
          if (v.labels.at(d, r, c) > 0) {
            empty = false;
            break;
          }
      if (empty) candidates.emplace_back(pi, d);
    }
  }
  rng.shuffle(candidates.begin(), candidates.end());

  const int64_t take = std::min<int64_t>(want, static_cast<int64_t>(candidates.size()));
  if (shortfall_out) *shortfall_out = want - take;
  for (int64_t k = 0; k < take; ++k) {
    const auto [pi, d] = candidates[static_cast<size_t>(k)];
    const auto& v = volume_pool[pi];
    SegmentationSample s;
    s.image = Tensor<double>({v.voxels.dim(1), v.voxels.dim(2)});
    s.mask = Tensor<uint8_t>({v.voxels.dim(1), v.voxels.dim(2)});
    for (int64_t r = 0; r < v.voxels.dim(1); ++r)
      for (int64_t c = 0; c < v.voxels.dim(2); ++c) s.image.at(r, c) = v.voxels.at(d, r, c);
    s.subject_id = v.subject_id;
    s.slice_index = d;
    s.is_noise = true;
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Synthetic data: soft-edged filled ellipses (the targets) among rings of the
// same brightness range (the distractors) on a textured background. Each
// target is additionally dimmed along a random stripe while its mask keeps
// the full shape, so membership cannot be read off a single pixel's
// intensity: part of every outline has to be completed from context.
// ---------------------------------------------------------------------------

namespace detail {

struct Ellipse {
  double cy, cx, a, b, theta, amp;
  // Occlusion stripe through the center: angle and half-width in pixels.
  // Target intensity is dimmed inside the stripe while the mask keeps the
  // full shape, so a segmenter has to complete the outline from context.
  double occ_phi = 0.0, occ_w = 0.0;

  // Normalized elliptic radius: 1.0 on the boundary.
  double radius(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = dx * std::cos(theta) + dy * std::sin(theta);
    const double w = -dx * std::sin(theta) + dy * std::cos(theta);
    return std::sqrt((u * u) / (a * a) + (w * w) / (b * b));
  }

  // 1 at the stripe's center line, falling off to 0 outside it.
  double stripe(double y, double x) const {
    if (occ_w <= 0.0) return 0.0;
    const double d = -(x - cx) * std::sin(occ_phi) + (y - cy) * std::cos(occ_phi);
    return std::exp(-0.5 * (d / occ_w) * (d / occ_w));
  }
};

inline Ellipse random_ellipse(Rng& rng, double size, double center_lo, double center_hi) {
  Ellipse e;
  e.cy = rng.uniform(center_lo, center_hi) * size;
  e.cx = rng.uniform(center_lo, center_hi) * size;
  e.a = rng.uniform(0.13, 0.23) * size;
  e.b = rng.uniform(0.13, 0.23) * size;
  e.theta = rng.uniform(0.0, 3.14159265358979323846);
  e.amp = rng.uniform(0.75, 1.10);
  e.occ_phi = rng.uniform(0.0, 3.14159265358979323846);
  e.occ_w = 0.25 * std::min(e.a, e.b);
  return e;
}

}  // namespace detail

// Fully seeded generator; every mask's foreground fraction lands in
// [0.01, 0.25] (resampled otherwise). Images are z-scored per slice.
inline std::vector<SegmentationSample> synth_dataset(int64_t n, int64_t size, uint64_t seed) {
  CS_CHECK(n >= 1, "synth_dataset: n must be positive, got " << n);
  CS_CHECK(size >= 16, "synth_dataset: size must be at least 16, got " << size);
  Rng rng(seed);
  std::vector<SegmentationSample> out;
  out.reserve(static_cast<size_t>(n));

  for (int64_t idx = 0; idx < n; ++idx) {
    SegmentationSample s;
    for (int attempt = 0;; ++attempt) {
      CS_CHECK(attempt < 100, "synth_dataset: foreground-fraction rejection did not converge");
      s.image = Tensor<double>({size, size});
      s.mask = Tensor<uint8_t>({size, size});

      // Background: coarse value-noise grid, bilinearly interpolated, plus
      // fine white noise.
      constexpr int kGrid = 5;
      double grid[kGrid][kGrid];
      for (auto& row : grid)
        for (double& g : row) g = rng.normal(0.0, 0.35);
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
          const double gy = double(y) / double(size - 1) * (kGrid - 1);
          const double gx = double(x) / double(size - 1) * (kGrid - 1);
          const int y0 = std::min<int>(int(gy), kGrid - 2);
          const int x0 = std::min<int>(int(gx), kGrid - 2);
          const double fy = gy - y0, fx = gx - x0;
          s.image.at(y, x) = (1 - fy) * ((1 - fx) * grid[y0][x0] + fx * grid[y0][x0 + 1]) +
                             fy * ((1 - fx) * grid[y0 + 1][x0] + fx * grid[y0 + 1][x0 + 1]);
        }
      for (int64_t i = 0; i < s.image.numel(); ++i) s.image[i] += rng.normal(0.0, 0.10);

      // Targets: 1-2 filled ellipses with a soft sigmoid edge.
      const int n_targets = rng.uniform() < 0.5 ? 1 : 2;
      std::vector<detail::Ellipse> targets;
      for (int t = 0; t < n_targets; ++t)
        targets.push_back(detail::random_ellipse(rng, double(size), 0.28, 0.72));

      // Distractors: 2-4 rings from the same amplitude range.
      const int n_rings = 2 + int(rng.uniform_int(3));
      std::vector<detail::Ellipse> rings;
      for (int t = 0; t < n_rings; ++t)
        rings.push_back(detail::random_ellipse(rng, double(size), 0.15, 0.85));

      int64_t fg = 0;
      for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
          double v = s.image.at(y, x);
          bool inside = false;
          for (const auto& e : targets) {
            const double r = e.radius(double(y), double(x));
            const double body = e.amp / (1.0 + std::exp((r - 1.0) / 0.05));
            v += body * (1.0 - 0.30 * e.stripe(double(y), double(x)));
            inside = inside || r <= 1.0;
          }
          for (const auto& e : rings) {
            const double r = e.radius(double(y), double(x));
            const double band = (r - 1.0) / 0.10;
            v += e.amp * std::exp(-0.5 * band * band);
          }
          s.image.at(y, x) = v;
          s.mask.at(y, x) = inside ? 1 : 0;
          fg += inside ? 1 : 0;
        }

      const double frac = double(fg) / double(size * size);
      if (frac >= 0.01 && frac <= 0.25) break;
    }

    // Per-slice z-score, matching what the volume pipeline feeds the model.
    const int64_t np = s.image.numel();
    double mean = 0;
    for (int64_t i = 0; i < np; ++i) mean += s.image[i];
    mean /= double(np);
    double var = 0;
    for (int64_t i = 0; i < np; ++i) {
      const double d = s.image[i] - mean;
      var += d * d;
    }
    var /= double(np);
    const double inv = 1.0 / std::sqrt(var + 1e-12);
    for (int64_t i = 0; i < np; ++i) s.image[i] = (s.image[i] - mean) * inv;

    s.subject_id = "synth-" + std::to_string(idx);
    s.slice_index = 0;
    s.is_noise = false;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sample-set container:
//   magic "CSEGSMP1", u32 version (1), i64 count, then per sample:
//   subject_id string, i64 slice_index, u8 is_noise, i64 rows, i64 cols,
//   rows*cols f64 image, rows*cols u8 mask.
// ---------------------------------------------------------------------------

inline constexpr char kSamplesMagic[8] = {'C', 'S', 'E', 'G', 'S', 'M', 'P', '1'};

inline void write_samples(const std::string& path, const std::vector<SegmentationSample>& v) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    CS_CHECK(os.good(), "write_samples: cannot open '" << tmp << "'");
    os.write(kSamplesMagic, 8);
    io::write_u32(os, 1);
    io::write_i64(os, static_cast<int64_t>(v.size()));
    for (const auto& s : v) {
      s.validate();
      io::write_str(os, s.subject_id);
      io::write_i64(os, s.slice_index);
      io::write_u8(os, s.is_noise ? 1 : 0);
      io::write_i64(os, s.image.dim(0));
      io::write_i64(os, s.image.dim(1));
      for (int64_t i = 0; i < s.image.numel(); ++i) io::write_f64(os, s.image[i]);
      for (int64_t i = 0; i < s.mask.numel(); ++i) io::write_u8(os, s.mask[i]);
    }
    CS_CHECK(os.good(), "write_samples: write failed on '" << tmp << "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<SegmentationSample> read_samples(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  CS_CHECK(is.good(), "read_samples: cannot open '" << path << "'");
  char magic[8];
  is.read(magic, 8);
  CS_CHECK(is.gcount() == 8 && std::memcmp(magic, kSamplesMagic, 8) == 0,
           "read_samples: '" << path << "' is not a sample set (bad magic)");
  const uint32_t version = io::read_u32(is);
  CS_CHECK(version == 1, "read_samples: unsupported version " << version);
  const int64_t count = io::read_i64(is);
  CS_CHECK(count >= 0 && count < (int64_t(1) << 32), "read_samples: implausible count " << count);
  std::vector<SegmentationSample> v;
  v.reserve(static_cast<size_t>(count));
  for (int64_t k = 0; k < count; ++k) {
    SegmentationSample s;
    s.subject_id = io::read_str(is);
    s.slice_index = io::read_i64(is);
    s.is_noise = io::read_u8(is) != 0;
    const int64_t rows = io::read_i64(is);
    const int64_t cols = io::read_i64(is);
    CS_CHECK(rows >= 1 && cols >= 1 && rows < (1 << 20) && cols < (1 << 20),
             "read_samples: implausible slice shape (" << rows << "," << cols << ")");
    s.image = Tensor<double>({rows, cols});
    s.mask = Tensor<uint8_t>({rows, cols});
    for (int64_t i = 0; i < s.image.numel(); ++i) s.image[i] = io::read_f64(is);
    for (int64_t i = 0; i < s.mask.numel(); ++i) s.mask[i] = io::read_u8(is);
    s.validate();
    v.push_back(std::move(s));
  }
  return v;
}

// ---------------------------------------------------------------------------
// Cross-validation manifest: tab-separated lines
//   subject_id <TAB> image_path <TAB> label_path <TAB> fold
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string subject_id;
  std::string image_path;
  std::string label_path;
  int64_t fold = 0;

  bool operator==(const ManifestEntry&) const = default;
};

// Shuffles subjects with the seed, then deals them round-robin, so fold sizes
// differ by at most one and folds are subject-disjoint.
inline std::vector<ManifestEntry> assign_folds(std::vector<ManifestEntry> entries, int64_t folds,
                                               uint64_t seed) {
  CS_CHECK(folds >= 1, "assign_folds: folds must be positive, got " << folds);
  CS_CHECK(folds <= static_cast<int64_t>(entries.size()),
           "assign_folds: " << folds << " folds for only " << entries.size() << " subjects");
  Rng rng(seed);
  rng.shuffle(entries.begin(), entries.end());
  for (size_t i = 0; i < entries.size(); ++i)
    entries[i].fold = static_cast<int64_t>(i) % folds;
  std::sort(entries.begin(), entries.end(), [](const ManifestEntry& a, const ManifestEntry& b) {
    return a.subject_id < b.subject_id;
  });
  return entries;
}

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    CS_CHECK(os.good(), "write_manifest: cannot open '" << tmp << "'");
    for (const auto& e : entries)
      os << e.subject_id << '\t' << e.image_path << '\t' << e.label_path << '\t' << e.fold
         << '\n';
    CS_CHECK(os.good(), "write_manifest: write failed on '" << tmp << "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream is(path);
  CS_CHECK(is.good(), "read_manifest: cannot open '" << path << "'");
  std::vector<ManifestEntry> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string fold;
    if (!std::getline(ls, e.subject_id, '\t') || !std::getline(ls, e.image_path, '\t') ||
        !std::getline(ls, e.label_path, '\t') || !std::getline(ls, fold))
      CS_CHECK(false, "read_manifest: '" << path << "' line " << lineno << " is malformed");
    e.fold = std::stoll(fold);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace chainseg
