#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "chainseg/datasets.hpp"
#include "chainseg/network.hpp"

namespace chainseg {

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;

  int64_t total() const { return tp + fp + fn + tn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    tn += o.tn;
    return *this;
  }
};

// Binarizes at `threshold` (strictly above is positive) and counts exactly.
// Any equal shapes are accepted; target nonzero means positive.
template <typename T, typename M>
ConfusionCounts confusion(const Tensor<T>& pred_prob, const Tensor<M>& target,
                          double threshold = 0.5) {
  CS_CHECK(pred_prob.same_shape(target),
           "confusion: prediction " << pred_prob.shape_string() << " and target "
                                    << target.shape_string() << " differ");
  CS_CHECK(threshold > 0.0 && threshold < 1.0,
           "confusion: threshold must lie in (0,1), got " << threshold);
  ConfusionCounts c;
  for (int64_t i = 0; i < pred_prob.numel(); ++i) {
    const bool p = static_cast<double>(pred_prob[i]) > threshold;
    const bool t = target[i] != M(0);
    if (p && t)
      ++c.tp;
    else if (p && !t)
      ++c.fp;
    else if (!p && t)
      ++c.fn;
    else
      ++c.tn;
  }
  return c;
}

// Degenerate-denominator convention used by all four metrics: when both the
// prediction and the target are empty of the class in question the score is 1,
// when only one of them is empty it is 0.
inline double dsc(const ConfusionCounts& c) {
  const int64_t den = 2 * c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : 2.0 * double(c.tp) / double(den);
}

inline double iou_fg(const ConfusionCounts& c) {
  const int64_t den = c.tp + c.fp + c.fn;
  return den == 0 ? 1.0 : double(c.tp) / double(den);
}

inline double iou_bg(const ConfusionCounts& c) {
  const int64_t den = c.tn + c.fp + c.fn;
  return den == 0 ? 1.0 : double(c.tn) / double(den);
}

inline double miou(const ConfusionCounts& c) { return 0.5 * (iou_fg(c) + iou_bg(c)); }

inline double recall(const ConfusionCounts& c) {
  if (c.tp + c.fn == 0) return c.fp == 0 ? 1.0 : 0.0;
  return double(c.tp) / double(c.tp + c.fn);
}

inline double precision(const ConfusionCounts& c) {
  if (c.tp + c.fp == 0) return c.fn == 0 ? 1.0 : 0.0;
  return double(c.tp) / double(c.tp + c.fp);
}

// ---------------------------------------------------------------------------
// ROC / AUC.
// ---------------------------------------------------------------------------

struct RocPoint {
  double fpr = 0, tpr = 0, threshold = 0;
};

struct RocResult {
  std::vector<RocPoint> points;
  double auc = 0;
};

// Pixel-level ROC swept over every distinct score (classification rule:
// score >= threshold is positive), AUC by the trapezoidal rule.
inline RocResult roc_auc(const std::vector<double>& scores, const std::vector<uint8_t>& targets) {
  CS_CHECK(scores.size() == targets.size(),
           "roc_auc: " << scores.size() << " scores vs " << targets.size() << " targets");
  int64_t pos = 0, neg = 0;
  for (uint8_t t : targets) (t ? pos : neg)++;
  CS_CHECK(pos > 0 && neg > 0, "roc_auc: ground truth has a single class (" << pos
                                   << " positive, " << neg << " negative pixels)");

  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return scores[a] > scores[b]; });

  RocResult r;
  r.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  int64_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < order.size()) {
    const double s = scores[order[i]];
    // Consume the whole tie group so points land on distinct thresholds.
    while (i < order.size() && scores[order[i]] == s) {
      (targets[order[i]] ? tp : fp)++;
      ++i;
    }
    r.points.push_back({double(fp) / double(neg), double(tp) / double(pos), s});
  }
  for (size_t k = 1; k < r.points.size(); ++k)
    r.auc += (r.points[k].fpr - r.points[k - 1].fpr) *
             (r.points[k].tpr + r.points[k - 1].tpr) * 0.5;
  return r;
}

inline std::string roc_to_table(const std::vector<RocPoint>& points) {
  std::ostringstream os;
  os << "fpr\ttpr\tthreshold\n";
  os.precision(17);
  for (const auto& p : points) os << p.fpr << '\t' << p.tpr << '\t' << p.threshold << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Model evaluation.
// ---------------------------------------------------------------------------

struct SampleMetrics {
  std::string id;
  double dsc = 0, iou_fg = 0, iou_bg = 0, miou = 0, recall = 0, precision = 0;
};

inline SampleMetrics metrics_from_counts(const std::string& id, const ConfusionCounts& c) {
  return {id, dsc(c), iou_fg(c), iou_bg(c), miou(c), recall(c), precision(c)};
}

struct MetricsReport {
  std::vector<SampleMetrics> per_sample;
  SampleMetrics mean;    // per-slice means (the default reporting mode)
  SampleMetrics pooled;  // metrics of the summed confusion counts
  double threshold_used = 0.5;
  bool has_roc = false;
  RocResult roc;
  // The tables' "Accuracy" column is positive predictive value, i.e. the
  // precision field; reported under both names.
  std::string note;
};

template <typename T>
Tensor<T> batch_images(const std::vector<SegmentationSample>& samples, size_t first,
                       size_t count) {
  const int64_t h = samples[first].image.dim(0), w = samples[first].image.dim(1);
  Tensor<T> x({static_cast<int64_t>(count), 1, h, w});
  for (size_t k = 0; k < count; ++k) {
    const auto& img = samples[first + k].image;
    CS_CHECK(img.dim(0) == h && img.dim(1) == w,
             "batch_images: sample " << (first + k) << " is " << img.shape_string()
                                     << ", batch is (" << h << "," << w << ")");
    for (int64_t i = 0; i < img.numel(); ++i)
      x[static_cast<int64_t>(k) * h * w + i] = static_cast<T>(img[i]);
  }
  return x;
}

template <typename T>
MetricsReport evaluate_model(const Model<T>& model, const std::vector<SegmentationSample>& samples,
                             double threshold = 0.5, int64_t batch = 16, bool with_roc = false) {
  MetricsReport rep;
  rep.threshold_used = threshold;
  if (samples.empty()) {
    rep.note = "empty split: no samples evaluated";
    return rep;
  }

  NoGrad ng;
  ConfusionCounts pooled;
  std::vector<double> roc_scores;
  std::vector<uint8_t> roc_targets;
  for (size_t first = 0; first < samples.size(); first += static_cast<size_t>(batch)) {
    const size_t count = std::min<size_t>(static_cast<size_t>(batch), samples.size() - first);
    auto x = make_var<T>(batch_images<T>(samples, first, count));
    auto prob = model.forward(x);
    const int64_t hw = prob->value.dim(2) * prob->value.dim(3);
    for (size_t k = 0; k < count; ++k) {
      const auto& s = samples[first + k];
      Tensor<double> p({s.image.dim(0), s.image.dim(1)});
      for (int64_t i = 0; i < hw; ++i)
        p[i] = static_cast<double>(prob->value[static_cast<int64_t>(k) * hw + i]);
      const auto c = confusion(p, s.mask, threshold);
      pooled += c;
      rep.per_sample.push_back(metrics_from_counts(
          s.subject_id + "/" + std::to_string(s.slice_index), c));
      if (with_roc)
        for (int64_t i = 0; i < hw; ++i) {
          roc_scores.push_back(p[i]);
          roc_targets.push_back(s.mask[i]);
        }
    }
  }

  rep.mean.id = "mean";
  for (const auto& m : rep.per_sample) {
    rep.mean.dsc += m.dsc;
    rep.mean.iou_fg += m.iou_fg;
    rep.mean.iou_bg += m.iou_bg;
    rep.mean.miou += m.miou;
    rep.mean.recall += m.recall;
    rep.mean.precision += m.precision;
  }
  const double n = double(rep.per_sample.size());
  rep.mean.dsc /= n;
  rep.mean.iou_fg /= n;
  rep.mean.iou_bg /= n;
  rep.mean.miou /= n;
  rep.mean.recall /= n;
  rep.mean.precision /= n;
  rep.pooled = metrics_from_counts("pooled", pooled);

  if (with_roc) {
    const bool two_class =
        std::find(roc_targets.begin(), roc_targets.end(), uint8_t(1)) != roc_targets.end() &&
        std::find(roc_targets.begin(), roc_targets.end(), uint8_t(0)) != roc_targets.end();
    if (two_class) {
      rep.roc = roc_auc(roc_scores, roc_targets);
      rep.has_roc = true;
    } else {
      rep.note = "roc skipped: single-class ground truth";
    }
  }
  return rep;
}

inline std::string report_to_text(const MetricsReport& rep) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "threshold " << rep.threshold_used << "\n";
  os << "samples " << rep.per_sample.size() << "\n";
  auto line = [&os](const SampleMetrics& m) {
    os << m.id << '\t' << m.dsc << '\t' << m.iou_fg << '\t' << m.iou_bg << '\t' << m.miou << '\t'
       << m.recall << '\t' << m.precision << "\n";
  };
  os << "id\tdsc\tiou_fg\tiou_bg\tmiou\trecall\tprecision(=accuracy)\n";
  for (const auto& m : rep.per_sample) line(m);
  if (!rep.per_sample.empty()) {
    line(rep.mean);
    line(rep.pooled);
  }
  if (rep.has_roc) os << "auc " << rep.roc.auc << "\n";
  if (!rep.note.empty()) os << "note: " << rep.note << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Activation map: channel-weighted bridge feature, the standard gradient
// recipe. The target scalar is the mean pre-sigmoid logit over the
// predicted-positive pixels (all pixels when none clear the threshold), the
// weights are the spatial means of its gradient on the bridge feature.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<double> cam(Model<T>& model, const SegmentationSample& sample, double threshold = 0.5) {
  sample.validate();
  const int64_t h = sample.image.dim(0), w = sample.image.dim(1);
  Tensor<T> x({1, 1, h, w});
  for (int64_t i = 0; i < sample.image.numel(); ++i) x[i] = static_cast<T>(sample.image[i]);

  model.store().zero_grad();
  auto tr = model.forward_trace(make_var<T>(std::move(x)));

  Tensor<T> sel(tr.logits->value.shape());
  int64_t count = 0;
  for (int64_t i = 0; i < tr.prob->value.numel(); ++i)
    if (static_cast<double>(tr.prob->value[i]) > threshold) {
      sel[i] = T(1);
      ++count;
    }
  if (count == 0) {
    sel.fill(T(1));
    count = sel.numel();
  }
  for (int64_t i = 0; i < sel.numel(); ++i) sel[i] /= static_cast<T>(count);

  auto target = ops::dot_const(tr.logits, std::move(sel));
  backward(target);

  const auto& f = tr.gpa_out->value;
  const auto& g = tr.gpa_out->grad_ready ? tr.gpa_out->grad : Tensor<T>::zeros(f.shape());
  const int64_t C = f.dim(1), fh = f.dim(2), fw = f.dim(3);
  std::vector<double> alpha(static_cast<size_t>(C), 0.0);
  for (int64_t c = 0; c < C; ++c) {
    double s = 0;
    for (int64_t i = 0; i < fh * fw; ++i)
      s += static_cast<double>(g[(c * fh + 0) * fw + i]);
    alpha[static_cast<size_t>(c)] = s / double(fh * fw);
  }
  Tensor<double> heat({1, 1, fh, fw});
  for (int64_t i = 0; i < fh * fw; ++i) {
    double v = 0;
    for (int64_t c = 0; c < C; ++c)
      v += alpha[static_cast<size_t>(c)] * static_cast<double>(f[(c * fh + 0) * fw + i]);
    heat[i] = std::max(0.0, v);
  }
  model.store().zero_grad();

  CS_CHECK(h % fh == 0 && h / fh == w / fw,
           "cam: bridge feature " << f.shape_string() << " does not divide the input (" << h
                                  << "," << w << ")");
  const auto up = ops::bilinear_upsample(make_var<double>(std::move(heat)),
                                         static_cast<int>(h / fh));

  Tensor<double> out({h, w});
  double peak = 0;
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = up->value[i];
    peak = std::max(peak, out[i]);
  }
  if (peak > 0)
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= peak;
  return out;
}

}  // namespace chainseg
