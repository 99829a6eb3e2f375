#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "geometry.hpp"

namespace sme {

struct Detection {
  std::string image_id;
  int class_id = 0;
  BBox box;
  double score = 0;
};

struct GroundTruth {
  std::string image_id;
  int class_id = 0;
  BBox box;
};

struct MatchResult {
  std::vector<bool> tp;          // per prediction, input order
  std::vector<bool> gt_matched;  // per ground truth, input order
  std::vector<long> matched_gt;  // ground-truth index per prediction, -1 for FP
};

inline void check_class(int class_id, int num_classes, const char* what) {
  if (class_id < 0 || class_id >= num_classes)
    throw std::invalid_argument(std::string(what) + ": unknown class_id " + std::to_string(class_id) + " (K=" +
                                std::to_string(num_classes) + ")");
}

/// Indices of `preds` by descending score; equal scores keep input order.
inline std::vector<std::size_t> score_order(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// Greedy one-to-one matching within each (image, class): predictions are
/// visited by descending score and each takes the unmatched ground truth with
/// the highest IoU, provided IoU >= threshold. IoU ties go to the earlier
/// ground truth.
inline MatchResult match_detections(const std::vector<Detection>& preds, const std::vector<GroundTruth>& gts,
                                    double iou_threshold, int num_classes) {
  for (const auto& p : preds) {
    check_class(p.class_id, num_classes, "match_detections prediction");
    if (!(p.score >= 0 && p.score <= 1)) throw std::invalid_argument("match_detections: score outside [0,1]");
  }
  for (const auto& g : gts) check_class(g.class_id, num_classes, "match_detections ground truth");

  std::map<std::pair<std::string, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < gts.size(); ++i) groups[{gts[i].image_id, gts[i].class_id}].push_back(i);

  std::vector<double> scores(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) scores[i] = preds[i].score;

  MatchResult r{std::vector<bool>(preds.size(), false), std::vector<bool>(gts.size(), false),
                std::vector<long>(preds.size(), -1)};
  for (std::size_t pi : score_order(scores)) {
    auto it = groups.find({preds[pi].image_id, preds[pi].class_id});
    if (it == groups.end()) continue;
    long best = -1;
    double best_iou = 0;
    for (std::size_t gi : it->second) {
      if (r.gt_matched[gi]) continue;
      const double v = iou(preds[pi].box, gts[gi].box);
      if (v >= iou_threshold && (best < 0 || v > best_iou)) {
        best = static_cast<long>(gi);
        best_iou = v;
      }
    }
    if (best >= 0) {
      r.tp[pi] = true;
      r.gt_matched[static_cast<std::size_t>(best)] = true;
      r.matched_gt[pi] = best;
    }
  }
  return r;
}

struct PrecisionRecall {
  double precision = 1;
  double recall = 1;
  std::size_t tp = 0, fp = 0, fn = 0;
};

/// P = TP/(TP+FP), 1 with no predictions; R = TP/(TP+FN), 1 with no ground truth.
inline PrecisionRecall precision_recall(const std::vector<bool>& labels, std::size_t gt_count) {
  PrecisionRecall pr;
  for (bool t : labels) (t ? pr.tp : pr.fp)++;
  if (pr.tp > gt_count) throw std::invalid_argument("precision_recall: more true positives than ground truths");
  pr.fn = gt_count - pr.tp;
  pr.precision = labels.empty() ? 1.0 : static_cast<double>(pr.tp) / static_cast<double>(labels.size());
  pr.recall = gt_count == 0 ? 1.0 : static_cast<double>(pr.tp) / static_cast<double>(gt_count);
  return pr;
}

struct ApResult {
  double ap = 0;
  bool warning = false;  // predictions present but no ground truth
};

/// All-points interpolated AP: precision at each recall level is replaced by
/// the maximum precision at any higher recall, and the resulting step curve
/// is integrated over recall.
inline ApResult average_precision(const std::vector<double>& scores, const std::vector<bool>& tp, std::size_t gt_count) {
  if (scores.size() != tp.size()) throw std::invalid_argument("average_precision: scores/labels length mismatch");
  ApResult r;
  if (gt_count == 0) {
    r.warning = !scores.empty();
    return r;
  }
  const auto order = score_order(scores);
  const std::size_t n = order.size();
  std::vector<double> precision(n), recall(n);
  std::size_t ctp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    ctp += tp[order[k]] ? 1 : 0;
    precision[k] = static_cast<double>(ctp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(ctp) / static_cast<double>(gt_count);
  }
  for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double prev = 0;
  for (std::size_t k = 0; k < n; ++k) {
    r.ap += (recall[k] - prev) * precision[k];
    prev = recall[k];
  }
  return r;
}

inline constexpr int kIouSweepSteps = 10;  // 0.50, 0.55, ..., 0.95
inline double sweep_threshold(int i) { return 0.5 + 0.05 * i; }

struct ClassReport {
  int class_id = 0;
  std::size_t gt_count = 0, pred_count = 0;
  std::size_t tp = 0, fp = 0, fn = 0;  // at IoU 0.5 and the score threshold
  double precision = 1, recall = 1;
  double ap50 = 0, ap50_95 = 0;
};

struct EvalReport {
  int num_classes = 0;
  double score_threshold = 0.25;
  std::vector<ClassReport> classes;
  std::size_t tp = 0, fp = 0, fn = 0;
  double precision = 1, recall = 1;  // pooled over classes
  double map50 = 0, map50_95 = 0;    // mean over classes with ground truth
  std::size_t classes_with_gt = 0;
  std::vector<std::string> warnings;

  bool empty() const { return classes_with_gt == 0 && tp + fp == 0; }
};

struct EvalOptions {
  double score_threshold = 0.25;  // for P/R/TP/FP/FN; AP uses every prediction
};

/// Per-class AP at IoU 0.5 and averaged over 0.50:0.05:0.95, plus P/R at a
/// score threshold. mAP is the plain mean over classes that have ground truth.
inline EvalReport map_report(const std::vector<Detection>& preds, const std::vector<GroundTruth>& gts, int num_classes,
                             const EvalOptions& opts = {}) {
  EvalReport rep;
  rep.num_classes = num_classes;
  rep.score_threshold = opts.score_threshold;
  std::vector<std::vector<Detection>> by_class_p(static_cast<std::size_t>(num_classes));
  std::vector<std::vector<GroundTruth>> by_class_g(static_cast<std::size_t>(num_classes));
  for (const auto& p : preds) {
    check_class(p.class_id, num_classes, "map_report prediction");
    by_class_p[static_cast<std::size_t>(p.class_id)].push_back(p);
  }
  for (const auto& g : gts) {
    check_class(g.class_id, num_classes, "map_report ground truth");
    by_class_g[static_cast<std::size_t>(g.class_id)].push_back(g);
  }
  double sum50 = 0, sum_sweep = 0;
  for (int k = 0; k < num_classes; ++k) {
    const auto& cp = by_class_p[static_cast<std::size_t>(k)];
    const auto& cg = by_class_g[static_cast<std::size_t>(k)];
    ClassReport cr;
    cr.class_id = k;
    cr.gt_count = cg.size();
    cr.pred_count = cp.size();
    std::vector<double> scores(cp.size());
    for (std::size_t i = 0; i < cp.size(); ++i) scores[i] = cp[i].score;
    double sweep = 0;
    for (int t = 0; t < kIouSweepSteps; ++t) {
      const auto m = match_detections(cp, cg, sweep_threshold(t), num_classes);
      const auto ap = average_precision(scores, m.tp, cg.size());
      if (t == 0) {
        cr.ap50 = ap.ap;
        if (ap.warning) rep.warnings.push_back("class " + std::to_string(k) + ": predictions without ground truth, AP=0");
        std::vector<bool> kept;
        for (std::size_t i = 0; i < cp.size(); ++i)
          if (cp[i].score >= opts.score_threshold) kept.push_back(m.tp[i]);
        const auto pr = precision_recall(kept, cg.size());
        cr.tp = pr.tp;
        cr.fp = pr.fp;
        cr.fn = pr.fn;
        cr.precision = pr.precision;
        cr.recall = pr.recall;
      }
      sweep += ap.ap;
    }
    cr.ap50_95 = sweep / kIouSweepSteps;
    rep.tp += cr.tp;
    rep.fp += cr.fp;
    rep.fn += cr.fn;
    if (cr.gt_count > 0) {
      ++rep.classes_with_gt;
      sum50 += cr.ap50;
      sum_sweep += cr.ap50_95;
    }
    rep.classes.push_back(cr);
  }
  if (rep.classes_with_gt > 0) {
    rep.map50 = sum50 / static_cast<double>(rep.classes_with_gt);
    rep.map50_95 = sum_sweep / static_cast<double>(rep.classes_with_gt);
  }
  rep.precision = rep.tp + rep.fp == 0 ? 1.0 : static_cast<double>(rep.tp) / static_cast<double>(rep.tp + rep.fp);
  rep.recall = rep.tp + rep.fn == 0 ? 1.0 : static_cast<double>(rep.tp) / static_cast<double>(rep.tp + rep.fn);
  return rep;
}

inline bool operator==(const ClassReport& a, const ClassReport& b) {
  return a.class_id == b.class_id && a.gt_count == b.gt_count && a.pred_count == b.pred_count && a.tp == b.tp &&
         a.fp == b.fp && a.fn == b.fn && a.precision == b.precision && a.recall == b.recall && a.ap50 == b.ap50 &&
         a.ap50_95 == b.ap50_95;
}

inline bool operator==(const EvalReport& a, const EvalReport& b) {
  return a.num_classes == b.num_classes && a.classes == b.classes && a.tp == b.tp && a.fp == b.fp && a.fn == b.fn &&
         a.precision == b.precision && a.recall == b.recall && a.map50 == b.map50 && a.map50_95 == b.map50_95;
}

inline std::string fmt_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

/// One row per class, then an "all" summary row.
inline void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << "class_id,gt_count,pred_count,tp,fp,fn,precision,recall,ap50,ap50_95\n";
  for (const auto& c : r.classes)
    os << c.class_id << ',' << c.gt_count << ',' << c.pred_count << ',' << c.tp << ',' << c.fp << ',' << c.fn << ','
       << fmt_real(c.precision) << ',' << fmt_real(c.recall) << ',' << fmt_real(c.ap50) << ','
       << fmt_real(c.ap50_95) << '\n';
  std::size_t gt = 0, pc = 0;
  for (const auto& c : r.classes) gt += c.gt_count, pc += c.pred_count;
  os << "all," << gt << ',' << pc << ',' << r.tp << ',' << r.fp << ',' << r.fn << ',' << fmt_real(r.precision) << ','
     << fmt_real(r.recall) << ',' << fmt_real(r.map50) << ',' << fmt_real(r.map50_95) << '\n';
}

// Predictions file: image_id,class_id,cx,cy,w,h,score (pixels).

inline void write_predictions_csv(std::ostream& os, const std::vector<Detection>& preds) {
  os << "image_id,class_id,cx,cy,w,h,score\n";
  for (const auto& p : preds)
    os << p.image_id << ',' << p.class_id << ',' << fmt_real(p.box.cx) << ',' << fmt_real(p.box.cy) << ','
       << fmt_real(p.box.w) << ',' << fmt_real(p.box.h) << ',' << fmt_real(p.score) << '\n';
}

inline std::vector<Detection> read_predictions_csv(std::istream& is, const std::string& source = "predictions") {
  std::vector<Detection> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("image_id", 0) == 0)) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> f;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 7) throw std::runtime_error(source + ":" + std::to_string(lineno) + ": expected 7 fields");
    try {
      Detection d;
      d.image_id = f[0];
      d.class_id = std::stoi(f[1]);
      d.box = {std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stod(f[5])};
      d.score = std::stod(f[6]);
      out.push_back(d);
    } catch (const std::logic_error&) {
      throw std::runtime_error(source + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

}  // namespace sme
