#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sme {

/// Axis-aligned box in center format, pixel units.
struct BBox {
  double cx = 0, cy = 0, w = 1, h = 1;

  double x1() const { return cx - w / 2; }
  double x2() const { return cx + w / 2; }
  double y1() const { return cy - h / 2; }
  double y2() const { return cy + h / 2; }
  double area() const { return w * h; }

  bool valid() const { return std::isfinite(cx) && std::isfinite(cy) && std::isfinite(w) && std::isfinite(h) && w > 0 && h > 0; }

  BBox scaled(double k) const { return {cx * k, cy * k, w * k, h * k}; }
  BBox translated(double dx, double dy) const { return {cx + dx, cy + dy, w, h}; }

  friend bool operator==(const BBox&, const BBox&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const BBox& b) {
  return os << "BBox(" << b.cx << "," << b.cy << "," << b.w << "," << b.h << ")";
}

inline void require_valid(const BBox& b, const char* what) {
  if (!b.valid()) throw std::invalid_argument(std::string(what) + ": invalid box (need finite values, w>0, h>0)");
}

/// Gradient of a scalar with respect to (cx, cy, w, h).
using BoxGrad = std::array<double, 4>;

inline double intersection_area(const BBox& a, const BBox& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
  return iw * ih;
}

inline double iou(const BBox& bp, const BBox& bg) {
  const double inter = intersection_area(bp, bg);
  const double uni = bp.area() + bg.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

struct IouWithGrad {
  double value = 0;
  BoxGrad grad{};  // d IoU / d (cx, cy, w, h) of the predicted box
};

/// IoU and its gradient with respect to the predicted box. At the kinks of
/// min/max the derivative of the first argument is taken.
inline IouWithGrad iou_with_grad(const BBox& bp, const BBox& bg) {
  // Overlap extent along one axis and its derivatives with respect to the
  // predicted center and size.
  struct Axis {
    double len, d_center, d_size;
  };
  auto axis = [](double pc, double ps, double gc, double gs) {
    const double p1 = pc - ps / 2, p2 = pc + ps / 2, g1 = gc - gs / 2, g2 = gc + gs / 2;
    const bool hi_from_p = p2 <= g2;
    const bool lo_from_p = p1 >= g1;
    const double len = (hi_from_p ? p2 : g2) - (lo_from_p ? p1 : g1);
    if (len <= 0) return Axis{0, 0, 0};
    // d hi: p2 = pc + ps/2 ; d lo: p1 = pc - ps/2
    const double dc = (hi_from_p ? 1.0 : 0.0) - (lo_from_p ? 1.0 : 0.0);
    const double ds = (hi_from_p ? 0.5 : 0.0) + (lo_from_p ? 0.5 : 0.0);
    return Axis{len, dc, ds};
  };
  const Axis ax = axis(bp.cx, bp.w, bg.cx, bg.w);
  const Axis ay = axis(bp.cy, bp.h, bg.cy, bg.h);
  const double inter = ax.len * ay.len;
  const double uni = bp.area() + bg.area() - inter;
  IouWithGrad r;
  r.value = inter / uni;
  const BoxGrad d_inter{ax.d_center * ay.len, ay.d_center * ax.len, ax.d_size * ay.len, ay.d_size * ax.len};
  const BoxGrad d_area{0, 0, bp.h, bp.w};
  for (int i = 0; i < 4; ++i) r.grad[i] = d_inter[i] / uni - inter * (d_area[i] - d_inter[i]) / (uni * uni);
  return r;
}

struct Gaussian2D {
  std::array<double, 2> mu{};
  std::array<double, 2> sigma_diag{1, 1};  // pixels^2
};

/// N(mu, diag(w^2/4, h^2/4)) centered on the box.
inline Gaussian2D gaussian_of_box(const BBox& b) {
  require_valid(b, "gaussian_of_box");
  return {{b.cx, b.cy}, {b.w * b.w / 4, b.h * b.h / 4}};
}

/// Squared 2-Wasserstein distance between two Gaussians with diagonal
/// covariance: |mu1 - mu2|^2 + |S1^1/2 - S2^1/2|_F^2.
inline double wasserstein2_sq(const Gaussian2D& a, const Gaussian2D& b) {
  const double dx = a.mu[0] - b.mu[0];
  const double dy = a.mu[1] - b.mu[1];
  const double sx = std::sqrt(a.sigma_diag[0]) - std::sqrt(b.sigma_diag[0]);
  const double sy = std::sqrt(a.sigma_diag[1]) - std::sqrt(b.sigma_diag[1]);
  return dx * dx + dy * dy + sx * sx + sy * sy;
}

/// Same quantity directly from boxes: dcx^2 + dcy^2 + (dw/2)^2 + (dh/2)^2.
inline double wasserstein2_sq(const BBox& a, const BBox& b) {
  const double dx = a.cx - b.cx, dy = a.cy - b.cy;
  const double dw = (a.w - b.w) / 2, dh = (a.h - b.h) / 2;
  return dx * dx + dy * dy + dw * dw + dh * dh;
}

enum class NwdMode {
  canonical_exp,  // exp(-sqrt(W2^2) / C); loss = 1 - NWD
  paper_linear,   // clamp(W2^2 / C, 0, 1), used directly as the loss
};

inline const char* to_string(NwdMode m) { return m == NwdMode::canonical_exp ? "canonical-exp" : "paper-linear"; }

inline constexpr double kDefaultNwdConstant = 12.8;  // at 256x256 input

struct NwdConfig {
  double c_norm = kDefaultNwdConstant;
  NwdMode mode = NwdMode::canonical_exp;

  /// Default constant scaled linearly with the input side length.
  static NwdConfig for_image_side(double side, NwdMode mode = NwdMode::canonical_exp) {
    return {kDefaultNwdConstant * side / 256.0, mode};
  }
};

inline void require_valid(const NwdConfig& cfg) {
  if (!(cfg.c_norm > 0) || !std::isfinite(cfg.c_norm)) throw std::invalid_argument("NwdConfig: c_norm must be positive");
}

inline double nwd_from_w2sq(double w2sq, const NwdConfig& cfg) {
  require_valid(cfg);
  if (cfg.mode == NwdMode::canonical_exp) return std::exp(-std::sqrt(w2sq) / cfg.c_norm);
  return std::clamp(w2sq / cfg.c_norm, 0.0, 1.0);
}

inline double nwd(const Gaussian2D& a, const Gaussian2D& b, const NwdConfig& cfg) {
  return nwd_from_w2sq(wasserstein2_sq(a, b), cfg);
}

inline double nwd(const BBox& a, const BBox& b, const NwdConfig& cfg) { return nwd_from_w2sq(wasserstein2_sq(a, b), cfg); }

inline constexpr double kDegenerateBoxFloor = 1e-6;

struct BoxLoss {
  double loss = 0;
  BoxGrad grad{};  // d loss / d (cx, cy, w, h) of the predicted box
  bool degenerate = false;  // predicted w or h was floored
};

/// NWD regression loss of a predicted box against a ground-truth box.
inline BoxLoss nwd_loss(BBox bp, const BBox& bg, const NwdConfig& cfg) {
  require_valid(cfg);
  require_valid(bg, "nwd_loss ground truth");
  if (!std::isfinite(bp.cx) || !std::isfinite(bp.cy) || !std::isfinite(bp.w) || !std::isfinite(bp.h))
    throw std::invalid_argument("nwd_loss: non-finite predicted box");
  BoxLoss r;
  bool floor_w = false, floor_h = false;
  if (bp.w < kDegenerateBoxFloor) bp.w = kDegenerateBoxFloor, floor_w = true;
  if (bp.h < kDegenerateBoxFloor) bp.h = kDegenerateBoxFloor, floor_h = true;
  r.degenerate = floor_w || floor_h;

  const double dx = bp.cx - bg.cx, dy = bp.cy - bg.cy;
  const double dw = (bp.w - bg.w) / 2, dh = (bp.h - bg.h) / 2;
  const double w2sq = dx * dx + dy * dy + dw * dw + dh * dh;
  // d W2^2 / d (cx, cy, w, h)
  BoxGrad dw2{2 * dx, 2 * dy, dw, dh};

  if (cfg.mode == NwdMode::canonical_exp) {
    const double d = std::sqrt(w2sq);
    const double e = std::exp(-d / cfg.c_norm);
    r.loss = 1 - e;
    if (d > 0) {
      const double k = e / cfg.c_norm / (2 * d);  // d loss / d W2^2
      for (int i = 0; i < 4; ++i) r.grad[i] = k * dw2[i];
    }
  } else {
    const double v = w2sq / cfg.c_norm;
    r.loss = std::clamp(v, 0.0, 1.0);
    if (v < 1.0)
      for (int i = 0; i < 4; ++i) r.grad[i] = dw2[i] / cfg.c_norm;
  }
  if (floor_w) r.grad[2] = 0;
  if (floor_h) r.grad[3] = 0;
  return r;
}

/// 1 - IoU, the baseline box loss.
inline BoxLoss iou_loss(const BBox& bp, const BBox& bg) {
  require_valid(bg, "iou_loss ground truth");
  BoxLoss r;
  if (!bp.valid()) {
    r.loss = 1;
    r.degenerate = true;
    return r;
  }
  const IouWithGrad v = iou_with_grad(bp, bg);
  r.loss = 1 - v.value;
  for (int i = 0; i < 4; ++i) r.grad[i] = -v.grad[i];
  return r;
}

struct SensitivityRow {
  double size_px = 0;
  double offset_px = 0;
  double iou = 0;
  double nwd_canonical = 0;
  double nwd_paper_linear = 0;
};

/// For each square box of side s at the origin and a copy shifted by d along x,
/// records IoU and both NWD variants.
inline std::vector<SensitivityRow> sensitivity_sweep(const std::vector<double>& sizes, const std::vector<double>& offsets,
                                                     double c_norm) {
  std::vector<SensitivityRow> rows;
  const NwdConfig canon{c_norm, NwdMode::canonical_exp};
  const NwdConfig linear{c_norm, NwdMode::paper_linear};
  for (double s : sizes) {
    if (!(s > 0)) throw std::invalid_argument("sensitivity_sweep: sizes must be positive");
    for (double d : offsets) {
      if (!(d >= 0)) throw std::invalid_argument("sensitivity_sweep: offsets must be non-negative");
      const BBox a{0, 0, s, s};
      const BBox b = a.translated(d, 0);
      rows.push_back({s, d, iou(a, b), nwd(a, b, canon), nwd(a, b, linear)});
    }
  }
  return rows;
}

inline void write_sensitivity_csv(std::ostream& os, const std::vector<SensitivityRow>& rows) {
  os << "size_px,offset_px,iou,nwd_canonical,nwd_paper_linear\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.6g,%.6g,%.9f,%.9f,%.9f\n", r.size_px, r.offset_px, r.iou, r.nwd_canonical,
                  r.nwd_paper_linear);
    os << buf;
  }
}

}  // namespace sme
