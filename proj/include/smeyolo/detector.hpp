#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "eucb.hpp"
#include "geometry.hpp"
#include "metrics.hpp"
#include "msfa.hpp"
#include "synth.hpp"

namespace sme {

enum class DeepBlock { plain, msfa };
enum class Upsampler { plain, eucb };
enum class BoxLossKind { iou, nwd };

inline const char* to_string(DeepBlock b) { return b == DeepBlock::plain ? "plain" : "msfa"; }
inline const char* to_string(Upsampler u) { return u == Upsampler::plain ? "plain" : "eucb"; }
inline const char* to_string(BoxLossKind k) { return k == BoxLossKind::iou ? "iou" : "nwd"; }

struct DetectorConfig {
  int input_size = 256;
  int num_classes = 6;
  int width1 = 8, width2 = 16, width3 = 32, fuse_width = 32;
  DeepBlock deep_block = DeepBlock::msfa;
  Upsampler upsampler = Upsampler::eucb;
  BoxLossKind box_loss = BoxLossKind::nwd;
  NwdMode nwd_mode = NwdMode::canonical_exp;
  double nwd_c = 0;  // 0 selects the default constant scaled to input_size
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int epochs = 30, batch_size = 8, patience = 10;
  double box_weight = 1, obj_weight = 1, cls_weight = 1;
  double obj_prior = 0.01;  // initial objectness probability
  double decode_threshold = 0.01;
  int max_detections = 100;
  double nms_iou = 0.5;
  double score_threshold = 0.25;  // for precision/recall
  std::uint64_t seed = 42;

  static constexpr int kStride = 4;
  int grid() const { return input_size / kStride; }
  int head_channels() const { return 5 + num_classes; }

  NwdConfig nwd_config() const {
    if (nwd_c > 0) return {nwd_c, nwd_mode};
    return NwdConfig::for_image_side(input_size, nwd_mode);
  }

  void validate() const {
    if (input_size < 8 || input_size % 8 != 0) throw std::invalid_argument("detector: input_size must be a positive multiple of 8");
    if (num_classes < 1) throw std::invalid_argument("detector: num_classes must be positive");
    if (width1 < 1 || width2 < 1 || width3 < 1 || fuse_width < 1) throw std::invalid_argument("detector: widths must be positive");
    if (!(lr > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0))
      throw std::invalid_argument("detector: invalid optimizer hyperparameters");
    if (epochs < 1 || batch_size < 1 || patience < 1) throw std::invalid_argument("detector: epochs, batch_size and patience must be positive");
    if (box_weight < 0 || obj_weight < 0 || cls_weight < 0) throw std::invalid_argument("detector: loss weights must be non-negative");
    if (!(obj_prior > 0 && obj_prior < 1)) throw std::invalid_argument("detector: obj_prior must lie in (0, 1)");
    if (!(nms_iou > 0 && nms_iou <= 1)) throw std::invalid_argument("detector: nms_iou must lie in (0, 1]");
    if (max_detections < 1) throw std::invalid_argument("detector: max_detections must be positive");
    if (nwd_c < 0) throw std::invalid_argument("detector: nwd_c must be non-negative");
  }

  void apply(ConfigReader& r) {
    r.get("input_size", input_size);
    r.get("num_classes", num_classes);
    r.get("width1", width1);
    r.get("width2", width2);
    r.get("width3", width3);
    r.get("fuse_width", fuse_width);
    r.get_enum("deep_block", deep_block, {{"plain", DeepBlock::plain}, {"msfa", DeepBlock::msfa}});
    r.get_enum("upsampler", upsampler, {{"plain", Upsampler::plain}, {"eucb", Upsampler::eucb}});
    r.get_enum("box_loss", box_loss, {{"iou", BoxLossKind::iou}, {"nwd", BoxLossKind::nwd}});
    r.get_enum("nwd_mode", nwd_mode, {{"canonical-exp", NwdMode::canonical_exp}, {"paper-linear", NwdMode::paper_linear}});
    r.get("nwd_c", nwd_c);
    r.get("lr", lr);
    r.get("beta1", beta1);
    r.get("beta2", beta2);
    r.get("adam_eps", adam_eps);
    r.get("epochs", epochs);
    r.get("batch_size", batch_size);
    r.get("patience", patience);
    r.get("box_weight", box_weight);
    r.get("obj_weight", obj_weight);
    r.get("cls_weight", cls_weight);
    r.get("obj_prior", obj_prior);
    r.get("decode_threshold", decode_threshold);
    r.get("max_detections", max_detections);
    r.get("nms_iou", nms_iou);
    r.get("score_threshold", score_threshold);
    r.get("seed", seed);
  }

  void echo(ConfigWriter& w) const {
    w.put("input_size", input_size)
        .put("num_classes", num_classes)
        .put("width1", width1)
        .put("width2", width2)
        .put("width3", width3)
        .put("fuse_width", fuse_width)
        .put("deep_block", to_string(deep_block))
        .put("upsampler", to_string(upsampler))
        .put("box_loss", to_string(box_loss))
        .put("nwd_mode", to_string(nwd_mode))
        .put("nwd_c", nwd_c)
        .put("lr", lr)
        .put("beta1", beta1)
        .put("beta2", beta2)
        .put("adam_eps", adam_eps)
        .put("epochs", epochs)
        .put("batch_size", batch_size)
        .put("patience", patience)
        .put("box_weight", box_weight)
        .put("obj_weight", obj_weight)
        .put("cls_weight", cls_weight)
        .put("obj_prior", obj_prior)
        .put("decode_threshold", decode_threshold)
        .put("max_detections", max_detections)
        .put("nms_iou", nms_iou)
        .put("score_threshold", score_threshold)
        .put("seed", seed);
  }

  std::string echo_text() const {
    std::ostringstream os;
    ConfigWriter w(os);
    w.section("detector");
    echo(w);
    return os.str();
  }

  static DetectorConfig from_text(const std::string& text, const std::string& source) {
    const ConfigFile cf = ConfigFile::parse_string(text, source);
    cf.require_sections({"detector"});
    DetectorConfig cfg;
    ConfigReader r(cf, "detector");
    cfg.apply(r);
    r.finish();
    cfg.validate();
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// Layers.

template <typename T>
struct ConvBnRelu {
  ConvParams<T> conv;
  BatchNormState<T> bn;
  std::size_t stride = 1;
};

template <typename T>
ConvBnRelu<T> make_conv_bn_relu(std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t stride,
                                std::uint64_t seed, const std::string& name) {
  ConvBnRelu<T> l;
  l.conv = ConvParams<T>::dense(in_c, out_c, k, k, {k / 2, k / 2}, /*with_bias=*/false);
  init_conv(l.conv, seed, name + ".conv");
  l.bn = BatchNormState<T>::identity(out_c);
  l.stride = stride;
  return l;
}

template <typename T>
struct ConvBnReluCache {
  Tensor<T> input, bn_out;
  BatchNormCache<T> bn;
};

template <typename T>
Tensor<T> cbr_forward(const Tensor<T>& x, const ConvBnRelu<T>& l, ConvBnReluCache<T>* c) {
  Tensor<T> z = l.stride == 2 ? conv2d_stride2(x, l.conv) : conv2d(x, l.conv);
  BatchNormCache<T> bc;
  Tensor<T> b = batchnorm_forward(z, l.bn, c ? &bc : nullptr);
  Tensor<T> y = activation(b, Activation::relu);
  if (c) {
    c->input = x;
    c->bn_out = std::move(b);
    c->bn = std::move(bc);
  }
  return y;
}

template <typename T>
Tensor<T> cbr_backward(const Tensor<T>& g, ConvBnRelu<T>& l, const ConvBnReluCache<T>& c) {
  Tensor<T> gb = activation_backward(c.bn_out, c.bn_out, g, Activation::relu);
  BatchNormGrads<T> bg = batchnorm_backward(gb, l.bn, c.bn);
  accumulate_grad(l.bn.gamma, bg.grad_gamma);
  accumulate_grad(l.bn.beta, bg.grad_beta);
  return conv2d_backward_into(c.input, l.conv, bg.grad_x, l.stride);
}

template <typename T>
void append_cbr_slots(ConvBnRelu<T>& l, const std::string& name, std::vector<ParamSlot<T>>& out) {
  append_conv_slots(l.conv, name + ".conv", out);
  out.push_back({name + ".bn.gamma", &l.bn.gamma});
  out.push_back({name + ".bn.beta", &l.bn.beta});
}

// ---------------------------------------------------------------------------
// Model.

/// Stride-2 stem to strides 4 and 8, a deep block at stride 8, a neck that
/// brings stride 8 back to stride 4 and fuses it with the stride-4 features,
/// and one 1x1 head at stride 4.
///
/// Head channels per cell: tx, ty, tw, th, objectness, then one logit per class.
template <typename T>
struct Detector {
  DetectorConfig cfg;
  ConvBnRelu<T> stem1, stem2, stem3;
  std::optional<MsfaParams<T>> msfa;
  std::optional<ConvBnRelu<T>> deep_conv;
  std::optional<EucbParams<T>> eucb;
  ConvBnRelu<T> fuse;
  ConvParams<T> head;
};

inline constexpr int kObjChannel = 4;
inline constexpr int kFirstClassChannel = 5;

inline double logit(double p) { return std::log(p / (1 - p)); }

template <typename T>
Detector<T> build_model(const DetectorConfig& cfg) {
  cfg.validate();
  const auto w1 = static_cast<std::size_t>(cfg.width1), w2 = static_cast<std::size_t>(cfg.width2),
             w3 = static_cast<std::size_t>(cfg.width3), wf = static_cast<std::size_t>(cfg.fuse_width);
  Detector<T> m;
  m.cfg = cfg;
  m.stem1 = make_conv_bn_relu<T>(1, w1, 3, 2, cfg.seed, "stem1");
  m.stem2 = make_conv_bn_relu<T>(w1, w2, 3, 2, cfg.seed, "stem2");
  m.stem3 = make_conv_bn_relu<T>(w2, w3, 3, 2, cfg.seed, "stem3");
  if (cfg.deep_block == DeepBlock::msfa)
    m.msfa = make_msfa<T>(w3, cfg.seed, kDefaultMsfaKernels, "deep.msfa");
  else
    m.deep_conv = make_conv_bn_relu<T>(w3, w3, 3, 1, cfg.seed, "deep.conv");
  if (cfg.upsampler == Upsampler::eucb) m.eucb = make_eucb<T>(w3, w3, cfg.seed, UpsampleMode::nearest, "neck.eucb");
  m.fuse = make_conv_bn_relu<T>(w3 + w2, wf, 1, 1, cfg.seed, "neck.fuse");
  m.head = ConvParams<T>::dense(wf, static_cast<std::size_t>(cfg.head_channels()), 1, 1, {0, 0});
  init_conv(m.head, cfg.seed, "head");
  (*m.head.bias)[kObjChannel] = static_cast<T>(logit(cfg.obj_prior));
  return m;
}

/// Trainable tensors in a fixed order. Names start with the checkpoint
/// section they belong to: stem, deep, neck or head.
template <typename T>
std::vector<ParamSlot<T>> model_slots(Detector<T>& m) {
  std::vector<ParamSlot<T>> out;
  append_cbr_slots(m.stem1, "stem1", out);
  append_cbr_slots(m.stem2, "stem2", out);
  append_cbr_slots(m.stem3, "stem3", out);
  if (m.msfa) {
    for (auto& s : m.msfa->slots("deep.msfa")) out.push_back(s);
  } else {
    append_cbr_slots(*m.deep_conv, "deep.conv", out);
  }
  if (m.eucb)
    for (auto& s : m.eucb->slots("neck.eucb")) out.push_back(s);
  append_cbr_slots(m.fuse, "neck.fuse", out);
  append_conv_slots(m.head, "head", out);
  return out;
}

/// Every batch-norm layer with its name, in model order.
template <typename T>
std::vector<std::pair<std::string, BatchNormState<T>*>> model_batchnorms(Detector<T>& m) {
  std::vector<std::pair<std::string, BatchNormState<T>*>> out{
      {"stem1.bn", &m.stem1.bn}, {"stem2.bn", &m.stem2.bn}, {"stem3.bn", &m.stem3.bn}};
  if (m.deep_conv) out.push_back({"deep.conv.bn", &m.deep_conv->bn});
  if (m.eucb) out.push_back({"neck.eucb.bn", &m.eucb->bn});
  out.push_back({"neck.fuse.bn", &m.fuse.bn});
  return out;
}

template <typename T>
void set_bn_mode(Detector<T>& m, BnMode mode) {
  for (auto& [name, bn] : model_batchnorms(m)) bn->mode = mode;
}

template <typename T>
std::size_t parameter_count(Detector<T>& m) {
  std::size_t n = 0;
  for (const auto& s : model_slots(m)) n += s.value->size();
  return n;
}

inline std::size_t parameter_count(const DetectorConfig& cfg) {
  auto m = build_model<float>(cfg);
  return parameter_count(m);
}

/// Multiply-accumulates of one forward pass over a single image. Bias adds,
/// batch norm and activations are not counted; the MSFA gate multiply is.
inline std::uint64_t model_macs(const DetectorConfig& cfg) {
  cfg.validate();
  const std::uint64_t s = cfg.input_size;
  const std::uint64_t w1 = cfg.width1, w2 = cfg.width2, w3 = cfg.width3, wf = cfg.fuse_width;
  const std::uint64_t h2 = s / 2, h4 = s / 4, h8 = s / 8;
  std::uint64_t macs = conv_macs(w1, h2, h2, 1, 3, 3) + conv_macs(w2, h4, h4, w1, 3, 3) + conv_macs(w3, h8, h8, w2, 3, 3);
  macs += cfg.deep_block == DeepBlock::msfa ? msfa_flops(w3, h8, h8) : conv_macs(w3, h8, h8, w3, 3, 3);
  if (cfg.upsampler == Upsampler::eucb) macs += eucb_flops(w3, w3, h8, h8);
  macs += conv_macs(wf, h4, h4, w3 + w2, 1, 1);
  macs += conv_macs(static_cast<std::size_t>(cfg.head_channels()), h4, h4, wf, 1, 1);
  return macs;
}

// ---------------------------------------------------------------------------
// Forward and backward.

template <typename T>
struct DetectorCache {
  ConvBnReluCache<T> s1, s2, s3, deep_conv, fuse;
  MsfaCache<T> msfa;
  EucbCache<T> eucb;
  Dims up_input_dims;
  std::size_t up_channels = 0, f4_channels = 0;
  Tensor<T> head_input;
};

/// Pure forward pass from a (n, 1, S, S) image batch to the (n, 5 + K, S/4, S/4)
/// head map. Train-mode batch statistics land in the cache; apply them with
/// update_running_stats.
template <typename T>
Tensor<T> detector_forward(const Detector<T>& m, const Tensor<T>& x, DetectorCache<T>* c = nullptr) {
  require_rank4(x, "detector input");
  if (x.c() != 1 || x.h() != static_cast<std::size_t>(m.cfg.input_size) || x.w() != x.h())
    throw DimensionError("detector: expected (n, 1, " + std::to_string(m.cfg.input_size) + ", " +
                         std::to_string(m.cfg.input_size) + ") input, got " + dims_to_string(x.dims()));
  Tensor<T> a1 = cbr_forward(x, m.stem1, c ? &c->s1 : nullptr);
  Tensor<T> f4 = cbr_forward(a1, m.stem2, c ? &c->s2 : nullptr);
  Tensor<T> f8 = cbr_forward(f4, m.stem3, c ? &c->s3 : nullptr);
  Tensor<T> deep = m.msfa ? msfa_forward(f8, *m.msfa, c ? &c->msfa : nullptr)
                          : cbr_forward(f8, *m.deep_conv, c ? &c->deep_conv : nullptr);
  Tensor<T> up = m.eucb ? eucb_forward(deep, *m.eucb, c ? &c->eucb : nullptr)
                        : plain_upsample_baseline(deep, UpsampleMode::nearest);
  if (c) {
    c->up_input_dims = deep.dims();
    c->up_channels = up.c();
    c->f4_channels = f4.c();
  }
  Tensor<T> cat = concat_channels<T>({std::cref(up), std::cref(f4)});
  Tensor<T> fused = cbr_forward(cat, m.fuse, c ? &c->fuse : nullptr);
  Tensor<T> out = conv2d(fused, m.head);
  if (c) c->head_input = std::move(fused);
  return out;
}

/// Adds parameter gradients for d(loss)/d(head output) = `grad_out` and
/// returns the input gradient.
template <typename T>
Tensor<T> detector_backward(Detector<T>& m, const DetectorCache<T>& c, const Tensor<T>& grad_out) {
  Tensor<T> g_fused = conv2d_backward_into(c.head_input, m.head, grad_out);
  Tensor<T> g_cat = cbr_backward(g_fused, m.fuse, c.fuse);
  auto parts = split_channels(g_cat, {c.up_channels, c.f4_channels});
  Tensor<T> g_deep = m.eucb ? eucb_backward(parts[0], *m.eucb, c.eucb)
                            : upsample2x_backward(parts[0], c.up_input_dims, UpsampleMode::nearest);
  Tensor<T> g_f8 = m.msfa ? msfa_backward(g_deep, *m.msfa, c.msfa) : cbr_backward(g_deep, *m.deep_conv, c.deep_conv);
  Tensor<T> g_f4 = cbr_backward(g_f8, m.stem3, c.s3);
  add_inplace(g_f4, parts[1]);
  Tensor<T> g_a1 = cbr_backward(g_f4, m.stem2, c.s2);
  return cbr_backward(g_a1, m.stem1, c.s1);
}

template <typename T>
void update_running_stats(Detector<T>& m, const DetectorCache<T>& c) {
  batchnorm_update_running(m.stem1.bn, c.s1.bn);
  batchnorm_update_running(m.stem2.bn, c.s2.bn);
  batchnorm_update_running(m.stem3.bn, c.s3.bn);
  if (m.deep_conv) batchnorm_update_running(m.deep_conv->bn, c.deep_conv.bn);
  if (m.eucb) batchnorm_update_running(m.eucb->bn, c.eucb.bn);
  batchnorm_update_running(m.fuse.bn, c.fuse.bn);
}

// ---------------------------------------------------------------------------
// Targets, box coding and loss.

/// Ground truth of one image in pixel units.
struct ImageTargets {
  std::vector<BBox> boxes;
  std::vector<int> classes;
};

struct CellAssignment {
  std::size_t cell = 0;  // gy * grid + gx
  std::size_t gt = 0;
};

/// Center-cell assignment: each box goes to the cell holding its center.
/// When two boxes share a cell the larger one keeps it.
inline std::vector<CellAssignment> assign_cells(const ImageTargets& t, int grid, double stride,
                                                std::size_t* collisions = nullptr) {
  std::vector<CellAssignment> out;
  for (std::size_t i = 0; i < t.boxes.size(); ++i) {
    const auto& b = t.boxes[i];
    const int gx = std::clamp(static_cast<int>(std::floor(b.cx / stride)), 0, grid - 1);
    const int gy = std::clamp(static_cast<int>(std::floor(b.cy / stride)), 0, grid - 1);
    const auto cell = static_cast<std::size_t>(gy) * grid + gx;
    auto it = std::find_if(out.begin(), out.end(), [&](const CellAssignment& a) { return a.cell == cell; });
    if (it == out.end()) {
      out.push_back({cell, i});
      continue;
    }
    if (collisions) ++*collisions;
    if (b.area() > t.boxes[it->gt].area()) it->gt = i;
  }
  std::sort(out.begin(), out.end(), [](const CellAssignment& a, const CellAssignment& b) { return a.cell < b.cell; });
  return out;
}

/// Box in cell coordinates: center offsets within the cell and log size in
/// units of the stride.
struct BoxCode {
  double ox = 0, oy = 0, lw = 0, lh = 0;
};

inline BoxCode encode_box(const BBox& b, int gx, int gy, double stride) {
  return {b.cx / stride - gx, b.cy / stride - gy, std::log(b.w / stride), std::log(b.h / stride)};
}

inline BBox decode_box(const BoxCode& c, int gx, int gy, double stride) {
  return {(gx + c.ox) * stride, (gy + c.oy) * stride, stride * std::exp(c.lw), stride * std::exp(c.lh)};
}

inline constexpr double kMaxLogSize = 8.0;

inline double bce_with_logit(double z, double t) { return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))); }

struct LossBreakdown {
  double total = 0, box = 0, obj = 0, cls = 0;
  std::size_t positives = 0;
  bool no_positive = false;  // box term forced to 0
  bool degenerate_box = false;
};

template <typename T>
struct LossResult {
  LossBreakdown parts;
  Tensor<T> grad;  // d total / d head output
};

/// Objectness BCE over every cell, class BCE and box loss over positive
/// cells. All three are divided by the number of positives so each term is
/// on a per-object scale.
template <typename T>
LossResult<T> compute_loss(const Tensor<T>& head, const std::vector<ImageTargets>& targets, const DetectorConfig& cfg) {
  require_rank4(head, "compute_loss head");
  const std::size_t N = head.n(), G = static_cast<std::size_t>(cfg.grid()), K = static_cast<std::size_t>(cfg.num_classes);
  if (head.c() != static_cast<std::size_t>(cfg.head_channels()) || head.h() != G || head.w() != G)
    throw DimensionError("compute_loss: head " + dims_to_string(head.dims()) + " does not match config");
  if (targets.size() != N) throw DimensionError("compute_loss: one target list per image is required");
  const double stride = DetectorConfig::kStride;
  const NwdConfig nwd_cfg = cfg.nwd_config();

  std::vector<std::vector<CellAssignment>> assign(N);
  std::size_t npos = 0;
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t i = 0; i < targets[n].boxes.size(); ++i) {
      require_valid(targets[n].boxes[i], "compute_loss target");
      if (targets[n].classes.at(i) < 0 || targets[n].classes[i] >= cfg.num_classes)
        throw std::invalid_argument("compute_loss: target class out of range");
    }
    assign[n] = assign_cells(targets[n], static_cast<int>(G), stride);
    npos += assign[n].size();
  }
  LossResult<T> r;
  r.grad = Tensor<T>(head.dims());
  r.parts.positives = npos;
  r.parts.no_positive = npos == 0;
  const double norm = static_cast<double>(std::max<std::size_t>(npos, 1));
  const double kobj = cfg.obj_weight / norm, kcls = cfg.cls_weight / norm, kbox = cfg.box_weight / norm;

  double obj = 0, cls = 0, box = 0;
  for (std::size_t n = 0; n < N; ++n) {
    std::vector<char> pos(G * G, 0);
    for (const auto& a : assign[n]) pos[a.cell] = 1;
    const T* zo = head.plane(n, kObjChannel);
    T* go = r.grad.plane(n, kObjChannel);
    for (std::size_t i = 0; i < G * G; ++i) {
      const double z = zo[i], t = pos[i];
      obj += bce_with_logit(z, t);
      go[i] = static_cast<T>(kobj * (sigmoid(z) - t));
    }
    for (const auto& a : assign[n]) {
      const int gx = static_cast<int>(a.cell % G), gy = static_cast<int>(a.cell / G);
      const auto at = [&](std::size_t ch) -> T { return head.plane(n, ch)[a.cell]; };
      const auto grad_at = [&](std::size_t ch) -> T& { return r.grad.plane(n, ch)[a.cell]; };
      for (std::size_t k = 0; k < K; ++k) {
        const double z = at(kFirstClassChannel + k), t = static_cast<int>(k) == targets[n].classes[a.gt] ? 1.0 : 0.0;
        cls += bce_with_logit(z, t);
        grad_at(kFirstClassChannel + k) = static_cast<T>(kcls * (sigmoid(z) - t));
      }
      const double sx = sigmoid(static_cast<double>(at(0))), sy = sigmoid(static_cast<double>(at(1)));
      const double tw = at(2), th = at(3);
      const double lw = std::clamp(tw, -kMaxLogSize, kMaxLogSize), lh = std::clamp(th, -kMaxLogSize, kMaxLogSize);
      const BBox pred = decode_box({sx, sy, lw, lh}, gx, gy, stride);
      const BBox& gt = targets[n].boxes[a.gt];
      const BoxLoss bl = cfg.box_loss == BoxLossKind::nwd ? nwd_loss(pred, gt, nwd_cfg) : iou_loss(pred, gt);
      r.parts.degenerate_box = r.parts.degenerate_box || bl.degenerate;
      box += bl.loss;
      grad_at(0) = static_cast<T>(kbox * bl.grad[0] * stride * sx * (1 - sx));
      grad_at(1) = static_cast<T>(kbox * bl.grad[1] * stride * sy * (1 - sy));
      grad_at(2) = static_cast<T>(tw == lw ? kbox * bl.grad[2] * pred.w : 0.0);
      grad_at(3) = static_cast<T>(th == lh ? kbox * bl.grad[3] * pred.h : 0.0);
    }
  }
  r.parts.obj = obj / norm;
  r.parts.cls = cls / norm;
  r.parts.box = box / norm;
  r.parts.total = cfg.obj_weight * r.parts.obj + cfg.cls_weight * r.parts.cls + cfg.box_weight * r.parts.box;
  return r;
}

/// Head values that decode exactly to the given targets: the inverse of the
/// decoding used by compute_loss on every assigned cell.
template <typename T>
void write_perfect_head(Tensor<T>& head, std::size_t n, const ImageTargets& t, const DetectorConfig& cfg, double confidence = 12) {
  const int G = cfg.grid();
  const double stride = DetectorConfig::kStride;
  for (const auto& a : assign_cells(t, G, stride)) {
    const int gx = static_cast<int>(a.cell % G), gy = static_cast<int>(a.cell / G);
    const BoxCode c = encode_box(t.boxes[a.gt], gx, gy, stride);
    head.plane(n, 0)[a.cell] = static_cast<T>(logit(c.ox));
    head.plane(n, 1)[a.cell] = static_cast<T>(logit(c.oy));
    head.plane(n, 2)[a.cell] = static_cast<T>(c.lw);
    head.plane(n, 3)[a.cell] = static_cast<T>(c.lh);
    head.plane(n, kObjChannel)[a.cell] = static_cast<T>(confidence);
    for (int k = 0; k < cfg.num_classes; ++k)
      head.plane(n, kFirstClassChannel + k)[a.cell] = static_cast<T>(k == t.classes[a.gt] ? confidence : -confidence);
  }
}

/// The total loss of a fixed target set as a one-element block, for grad_check.
inline Differentiable<double> detector_loss_differentiable(Detector<double>& m, const std::vector<ImageTargets>& targets) {
  Differentiable<double> d;
  d.forward = [&m, targets](const Tensor<double>& x) {
    const double total = compute_loss(detector_forward(m, x), targets, m.cfg).parts.total;
    return Tensor<double>(Dims{1}, total);
  };
  d.backward = [&m, targets](const Tensor<double>& x, const Tensor<double>& g) {
    DetectorCache<double> cache;
    const Tensor<double> head = detector_forward(m, x, &cache);
    LossResult<double> loss = compute_loss(head, targets, m.cfg);
    for (auto& v : loss.grad.values()) v *= g[0];
    return detector_backward(m, cache, loss.grad);
  };
  d.params = model_slots(m);
  return d;
}

// ---------------------------------------------------------------------------
// Optimizer.

template <typename T>
struct AdamState {
  std::int64_t step = 0;
  std::vector<Tensor<T>> m, v;  // one pair per parameter slot, allocated on first step
};

template <typename T>
void adam_step(const std::vector<ParamSlot<T>>& slots, AdamState<T>& st, const DetectorConfig& cfg) {
  if (st.m.empty()) {
    for (const auto& s : slots) {
      st.m.emplace_back(s.value->dims());
      st.v.emplace_back(s.value->dims());
    }
  }
  if (st.m.size() != slots.size()) throw DimensionError("adam: optimizer state does not match the model");
  ++st.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1 - std::pow(b1, static_cast<double>(st.step));
  const double c2 = 1 - std::pow(b2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < slots.size(); ++k) {
    Tensor<T>& p = *slots[k].value;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto m = st.m[k].values();
    auto v = st.v[k].values();
    auto pv = p.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<T>(b1 * m[i] + (1 - b1) * gi);
      v[i] = static_cast<T>(b2 * v[i] + (1 - b2) * gi * gi);
      const double mh = m[i] / c1, vh = v[i] / c2;
      pv[i] = static_cast<T>(pv[i] - cfg.lr * mh / (std::sqrt(vh) + cfg.adam_eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Data.

struct DetSample {
  std::string id;
  Tensor<float> image;  // (1, 1, S, S), normalized
  ImageTargets targets;
};

inline Tensor<float> normalize_image(const GrayImage& img) {
  Tensor<float> t(1, 1, static_cast<std::size_t>(img.height), static_cast<std::size_t>(img.width));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = (static_cast<float>(img.pixels[i]) - 127.5f) / 64.0f;
  return t;
}

inline ImageTargets targets_from_annotations(const std::vector<Annotation>& anns, int image_size) {
  ImageTargets t;
  const double s = image_size;
  for (const auto& a : anns) {
    t.boxes.push_back({a.cx * s, a.cy * s, a.w * s, a.h * s});
    t.classes.push_back(a.class_id);
  }
  return t;
}

/// Loads the images listed in `<split>.txt` under a generated dataset.
inline std::vector<DetSample> load_split(const std::filesystem::path& dir, const std::string& split, int input_size,
                                         int num_classes) {
  std::vector<DetSample> out;
  for (const auto& rel : read_manifest(dir / (split + ".txt"))) {
    DetSample s;
    s.id = std::filesystem::path(rel).stem().string();
    const GrayImage img = read_pgm(dir / rel);
    if (img.width != input_size || img.height != input_size)
      throw std::runtime_error(rel + ": image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                               ", detector expects " + std::to_string(input_size));
    s.image = normalize_image(img);
    const auto anns = read_annotations(label_path_for(dir, rel));
    for (const auto& a : anns)
      if (a.class_id >= num_classes)
        throw std::runtime_error(rel + ": class id " + std::to_string(a.class_id) + " outside the detector's " +
                                 std::to_string(num_classes) + " classes");
    s.targets = targets_from_annotations(anns, input_size);
    out.push_back(std::move(s));
  }
  return out;
}

/// In-memory samples rendered straight from the generator, no files involved.
inline std::vector<DetSample> synth_samples(const SynthConfig& sc, std::size_t first, std::size_t count) {
  std::vector<DetSample> out;
  for (std::size_t i = first; i < first + count; ++i) {
    const SynthSample s = render_sample(sc, i);
    out.push_back({sample_name(i), normalize_image(s.image), targets_from_annotations(s.annotations, sc.image_size)});
  }
  return out;
}

inline Tensor<float> stack_images(const std::vector<DetSample>& samples, const std::vector<std::size_t>& idx) {
  const std::size_t S = samples.at(idx.at(0)).image.h();
  Tensor<float> x(idx.size(), 1, S, S);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& img = samples[idx[b]].image;
    std::copy(img.data(), img.data() + S * S, x.plane(b, 0));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Inference.

/// Class-wise greedy NMS: within a class, a box is dropped when its IoU
/// with an already kept, higher-scoring box exceeds `iou_threshold`.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<double> scores(dets.size());
  for (std::size_t i = 0; i < dets.size(); ++i) scores[i] = dets[i].score;
  std::vector<Detection> kept;
  for (auto i : score_order(scores)) {
    const auto& d = dets[i];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.image_id == d.image_id && k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

/// Decodes image `n` of a head map. Each cell votes for its best class with
/// score sigmoid(obj) * sigmoid(class logit).
template <typename T>
std::vector<Detection> decode_head(const Tensor<T>& head, std::size_t n, const std::string& image_id,
                                   const DetectorConfig& cfg) {
  const std::size_t G = static_cast<std::size_t>(cfg.grid());
  const double stride = DetectorConfig::kStride;
  std::vector<Detection> dets;
  for (std::size_t cell = 0; cell < G * G; ++cell) {
    const double po = sigmoid(static_cast<double>(head.plane(n, kObjChannel)[cell]));
    int best = 0;
    double best_z = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < cfg.num_classes; ++k) {
      const double z = head.plane(n, kFirstClassChannel + k)[cell];
      if (z > best_z) best_z = z, best = k;
    }
    const double score = po * sigmoid(best_z);
    if (score < cfg.decode_threshold) continue;
    const BoxCode c{sigmoid(static_cast<double>(head.plane(n, 0)[cell])), sigmoid(static_cast<double>(head.plane(n, 1)[cell])),
                    std::clamp(static_cast<double>(head.plane(n, 2)[cell]), -kMaxLogSize, kMaxLogSize),
                    std::clamp(static_cast<double>(head.plane(n, 3)[cell]), -kMaxLogSize, kMaxLogSize)};
    dets.push_back({image_id, best, decode_box(c, static_cast<int>(cell % G), static_cast<int>(cell / G), stride), score});
  }
  dets = nms(dets, cfg.nms_iou);
  if (dets.size() > static_cast<std::size_t>(cfg.max_detections)) dets.resize(static_cast<std::size_t>(cfg.max_detections));
  return dets;
}

/// Eval-mode predictions for every sample, in sample order.
inline std::vector<Detection> predict(const Detector<float>& model, const std::vector<DetSample>& samples) {
  Detector<float> m = model;
  set_bn_mode(m, BnMode::eval);
  std::vector<Detection> out;
  const std::size_t B = static_cast<std::size_t>(m.cfg.batch_size);
  for (std::size_t start = 0; start < samples.size(); start += B) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(samples.size(), start + B); ++i) idx.push_back(i);
    const Tensor<float> head = detector_forward(m, stack_images(samples, idx));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      auto d = decode_head(head, b, samples[idx[b]].id, m.cfg);
      out.insert(out.end(), d.begin(), d.end());
    }
  }
  return out;
}

inline std::vector<GroundTruth> ground_truths(const std::vector<DetSample>& samples) {
  std::vector<GroundTruth> gts;
  for (const auto& s : samples)
    for (std::size_t i = 0; i < s.targets.boxes.size(); ++i) gts.push_back({s.id, s.targets.classes[i], s.targets.boxes[i]});
  return gts;
}

inline EvalReport evaluate(const Detector<float>& model, const std::vector<DetSample>& samples,
                           std::vector<Detection>* predictions = nullptr) {
  if (samples.empty()) return map_report({}, {}, model.cfg.num_classes, {model.cfg.score_threshold});
  const auto preds = predict(model, samples);
  if (predictions) *predictions = preds;
  return map_report(preds, ground_truths(samples), model.cfg.num_classes, {model.cfg.score_threshold});
}

// ---------------------------------------------------------------------------
// Checkpoints.
//
// File: "SMEC", u32 version, u32 section count, then per section a u32 name
// length, the name, a u64 payload length and the payload. Tensor sections
// hold a u32 count followed by (u32 name length, name, tensor snapshot)
// records; "config" and "history" hold UTF-8 text and "seed" a u64.

inline constexpr char kCheckpointMagic[4] = {'S', 'M', 'E', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct EpochRow {
  int epoch = 0;
  double train_loss = 0, box_loss = 0, obj_loss = 0, cls_loss = 0, val_map50 = 0;
};

inline void write_metrics_csv(std::ostream& os, const std::vector<EpochRow>& rows) {
  os << "epoch,train_loss,box_loss,obj_loss,cls_loss,val_mAP50\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << fmt_real(r.train_loss) << ',' << fmt_real(r.box_loss) << ',' << fmt_real(r.obj_loss) << ','
       << fmt_real(r.cls_loss) << ',' << fmt_real(r.val_map50) << '\n';
}

inline std::vector<EpochRow> parse_metrics_csv(const std::string& text) {
  std::vector<EpochRow> rows;
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    EpochRow r;
    if (!(ls >> r.epoch >> r.train_loss >> r.box_loss >> r.obj_loss >> r.cls_loss >> r.val_map50))
      throw std::runtime_error("checkpoint: malformed history row '" + line + "'");
    rows.push_back(r);
  }
  return rows;
}

struct Checkpoint {
  Detector<float> model;
  AdamState<float> optimizer;
  std::vector<EpochRow> history;
};

namespace detail {

inline std::string section_of(const std::string& slot_name) {
  const auto dot = slot_name.find('.');
  const std::string head = slot_name.substr(0, dot);
  if (head.rfind("stem", 0) == 0) return "stem";
  return head;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is) {
  const auto n = get_le<std::uint32_t>(is);
  if (n > (1u << 30)) throw std::runtime_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

// Named tensors of one section: parameters plus batch-norm running statistics.
inline std::vector<std::pair<std::string, Tensor<float>*>> section_tensors(Detector<float>& m, const std::string& section) {
  std::vector<std::pair<std::string, Tensor<float>*>> out;
  for (auto& s : model_slots(m))
    if (section_of(s.name) == section) out.push_back({s.name, s.value});
  for (auto& [name, bn] : model_batchnorms(m))
    if (section_of(name) == section) {
      out.push_back({name + ".running_mean", &bn->running_mean});
      out.push_back({name + ".running_var", &bn->running_var});
    }
  return out;
}

}  // namespace detail

inline const std::vector<std::string>& checkpoint_model_sections() {
  static const std::vector<std::string> names{"stem", "deep", "neck", "head"};
  return names;
}

/// Serialized payload of every section, in file order.
inline std::vector<std::pair<std::string, std::string>> checkpoint_sections(const Checkpoint& ck) {
  Detector<float> m = ck.model;
  std::vector<std::pair<std::string, std::string>> out;
  out.push_back({"config", m.cfg.echo_text()});
  {
    std::ostringstream os;
    detail::put_le<std::uint64_t>(os, m.cfg.seed);
    out.push_back({"seed", os.str()});
  }
  for (const auto& sec : checkpoint_model_sections()) {
    std::ostringstream os(std::ios::binary);
    const auto tensors = detail::section_tensors(m, sec);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      detail::put_string(os, name);
      write_snapshot(os, *t);
    }
    out.push_back({sec, os.str()});
  }
  {
    std::ostringstream os(std::ios::binary);
    detail::put_le<std::uint64_t>(os, static_cast<std::uint64_t>(ck.optimizer.step));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ck.optimizer.m.size()));
    for (std::size_t k = 0; k < ck.optimizer.m.size(); ++k) {
      write_snapshot(os, ck.optimizer.m[k]);
      write_snapshot(os, ck.optimizer.v[k]);
    }
    out.push_back({"optimizer", os.str()});
  }
  {
    std::ostringstream os;
    write_metrics_csv(os, ck.history);
    out.push_back({"history", os.str()});
  }
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  const auto sections = checkpoint_sections(ck);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(sections.size()));
  for (const auto& [name, payload] : sections) {
    detail::put_string(os, name);
    detail::put_le<std::uint64_t>(os, payload.size());
    os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || !std::equal(magic, magic + 4, kCheckpointMagic)) throw std::runtime_error(path.string() + ": not a checkpoint");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(is);
  std::map<std::string, std::string> sections;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = detail::get_string(is);
    const auto len = detail::get_le<std::uint64_t>(is);
    if (len > (1ull << 34)) throw std::runtime_error(path.string() + ": implausible section length");
    std::string payload(len, '\0');
    is.read(payload.data(), static_cast<std::streamsize>(len));
    if (!is) throw std::runtime_error(path.string() + ": truncated section " + name);
    sections[name] = std::move(payload);
  }
  auto need = [&](const std::string& name) -> const std::string& {
    auto it = sections.find(name);
    if (it == sections.end()) throw std::runtime_error(path.string() + ": missing section " + name);
    return it->second;
  };
  Checkpoint ck;
  const DetectorConfig cfg = DetectorConfig::from_text(need("config"), path.string() + "#config");
  ck.model = build_model<float>(cfg);
  for (const auto& sec : checkpoint_model_sections()) {
    std::istringstream ss(need(sec), std::ios::binary);
    auto tensors = detail::section_tensors(ck.model, sec);
    const auto n = detail::get_le<std::uint32_t>(ss);
    if (n != tensors.size()) throw std::runtime_error(path.string() + ": section " + sec + " does not match the config");
    for (auto& [name, t] : tensors) {
      const std::string stored = detail::get_string(ss);
      if (stored != name) throw std::runtime_error(path.string() + ": expected tensor " + name + ", found " + stored);
      Tensor<float> v = read_snapshot<float>(ss);
      if (v.dims() != t->dims()) throw std::runtime_error(path.string() + ": shape mismatch for " + name);
      *t = std::move(v);
    }
  }
  {
    std::istringstream ss(need("optimizer"), std::ios::binary);
    ck.optimizer.step = static_cast<std::int64_t>(detail::get_le<std::uint64_t>(ss));
    const auto n = detail::get_le<std::uint32_t>(ss);
    for (std::uint32_t k = 0; k < n; ++k) {
      ck.optimizer.m.push_back(read_snapshot<float>(ss));
      ck.optimizer.v.push_back(read_snapshot<float>(ss));
    }
  }
  ck.history = parse_metrics_csv(need("history"));
  return ck;
}

// ---------------------------------------------------------------------------
// Training.

struct TrainResult {
  Checkpoint final_state;
  Checkpoint best_state;
  int best_epoch = 0;
  double best_val_map50 = -1;
  bool stopped_early = false;
};

struct TrainOptions {
  std::ostream* log = nullptr;
  /// Where a non-finite batch is described before aborting; empty to skip.
  std::filesystem::path dump_dir;
};

/// Trains from scratch. Batches follow a per-epoch shuffle drawn from the
/// config seed; BN runs in train mode and validation in eval mode.
inline TrainResult train_detector(const DetectorConfig& cfg, const std::vector<DetSample>& train_set,
                                  const std::vector<DetSample>& val_set, const TrainOptions& opts = {}) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training split");
  TrainResult res;
  Detector<float> model = build_model<float>(cfg);
  AdamState<float> opt;
  std::vector<EpochRow> history;
  const auto slots = model_slots(model);
  int since_best = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(cfg.seed, "train.shuffle." + std::to_string(epoch));
    rng.shuffle(order.begin(), order.end());
    EpochRow row;
    row.epoch = epoch;
    std::size_t batches = 0;
    set_bn_mode(model, BnMode::train);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + cfg.batch_size)));
      // Batch norm needs more than one value per channel at the deepest stage.
      if (idx.size() < 2 && order.size() >= 2) continue;
      const Tensor<float> x = stack_images(train_set, idx);
      std::vector<ImageTargets> targets;
      for (auto i : idx) targets.push_back(train_set[i].targets);
      auto fail = [&](const std::string& reason) {
        std::ostringstream msg;
        msg << "train: " << reason << " at epoch " << epoch << " batch " << batches << "; images:";
        for (auto i : idx) msg << ' ' << train_set[i].id;
        if (!opts.dump_dir.empty()) {
          std::ofstream dump(opts.dump_dir / "nonfinite_batch.txt");
          dump << msg.str() << '\n';
        }
        throw NumericError(msg.str());
      };
      DetectorCache<float> cache;
      std::optional<LossResult<float>> result;
      try {
        const Tensor<float> head = detector_forward(model, x, &cache);
        result = compute_loss(head, targets, cfg);
      } catch (const NumericError& e) {
        fail(e.what());
      }
      const LossResult<float>& loss = *result;
      if (!std::isfinite(loss.parts.total)) {
        std::ostringstream reason;
        reason << "non-finite loss (box " << loss.parts.box << ", obj " << loss.parts.obj << ", cls " << loss.parts.cls << ")";
        fail(reason.str());
      }
      for (const auto& s : slots) s.value->ensure_grad().zero_grad();
      detector_backward(model, cache, loss.grad);
      adam_step(slots, opt, cfg);
      update_running_stats(model, cache);
      row.train_loss += loss.parts.total;
      row.box_loss += loss.parts.box;
      row.obj_loss += loss.parts.obj;
      row.cls_loss += loss.parts.cls;
      ++batches;
    }
    const double nb = static_cast<double>(std::max<std::size_t>(batches, 1));
    row.train_loss /= nb;
    row.box_loss /= nb;
    row.obj_loss /= nb;
    row.cls_loss /= nb;
    row.val_map50 = val_set.empty() ? 0.0 : evaluate(model, val_set).map50;
    history.push_back(row);
    if (opts.log)
      *opts.log << "epoch " << epoch << " loss " << fmt_real(row.train_loss) << " (box " << fmt_real(row.box_loss) << ", obj "
                << fmt_real(row.obj_loss) << ", cls " << fmt_real(row.cls_loss) << ") val mAP50 " << fmt_real(row.val_map50)
                << std::endl;
    if (row.val_map50 > res.best_val_map50) {
      res.best_val_map50 = row.val_map50;
      res.best_epoch = epoch;
      res.best_state = {model, opt, history};
      since_best = 0;
    } else if (!val_set.empty() && ++since_best >= cfg.patience) {
      res.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  for (const auto& s : slots) s.value->drop_grad();
  res.final_state = {model, opt, history};
  for (auto* ck : {&res.final_state, &res.best_state})
    for (auto& s : model_slots(ck->model)) s.value->drop_grad();
  return res;
}

// ---------------------------------------------------------------------------
// Ablation ladder.

struct AblationRow {
  std::string variant;
  DetectorConfig cfg;
  EvalReport report;
  std::uint64_t macs = 0;
  std::vector<EpochRow> history;
  int best_epoch = 0;
};

/// The four ladder configs, each adding one toggle to the previous.
inline std::vector<std::pair<std::string, DetectorConfig>> ablation_variants(const DetectorConfig& base) {
  DetectorConfig c = base;
  c.deep_block = DeepBlock::plain;
  c.upsampler = Upsampler::plain;
  c.box_loss = BoxLossKind::iou;
  std::vector<std::pair<std::string, DetectorConfig>> out{{"baseline", c}};
  c.box_loss = BoxLossKind::nwd;
  out.push_back({"+nwd", c});
  c.upsampler = Upsampler::eucb;
  out.push_back({"+nwd+eucb", c});
  c.deep_block = DeepBlock::msfa;
  out.push_back({"+nwd+eucb+msfa", c});
  return out;
}

inline std::vector<AblationRow> run_ablation(const DetectorConfig& base, const std::vector<DetSample>& train_set,
                                             const std::vector<DetSample>& val_set, const std::vector<DetSample>& test_set,
                                             std::ostream* log = nullptr) {
  std::vector<AblationRow> rows;
  for (const auto& [name, cfg] : ablation_variants(base)) {
    if (log) *log << "ablation: training " << name << std::endl;
    TrainOptions opts;
    opts.log = log;
    const TrainResult tr = train_detector(cfg, train_set, val_set, opts);
    const Detector<float>& chosen = val_set.empty() ? tr.final_state.model : tr.best_state.model;
    rows.push_back({name, cfg, evaluate(chosen, test_set), model_macs(cfg), tr.final_state.history, tr.best_epoch});
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "variant,deep_block,upsampler,box_loss,precision,recall,map50,map50_95,macs\n";
  for (const auto& r : rows)
    os << r.variant << ',' << to_string(r.cfg.deep_block) << ',' << to_string(r.cfg.upsampler) << ','
       << to_string(r.cfg.box_loss) << ',' << fmt_real(r.report.precision) << ',' << fmt_real(r.report.recall) << ','
       << fmt_real(r.report.map50) << ',' << fmt_real(r.report.map50_95) << ',' << r.macs << '\n';
}

}  // namespace sme
