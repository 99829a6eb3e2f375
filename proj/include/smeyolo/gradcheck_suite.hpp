#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "detector.hpp"

namespace sme {

inline constexpr double kPureOpTolerance = 1e-6;
inline constexpr double kBnCoupledTolerance = 1e-5;

struct GradSuiteRow {
  std::string block;
  bool bn_coupled = false;
  int instances = 0;
  double tolerance = 0;
  double max_rel_err = 0;
  std::string worst;  // instance and entry of the worst probe

  bool pass() const { return max_rel_err <= tolerance; }
};

namespace detail {

inline ConvParams<double> suite_conv(std::size_t in_c, std::size_t out_c, std::size_t kh, std::size_t kw,
                                     std::size_t groups, std::uint64_t seed) {
  ConvParams<double> p = groups == 1 ? ConvParams<double>::dense(in_c, out_c, kh, kw, {kh / 2, kw / 2})
                                     : ConvParams<double>::depthwise_of(in_c, kh, kw, {kh / 2, kw / 2});
  init_conv(p, seed, "suite.conv");
  return p;
}

inline std::function<GradCheckReport(std::uint64_t)> scalar_box_case(bool use_nwd) {
  return [use_nwd](std::uint64_t s) {
    Rng rng(s, use_nwd ? "suite.nwd" : "suite.iou");
    const BBox g{rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(2, 30), rng.uniform(2, 30)};
    const BBox p{g.cx + rng.uniform(-0.4, 0.4) * g.w, g.cy + rng.uniform(-0.4, 0.4) * g.h, g.w * rng.uniform(0.6, 1.4),
                 g.h * rng.uniform(0.6, 1.4)};
    const NwdConfig cfg{12.8, s % 2 ? NwdMode::paper_linear : NwdMode::canonical_exp};
    auto eval = [&](const std::vector<double>& v) {
      const BBox b{v[0], v[1], v[2], v[3]};
      return use_nwd ? nwd_loss(b, g, cfg) : iou_loss(b, g);
    };
    GradCheckOptions opts;
    opts.step = 1e-6;
    return grad_check_scalar([&](const std::vector<double>& v) { return eval(v).loss; },
                             [&](const std::vector<double>& v) {
                               const auto r = eval(v);
                               return std::vector<double>(r.grad.begin(), r.grad.end());
                             },
                             {p.cx, p.cy, p.w, p.h}, opts);
  };
}

}  // namespace detail

/// Finite-difference checks at 64-bit for every differentiable block, each
/// over `instances` seeded instances. Pure ops must reach 1e-6 relative
/// error; blocks with train-mode batch norm 1e-5.
inline std::vector<GradSuiteRow> run_gradcheck_suite(int instances = 20, std::uint64_t seed = 0,
                                                     std::ostream* log = nullptr) {
  using Case = std::function<GradCheckReport(std::uint64_t)>;
  struct Entry {
    std::string name;
    bool bn;
    Case run;
  };
  std::vector<Entry> entries;

  entries.push_back({"conv2d", false, [](std::uint64_t s) {
                       const std::size_t groups = s % 2 ? 3 : 1;
                       const std::size_t kh = 1 + 2 * (s % 3), kw = 1 + 2 * ((s + 1) % 4);
                       auto p = detail::suite_conv(3, 3, kh, kw, groups, s);
                       const std::size_t stride = s % 5 == 0 ? 2 : 1;
                       Differentiable<double> d;
                       d.forward = [&p, stride](const Tensor<double>& x) {
                         return stride == 1 ? conv2d(x, p) : conv2d_stride2(x, p);
                       };
                       d.backward = [&p, stride](const Tensor<double>& x, const Tensor<double>& g) {
                         return conv2d_backward_into(x, p, g, stride);
                       };
                       d.params = {{"kernel", &p.kernel}, {"bias", &*p.bias}};
                       return grad_check(d, random_tensor<double>({2, 3, 7, 6}, s, "suite.conv.x"));
                     }});
  for (auto mode : {UpsampleMode::nearest, UpsampleMode::bilinear})
    entries.push_back({std::string("upsample2x_") + to_string(mode), false, [mode](std::uint64_t s) {
                         Differentiable<double> d;
                         d.forward = [mode](const Tensor<double>& x) { return upsample2x(x, mode); };
                         d.backward = [mode](const Tensor<double>& x, const Tensor<double>& g) {
                           return upsample2x_backward(g, x.dims(), mode);
                         };
                         return grad_check(d, random_tensor<double>({1, 2, 3 + s % 3, 4 + s % 2}, s, "suite.up.x"));
                       }});
  for (auto mode : {BnMode::eval, BnMode::train})
    entries.push_back({mode == BnMode::train ? "batchnorm_train" : "batchnorm_eval", mode == BnMode::train,
                       [mode](std::uint64_t s) {
                         auto st = BatchNormState<double>::identity(3);
                         st.mode = mode;
                         st.gamma = random_tensor<double>({3}, s, "suite.bn.gamma", 0.5, 1.5);
                         st.beta = random_tensor<double>({3}, s, "suite.bn.beta");
                         st.running_mean = random_tensor<double>({3}, s, "suite.bn.mean");
                         st.running_var = random_tensor<double>({3}, s, "suite.bn.var", 0.5, 2.0);
                         Differentiable<double> d;
                         d.forward = [&st](const Tensor<double>& x) { return batchnorm_forward(x, st); };
                         d.backward = [&st](const Tensor<double>& x, const Tensor<double>& g) {
                           BatchNormCache<double> c;
                           batchnorm_forward(x, st, &c);
                           auto r = batchnorm_backward(g, st, c);
                           accumulate_grad(st.gamma, r.grad_gamma);
                           accumulate_grad(st.beta, r.grad_beta);
                           return r.grad_x;
                         };
                         d.params = {{"gamma", &st.gamma}, {"beta", &st.beta}};
                         return grad_check(d, random_tensor<double>({2, 3, 4, 3}, s, "suite.bn.x", -2, 2));
                       }});
  for (auto kind : {Activation::relu, Activation::sigmoid})
    entries.push_back({kind == Activation::relu ? "relu" : "sigmoid", false, [kind](std::uint64_t s) {
                         Differentiable<double> d;
                         d.forward = [kind](const Tensor<double>& x) { return activation(x, kind); };
                         d.backward = [kind](const Tensor<double>& x, const Tensor<double>& g) {
                           return activation_backward(x, activation(x, kind), g, kind);
                         };
                         return grad_check(d, random_tensor<double>({1, 2, 4, 4}, s, "suite.act.x", -3, 3));
                       }});
  for (auto kind : {Eltwise::mul, Eltwise::add})
    entries.push_back({kind == Eltwise::mul ? "eltwise_mul" : "eltwise_add", false, [kind](std::uint64_t s) {
                         const auto b = random_tensor<double>({1, 2, 4, 4}, s, "suite.elt.b");
                         Differentiable<double> d;
                         d.forward = [&b, kind](const Tensor<double>& a) { return eltwise(a, b, kind); };
                         d.backward = [&b, kind](const Tensor<double>& a, const Tensor<double>& g) {
                           return eltwise_backward(a, b, g, kind).first;
                         };
                         return grad_check(d, random_tensor<double>({1, 2, 4, 4}, s, "suite.elt.a"));
                       }});
  entries.push_back({"concat_split", false, [](std::uint64_t s) {
                       // concat(x, 2x) followed by a fixed projection exercises split_channels as the backward.
                       Differentiable<double> d;
                       d.forward = [](const Tensor<double>& x) {
                         Tensor<double> x2 = x;
                         for (auto& v : x2.values()) v *= 2;
                         return concat_channels<double>({std::cref(x), std::cref(x2)});
                       };
                       d.backward = [](const Tensor<double>& x, const Tensor<double>& g) {
                         auto parts = split_channels(g, {x.c(), x.c()});
                         for (std::size_t i = 0; i < parts[0].size(); ++i) parts[0][i] += 2 * parts[1][i];
                         return parts[0];
                       };
                       return grad_check(d, random_tensor<double>({2, 2, 3, 3}, s, "suite.cat.x"));
                     }});
  entries.push_back({"msfa", false, [](std::uint64_t s) {
                       auto p = make_msfa<double>(8, 100 + s);
                       return grad_check(msfa_differentiable(p), random_tensor<double>({1, 8, 16, 16}, 200 + s, "x"));
                     }});
  entries.push_back({"eucb", true, [](std::uint64_t s) {
                       auto p = make_eucb<double>(6, 4, 300 + s, s % 2 ? UpsampleMode::bilinear : UpsampleMode::nearest);
                       p.bn.gamma = random_tensor<double>({6}, s, "g", 0.5, 1.5);
                       p.bn.beta = random_tensor<double>({6}, s, "b", -0.5, 0.5);
                       return grad_check(eucb_differentiable(p), random_tensor<double>({1, 6, 8, 8}, 400 + s, "x"));
                     }});
  entries.push_back({"nwd_loss", false, detail::scalar_box_case(true)});
  entries.push_back({"iou_loss", false, detail::scalar_box_case(false)});
  entries.push_back({"compute_loss", true, [](std::uint64_t s) {
                       DetectorConfig cfg;
                       cfg.input_size = 32;
                       cfg.num_classes = 2;
                       cfg.width1 = 2;
                       cfg.width2 = 4;
                       cfg.width3 = 4;
                       cfg.fuse_width = 4;
                       cfg.seed = s;
                       cfg.box_loss = s % 2 ? BoxLossKind::iou : BoxLossKind::nwd;
                       cfg.deep_block = s % 4 < 2 ? DeepBlock::msfa : DeepBlock::plain;
                       cfg.upsampler = s % 3 ? Upsampler::eucb : Upsampler::plain;
                       auto model = build_model<double>(cfg);
                       Rng rng(s, "suite.loss.targets");
                       ImageTargets t;
                       const int count = 1 + static_cast<int>(rng.uniform_int(0, 3));
                       for (int i = 0; i < count; ++i) {
                         t.boxes.push_back({rng.uniform(3, 29), rng.uniform(3, 29), rng.uniform(2, 8), rng.uniform(2, 8)});
                         t.classes.push_back(static_cast<int>(rng.uniform_int(0, 1)));
                       }
                       auto block = detector_loss_differentiable(model, {t});
                       GradCheckOptions opts;
                       opts.step = 1e-5;
                       return grad_check(block, random_tensor<double>({1, 1, 32, 32}, s, "suite.loss.x"), opts);
                     }});

  std::vector<GradSuiteRow> rows;
  for (const auto& e : entries) {
    GradSuiteRow row{e.name, e.bn, instances, e.bn ? kBnCoupledTolerance : kPureOpTolerance, 0, ""};
    for (int i = 0; i < instances; ++i) {
      const auto rep = e.run(seed * 1000 + static_cast<std::uint64_t>(i));
      if (i == 0 || rep.max_rel_err > row.max_rel_err) {
        row.max_rel_err = rep.max_rel_err;
        row.worst = "instance " + std::to_string(i) + " " + rep.location;
      }
    }
    if (log) *log << e.name << ": max rel err " << row.max_rel_err << (row.pass() ? " ok" : " FAIL") << std::endl;
    rows.push_back(row);
  }
  return rows;
}

inline void write_gradcheck_csv(std::ostream& os, const std::vector<GradSuiteRow>& rows) {
  os << "block,bn_coupled,instances,tolerance,max_rel_err,pass,worst\n";
  for (const auto& r : rows)
    os << r.block << ',' << (r.bn_coupled ? 1 : 0) << ',' << r.instances << ',' << fmt_real(r.tolerance) << ','
       << fmt_real(r.max_rel_err) << ',' << (r.pass() ? 1 : 0) << ',' << r.worst << '\n';
}

}  // namespace sme
