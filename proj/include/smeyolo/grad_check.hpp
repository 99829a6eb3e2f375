#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace sme {

template <typename T>
struct ParamSlot {
  std::string name;
  Tensor<T>* value = nullptr;
};

/// A block with a hand-written backward pass.
///
/// `forward` must be pure: calling it twice on the same input and parameter
/// values gives the same output. `backward(x, grad_out)` returns the input
/// gradient and adds parameter gradients into each slot's gradient.
template <typename T>
struct Differentiable {
  std::function<Tensor<T>(const Tensor<T>&)> forward;
  std::function<Tensor<T>(const Tensor<T>&, const Tensor<T>&)> backward;
  std::vector<ParamSlot<T>> params;
};

struct GradCheckOptions {
  double step = 1e-4;
  /// Tensors above this many entries are probed on a fixed-seed random subset.
  std::size_t full_probe_limit = 10000;
  std::size_t subset_size = 2000;
  /// Denominator floor for the relative error, so exact zeros on both sides
  /// do not divide by zero.
  double rel_floor = 1e-6;
  std::uint64_t seed = 7;
  /// Probes worse than this are retried with a five-point stencil at
  /// step * {10, 1} and central differences at step * {0.1, 0.01}, keeping
  /// the closest match. The wide stencils escape roundoff on tiny gradients;
  /// the narrow ones avoid straddling ReLU kinks. Zero disables the retry.
  double retry_above = 1e-7;
};

struct GradCheckReport {
  double max_rel_err = 0;
  double max_abs_err = 0;
  std::string location;  // entry with the worst relative error
  double analytic_at_worst = 0;
  double numeric_at_worst = 0;
  std::size_t probes = 0;
  /// |a - n| / max(|a|, |n|, floor) over the whole gradient vector; only
  /// filled by grad_check_scalar.
  double vector_rel_err = 0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

inline std::vector<std::size_t> probe_indices(std::size_t n, const GradCheckOptions& o, std::string_view tag) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  if (n > o.full_probe_limit) {
    Rng rng(o.seed, tag);
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(o.subset_size);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

}  // namespace detail

/// Compares the analytic backward of `block` against central differences of
/// the scalar L = sum(r * forward(x)), where r is a fixed-seed random
/// projection. Every input and parameter entry is probed.
inline GradCheckReport grad_check(const Differentiable<double>& block, const Tensor<double>& x,
                                  const GradCheckOptions& opts = {}) {
  Tensor<double> input = x;
  const Tensor<double> y0 = block.forward(input);
  require_finite(y0, "grad_check forward output");
  Tensor<double> proj(y0.dims());
  {
    Rng rng(opts.seed, "grad_check.projection");
    fill_uniform(proj, rng, -1.0, 1.0);
  }
  auto output = [&](const Tensor<double>& in) {
    Tensor<double> y = block.forward(in);
    require_finite(y, "grad_check probe output");
    return y;
  };

  for (const auto& p : block.params) p.value->ensure_grad().zero_grad();
  const Tensor<double> grad_x = block.backward(input, proj);
  std::vector<std::vector<double>> param_grads;
  for (const auto& p : block.params) {
    const auto g = p.value->grad();
    param_grads.emplace_back(g.begin(), g.end());
  }

  GradCheckReport rep;
  // Outputs are differenced before projecting, so entries the probe does not
  // reach cancel exactly instead of adding rounding noise to L.
  // L(x + h) - L(x - h) for one entry.
  auto delta = [&](double& slot, double h) {
    const double saved = slot;
    slot = saved + h;
    const Tensor<double> yp = output(input);
    slot = saved - h;
    const Tensor<double> ym = output(input);
    slot = saved;
    long double s = 0;
    for (std::size_t i = 0; i < yp.size(); ++i) s += static_cast<long double>(proj[i]) * (yp[i] - ym[i]);
    return s;
  };
  auto probe = [&](double& slot, double analytic, const std::string& where) {
    const double h = opts.step;
    double numeric = static_cast<double>(delta(slot, h) / (2 * h));
    double rel = relative_error(analytic, numeric, opts.rel_floor);
    auto consider = [&](double n2) {
      const double r2 = relative_error(analytic, n2, opts.rel_floor);
      if (r2 < rel) rel = r2, numeric = n2;
    };
    if (opts.retry_above > 0 && rel > opts.retry_above) {
      for (double m : {10.0, 1.0}) {
        const long double d1 = delta(slot, h * m), d2 = delta(slot, 2 * h * m);
        consider(static_cast<double>((8 * d1 - d2) / (12 * h * m)));
      }
      for (double m : {0.1, 0.01}) consider(static_cast<double>(delta(slot, h * m) / (2 * h * m)));
    }
    if (!std::isfinite(numeric)) throw NumericError("grad_check: non-finite difference at " + where);
    rep.max_abs_err = std::max(rep.max_abs_err, std::abs(analytic - numeric));
    if (rel >= rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.location = where;
      rep.analytic_at_worst = analytic;
      rep.numeric_at_worst = numeric;
    }
    ++rep.probes;
  };

  for (auto i : detail::probe_indices(input.size(), opts, "grad_check.input"))
    probe(input[i], grad_x[i], "input[" + std::to_string(i) + "]");
  for (std::size_t k = 0; k < block.params.size(); ++k) {
    auto& t = *block.params[k].value;
    for (auto i : detail::probe_indices(t.size(), opts, block.params[k].name))
      probe(t[i], param_grads[k][i], block.params[k].name + "[" + std::to_string(i) + "]");
  }
  return rep;
}

/// Central-difference check for a scalar function of a small vector, with the
/// analytic gradient supplied by `grad`.
template <typename F, typename G>
GradCheckReport grad_check_scalar(F&& f, G&& grad, std::vector<double> point, const GradCheckOptions& opts = {}) {
  const std::vector<double> analytic = grad(point);
  GradCheckReport rep;
  double diff_sq = 0, a_sq = 0, n_sq = 0;
  auto delta = [&](std::size_t i, double h) {
    const double saved = point[i];
    point[i] = saved + h;
    const double lp = f(point);
    point[i] = saved - h;
    const double lm = f(point);
    point[i] = saved;
    return lp - lm;
  };
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double h = opts.step;
    double numeric = delta(i, h) / (2 * h);
    double rel = relative_error(analytic[i], numeric, opts.rel_floor);
    auto consider = [&](double n2) {
      const double r2 = relative_error(analytic[i], n2, opts.rel_floor);
      if (r2 < rel) rel = r2, numeric = n2;
    };
    if (opts.retry_above > 0 && rel > opts.retry_above) {
      for (double m : {10.0, 1.0}) consider((8 * delta(i, h * m) - delta(i, 2 * h * m)) / (12 * h * m));
      for (double m : {0.1, 0.01}) consider(delta(i, h * m) / (2 * h * m));
    }
    if (!std::isfinite(numeric)) throw NumericError("grad_check_scalar: non-finite difference at " + std::to_string(i));
    rep.max_abs_err = std::max(rep.max_abs_err, std::abs(analytic[i] - numeric));
    if (rel >= rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.location = "arg[" + std::to_string(i) + "]";
      rep.analytic_at_worst = analytic[i];
      rep.numeric_at_worst = numeric;
    }
    diff_sq += (analytic[i] - numeric) * (analytic[i] - numeric);
    a_sq += analytic[i] * analytic[i];
    n_sq += numeric * numeric;
    ++rep.probes;
  }
  rep.vector_rel_err = std::sqrt(diff_sq) / std::max({std::sqrt(a_sq), std::sqrt(n_sq), opts.rel_floor});
  return rep;
}

}  // namespace sme
