#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "ops.hpp"
#include "rng.hpp"

namespace sme {

/// Fills a conv's kernel and bias from U(-b, b) with b = 1/sqrt(fan_in),
/// drawing from a stream named after the parameter.
template <typename T>
void init_conv(ConvParams<T>& p, std::uint64_t seed, const std::string& name) {
  const double fan_in = static_cast<double>(p.in_per_group() * p.kernel_h() * p.kernel_w());
  const double bound = 1.0 / std::sqrt(fan_in);
  Rng krng(seed, name + ".kernel");
  fill_uniform(p.kernel, krng, -bound, bound);
  if (p.bias) {
    Rng brng(seed, name + ".bias");
    fill_uniform(*p.bias, brng, -bound, bound);
  }
}

template <typename T>
void append_conv_slots(ConvParams<T>& p, const std::string& name, std::vector<ParamSlot<T>>& out) {
  out.push_back({name + ".kernel", &p.kernel});
  if (p.bias) out.push_back({name + ".bias", &*p.bias});
}

/// Depthwise 1xk followed by depthwise kx1, same padding, no nonlinearity
/// in between.
template <typename T>
struct SeparablePair {
  ConvParams<T> row;  // 1 x k, padding (0, k/2)
  ConvParams<T> col;  // k x 1, padding (k/2, 0)

  std::size_t taps() const { return row.kernel_w(); }

  static SeparablePair make(std::size_t channels, std::size_t k) {
    if (k % 2 == 0) throw DimensionError("separable branch kernel must be odd, got " + std::to_string(k));
    return {ConvParams<T>::depthwise_of(channels, 1, k, {0, k / 2}),
            ConvParams<T>::depthwise_of(channels, k, 1, {k / 2, 0})};
  }
};

/// Multi-scale focused attention parameters.
///
/// `branches` holds the depthwise separable paths in order: the two
/// same-scale 11-tap branches, then the 9-tap auxiliary branch. The mix conv
/// takes the input plus every branch output, so its input width is
/// (branches + 1) * C.
template <typename T>
struct MsfaParams {
  std::size_t channels = 0;
  std::vector<SeparablePair<T>> branches;
  ConvParams<T> mix;

  SeparablePair<T>& branch_a() { return branches.at(0); }
  SeparablePair<T>& branch_b() { return branches.at(1); }
  SeparablePair<T>& branch_aux() { return branches.at(2); }
  const SeparablePair<T>& branch_a() const { return branches.at(0); }
  const SeparablePair<T>& branch_b() const { return branches.at(1); }
  const SeparablePair<T>& branch_aux() const { return branches.at(2); }

  std::vector<std::size_t> kernel_sizes() const {
    std::vector<std::size_t> ks;
    for (const auto& b : branches) ks.push_back(b.taps());
    return ks;
  }

  void validate() const {
    for (const auto& b : branches) {
      for (const auto* p : {&b.row, &b.col}) {
        p->validate();
        if (p->groups != channels || !p->depthwise())
          throw DimensionError("msfa: branch convs must be depthwise over " + std::to_string(channels) + " channels");
      }
    }
    mix.validate();
    if (mix.in_channels() != (branches.size() + 1) * channels || mix.out_channels() != channels)
      throw DimensionError("msfa: mix conv must map " + std::to_string((branches.size() + 1) * channels) + " -> " +
                           std::to_string(channels) + " channels");
  }

  std::vector<ParamSlot<T>> slots(const std::string& prefix = "msfa") {
    std::vector<ParamSlot<T>> out;
    for (std::size_t i = 0; i < branches.size(); ++i) {
      append_conv_slots(branches[i].row, prefix + ".branch" + std::to_string(i) + ".row", out);
      append_conv_slots(branches[i].col, prefix + ".branch" + std::to_string(i) + ".col", out);
    }
    append_conv_slots(mix, prefix + ".mix", out);
    return out;
  }
};

inline const std::vector<std::size_t> kDefaultMsfaKernels{11, 11, 9};

/// Builds MSFA parameters. Every branch draws from its own stream, so the two
/// same-scale branches start from independent values.
template <typename T>
MsfaParams<T> make_msfa(std::size_t channels, std::uint64_t seed, const std::vector<std::size_t>& kernels = kDefaultMsfaKernels,
                        const std::string& prefix = "msfa") {
  MsfaParams<T> p;
  p.channels = channels;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    auto pair = SeparablePair<T>::make(channels, kernels[i]);
    init_conv(pair.row, seed, prefix + ".branch" + std::to_string(i) + ".row");
    init_conv(pair.col, seed, prefix + ".branch" + std::to_string(i) + ".col");
    p.branches.push_back(std::move(pair));
  }
  p.mix = ConvParams<T>::dense((kernels.size() + 1) * channels, channels, 1, 1, {0, 0});
  init_conv(p.mix, seed, prefix + ".mix");
  return p;
}

template <typename T>
struct MsfaCache {
  Tensor<T> input;
  std::vector<Tensor<T>> mid;          // after the 1xk conv of each branch
  std::vector<Tensor<T>> branch_out;   // after the kx1 conv
  Tensor<T> concat;
  Tensor<T> gate;                      // sigmoid(mixed)
};

/// The mix conv evaluated one input block at a time. Block partials are
/// combined as bias + x + (a + b) + aux + ..., so exchanging the two
/// same-scale branches together with their kernel columns is bit-exact.
template <typename T>
Tensor<T> mix_blocks(const ConvParams<T>& mix, const std::vector<const Tensor<T>*>& blocks, std::size_t channels) {
  std::vector<Tensor<T>> partial;
  for (std::size_t j = 0; j < blocks.size(); ++j) {
    ConvParams<T> slice = ConvParams<T>::dense(channels, mix.out_channels(), 1, 1, {0, 0}, false);
    for (std::size_t oc = 0; oc < mix.out_channels(); ++oc)
      for (std::size_t c = 0; c < channels; ++c) slice.kernel.at(oc, c, 0, 0) = mix.kernel.at(oc, j * channels + c, 0, 0);
    partial.push_back(conv2d(*blocks[j], slice));
  }
  Tensor<T> y = std::move(partial[0]);
  const std::size_t hw = y.h() * y.w();
  for (std::size_t i = 0; i < y.size(); ++i) {
    T v = mix.bias ? (*mix.bias)[(i / hw) % y.c()] + y[i] : y[i];
    std::size_t j = 1;
    if (partial.size() >= 3) {
      v += partial[1][i] + partial[2][i];
      j = 3;
    }
    for (; j < partial.size(); ++j) v += partial[j][i];
    y[i] = v;
  }
  return y;
}

template <typename T>
Tensor<T> apply_branch(const SeparablePair<T>& b, const Tensor<T>& x, Tensor<T>* mid = nullptr) {
  Tensor<T> m = conv2d(x, b.row);
  Tensor<T> out = conv2d(m, b.col);
  if (mid) *mid = std::move(m);
  return out;
}

/// out = x * sigmoid(mix(concat(x, branch_a(x), branch_b(x), branch_aux(x)))).
template <typename T>
Tensor<T> msfa_forward(const Tensor<T>& x, const MsfaParams<T>& p, MsfaCache<T>* cache = nullptr) {
  require_rank4(x, "msfa input");
  p.validate();
  if (x.c() != p.channels)
    throw DimensionError("msfa: input has " + std::to_string(x.c()) + " channels, block expects " +
                         std::to_string(p.channels));
  std::vector<Tensor<T>> mids(p.branches.size()), outs;
  outs.reserve(p.branches.size());
  for (std::size_t i = 0; i < p.branches.size(); ++i) outs.push_back(apply_branch(p.branches[i], x, &mids[i]));
  std::vector<const Tensor<T>*> parts{&x};
  for (const auto& o : outs) parts.push_back(&o);
  Tensor<T> mixed = mix_blocks(p.mix, parts, p.channels);
  Tensor<T> gate = activation(mixed, Activation::sigmoid);
  Tensor<T> y = eltwise(x, gate, Eltwise::mul);
  if (cache) {
    cache->input = x;
    cache->mid = std::move(mids);
    cache->concat = concat_channels(parts);
    cache->branch_out = std::move(outs);
    cache->gate = std::move(gate);
  }
  return y;
}

/// Backward pass; parameter gradients are added into the gradient slots of `p`.
template <typename T>
Tensor<T> msfa_backward(const Tensor<T>& grad_out, MsfaParams<T>& p, const MsfaCache<T>& cache) {
  require_same_shape(grad_out, cache.input, "msfa_backward");
  const Tensor<T>& x = cache.input;
  const Tensor<T>& s = cache.gate;
  Tensor<T> grad_x(x.dims());
  Tensor<T> grad_mixed(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) {
    grad_x[i] = grad_out[i] * s[i];
    grad_mixed[i] = grad_out[i] * x[i] * s[i] * (T(1) - s[i]);
  }
  Tensor<T> grad_cat = conv2d_backward_into(cache.concat, p.mix, grad_mixed);
  std::vector<std::size_t> sizes(p.branches.size() + 1, p.channels);
  auto parts = split_channels(grad_cat, sizes);
  add_inplace(grad_x, parts[0]);
  for (std::size_t i = 0; i < p.branches.size(); ++i) {
    Tensor<T> g_mid = conv2d_backward_into(cache.mid[i], p.branches[i].col, parts[i + 1]);
    add_inplace(grad_x, conv2d_backward_into(x, p.branches[i].row, g_mid));
  }
  return grad_x;
}

/// Wraps the block for grad_check.
inline Differentiable<double> msfa_differentiable(MsfaParams<double>& p) {
  Differentiable<double> d;
  d.forward = [&p](const Tensor<double>& x) { return msfa_forward(x, p); };
  d.backward = [&p](const Tensor<double>& x, const Tensor<double>& g) {
    MsfaCache<double> cache;
    msfa_forward(x, p, &cache);
    return msfa_backward(g, p, cache);
  };
  d.params = p.slots();
  return d;
}

/// Exact multiply-accumulate count of one MSFA forward pass over a C x h x w
/// map with the given separable branch kernel sizes: every k-tap depthwise
/// conv costs C*h*w*k, the mix conv (branches + 1) * C * C * h * w and the
/// gate multiply C*h*w. Bias adds are not counted.
inline std::uint64_t msfa_flops(std::uint64_t channels, std::uint64_t h, std::uint64_t w,
                                const std::vector<std::size_t>& kernels = kDefaultMsfaKernels) {
  const std::uint64_t hw = h * w;
  std::uint64_t macs = 0;
  for (auto k : kernels) macs += channels * hw * 2 * k;
  macs += (kernels.size() + 1) * channels * channels * hw;
  macs += channels * hw;
  return macs;
}

/// Mean |branch_a(probe) - branch_b(probe)| divided by the mean absolute
/// activation of the two branches. Zero when the branches are identical.
template <typename T>
double branch_divergence(const MsfaParams<T>& p, const Tensor<T>& probe) {
  const Tensor<T> a = apply_branch(p.branch_a(), probe);
  const Tensor<T> b = apply_branch(p.branch_b(), probe);
  double diff = 0, mag = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
    mag += (std::abs(static_cast<double>(a[i])) + std::abs(static_cast<double>(b[i]))) / 2;
  }
  return mag > 0 ? diff / mag : 0.0;
}

}  // namespace sme
