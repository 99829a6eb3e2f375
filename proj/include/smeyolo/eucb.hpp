#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "grad_check.hpp"
#include "msfa.hpp"
#include "ops.hpp"

namespace sme {

/// Efficient upsampling conv block: up 2x -> depthwise 3x3 -> BN -> ReLU -> 1x1.
template <typename T>
struct EucbParams {
  ConvParams<T> dw;  // depthwise 3x3, padding 1, no bias (BN follows)
  BatchNormState<T> bn;
  ConvParams<T> proj;  // 1x1, in_c -> out_c
  UpsampleMode upsample_mode = UpsampleMode::nearest;

  std::size_t in_channels() const { return dw.out_channels(); }
  std::size_t out_channels() const { return proj.out_channels(); }

  void validate() const {
    dw.validate();
    proj.validate();
    if (!dw.depthwise() && dw.out_channels() != 1)
      throw DimensionError("eucb: dw conv must be depthwise");
    if (dw.kernel_h() != 3 || dw.kernel_w() != 3 || dw.padding != Padding{1, 1})
      throw DimensionError("eucb: dw conv must be 3x3 with padding 1");
    if (bn.channels() != in_channels()) throw DimensionError("eucb: BN channel count mismatch");
    if (proj.in_channels() != in_channels() || proj.kernel_h() != 1 || proj.kernel_w() != 1)
      throw DimensionError("eucb: proj must be a 1x1 conv over " + std::to_string(in_channels()) + " channels");
  }

  std::vector<ParamSlot<T>> slots(const std::string& prefix = "eucb") {
    std::vector<ParamSlot<T>> out;
    append_conv_slots(dw, prefix + ".dw", out);
    out.push_back({prefix + ".bn.gamma", &bn.gamma});
    out.push_back({prefix + ".bn.beta", &bn.beta});
    append_conv_slots(proj, prefix + ".proj", out);
    return out;
  }
};

template <typename T>
EucbParams<T> make_eucb(std::size_t in_c, std::size_t out_c, std::uint64_t seed,
                        UpsampleMode mode = UpsampleMode::nearest, const std::string& prefix = "eucb") {
  EucbParams<T> p;
  p.dw = ConvParams<T>::depthwise_of(in_c, 3, 3, {1, 1}, /*with_bias=*/false);
  init_conv(p.dw, seed, prefix + ".dw");
  p.bn = BatchNormState<T>::identity(in_c);
  p.proj = ConvParams<T>::dense(in_c, out_c, 1, 1, {0, 0});
  init_conv(p.proj, seed, prefix + ".proj");
  p.upsample_mode = mode;
  return p;
}

template <typename T>
struct EucbCache {
  Dims input_dims;
  Tensor<T> up, dw_out, bn_out, relu_out;
  BatchNormCache<T> bn;
};

/// Pure forward pass. In train mode the BN batch statistics land in
/// `cache->bn`; apply them with batchnorm_update_running.
template <typename T>
Tensor<T> eucb_forward(const Tensor<T>& x, const EucbParams<T>& p, EucbCache<T>* cache = nullptr) {
  require_rank4(x, "eucb input");
  p.validate();
  if (x.c() != p.in_channels())
    throw DimensionError("eucb: input has " + std::to_string(x.c()) + " channels, block expects " +
                         std::to_string(p.in_channels()));
  Tensor<T> up = upsample2x(x, p.upsample_mode);
  Tensor<T> d = conv2d(up, p.dw);
  BatchNormCache<T> bnc;
  Tensor<T> b = batchnorm_forward(d, p.bn, cache ? &bnc : nullptr);
  Tensor<T> r = activation(b, Activation::relu);
  Tensor<T> y = conv2d(r, p.proj);
  if (cache) {
    cache->input_dims = x.dims();
    cache->up = std::move(up);
    cache->dw_out = std::move(d);
    cache->bn_out = std::move(b);
    cache->relu_out = std::move(r);
    cache->bn = std::move(bnc);
  }
  return y;
}

template <typename T>
Tensor<T> eucb_backward(const Tensor<T>& grad_out, EucbParams<T>& p, const EucbCache<T>& cache) {
  Tensor<T> g_relu = conv2d_backward_into(cache.relu_out, p.proj, grad_out);
  Tensor<T> g_bn = activation_backward(cache.bn_out, cache.relu_out, g_relu, Activation::relu);
  BatchNormGrads<T> bg = batchnorm_backward(g_bn, p.bn, cache.bn);
  accumulate_grad(p.bn.gamma, bg.grad_gamma);
  accumulate_grad(p.bn.beta, bg.grad_beta);
  Tensor<T> g_up = conv2d_backward_into(cache.up, p.dw, bg.grad_x);
  return upsample2x_backward(g_up, cache.input_dims, p.upsample_mode);
}

/// The bare-upsample arm of the ablation: upsample2x with no convolutions.
template <typename T>
Tensor<T> plain_upsample_baseline(const Tensor<T>& x, UpsampleMode mode) {
  return upsample2x(x, mode);
}

inline Differentiable<double> eucb_differentiable(EucbParams<double>& p) {
  Differentiable<double> d;
  d.forward = [&p](const Tensor<double>& x) { return eucb_forward(x, p); };
  d.backward = [&p](const Tensor<double>& x, const Tensor<double>& g) {
    EucbCache<double> cache;
    eucb_forward(x, p, &cache);
    return eucb_backward(g, p, cache);
  };
  d.params = p.slots();
  return d;
}

/// Multiply-accumulate count for an h x w input (the convs run at 2h x 2w).
inline std::uint64_t eucb_flops(std::uint64_t in_c, std::uint64_t out_c, std::uint64_t h, std::uint64_t w) {
  const std::uint64_t hw = 4 * h * w;
  return in_c * hw * 9 + in_c * out_c * hw;
}

}  // namespace sme
