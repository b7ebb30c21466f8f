#pragma once

#include <vector>

#include "nwlab/autograd.hpp"

namespace nwlab {

struct ConvSpec {
    int stride_h = 1, stride_w = 1;
    int pad_h = 0, pad_w = 0;
    int dilation_h = 1, dilation_w = 1;
};

struct DeconvSpec {
    int stride_h = 1, stride_w = 1;
    int pad_h = 0, pad_w = 0;
};

inline int conv_out_extent(int in, int k, int stride, int pad, int dilation) {
    return (in + 2 * pad - dilation * (k - 1) - 1) / stride + 1;
}

inline int deconv_out_extent(int in, int k, int stride, int pad) {
    return (in - 1) * stride - 2 * pad + k;
}

// Cross-correlation of (N,Ci,H,W) or (Ci,H,W) input with (Co,Ci,kh,kw)
// weights; optional per-channel bias.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const ConvSpec& spec);

// Adjoint of conv2d with the same stride/pad; weight layout (Cin,Cout,kh,kw).
template <typename T>
Var<T> transposed_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias,
                         const DeconvSpec& spec);

// Bilinear warp with the tent kernel and zero exterior; u displaces columns,
// v displaces rows. u/v carry one channel and match the input's spatial size.
template <typename T>
Var<T> bilinear_warp(const Var<T>& img, const Var<T>& u, const Var<T>& v);

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T negative_slope);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> one_minus(const Var<T>& x);

template <typename T>
Var<T> scale(const Var<T>& x, T s);

// broadcasts a rank-1 bias over the channel axis
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias);

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs);

template <typename T>
Var<T> slice_channels(const Var<T>& x, int first, int count);

template <typename T>
Var<T> sum_vars(const std::vector<Var<T>>& xs);

// Running statistics for batch normalization (not trainable parameters).
template <typename T>
struct BNState {
    TensorT<T> running_mean;
    TensorT<T> running_var;
    bool initialized = false;
};

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BNState<T>& state,
                  bool training, T momentum = T(0.9), T eps = T(1e-5));

// Per-pixel softmax over the filter-logit channels followed by a local
// filtering of `frame` over the centered extent x extent neighborhood.
template <typename T>
Var<T> local_filter_apply(const Var<T>& logits, const Var<T>& frame, int extent);

// sum of w * (pred - truth)^2 over all elements; truth/weights are constants
template <typename T>
Var<T> weighted_se_sum(const Var<T>& pred, TensorT<T> truth, TensorT<T> weights);

// sum of w * |pred - truth|
template <typename T>
Var<T> weighted_ae_sum(const Var<T>& pred, TensorT<T> truth, TensorT<T> weights);

// sum of x * r (used by the gradient checker to reduce to a scalar)
template <typename T>
Var<T> dot_const(const Var<T>& x, TensorT<T> r);

} // namespace nwlab
