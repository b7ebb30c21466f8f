#pragma once

#include <string>
#include <vector>

#include "nwlab/init.hpp"
#include "nwlab/ops.hpp"

namespace nwlab {

template <typename T>
using ParamList = std::vector<std::pair<std::string, Var<T>>>;

template <typename T>
int64_t param_count(const ParamList<T>& params);

// Gated recurrent cell with convolutional input-to-state and state-to-state
// transforms. The state-to-state convolution preserves the spatial extent.
template <typename T>
struct ConvGRUCell {
    int in_channels = 0;
    int state_channels = 0;
    ConvSpec in_spec;
    ConvSpec state_spec;
    T slope = T(0.2);

    Var<T> wxz, wxr, wxh; // (Ch,Ci,kih,kiw)
    Var<T> whz, whr, whh; // (Ch,Ch,k,k) with dilation
    Var<T> bz, br, bh;    // one bias per gate

    static ConvGRUCell create(int ci, int ch, int in_kernel, int in_stride, int in_pad,
                              int state_kernel, int state_dilation, Rng& rng);

    // x may be null (missing input link: zeros are fed)
    Var<T> step(const Var<T>& x, const Var<T>& h_prev) const;

    void collect(const std::string& prefix, ParamList<T>& out) const;
};

// Two zero-initialized convolution layers producing 2L flow channels from
// concat(X, H); first L channels are U (columns), last L are V (rows).
template <typename T>
struct FlowGenerator {
    int in_channels = 0;    // declared input channels (zeros substituted when absent)
    int state_channels = 0;
    int links = 0;
    int hidden = 32;
    T slope = T(0.2);

    Var<T> w1, b1; // (32, Ci+Ch, 5, 5)
    Var<T> w2, b2; // (2L, 32, 5, 5)

    static FlowGenerator create(int ci, int ch, int links);

    // returns (U, V), each with L channels
    std::pair<Var<T>, Var<T>> flows(const Var<T>& x, const Var<T>& h_prev) const;

    void collect(const std::string& prefix, ParamList<T>& out) const;
};

// Recurrent cell whose state aggregation follows L learned flow fields; each
// link contributes a warped state through a 1x1 channel projection.
template <typename T>
struct TrajGRUCell {
    int in_channels = 0;
    int state_channels = 0;
    int links = 0;
    ConvSpec in_spec;
    T slope = T(0.2);
    bool pin_zero_flow = false; // diagnostic mode: skip the flow generator

    Var<T> wxz, wxr, wxh;
    std::vector<Var<T>> lwz, lwr, lwh; // per-link (Ch,Ch,1,1)
    Var<T> bz, br, bh;
    FlowGenerator<T> gamma;

    static TrajGRUCell create(int ci, int ch, int in_kernel, int in_stride, int in_pad, int links,
                              Rng& rng);

    Var<T> step(const Var<T>& x, const Var<T>& h_prev) const;

    void collect(const std::string& prefix, ParamList<T>& out) const;
};

// Output head predicting per-pixel local filters which transform the previous
// frame; softmax keeps the applied weights non-negative with unit sum.
template <typename T>
struct DFNHead {
    int extent = 11;
    ConvSpec spec;
    Var<T> w, b; // (extent^2, Ci, kh, kw)

    static DFNHead create(int ci, int kernel, int pad, int extent, Rng& rng);

    Var<T> apply(const Var<T>& features, const Var<T>& prev_frame) const;

    void collect(const std::string& prefix, ParamList<T>& out) const;
};

} // namespace nwlab
