#pragma once

#include <cmath>

#include "nwlab/rng.hpp"
#include "nwlab/tensor.hpp"

namespace nwlab {

// MSRA initialization: zero-mean Gaussian with variance 2 / fan_in.
template <typename T>
TensorT<T> msra_init(std::vector<int> shape, int fan_in, Rng& rng) {
    if (fan_in < 1) throw std::invalid_argument("msra_init requires fan_in >= 1");
    TensorT<T> t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.gaussian(0.0, stddev));
    return t;
}

// fan-in inferred from the weight layout: Ci*kh*kw for (Co,Ci,kh,kw) kernels
template <typename T>
TensorT<T> msra_init(std::vector<int> shape, Rng& rng) {
    int fan_in = 1;
    if (shape.size() == 4) fan_in = shape[1] * shape[2] * shape[3];
    else if (shape.size() == 2) fan_in = shape[1];
    else if (shape.size() == 1) fan_in = shape[0];
    return msra_init<T>(std::move(shape), fan_in, rng);
}

template <typename T>
TensorT<T> zero_init(std::vector<int> shape) {
    return TensorT<T>::zeros(std::move(shape));
}

} // namespace nwlab
