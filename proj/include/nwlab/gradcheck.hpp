#pragma once

#include <functional>
#include <vector>

#include "nwlab/autograd.hpp"

namespace nwlab {

// Central finite-difference verification of reverse-mode gradients.
//
// `f` rebuilds the forward graph from the given inputs and returns any output
// node; the check reduces it to a scalar through a fixed random projection,
// compares analytic input gradients against central differences and returns
// the maximum relative error |a - n| / max(1, |a|, |n|).
//
// Inputs are restored afterwards. When max_coords_per_input is positive, only
// a deterministic random subset of coordinates per input is perturbed (used
// for large parameter sets). Non-finite values abort with the offending
// coordinate.
double finite_difference_check(
    const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
    const std::vector<Var<double>>& inputs, double epsilon = 1e-5,
    int64_t max_coords_per_input = -1, uint64_t seed = 1234);

} // namespace nwlab
