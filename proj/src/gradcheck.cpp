#include "nwlab/gradcheck.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "nwlab/ops.hpp"
#include "nwlab/rng.hpp"

namespace nwlab {

namespace {

double scalar_eval(const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
                   const std::vector<Var<double>>& inputs, const TensorT<double>& projection) {
    Var<double> out = f(inputs);
    double acc = 0.0;
    for (int64_t i = 0; i < out->value.numel(); ++i) acc += out->value[i] * projection[i];
    return acc;
}

} // namespace

double finite_difference_check(
    const std::function<Var<double>(const std::vector<Var<double>>&)>& f,
    const std::vector<Var<double>>& inputs, double epsilon, int64_t max_coords_per_input,
    uint64_t seed) {
    for (const auto& in : inputs) in->requires_grad = true;

    // fixed projection so the scalarized objective is identical across calls
    Var<double> probe = f(inputs);
    Rng rng(seed);
    TensorT<double> projection(probe->value.shape());
    for (int64_t i = 0; i < projection.numel(); ++i) projection[i] = rng.uniform(-1.0, 1.0);

    for (const auto& in : inputs) {
        in->ensure_grad();
        in->zero_grad();
    }
    Var<double> loss = dot_const(f(inputs), projection);
    backward(loss);

    double max_rel = 0.0;
    for (size_t k = 0; k < inputs.size(); ++k) {
        auto& in = inputs[k];
        std::vector<int64_t> coords;
        const int64_t n = in->value.numel();
        if (max_coords_per_input > 0 && n > max_coords_per_input) {
            Rng pick(seed + 77 * (k + 1));
            for (int64_t c = 0; c < max_coords_per_input; ++c)
                coords.push_back(static_cast<int64_t>(pick.uniform_index(static_cast<uint64_t>(n))));
        } else {
            coords.resize(static_cast<size_t>(n));
            for (int64_t c = 0; c < n; ++c) coords[static_cast<size_t>(c)] = c;
        }
        for (int64_t c : coords) {
            const double saved = in->value[c];
            in->value[c] = saved + epsilon;
            const double fp = scalar_eval(f, inputs, projection);
            in->value[c] = saved - epsilon;
            const double fm = scalar_eval(f, inputs, projection);
            in->value[c] = saved;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double analytic = in->grad[c];
            if (!std::isfinite(numeric) || !std::isfinite(analytic))
                throw std::runtime_error("non-finite gradient at input " + std::to_string(k) +
                                         " coordinate " + std::to_string(c));
            const double rel = std::abs(analytic - numeric) /
                               std::max({1.0, std::abs(analytic), std::abs(numeric)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

} // namespace nwlab
