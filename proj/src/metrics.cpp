#include "nwlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace nwlab {

double rain_weight(double x) {
    if (x < 0) throw std::invalid_argument("rain_weight requires a non-negative rain rate");
    if (x < 2) return 1;
    if (x < 5) return 2;
    if (x < 10) return 5;
    if (x < 30) return 10;
    return 30;
}

ConfusionCounts confusion(const std::vector<double>& pred, const std::vector<double>& truth,
                          double tau, const std::vector<uint8_t>& mask) {
    if (tau <= 0) throw std::invalid_argument("confusion threshold must be positive");
    if (pred.size() != truth.size() || (!mask.empty() && mask.size() != pred.size()))
        throw std::invalid_argument("confusion: prediction/truth/mask sizes differ");
    ConfusionCounts c;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        const bool p = pred[i] >= tau;
        const bool t = truth[i] >= tau;
        if (p && t) ++c.tp;
        else if (!p && t) ++c.fn;
        else if (p && !t) ++c.fp;
        else ++c.tn;
    }
    return c;
}

std::optional<double> csi(const ConfusionCounts& c) {
    const int64_t den = c.tp + c.fn + c.fp;
    if (den == 0) return std::nullopt;
    return static_cast<double>(c.tp) / static_cast<double>(den);
}

std::optional<double> hss(const ConfusionCounts& c, bool standard_factor2) {
    const double tp = static_cast<double>(c.tp), fn = static_cast<double>(c.fn);
    const double fp = static_cast<double>(c.fp), tn = static_cast<double>(c.tn);
    const double den = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn);
    if (den == 0) return std::nullopt;
    const double num = tp * tn - fn * fp;
    return (standard_factor2 ? 2.0 * num : num) / den;
}

namespace {

double weighted_sum(const std::vector<double>& pred, const std::vector<double>& truth,
                    const std::vector<double>& weights, int64_t n_frames, bool squared) {
    if (pred.size() != truth.size() || pred.size() != weights.size())
        throw std::invalid_argument("loss inputs have mismatched sizes");
    if (n_frames < 1) throw std::invalid_argument("loss normalizer must be >= 1 frame");
    double acc = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - truth[i];
        acc += weights[i] * (squared ? d * d : std::abs(d));
    }
    return acc / static_cast<double>(n_frames);
}

} // namespace

double bmse(const std::vector<double>& pred, const std::vector<double>& truth,
            const std::vector<double>& weights, int64_t n_frames) {
    return weighted_sum(pred, truth, weights, n_frames, true);
}

double bmae(const std::vector<double>& pred, const std::vector<double>& truth,
            const std::vector<double>& weights, int64_t n_frames) {
    return weighted_sum(pred, truth, weights, n_frames, false);
}

double mse(const std::vector<double>& pred, const std::vector<double>& truth,
           const std::vector<uint8_t>& mask, int64_t n_frames) {
    std::vector<double> w(pred.size(), 1.0);
    if (!mask.empty())
        for (size_t i = 0; i < w.size(); ++i) w[i] = mask[i] ? 1.0 : 0.0;
    return weighted_sum(pred, truth, w, n_frames, true);
}

double mae(const std::vector<double>& pred, const std::vector<double>& truth,
           const std::vector<uint8_t>& mask, int64_t n_frames) {
    std::vector<double> w(pred.size(), 1.0);
    if (!mask.empty())
        for (size_t i = 0; i < w.size(); ++i) w[i] = mask[i] ? 1.0 : 0.0;
    return weighted_sum(pred, truth, w, n_frames, false);
}

namespace {

// merge sort counting the exchanges needed to sort `b`
int64_t count_swaps(std::vector<double>& b, std::vector<double>& tmp, size_t lo, size_t hi) {
    if (hi - lo < 2) return 0;
    const size_t mid = lo + (hi - lo) / 2;
    int64_t swaps = count_swaps(b, tmp, lo, mid) + count_swaps(b, tmp, mid, hi);
    size_t i = lo, j = mid, k = lo;
    while (i < mid && j < hi) {
        if (b[j] < b[i]) {
            swaps += static_cast<int64_t>(mid - i);
            tmp[k++] = b[j++];
        } else {
            tmp[k++] = b[i++];
        }
    }
    while (i < mid) tmp[k++] = b[i++];
    while (j < hi) tmp[k++] = b[j++];
    std::copy(tmp.begin() + static_cast<int64_t>(lo), tmp.begin() + static_cast<int64_t>(hi),
              b.begin() + static_cast<int64_t>(lo));
    return swaps;
}

int64_t tie_pairs(const std::vector<double>& sorted_keys) {
    int64_t pairs = 0;
    size_t run = 1;
    for (size_t i = 1; i <= sorted_keys.size(); ++i) {
        if (i < sorted_keys.size() && sorted_keys[i] == sorted_keys[i - 1]) {
            ++run;
        } else {
            pairs += static_cast<int64_t>(run) * static_cast<int64_t>(run - 1) / 2;
            run = 1;
        }
    }
    return pairs;
}

} // namespace

double kendall_tau(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("kendall_tau requires sequences of equal length");
    const size_t n = a.size();
    if (n < 2) throw std::invalid_argument("kendall_tau requires length >= 2");

    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](size_t i, size_t j) {
        if (a[i] != a[j]) return a[i] < a[j];
        return b[i] < b[j];
    });

    std::vector<double> a_sorted(n), b_sorted(n);
    for (size_t i = 0; i < n; ++i) {
        a_sorted[i] = a[idx[i]];
        b_sorted[i] = b[idx[i]];
    }

    // joint ties (pairs tied in both a and b)
    int64_t n3 = 0;
    {
        size_t run = 1;
        for (size_t i = 1; i <= n; ++i) {
            if (i < n && a_sorted[i] == a_sorted[i - 1] && b_sorted[i] == b_sorted[i - 1]) {
                ++run;
            } else {
                n3 += static_cast<int64_t>(run) * static_cast<int64_t>(run - 1) / 2;
                run = 1;
            }
        }
    }
    const int64_t n1 = tie_pairs(a_sorted);

    std::vector<double> b_for_sort = b_sorted, tmp(n);
    const int64_t swaps = count_swaps(b_for_sort, tmp, 0, n);
    const int64_t n2 = tie_pairs(b_for_sort); // b_for_sort is now sorted

    const int64_t n0 = static_cast<int64_t>(n) * static_cast<int64_t>(n - 1) / 2;
    const int64_t num = n0 - n1 - n2 + n3 - 2 * swaps;
    const double den = std::sqrt(static_cast<double>(n0 - n1)) *
                       std::sqrt(static_cast<double>(n0 - n2));
    if (den == 0) return 0.0;
    return static_cast<double>(num) / den;
}

std::string SkillReport::csv_header() {
    std::ostringstream os;
    for (double t : kRainThresholds) os << "csi_" << t << ",";
    for (double t : kRainThresholds) os << "hss_" << t << ",";
    os << "bmse,bmae,mse,mae";
    return os.str();
}

std::string SkillReport::csv_row() const {
    std::ostringstream os;
    os.precision(10);
    for (double v : csi) os << v << ",";
    for (double v : hss) os << v << ",";
    os << bmse << "," << bmae << "," << mse << "," << mae;
    return os.str();
}

template <typename T>
TensorT<T> weight_map(const TensorT<T>& truth_rain, const TensorT<T>& mask, bool balanced) {
    if (!truth_rain.same_shape(mask))
        throw std::invalid_argument("weight_map: truth and mask shapes differ");
    TensorT<T> w(truth_rain.shape());
    for (int64_t i = 0; i < w.numel(); ++i) {
        if (mask[i] == T(0)) {
            w[i] = T(0);
        } else if (balanced) {
            w[i] = static_cast<T>(rain_weight(static_cast<double>(truth_rain[i])));
        } else {
            w[i] = T(1);
        }
    }
    return w;
}

template <typename T>
Var<T> training_loss(const Var<T>& pred, const TensorT<T>& truth, const TensorT<T>& weights,
                     int64_t n_frames) {
    Var<T> se = weighted_se_sum(pred, truth, weights);
    Var<T> ae = weighted_ae_sum(pred, truth, weights);
    return scale(add(se, ae), T(1.0 / static_cast<double>(n_frames)));
}

template TensorT<float> weight_map<float>(const TensorT<float>&, const TensorT<float>&, bool);
template TensorT<double> weight_map<double>(const TensorT<double>&, const TensorT<double>&, bool);
template Var<float> training_loss<float>(const Var<float>&, const TensorT<float>&,
                                         const TensorT<float>&, int64_t);
template Var<double> training_loss<double>(const Var<double>&, const TensorT<double>&,
                                           const TensorT<double>&, int64_t);

} // namespace nwlab
