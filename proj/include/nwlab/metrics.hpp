#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nwlab/ops.hpp"

namespace nwlab {

inline const std::vector<double> kRainThresholds{0.5, 2.0, 5.0, 10.0, 30.0};

// per-pixel weight from the ground-truth rain rate (mm/h)
double rain_weight(double rain_mmh);

struct ConfusionCounts {
    int64_t tp = 0, fn = 0, fp = 0, tn = 0;
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fn += o.fn;
        fp += o.fp;
        tn += o.tn;
        return *this;
    }
    int64_t total() const { return tp + fn + fp + tn; }
};

// binarize with value >= tau over unmasked pixels; inputs in rain-rate units
ConfusionCounts confusion(const std::vector<double>& pred, const std::vector<double>& truth,
                          double tau, const std::vector<uint8_t>& mask);

// TP / (TP + FN + FP); empty denominator yields the excluded-sample marker
std::optional<double> csi(const ConfusionCounts& c);

// the paper's printed HSS; `standard_factor2` selects the textbook variant
std::optional<double> hss(const ConfusionCounts& c, bool standard_factor2 = false);

// weighted error sums normalized by frame count
double bmse(const std::vector<double>& pred, const std::vector<double>& truth,
            const std::vector<double>& weights, int64_t n_frames);
double bmae(const std::vector<double>& pred, const std::vector<double>& truth,
            const std::vector<double>& weights, int64_t n_frames);
double mse(const std::vector<double>& pred, const std::vector<double>& truth,
           const std::vector<uint8_t>& mask, int64_t n_frames);
double mae(const std::vector<double>& pred, const std::vector<double>& truth,
           const std::vector<uint8_t>& mask, int64_t n_frames);

// Kendall tau-b rank correlation (O(n log n); ties per the tau-b convention)
double kendall_tau(const std::vector<double>& a, const std::vector<double>& b);

struct SkillReport {
    std::vector<double> thresholds = kRainThresholds;
    std::vector<double> csi;  // mean over lead times, degenerate frames excluded
    std::vector<double> hss;
    double bmse = 0, bmae = 0, mse = 0, mae = 0;
    int64_t n_frames = 0;

    static std::string csv_header();
    std::string csv_row() const;
};

// --- differentiable training losses -------------------------------------------------

// weight tensor from ground truth (rain-rate units) and validity mask;
// balanced mode applies the rain_weight staircase, plain mode uses unit weights
template <typename T>
TensorT<T> weight_map(const TensorT<T>& truth_rain, const TensorT<T>& mask, bool balanced);

// sum of weighted SE and weighted AE over one frame, normalized by n_frames
template <typename T>
Var<T> training_loss(const Var<T>& pred, const TensorT<T>& truth, const TensorT<T>& weights,
                     int64_t n_frames);

} // namespace nwlab
