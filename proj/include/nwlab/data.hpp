#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nwlab/rng.hpp"
#include "nwlab/tensor.hpp"

namespace nwlab {

// --- glyphs -------------------------------------------------------------------

struct GlyphBank {
    int gh = 28, gw = 28;
    std::vector<std::vector<float>> glyphs; // values in [0,1]
};

// standard IDX image file (magic 0x00000803)
GlyphBank load_idx_images(const std::string& path);

// procedurally drawn digit glyphs so the toolkit runs without external data
GlyphBank builtin_glyphs();

// --- MovingMNIST++ -------------------------------------------------------------

struct MovingMnistPPConfig {
    int digits = 3;
    int frame_h = 64, frame_w = 64;
    double velocity_lo = 0.0, velocity_hi = 3.6;       // px/frame
    double scale_lo = 1.0 / 1.1, scale_hi = 1.1;       // per-frame factor
    double rotation_lo = -0.26179938779914943653855361527329, // -pi/12
           rotation_hi = 0.26179938779914943653855361527329;  // per-frame rad
    double illumination_lo = 0.6, illumination_hi = 1.0;      // per-frame factor
    int seq_len = 20;
    int input_len = 10;
    double glyph_scale = 1.0; // shrink factor for small-frame presets
};

// per-digit motion parameters, sampled once per sequence
struct DigitMotion {
    int glyph = 0;
    double pos_y = 0, pos_x = 0;
    double vel_y = 0, vel_x = 0;
    double scale_rate = 1, rotation_rate = 0, illumination_rate = 1;
};

DigitMotion sample_motion(const MovingMnistPPConfig& cfg, int bank_size, Rng& rng);

struct SequenceSample {
    int h = 0, w = 0, len = 0;
    std::vector<uint8_t> frames; // len*h*w, row-major per frame
    std::vector<uint8_t> mask;   // len*h*w, 1 = valid
    uint64_t seed = 0;
    uint8_t episode_flag = 0;

    int64_t frame_size() const { return static_cast<int64_t>(h) * w; }
    const uint8_t* frame(int t) const { return frames.data() + static_cast<int64_t>(t) * frame_size(); }
    const uint8_t* frame_mask(int t) const { return mask.data() + static_cast<int64_t>(t) * frame_size(); }
};

SequenceSample generate_sequence(const MovingMnistPPConfig& cfg, const GlyphBank& bank,
                                 uint64_t seed);

// --- dataset persistence (NWD1) -------------------------------------------------

struct Dataset {
    int h = 0, w = 0, seq_len = 0;
    uint32_t split_days[3] = {0, 0, 0}; // train/valid/test bookkeeping
    std::vector<SequenceSample> records;

    void save(const std::string& path) const;
    static Dataset load(const std::string& path);
};

Dataset generate_mnistpp_dataset(const MovingMnistPPConfig& cfg, const GlyphBank& bank,
                                 uint64_t root_seed, int count);

// --- radar value codecs ----------------------------------------------------------

inline constexpr double kZrA = 58.53;
inline constexpr double kZrB = 1.56;

int dbz_to_pixel(double dbz);
double pixel_to_dbz(int pixel);
double rainrate_to_dbz(double rain_mmh); // requires rain > 0
double dbz_to_rainrate(double dbz);
double pixel_to_rainrate(int pixel);
// smallest pixel whose rain rate reaches tau (formula chain + rounding)
int rain_threshold_pixel(double tau_mmh);

// zeroes data pixels p with 0 < p < 71 (mask untouched)
void clutter_value_filter(SequenceSample& s);

// --- Mahalanobis outlier model ----------------------------------------------------

struct OutlierModel {
    int h = 0, w = 0;
    std::vector<double> distances;    // per location, 0 for out-of-boundary
    std::vector<uint8_t> in_boundary; // per location
    std::vector<uint8_t> outlier;     // per location (subset of in-boundary)
    double threshold = 0;
    int64_t inliers = 0, outliers = 0, out_of_boundary = 0;
};

// frames: per-frame pixel planes of extent h*w; valid: per-location boundary mask
OutlierModel fit_outlier_model(const std::vector<const uint8_t*>& frames, int h, int w,
                               const std::vector<uint8_t>& valid);

// --- synthetic radar-like streams --------------------------------------------------

struct RadarStreamConfig {
    int h = 96, w = 96;
    int episodes = 8;
    int episode_len = 40;
    uint64_t seed = 1;
    int blobs = 7;
    double drift_speed = 1.2;           // px/frame
    double drift_angle = 0.6;           // radians
    double drift_angle_per_episode = 0; // distribution-shift knob
    double intensity_shift_per_episode = 0;
    bool circular_boundary = true;
};

// one contiguous episode of advected-echo frames
std::vector<std::vector<uint8_t>> generate_radar_episode(const RadarStreamConfig& cfg,
                                                         int episode_index,
                                                         std::vector<uint8_t>& mask_out);

// segments of length j tiling each episode, first segment flagged
Dataset make_radar_stream(const RadarStreamConfig& cfg, int j);

// sliding (j+k)-frame training windows drawn from independent episodes
Dataset make_radar_training_set(const RadarStreamConfig& cfg, int j, int k, int windows);

// streaming variant of a MovingMNIST++ dataset: each record becomes an episode
Dataset make_mnistpp_stream(const Dataset& mnist, int j);

} // namespace nwlab
