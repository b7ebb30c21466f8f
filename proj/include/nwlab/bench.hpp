#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nwlab/data.hpp"
#include "nwlab/metrics.hpp"
#include "nwlab/network.hpp"
#include "nwlab/optim.hpp"

namespace nwlab {

// --- streaming evaluation environment ------------------------------------------

struct ProtocolStream {
    const Dataset* segments = nullptr; // records of length J with episode flags
    int j = 5;
    int k = 20;
};

// per-(segment, lead) raw scores; aggregates are recomputed from these rows
struct SequenceScore {
    int segment_index = -1;
    // [lead][threshold]
    std::vector<std::array<ConfusionCounts, 5>> counts;
    std::vector<double> wse, wae, se, ae; // per-lead weighted/unweighted error sums
};

struct RunReport {
    std::string model_id;
    std::string mode; // offline | online
    uint64_t seed = 0;
    int j = 0, k = 0;
    std::vector<SequenceScore> rows;
    SkillReport aggregate;
    double wall_seconds = 0;

    void save(const std::string& dir) const;
    static RunReport load(const std::string& dir);
};

SkillReport aggregate_scores(const std::vector<SequenceScore>& rows, int k);

// Serves segments one at a time and scores uploaded predictions against the
// withheld future frames; refuses lookahead (next() before upload()).
class StreamEnv {
public:
    StreamEnv(const ProtocolStream& stream);

    bool done() const { return pos_ >= segments_(); }
    const SequenceSample& next();
    void upload(const std::vector<std::vector<uint8_t>>& predictions);
    const std::vector<SequenceScore>& rows() const { return rows_; }
    // index of the first target frame within the stream, if scoreable
    bool current_has_target() const;

private:
    size_t segments_() const;
    const ProtocolStream stream_;
    size_t pos_ = 0;
    bool awaiting_upload_ = false;
    std::vector<int> episode_id_;   // per segment
    std::vector<int> frame_offset_; // frame index of segment start within its episode
    std::vector<int> episode_len_;  // total frames of the segment's episode
    std::vector<SequenceScore> rows_;
};

// --- model adapters ---------------------------------------------------------------

class ForecastModel {
public:
    virtual ~ForecastModel() = default;
    virtual void store(const SequenceSample& segment) = 0;
    virtual void update() {}
    virtual std::vector<std::vector<uint8_t>> predict(int k) = 0;
    virtual std::string id() const = 0;
};

// persistence baseline: every predicted frame equals the last observed frame
class LastFrameModel : public ForecastModel {
public:
    void store(const SequenceSample& segment) override;
    std::vector<std::vector<uint8_t>> predict(int k) override;
    std::string id() const override { return "last-frame"; }

private:
    std::vector<uint8_t> last_;
};

std::vector<std::vector<uint8_t>> last_frame_predict(const std::vector<std::vector<uint8_t>>& inputs,
                                                     int k);

// deep network adapter with the online fine-tuning rule (AdaGrad on the last
// J+K buffered frames; buffer cleared on a new-episode flag)
class DeepModel : public ForecastModel {
public:
    DeepModel(Network<float>* net, bool balanced_loss, float online_lr = 1e-4f);

    void store(const SequenceSample& segment) override;
    void update() override;
    std::vector<std::vector<uint8_t>> predict(int k) override;
    std::string id() const override { return net_->config().name; }

    int updates_applied() const { return updates_; }

private:
    Network<float>* net_;
    bool balanced_;
    std::unique_ptr<AdaGrad<float>> opt_;
    int h_ = 0, w_ = 0;
    std::vector<std::vector<uint8_t>> buffer_frames_;
    std::vector<std::vector<uint8_t>> buffer_masks_;
    int updates_ = 0;
};

enum class ProtocolMode { Offline, Online };

RunReport run_protocol(ForecastModel& model, const ProtocolStream& stream, ProtocolMode mode,
                       const std::string& save_dir = "");

// --- offline training driver --------------------------------------------------------

struct TrainSchedule {
    int iterations = 0;
    int batch = 4;
    double clip = 10;
    bool balanced = true; // balanced B-MSE+B-MAE vs plain MSE+MAE
    int validate_every = 2000;
    int patience_rounds = 5;
    double lr = 1e-4;
    double adam_beta1 = 0.5;
    uint64_t seed = 0;
    int log_every = 200;
};

struct TrainResult {
    bool diverged = false;
    int diverged_at = -1;
    std::vector<std::array<double, 3>> curve; // iter, train loss, val score (nan if none)
    double best_val = 0;
    int best_iter = -1;
};

TrainResult train_offline(Network<float>& net, const Dataset& train, const Dataset* val,
                          const TrainSchedule& schedule, const std::string& checkpoint_path);

// mean squared error in [0,1] frame space, averaged over pixels, lead times
// and sequences (the MovingMNIST++ evaluation convention)
double evaluate_frame_mse(Network<float>& net, const Dataset& test);

// --- report generation ----------------------------------------------------------------

// CSV tables (per-threshold scores with best/second-best flags), the Kendall
// tau matrix between error metrics and skill scores over the report pool and
// per-lead-time error curves with a simple line-plot image.
void report_emit(const std::vector<RunReport>& reports, const std::string& out_dir);

} // namespace nwlab
