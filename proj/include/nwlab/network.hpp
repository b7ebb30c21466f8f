#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "nwlab/cells.hpp"

namespace nwlab {

// One row of a declarative network description (mirrors the appendix-table
// columns: kernel / stride / pad / channels / resolutions / wiring).
struct LayerSpec {
    std::string name;
    std::string type; // conv | deconv | convgru | trajgru | dfn-head
    int kernel_h = 0, kernel_w = 0;
    int stride_h = 1, stride_w = 1;
    int pad_h = 0, pad_w = 0;
    int state_kernel = 0;
    int state_dilation = 1;
    int links = 0;
    int local_extent = 11;
    int ch_in = 0, ch_out = 0;
    int in_h = 0, in_w = 0;
    int out_h = 0, out_w = 0;
    std::string input;    // "in", a previous layer name, or empty (missing link)
    std::string in_state; // encoder RNN supplying the initial state
    bool is_rnn() const { return type == "convgru" || type == "trajgru"; }
};

struct NetworkConfig {
    std::string name;
    std::string kind; // encoder-forecaster | cnn2d
    int frame_h = 0, frame_w = 0;
    int input_length = 0;    // J
    int horizon = 0;         // K
    std::vector<LayerSpec> layers;
};

NetworkConfig parse_network_config(const std::string& json_text);

// Resolves a preset name or a path to a config document. Name lookup order:
// literal path, $NWLAB_CONFIG_DIR/<name>.json, built-in config directory.
NetworkConfig load_network_config(const std::string& name_or_path);

// two channels of normalized coordinates in [-1, 1]
template <typename T>
TensorT<T> coordinate_grid(int h, int w);

template <typename T>
class Network {
public:
    // Validates the declarative config (resolution arithmetic, wiring, state
    // handoff) and allocates/initializes all parameters.
    Network(const NetworkConfig& config, uint64_t init_seed);

    const NetworkConfig& config() const { return cfg_; }

    // Multi-step sequence forward pass. `frames` holds J tensors shaped
    // (1,H,W) or (N,1,H,W) in [0,1]; mask may be empty (treated as all-valid).
    // Returns K prediction frames of the same shape, raw (unclamped).
    std::vector<Var<T>> forward_seq(const std::vector<TensorT<T>>& frames,
                                    const std::vector<TensorT<T>>& mask, bool training = false);

    // Inference helper: predictions clamped to [0,1], tape-free values.
    std::vector<TensorT<T>> predict(const std::vector<TensorT<T>>& frames,
                                    const std::vector<TensorT<T>>& mask);

    ParamList<T> parameters() const;      // trainable tensors with stable names
    int64_t parameter_count() const;

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

    // diagnostic switch used by the zero-flow equivalence checks
    void pin_flows_to_zero(bool on);

private:
    struct Layer {
        LayerSpec spec;
        bool terminal = false;
        Var<T> w, b;                           // conv / deconv
        std::unique_ptr<ConvGRUCell<T>> convgru;
        std::unique_ptr<TrajGRUCell<T>> trajgru;
        std::unique_ptr<DFNHead<T>> dfn;
        Var<T> bn_gamma, bn_beta;              // cnn2d only
        std::shared_ptr<BNState<T>> bn;
        bool use_bn = false;
    };

    Var<T> run_layer(Layer& layer, const Var<T>& x, bool training);
    void build_encoder_forecaster(uint64_t seed);
    void build_cnn2d(uint64_t seed);
    std::vector<Var<T>> forward_ef(const std::vector<TensorT<T>>& frames,
                                   const std::vector<TensorT<T>>& mask, bool training);
    std::vector<Var<T>> forward_cnn(const std::vector<TensorT<T>>& frames, bool training);

    NetworkConfig cfg_;
    std::vector<Layer> encoder_;
    std::vector<Layer> forecaster_;  // also holds all cnn2d layers
    std::vector<int> enc_rnn_, fore_rnn_;  // indices of RNN layers
    TensorT<T> grid_;
};

using Network32 = Network<float>;
using Network64 = Network<double>;

} // namespace nwlab
