#include "nwlab/network.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace nwlab {

using nlohmann::json;

namespace {

void parse_pair(const json& j, const char* key, int& a, int& b, bool required) {
    if (!j.contains(key)) {
        if (required) throw std::invalid_argument(std::string("layer row missing '") + key + "'");
        return;
    }
    const auto& v = j.at(key);
    if (v.is_array()) {
        a = v.at(0).get<int>();
        b = v.at(1).get<int>();
    } else {
        a = b = v.get<int>();
    }
}

} // namespace

NetworkConfig parse_network_config(const std::string& json_text) {
    json j = json::parse(json_text);
    NetworkConfig c;
    c.name = j.value("name", "unnamed");
    c.kind = j.at("kind").get<std::string>();
    parse_pair(j, "frame", c.frame_h, c.frame_w, true);
    c.input_length = j.at("input_length").get<int>();
    c.horizon = j.at("horizon").get<int>();
    for (const auto& row : j.at("layers")) {
        LayerSpec s;
        s.name = row.at("name").get<std::string>();
        s.type = row.at("type").get<std::string>();
        if (s.is_rnn()) {
            parse_pair(row, "in_kernel", s.kernel_h, s.kernel_w, true);
            parse_pair(row, "in_stride", s.stride_h, s.stride_w, false);
            parse_pair(row, "in_pad", s.pad_h, s.pad_w, false);
            if (s.type == "convgru") {
                int d1 = 1, d2 = 1;
                parse_pair(row, "state_kernel", s.state_kernel, s.state_kernel, true);
                parse_pair(row, "state_dilation", d1, d2, false);
                s.state_dilation = d1;
            } else {
                s.links = row.at("links").get<int>();
            }
        } else {
            parse_pair(row, "kernel", s.kernel_h, s.kernel_w, true);
            parse_pair(row, "stride", s.stride_h, s.stride_w, false);
            parse_pair(row, "pad", s.pad_h, s.pad_w, false);
            if (s.type == "dfn-head") s.local_extent = row.value("local_extent", 11);
        }
        parse_pair(row, "ch", s.ch_in, s.ch_out, true);
        parse_pair(row, "in_res", s.in_h, s.in_w, true);
        parse_pair(row, "out_res", s.out_h, s.out_w, true);
        if (row.contains("input") && !row.at("input").is_null())
            s.input = row.at("input").get<std::string>();
        if (row.contains("in_state") && !row.at("in_state").is_null())
            s.in_state = row.at("in_state").get<std::string>();
        c.layers.push_back(std::move(s));
    }
    return c;
}

NetworkConfig load_network_config(const std::string& name_or_path) {
    namespace fs = std::filesystem;
    std::vector<std::string> candidates;
    candidates.push_back(name_or_path);
    const char* env = std::getenv("NWLAB_CONFIG_DIR");
    if (env) candidates.push_back(std::string(env) + "/" + name_or_path + ".json");
#ifdef NWLAB_DEFAULT_CONFIG_DIR
    candidates.push_back(std::string(NWLAB_DEFAULT_CONFIG_DIR) + "/" + name_or_path + ".json");
#endif
    for (const auto& path : candidates) {
        if (fs::exists(path) && fs::is_regular_file(path)) {
            std::ifstream is(path);
            std::stringstream ss;
            ss << is.rdbuf();
            return parse_network_config(ss.str());
        }
    }
    throw std::invalid_argument("network preset or config file not found: " + name_or_path);
}

template <typename T>
TensorT<T> coordinate_grid(int h, int w) {
    TensorT<T> g({2, h, w});
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            g.at(0, i, j) = w > 1 ? T(-1) + T(2) * T(j) / T(w - 1) : T(0);
            g.at(1, i, j) = h > 1 ? T(-1) + T(2) * T(i) / T(h - 1) : T(0);
        }
    return g;
}

namespace {

[[noreturn]] void reject(const std::string& msg) { throw std::invalid_argument(msg); }

void validate_wiring(const NetworkConfig& cfg) {
    std::unordered_set<std::string> known{"in"};
    std::vector<const LayerSpec*> enc_rnns, fore_rnns;
    bool in_forecaster = false;
    for (const auto& s : cfg.layers) {
        // resolution arithmetic must reproduce the declared output resolution
        int oh, ow;
        if (s.type == "deconv") {
            oh = deconv_out_extent(s.in_h, s.kernel_h, s.stride_h, s.pad_h);
            ow = deconv_out_extent(s.in_w, s.kernel_w, s.stride_w, s.pad_w);
        } else {
            oh = conv_out_extent(s.in_h, s.kernel_h, s.stride_h, s.pad_h, 1);
            ow = conv_out_extent(s.in_w, s.kernel_w, s.stride_w, s.pad_w, 1);
        }
        if (oh != s.out_h || ow != s.out_w)
            reject("layer '" + s.name + "': declared output resolution " +
                   std::to_string(s.out_h) + "x" + std::to_string(s.out_w) +
                   " but kernel/stride/pad give " + std::to_string(oh) + "x" +
                   std::to_string(ow));
        if (s.is_rnn() && (s.in_h != s.out_h || s.in_w != s.out_w))
            reject("layer '" + s.name + "': recurrent layers must preserve resolution");

        if (!s.in_state.empty()) in_forecaster = true;
        if (s.input.empty()) {
            if (s.in_state.empty())
                reject("layer '" + s.name + "' has neither an input nor an initial state");
        } else if (!known.count(s.input)) {
            reject("layer '" + s.name + "' reads from undeclared layer '" + s.input + "'");
        }
        if (s.is_rnn()) (in_forecaster ? fore_rnns : enc_rnns).push_back(&s);
        known.insert(s.name);
    }
    if (cfg.kind == "encoder-forecaster" && !fore_rnns.empty()) {
        if (enc_rnns.size() != fore_rnns.size())
            reject("encoder and forecaster must have the same number of RNN layers (" +
                   std::to_string(enc_rnns.size()) + " vs " + std::to_string(fore_rnns.size()) +
                   ")");
        const size_t n = enc_rnns.size();
        for (size_t i = 0; i < n; ++i) {
            const LayerSpec* f = fore_rnns[i];
            const LayerSpec* e = enc_rnns[n - 1 - i];
            if (f->in_state != e->name)
                reject("forecaster layer '" + f->name + "' must take its initial state from '" +
                       e->name + "' (reversed order), got '" + f->in_state + "'");
            if (f->ch_out != e->ch_out || f->out_h != e->out_h || f->out_w != e->out_w)
                reject("state handoff shape mismatch between '" + e->name + "' and '" + f->name +
                       "'");
        }
    }
}

} // namespace

template <typename T>
Network<T>::Network(const NetworkConfig& config, uint64_t init_seed) : cfg_(config) {
    validate_wiring(cfg_);
    if (cfg_.kind == "encoder-forecaster")
        build_encoder_forecaster(init_seed);
    else if (cfg_.kind == "cnn2d")
        build_cnn2d(init_seed);
    else
        reject("unknown network kind '" + cfg_.kind + "'");
    grid_ = coordinate_grid<T>(cfg_.frame_h, cfg_.frame_w);
}

template <typename T>
void Network<T>::build_encoder_forecaster(uint64_t seed) {
    Rng rng(seed);
    bool in_forecaster = false;
    for (const auto& s : cfg_.layers) {
        if (!s.in_state.empty()) in_forecaster = true;
        Layer layer;
        layer.spec = s;
        if (s.type == "convgru") {
            layer.convgru = std::make_unique<ConvGRUCell<T>>(ConvGRUCell<T>::create(
                s.ch_in, s.ch_out, s.kernel_h, s.stride_h, s.pad_h, s.state_kernel,
                s.state_dilation, rng));
        } else if (s.type == "trajgru") {
            layer.trajgru = std::make_unique<TrajGRUCell<T>>(TrajGRUCell<T>::create(
                s.ch_in, s.ch_out, s.kernel_h, s.stride_h, s.pad_h, s.links, rng));
        } else if (s.type == "dfn-head") {
            layer.dfn = std::make_unique<DFNHead<T>>(
                DFNHead<T>::create(s.ch_in, s.kernel_h, s.pad_h, s.local_extent, rng));
            if (s.ch_out != s.local_extent * s.local_extent)
                reject("layer '" + s.name + "': dfn-head output channels must equal extent^2");
        } else if (s.type == "conv" || s.type == "deconv") {
            const int fan = (s.type == "conv" ? s.ch_in : s.ch_out) * s.kernel_h * s.kernel_w;
            std::vector<int> wshape = s.type == "conv"
                                          ? std::vector<int>{s.ch_out, s.ch_in, s.kernel_h, s.kernel_w}
                                          : std::vector<int>{s.ch_in, s.ch_out, s.kernel_h, s.kernel_w};
            layer.w = make_param(msra_init<T>(wshape, fan, rng));
            layer.b = make_param(msra_init<T>({s.ch_out}, fan, rng));
        } else {
            reject("unknown layer type '" + s.type + "' in '" + s.name + "'");
        }
        auto& dst = in_forecaster ? forecaster_ : encoder_;
        if (layer.spec.is_rnn()) (in_forecaster ? fore_rnn_ : enc_rnn_).push_back(
            static_cast<int>(dst.size()));
        dst.push_back(std::move(layer));
    }
    if (!forecaster_.empty()) forecaster_.back().terminal = true;
}

template <typename T>
void Network<T>::build_cnn2d(uint64_t seed) {
    Rng rng(seed);
    for (const auto& s : cfg_.layers) {
        if (s.type != "conv" && s.type != "deconv")
            reject("cnn2d supports conv/deconv layers only, got '" + s.type + "' in '" + s.name +
                   "'");
        Layer layer;
        layer.spec = s;
        const int fan = (s.type == "conv" ? s.ch_in : s.ch_out) * s.kernel_h * s.kernel_w;
        std::vector<int> wshape = s.type == "conv"
                                      ? std::vector<int>{s.ch_out, s.ch_in, s.kernel_h, s.kernel_w}
                                      : std::vector<int>{s.ch_in, s.ch_out, s.kernel_h, s.kernel_w};
        layer.w = make_param(msra_init<T>(wshape, fan, rng));
        forecaster_.push_back(std::move(layer));
    }
    forecaster_.back().terminal = true;
    // batch normalization after every layer except the output one; the final
    // layer keeps a plain bias instead
    for (auto& layer : forecaster_) {
        if (!layer.terminal) {
            layer.use_bn = true;
            layer.bn_gamma = make_param(TensorT<T>::full({layer.spec.ch_out}, T(1)));
            layer.bn_beta = make_param(TensorT<T>::zeros({layer.spec.ch_out}));
            layer.bn = std::make_shared<BNState<T>>();
        } else {
            Rng rng2(seed ^ 0x5bd1e995u);
            const int fan = layer.spec.ch_in * layer.spec.kernel_h * layer.spec.kernel_w;
            layer.b = make_param(msra_init<T>({layer.spec.ch_out}, fan, rng2));
        }
    }
}

template <typename T>
Var<T> Network<T>::run_layer(Layer& layer, const Var<T>& x, bool training) {
    const auto& s = layer.spec;
    Var<T> y;
    if (s.type == "conv") {
        y = conv2d(x, layer.w, layer.b, ConvSpec{s.stride_h, s.stride_w, s.pad_h, s.pad_w, 1, 1});
    } else if (s.type == "deconv") {
        y = transposed_conv2d(x, layer.w, layer.b,
                              DeconvSpec{s.stride_h, s.stride_w, s.pad_h, s.pad_w});
    } else {
        reject("run_layer cannot execute '" + s.type + "'");
    }
    if (layer.use_bn) y = batch_norm(y, layer.bn_gamma, layer.bn_beta, *layer.bn, training);
    if (!layer.terminal) y = leaky_relu(y, T(0.2));
    return y;
}

template <typename T>
std::vector<Var<T>> Network<T>::forward_seq(const std::vector<TensorT<T>>& frames,
                                            const std::vector<TensorT<T>>& mask, bool training) {
    if (cfg_.kind == "cnn2d") return forward_cnn(frames, training);
    return forward_ef(frames, mask, training);
}

template <typename T>
std::vector<Var<T>> Network<T>::forward_ef(const std::vector<TensorT<T>>& frames,
                                           const std::vector<TensorT<T>>& mask, bool training) {
    if (static_cast<int>(frames.size()) != cfg_.input_length)
        reject("forward_seq expects " + std::to_string(cfg_.input_length) + " input frames, got " +
               std::to_string(frames.size()));
    if (!mask.empty() && mask.size() != frames.size())
        reject("mask sequence length does not match frames");
    if (fore_rnn_.empty()) reject("network has no forecaster RNN layers");

    const bool batched = frames[0].rank() == 4;
    const int n = batched ? frames[0].extent(0) : 1;
    const int h = frames[0].extent(batched ? 2 : 1);
    const int w = frames[0].extent(batched ? 3 : 2);
    if (h != cfg_.frame_h || w != cfg_.frame_w)
        reject("input frames are " + std::to_string(h) + "x" + std::to_string(w) +
               " but the network expects " + std::to_string(cfg_.frame_h) + "x" +
               std::to_string(cfg_.frame_w));

    // broadcast the coordinate grid over the batch
    TensorT<T> grid_b(batched ? std::vector<int>{n, 2, h, w} : std::vector<int>{2, h, w});
    for (int i = 0; i < n; ++i)
        std::copy(grid_.data(), grid_.data() + grid_.numel(),
                  grid_b.data() + static_cast<int64_t>(i) * grid_.numel());
    Var<T> grid_var = make_input(std::move(grid_b));

    std::unordered_map<std::string, Var<T>> states;
    // encoder pass, bottom-up through the layer list at every step
    for (size_t t = 0; t < frames.size(); ++t) {
        Var<T> ones;
        if (mask.empty()) {
            ones = make_input(TensorT<T>::full(frames[t].shape(), T(1)));
        } else {
            ones = make_input(mask[t]);
        }
        Var<T> cur = concat_channels<T>({make_input(frames[t]), grid_var, ones});
        for (auto& layer : encoder_) {
            if (layer.spec.is_rnn()) {
                auto it = states.find(layer.spec.name);
                Var<T> hprev;
                if (it == states.end()) {
                    std::vector<int> hs = batched
                                              ? std::vector<int>{n, layer.spec.ch_out, layer.spec.out_h,
                                                                 layer.spec.out_w}
                                              : std::vector<int>{layer.spec.ch_out, layer.spec.out_h,
                                                                 layer.spec.out_w};
                    hprev = make_input(TensorT<T>::zeros(hs));
                } else {
                    hprev = it->second;
                }
                Var<T> hnew = layer.convgru ? layer.convgru->step(cur, hprev)
                                            : layer.trajgru->step(cur, hprev);
                states[layer.spec.name] = hnew;
                cur = hnew;
            } else {
                cur = run_layer(layer, cur, training);
            }
        }
    }

    // state handoff to the forecaster (reversed order was validated)
    for (int idx : fore_rnn_) {
        auto& layer = forecaster_[static_cast<size_t>(idx)];
        states[layer.spec.name] = states.at(layer.spec.in_state);
    }

    Var<T> prev_frame = make_input(frames.back());
    std::vector<Var<T>> predictions;
    for (int k = 0; k < cfg_.horizon; ++k) {
        Var<T> cur; // no input link at the top forecaster RNN: zeros are fed
        for (auto& layer : forecaster_) {
            if (layer.spec.is_rnn()) {
                Var<T> hprev = states.at(layer.spec.name);
                Var<T> hnew = layer.convgru ? layer.convgru->step(cur, hprev)
                                            : layer.trajgru->step(cur, hprev);
                states[layer.spec.name] = hnew;
                cur = hnew;
            } else if (layer.spec.type == "dfn-head") {
                cur = layer.dfn->apply(cur, prev_frame);
            } else {
                cur = run_layer(layer, cur, training);
            }
        }
        predictions.push_back(cur);
        prev_frame = cur; // autoregressive source for the DFN head
    }
    return predictions;
}

template <typename T>
std::vector<Var<T>> Network<T>::forward_cnn(const std::vector<TensorT<T>>& frames, bool training) {
    if (static_cast<int>(frames.size()) != cfg_.input_length)
        reject("forward expects " + std::to_string(cfg_.input_length) + " input frames, got " +
               std::to_string(frames.size()));
    const bool batched = frames[0].rank() == 4;
    const int n = batched ? frames[0].extent(0) : 1;
    const int h = frames[0].extent(batched ? 2 : 1);
    const int w = frames[0].extent(batched ? 3 : 2);
    const int j = cfg_.input_length;
    const int64_t plane = static_cast<int64_t>(h) * w;

    // fold the input sequence into channels
    TensorT<T> folded(batched ? std::vector<int>{n, j, h, w} : std::vector<int>{j, h, w});
    for (int i = 0; i < n; ++i)
        for (int t = 0; t < j; ++t)
            std::copy(frames[static_cast<size_t>(t)].data() + static_cast<int64_t>(i) * plane,
                      frames[static_cast<size_t>(t)].data() + static_cast<int64_t>(i + 1) * plane,
                      folded.data() + (static_cast<int64_t>(i) * j + t) * plane);

    Var<T> cur = make_input(std::move(folded));
    for (auto& layer : forecaster_) cur = run_layer(layer, cur, training);

    // unfold the K output channels into frames
    std::vector<Var<T>> out;
    for (int k = 0; k < cfg_.horizon; ++k) out.push_back(slice_channels(cur, k, 1));
    return out;
}

template <typename T>
std::vector<TensorT<T>> Network<T>::predict(const std::vector<TensorT<T>>& frames,
                                            const std::vector<TensorT<T>>& mask) {
    auto preds = forward_seq(frames, mask, false);
    std::vector<TensorT<T>> out;
    out.reserve(preds.size());
    for (auto& p : preds) {
        TensorT<T> v = p->value;
        for (int64_t i = 0; i < v.numel(); ++i) v[i] = std::min(T(1), std::max(T(0), v[i]));
        out.push_back(std::move(v));
    }
    return out;
}

template <typename T>
ParamList<T> Network<T>::parameters() const {
    ParamList<T> out;
    auto walk = [&](const std::vector<Layer>& layers) {
        for (const auto& layer : layers) {
            const std::string prefix = layer.spec.name + ".";
            if (layer.convgru) layer.convgru->collect(prefix, out);
            else if (layer.trajgru) layer.trajgru->collect(prefix, out);
            else if (layer.dfn) layer.dfn->collect(prefix, out);
            else {
                if (layer.w) out.emplace_back(prefix + "w", layer.w);
                if (layer.b) out.emplace_back(prefix + "b", layer.b);
                if (layer.use_bn) {
                    out.emplace_back(prefix + "bn.gamma", layer.bn_gamma);
                    out.emplace_back(prefix + "bn.beta", layer.bn_beta);
                }
            }
        }
    };
    walk(encoder_);
    walk(forecaster_);
    return out;
}

template <typename T>
int64_t Network<T>::parameter_count() const {
    return param_count(parameters());
}

template <typename T>
void Network<T>::save_checkpoint(const std::string& path) const {
    ParamList<T> params = parameters();
    std::vector<std::pair<std::string, TensorT<T>>> extra;
    for (const auto& layers : {&encoder_, &forecaster_})
        for (const auto& layer : *layers)
            if (layer.use_bn && layer.bn->initialized) {
                extra.emplace_back(layer.spec.name + ".bn.running_mean", layer.bn->running_mean);
                extra.emplace_back(layer.spec.name + ".bn.running_var", layer.bn->running_var);
            }
    std::vector<std::pair<std::string, const TensorT<T>*>> entries;
    for (const auto& [name, p] : params) entries.emplace_back(name, &p->value);
    for (const auto& [name, t] : extra) entries.emplace_back(name, &t);
    save_manifest(path, entries);
}

template <typename T>
void Network<T>::load_checkpoint(const std::string& path) {
    auto records = load_manifest<T>(path);
    std::unordered_map<std::string, TensorT<T>*> slots;
    for (auto& [name, p] : parameters()) slots[name] = &p->value;
    for (auto& layers : {&encoder_, &forecaster_})
        for (auto& layer : *layers)
            if (layer.use_bn) {
                layer.bn->running_mean = TensorT<T>::zeros({layer.spec.ch_out});
                layer.bn->running_var = TensorT<T>::full({layer.spec.ch_out}, T(1));
                layer.bn->initialized = true;
                slots[layer.spec.name + ".bn.running_mean"] = &layer.bn->running_mean;
                slots[layer.spec.name + ".bn.running_var"] = &layer.bn->running_var;
            }
    for (auto& [name, tensor] : records) {
        auto it = slots.find(name);
        if (it == slots.end())
            throw std::runtime_error("checkpoint entry '" + name + "' has no matching parameter");
        if (it->second->shape() != tensor.shape())
            throw std::runtime_error("checkpoint entry '" + name + "' shape mismatch");
        *it->second = std::move(tensor);
    }
}

template <typename T>
void Network<T>::pin_flows_to_zero(bool on) {
    for (auto& layers : {&encoder_, &forecaster_})
        for (auto& layer : *layers)
            if (layer.trajgru) layer.trajgru->pin_zero_flow = on;
}

template TensorT<float> coordinate_grid<float>(int, int);
template TensorT<double> coordinate_grid<double>(int, int);
template class Network<float>;
template class Network<double>;

} // namespace nwlab
