#include "nwlab/cells.hpp"

#include <stdexcept>

namespace nwlab {

template <typename T>
int64_t param_count(const ParamList<T>& params) {
    int64_t n = 0;
    for (const auto& [name, p] : params) n += p->value.numel();
    return n;
}

namespace {

// pad preserving the spatial extent for an odd kernel with dilation
int same_pad(int kernel, int dilation) {
    if (kernel % 2 == 0)
        throw std::invalid_argument("state-to-state kernel must be odd to preserve extent");
    return dilation * (kernel - 1) / 2;
}

template <typename T>
void check_state(const Var<T>& h, int ch, const char* what) {
    const auto& s = h->value.shape();
    const int c = s.size() == 4 ? s[1] : s[0];
    if ((s.size() != 3 && s.size() != 4) || c != ch)
        throw std::invalid_argument(std::string(what) + ": state has shape " +
                                    shape_to_string(s) + ", expected " + std::to_string(ch) +
                                    " channels");
}

} // namespace

// --- ConvGRU -----------------------------------------------------------------

template <typename T>
ConvGRUCell<T> ConvGRUCell<T>::create(int ci, int ch, int in_kernel, int in_stride, int in_pad,
                                      int state_kernel, int state_dilation, Rng& rng) {
    ConvGRUCell<T> c;
    c.in_channels = ci;
    c.state_channels = ch;
    c.in_spec = {in_stride, in_stride, in_pad, in_pad, 1, 1};
    const int sp = same_pad(state_kernel, state_dilation);
    c.state_spec = {1, 1, sp, sp, state_dilation, state_dilation};
    const int fan_in = ci * in_kernel * in_kernel;
    const int fan_state = ch * state_kernel * state_kernel;
    auto wconv = [&](int fan, std::vector<int> shape) {
        return make_param(msra_init<T>(std::move(shape), fan, rng));
    };
    c.wxz = wconv(fan_in, {ch, ci, in_kernel, in_kernel});
    c.wxr = wconv(fan_in, {ch, ci, in_kernel, in_kernel});
    c.wxh = wconv(fan_in, {ch, ci, in_kernel, in_kernel});
    c.whz = wconv(fan_state, {ch, ch, state_kernel, state_kernel});
    c.whr = wconv(fan_state, {ch, ch, state_kernel, state_kernel});
    c.whh = wconv(fan_state, {ch, ch, state_kernel, state_kernel});
    c.bz = make_param(msra_init<T>({ch}, fan_state, rng));
    c.br = make_param(msra_init<T>({ch}, fan_state, rng));
    c.bh = make_param(msra_init<T>({ch}, fan_state, rng));
    return c;
}

template <typename T>
Var<T> ConvGRUCell<T>::step(const Var<T>& x, const Var<T>& h_prev) const {
    check_state(h_prev, state_channels, "convgru_step");
    Var<T> zin = conv2d(h_prev, whz, Var<T>{}, state_spec);
    Var<T> rin = conv2d(h_prev, whr, Var<T>{}, state_spec);
    Var<T> hin = conv2d(h_prev, whh, Var<T>{}, state_spec);
    Var<T> cand_x;
    if (x) {
        zin = add(zin, conv2d(x, wxz, Var<T>{}, in_spec));
        rin = add(rin, conv2d(x, wxr, Var<T>{}, in_spec));
        cand_x = conv2d(x, wxh, Var<T>{}, in_spec);
    }
    Var<T> z = sigmoid(add_channel_bias(zin, bz));
    Var<T> r = sigmoid(add_channel_bias(rin, br));
    Var<T> cand = mul(r, hin);
    if (cand_x) cand = add(cand_x, cand);
    Var<T> hprime = leaky_relu(add_channel_bias(cand, bh), slope);
    return add(mul(one_minus(z), hprime), mul(z, h_prev));
}

template <typename T>
void ConvGRUCell<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + "wxz", wxz);
    out.emplace_back(prefix + "wxr", wxr);
    out.emplace_back(prefix + "wxh", wxh);
    out.emplace_back(prefix + "whz", whz);
    out.emplace_back(prefix + "whr", whr);
    out.emplace_back(prefix + "whh", whh);
    out.emplace_back(prefix + "bz", bz);
    out.emplace_back(prefix + "br", br);
    out.emplace_back(prefix + "bh", bh);
}

// --- FlowGenerator -----------------------------------------------------------

template <typename T>
FlowGenerator<T> FlowGenerator<T>::create(int ci, int ch, int links) {
    if (links < 1) throw std::invalid_argument("flow generator needs links >= 1");
    FlowGenerator<T> g;
    g.in_channels = ci;
    g.state_channels = ch;
    g.links = links;
    g.w1 = make_param(zero_init<T>({g.hidden, ci + ch, 5, 5}));
    g.b1 = make_param(zero_init<T>({g.hidden}));
    g.w2 = make_param(zero_init<T>({2 * links, g.hidden, 5, 5}));
    g.b2 = make_param(zero_init<T>({2 * links}));
    return g;
}

template <typename T>
std::pair<Var<T>, Var<T>> FlowGenerator<T>::flows(const Var<T>& x, const Var<T>& h_prev) const {
    Var<T> xin = x;
    if (!xin) {
        // missing input link: zeros of the declared input shape
        std::vector<int> shape = h_prev->value.shape();
        shape[shape.size() == 4 ? 1 : 0] = in_channels;
        xin = make_input(TensorT<T>::zeros(shape));
    }
    Var<T> cat = concat_channels<T>({xin, h_prev});
    ConvSpec s{1, 1, 2, 2, 1, 1};
    Var<T> hdn = leaky_relu(conv2d(cat, w1, b1, s), slope);
    Var<T> uv = conv2d(hdn, w2, b2, s);
    return {slice_channels(uv, 0, links), slice_channels(uv, links, links)};
}

template <typename T>
void FlowGenerator<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + "gamma.l1.w", w1);
    out.emplace_back(prefix + "gamma.l1.b", b1);
    out.emplace_back(prefix + "gamma.l2.w", w2);
    out.emplace_back(prefix + "gamma.l2.b", b2);
}

// --- TrajGRU -----------------------------------------------------------------

template <typename T>
TrajGRUCell<T> TrajGRUCell<T>::create(int ci, int ch, int in_kernel, int in_stride, int in_pad,
                                      int links, Rng& rng) {
    if (links < 1) throw std::invalid_argument("trajgru needs links >= 1");
    TrajGRUCell<T> c;
    c.in_channels = ci;
    c.state_channels = ch;
    c.links = links;
    c.in_spec = {in_stride, in_stride, in_pad, in_pad, 1, 1};
    const int fan_in = ci * in_kernel * in_kernel;
    c.wxz = make_param(msra_init<T>({ch, ci, in_kernel, in_kernel}, fan_in, rng));
    c.wxr = make_param(msra_init<T>({ch, ci, in_kernel, in_kernel}, fan_in, rng));
    c.wxh = make_param(msra_init<T>({ch, ci, in_kernel, in_kernel}, fan_in, rng));
    for (int l = 0; l < links; ++l) {
        c.lwz.push_back(make_param(msra_init<T>({ch, ch, 1, 1}, ch, rng)));
        c.lwr.push_back(make_param(msra_init<T>({ch, ch, 1, 1}, ch, rng)));
        c.lwh.push_back(make_param(msra_init<T>({ch, ch, 1, 1}, ch, rng)));
    }
    c.bz = make_param(msra_init<T>({ch}, ch, rng));
    c.br = make_param(msra_init<T>({ch}, ch, rng));
    c.bh = make_param(msra_init<T>({ch}, ch, rng));
    c.gamma = FlowGenerator<T>::create(ci, ch, links);
    return c;
}

template <typename T>
Var<T> TrajGRUCell<T>::step(const Var<T>& x, const Var<T>& h_prev) const {
    check_state(h_prev, state_channels, "trajgru_step");
    ConvSpec one{1, 1, 0, 0, 1, 1};

    std::vector<Var<T>> zs, rs, hs;
    if (pin_zero_flow) {
        for (int l = 0; l < links; ++l) {
            zs.push_back(conv2d(h_prev, lwz[l], Var<T>{}, one));
            rs.push_back(conv2d(h_prev, lwr[l], Var<T>{}, one));
            hs.push_back(conv2d(h_prev, lwh[l], Var<T>{}, one));
        }
    } else {
        auto [u, v] = gamma.flows(x, h_prev);
        for (int l = 0; l < links; ++l) {
            Var<T> warped = bilinear_warp(h_prev, slice_channels(u, l, 1), slice_channels(v, l, 1));
            zs.push_back(conv2d(warped, lwz[l], Var<T>{}, one));
            rs.push_back(conv2d(warped, lwr[l], Var<T>{}, one));
            hs.push_back(conv2d(warped, lwh[l], Var<T>{}, one));
        }
    }
    Var<T> zin = sum_vars(zs);
    Var<T> rin = sum_vars(rs);
    Var<T> hin = sum_vars(hs);
    Var<T> cand_x;
    if (x) {
        zin = add(zin, conv2d(x, wxz, Var<T>{}, in_spec));
        rin = add(rin, conv2d(x, wxr, Var<T>{}, in_spec));
        cand_x = conv2d(x, wxh, Var<T>{}, in_spec);
    }
    Var<T> z = sigmoid(add_channel_bias(zin, bz));
    Var<T> r = sigmoid(add_channel_bias(rin, br));
    Var<T> cand = mul(r, hin);
    if (cand_x) cand = add(cand_x, cand);
    Var<T> hprime = leaky_relu(add_channel_bias(cand, bh), slope);
    return add(mul(one_minus(z), hprime), mul(z, h_prev));
}

template <typename T>
void TrajGRUCell<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + "wxz", wxz);
    out.emplace_back(prefix + "wxr", wxr);
    out.emplace_back(prefix + "wxh", wxh);
    for (int l = 0; l < links; ++l) {
        const std::string lp = prefix + "link." + std::to_string(l) + ".";
        out.emplace_back(lp + "whz", lwz[l]);
        out.emplace_back(lp + "whr", lwr[l]);
        out.emplace_back(lp + "whh", lwh[l]);
    }
    out.emplace_back(prefix + "bz", bz);
    out.emplace_back(prefix + "br", br);
    out.emplace_back(prefix + "bh", bh);
    gamma.collect(prefix, out);
}

// --- DFN head ----------------------------------------------------------------

template <typename T>
DFNHead<T> DFNHead<T>::create(int ci, int kernel, int pad, int extent, Rng& rng) {
    if (extent % 2 == 0) throw std::invalid_argument("dfn local filter extent must be odd");
    DFNHead<T> h;
    h.extent = extent;
    h.spec = {1, 1, pad, pad, 1, 1};
    const int co = extent * extent;
    const int fan = ci * kernel * kernel;
    h.w = make_param(msra_init<T>({co, ci, kernel, kernel}, fan, rng));
    h.b = make_param(msra_init<T>({co}, fan, rng));
    return h;
}

template <typename T>
Var<T> DFNHead<T>::apply(const Var<T>& features, const Var<T>& prev_frame) const {
    Var<T> logits = conv2d(features, w, b, spec);
    return local_filter_apply(logits, prev_frame, extent);
}

template <typename T>
void DFNHead<T>::collect(const std::string& prefix, ParamList<T>& out) const {
    out.emplace_back(prefix + "w", w);
    out.emplace_back(prefix + "b", b);
}

template int64_t param_count<float>(const ParamList<float>&);
template int64_t param_count<double>(const ParamList<double>&);
template struct ConvGRUCell<float>;
template struct ConvGRUCell<double>;
template struct FlowGenerator<float>;
template struct FlowGenerator<double>;
template struct TrajGRUCell<float>;
template struct TrajGRUCell<double>;
template struct DFNHead<float>;
template struct DFNHead<double>;

} // namespace nwlab
