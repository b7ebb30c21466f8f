#include "nwlab/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace nwlab {

namespace {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// View of a rank-3 (C,H,W) or rank-4 (N,C,H,W) tensor.
struct ImgDims {
    int n, c, h, w;
    bool batched;
};

template <typename T>
ImgDims img_dims(const TensorT<T>& t, const char* what) {
    if (t.rank() == 3) return {1, t.extent(0), t.extent(1), t.extent(2), false};
    if (t.rank() == 4) return {t.extent(0), t.extent(1), t.extent(2), t.extent(3), true};
    fail(std::string(what) + " expects a (C,H,W) or (N,C,H,W) tensor, got shape " +
         shape_to_string(t.shape()));
}

std::vector<int> img_shape(const ImgDims& d, int c, int h, int w) {
    if (d.batched) return {d.n, c, h, w};
    return {c, h, w};
}

// im2col for cross-correlation: col is (Ci*kh*kw) x (Ho*Wo), row-major.
template <typename T>
void im2col(const T* x, int ci, int h, int w, int kh, int kw, const ConvSpec& s, int ho, int wo,
            T* col) {
    for (int c = 0; c < ci; ++c) {
        const T* xc = x + static_cast<int64_t>(c) * h * w;
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                T* row = col + (static_cast<int64_t>(c) * kh * kw + u * kw + v) *
                                   (static_cast<int64_t>(ho) * wo);
                for (int i = 0; i < ho; ++i) {
                    int yi = i * s.stride_h - s.pad_h + u * s.dilation_h;
                    if (yi < 0 || yi >= h) {
                        std::memset(row + static_cast<int64_t>(i) * wo, 0, sizeof(T) * wo);
                        continue;
                    }
                    const T* src = xc + static_cast<int64_t>(yi) * w;
                    T* dst = row + static_cast<int64_t>(i) * wo;
                    for (int j = 0; j < wo; ++j) {
                        int xj = j * s.stride_w - s.pad_w + v * s.dilation_w;
                        dst[j] = (xj >= 0 && xj < w) ? src[xj] : T(0);
                    }
                }
            }
        }
    }
}

// scatter-add transpose of im2col
template <typename T>
void col2im_add(const T* col, int ci, int h, int w, int kh, int kw, const ConvSpec& s, int ho,
                int wo, T* x) {
    for (int c = 0; c < ci; ++c) {
        T* xc = x + static_cast<int64_t>(c) * h * w;
        for (int u = 0; u < kh; ++u) {
            for (int v = 0; v < kw; ++v) {
                const T* row = col + (static_cast<int64_t>(c) * kh * kw + u * kw + v) *
                                         (static_cast<int64_t>(ho) * wo);
                for (int i = 0; i < ho; ++i) {
                    int yi = i * s.stride_h - s.pad_h + u * s.dilation_h;
                    if (yi < 0 || yi >= h) continue;
                    T* dst = xc + static_cast<int64_t>(yi) * w;
                    const T* src = row + static_cast<int64_t>(i) * wo;
                    for (int j = 0; j < wo; ++j) {
                        int xj = j * s.stride_w - s.pad_w + v * s.dilation_w;
                        if (xj >= 0 && xj < w) dst[xj] += src[j];
                    }
                }
            }
        }
    }
}

// out(co, p) = sum_{ci,k} W(co,ci,k) * in(ci, sigma(p,k)); per-sample GEMM
template <typename T>
void conv_forward_data(const T* x, const ImgDims& d, const T* wgt, int co, int kh, int kw,
                       const ConvSpec& s, int ho, int wo, T* out, std::vector<T>& scratch) {
    const int64_t krows = static_cast<int64_t>(d.c) * kh * kw;
    const int64_t cols = static_cast<int64_t>(ho) * wo;
    scratch.resize(static_cast<size_t>(krows * cols));
    ConstMatMap<T> wm(wgt, co, krows);
    for (int n = 0; n < d.n; ++n) {
        im2col(x + static_cast<int64_t>(n) * d.c * d.h * d.w, d.c, d.h, d.w, kh, kw, s, ho, wo,
               scratch.data());
        ConstMatMap<T> cm(scratch.data(), krows, cols);
        MatMap<T> om(out + static_cast<int64_t>(n) * co * cols, co, cols);
        om.noalias() = wm * cm;
    }
}

// dx(ci,q) += sum_{co,k,p: sigma(p,k)=q} W(co,ci,k) * g(co,p)
template <typename T>
void conv_backward_data(const T* g, int n_batch, int co, int ho, int wo, const T* wgt, int ci,
                        int kh, int kw, const ConvSpec& s, int h, int w, T* dx,
                        std::vector<T>& scratch) {
    const int64_t krows = static_cast<int64_t>(ci) * kh * kw;
    const int64_t cols = static_cast<int64_t>(ho) * wo;
    scratch.resize(static_cast<size_t>(krows * cols));
    ConstMatMap<T> wm(wgt, co, krows);
    for (int n = 0; n < n_batch; ++n) {
        ConstMatMap<T> gm(g + static_cast<int64_t>(n) * co * cols, co, cols);
        MatMap<T> cm(scratch.data(), krows, cols);
        cm.noalias() = wm.transpose() * gm;
        col2im_add(scratch.data(), ci, h, w, kh, kw, s, ho, wo,
                   dx + static_cast<int64_t>(n) * ci * h * w);
    }
}

// dW(co,ci,k) += sum_p g(co,p) * x(ci, sigma(p,k))
template <typename T>
void conv_backward_weight(const T* x, const ImgDims& d, const T* g, int co, int kh, int kw,
                          const ConvSpec& s, int ho, int wo, T* dw, std::vector<T>& scratch) {
    const int64_t krows = static_cast<int64_t>(d.c) * kh * kw;
    const int64_t cols = static_cast<int64_t>(ho) * wo;
    scratch.resize(static_cast<size_t>(krows * cols));
    MatMap<T> dwm(dw, co, krows);
    for (int n = 0; n < d.n; ++n) {
        im2col(x + static_cast<int64_t>(n) * d.c * d.h * d.w, d.c, d.h, d.w, kh, kw, s, ho, wo,
               scratch.data());
        ConstMatMap<T> cm(scratch.data(), krows, cols);
        ConstMatMap<T> gm(g + static_cast<int64_t>(n) * co * cols, co, cols);
        dwm.noalias() += gm * cm.transpose();
    }
}

template <typename T>
void add_bias_rows(T* out, const T* bias, int n, int co, int64_t plane) {
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < co; ++c) {
            T* dst = out + (static_cast<int64_t>(i) * co + c) * plane;
            const T b = bias[c];
            for (int64_t p = 0; p < plane; ++p) dst[p] += b;
        }
}

template <typename T>
void reduce_bias_grad(const T* g, T* db, int n, int co, int64_t plane) {
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < co; ++c) {
            const T* src = g + (static_cast<int64_t>(i) * co + c) * plane;
            T acc = T(0);
            for (int64_t p = 0; p < plane; ++p) acc += src[p];
            db[c] += acc;
        }
}

} // namespace

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const ConvSpec& spec) {
    const ImgDims d = img_dims(x->value, "conv2d input");
    if (w->value.rank() != 4) fail("conv2d weight must be (Co,Ci,kh,kw), got " +
                                   shape_to_string(w->value.shape()));
    const int co = w->value.extent(0), wci = w->value.extent(1);
    const int kh = w->value.extent(2), kw = w->value.extent(3);
    if (wci != d.c)
        fail("conv2d channel mismatch: input " + shape_to_string(x->value.shape()) +
             " vs weight " + shape_to_string(w->value.shape()));
    if (spec.stride_h < 1 || spec.stride_w < 1 || spec.pad_h < 0 || spec.pad_w < 0 ||
        spec.dilation_h < 1 || spec.dilation_w < 1)
        fail("conv2d requires stride/dilation >= 1 and pad >= 0");
    const int ho = conv_out_extent(d.h, kh, spec.stride_h, spec.pad_h, spec.dilation_h);
    const int wo = conv_out_extent(d.w, kw, spec.stride_w, spec.pad_w, spec.dilation_w);
    if (ho < 1 || wo < 1)
        fail("conv2d produces non-positive output extent for input " +
             shape_to_string(x->value.shape()));
    if (bias && bias->value.shape() != std::vector<int>{co})
        fail("conv2d bias must have shape [" + std::to_string(co) + "]");

    TensorT<T> out(img_shape(d, co, ho, wo));
    std::vector<T> scratch;
    conv_forward_data(x->value.data(), d, w->value.data(), co, kh, kw, spec, ho, wo, out.data(),
                      scratch);
    if (bias) add_bias_rows(out.data(), bias->value.data(), d.n, co, static_cast<int64_t>(ho) * wo);

    std::vector<Var<T>> parents = bias ? std::vector<Var<T>>{x, w, bias}
                                       : std::vector<Var<T>>{x, w};
    Var<T> xp = x, wp = w, bp = bias;
    return make_op_node<T>(std::move(out), std::move(parents), [=](Node<T>& node) {
        const T* g = node.grad.data();
        std::vector<T> sc;
        if (xp->requires_grad)
            conv_backward_data(g, d.n, co, ho, wo, wp->value.data(), d.c, kh, kw, spec, d.h, d.w,
                               xp->ensure_grad().data(), sc);
        if (wp->requires_grad)
            conv_backward_weight(xp->value.data(), d, g, co, kh, kw, spec, ho, wo,
                                 wp->ensure_grad().data(), sc);
        if (bp && bp->requires_grad)
            reduce_bias_grad(g, bp->ensure_grad().data(), d.n, co, static_cast<int64_t>(ho) * wo);
    });
}

template <typename T>
Var<T> transposed_conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& bias,
                         const DeconvSpec& spec) {
    const ImgDims d = img_dims(x->value, "transposed_conv2d input");
    if (w->value.rank() != 4) fail("transposed_conv2d weight must be (Cin,Cout,kh,kw), got " +
                                   shape_to_string(w->value.shape()));
    const int cin = w->value.extent(0), cout = w->value.extent(1);
    const int kh = w->value.extent(2), kw = w->value.extent(3);
    if (cin != d.c)
        fail("transposed_conv2d channel mismatch: input " + shape_to_string(x->value.shape()) +
             " vs weight " + shape_to_string(w->value.shape()));
    const int ho = deconv_out_extent(d.h, kh, spec.stride_h, spec.pad_h);
    const int wo = deconv_out_extent(d.w, kw, spec.stride_w, spec.pad_w);
    if (ho < 1 || wo < 1)
        fail("transposed_conv2d produces non-positive output extent for input " +
             shape_to_string(x->value.shape()));
    if (bias && bias->value.shape() != std::vector<int>{cout})
        fail("transposed_conv2d bias must have shape [" + std::to_string(cout) + "]");

    // adjoint of a conv mapping (cout,ho,wo) -> (cin,h,w)
    ConvSpec cs{spec.stride_h, spec.stride_w, spec.pad_h, spec.pad_w, 1, 1};
    TensorT<T> out(img_shape(d, cout, ho, wo));
    std::vector<T> scratch;
    conv_backward_data(x->value.data(), d.n, cin, d.h, d.w, w->value.data(), cout, kh, kw, cs, ho,
                       wo, out.data(), scratch);
    if (bias)
        add_bias_rows(out.data(), bias->value.data(), d.n, cout, static_cast<int64_t>(ho) * wo);

    std::vector<Var<T>> parents = bias ? std::vector<Var<T>>{x, w, bias}
                                       : std::vector<Var<T>>{x, w};
    Var<T> xp = x, wp = w, bp = bias;
    return make_op_node<T>(std::move(out), std::move(parents), [=](Node<T>& node) {
        const T* g = node.grad.data();
        std::vector<T> sc;
        ImgDims gd{d.n, cout, ho, wo, d.batched};
        if (xp->requires_grad)
            conv_forward_data(g, gd, wp->value.data(), cin, kh, kw, cs, d.h, d.w,
                              xp->ensure_grad().data(), sc);
        if (wp->requires_grad)
            conv_backward_weight(g, gd, xp->value.data(), cin, kh, kw, cs, d.h, d.w,
                                 wp->ensure_grad().data(), sc);
        if (bp && bp->requires_grad)
            reduce_bias_grad(g, bp->ensure_grad().data(), d.n, cout,
                             static_cast<int64_t>(ho) * wo);
    });
}

namespace {

template <typename T>
const T* flow_plane(const TensorT<T>& f, const ImgDims& d, const char* what) {
    // accepts (H,W), (1,H,W), (N,H,W) or (N,1,H,W) with matching extents
    const auto& s = f.shape();
    int64_t plane = static_cast<int64_t>(d.h) * d.w;
    bool ok = false;
    if (s.size() == 2) ok = s[0] == d.h && s[1] == d.w && d.n == 1;
    else if (s.size() == 3) ok = (s[0] == 1 && d.n == 1 && s[1] == d.h && s[2] == d.w) ||
                                 (s[0] == d.n && s[1] == d.h && s[2] == d.w);
    else if (s.size() == 4) ok = s[0] == d.n && s[1] == 1 && s[2] == d.h && s[3] == d.w;
    if (!ok || f.numel() != plane * d.n)
        fail(std::string(what) + " flow shape " + shape_to_string(s) +
             " does not match image spatial extents " + std::to_string(d.h) + "x" +
             std::to_string(d.w));
    return f.data();
}

} // namespace

template <typename T>
Var<T> bilinear_warp(const Var<T>& img, const Var<T>& u, const Var<T>& v) {
    const ImgDims d = img_dims(img->value, "bilinear_warp");
    const T* up = flow_plane(u->value, d, "bilinear_warp u");
    const T* vp = flow_plane(v->value, d, "bilinear_warp v");
    const int64_t plane = static_cast<int64_t>(d.h) * d.w;

    TensorT<T> out(img->value.shape());
    const T* src = img->value.data();
    T* dst = out.data();
    for (int n = 0; n < d.n; ++n) {
        const T* un = up + n * plane;
        const T* vn = vp + n * plane;
        for (int i = 0; i < d.h; ++i) {
            for (int j = 0; j < d.w; ++j) {
                const T y = T(i) + vn[static_cast<int64_t>(i) * d.w + j];
                const T x = T(j) + un[static_cast<int64_t>(i) * d.w + j];
                const int fy = static_cast<int>(std::floor(y));
                const int fx = static_cast<int>(std::floor(x));
                const T wy1 = y - T(fy), wy0 = T(1) - wy1;
                const T wx1 = x - T(fx), wx0 = T(1) - wx1;
                const bool y0 = fy >= 0 && fy < d.h, y1 = fy + 1 >= 0 && fy + 1 < d.h;
                const bool x0 = fx >= 0 && fx < d.w, x1 = fx + 1 >= 0 && fx + 1 < d.w;
                for (int c = 0; c < d.c; ++c) {
                    const T* sc = src + (static_cast<int64_t>(n) * d.c + c) * plane;
                    T acc = T(0);
                    if (y0 && x0) acc += wy0 * wx0 * sc[static_cast<int64_t>(fy) * d.w + fx];
                    if (y0 && x1) acc += wy0 * wx1 * sc[static_cast<int64_t>(fy) * d.w + fx + 1];
                    if (y1 && x0) acc += wy1 * wx0 * sc[(static_cast<int64_t>(fy) + 1) * d.w + fx];
                    if (y1 && x1)
                        acc += wy1 * wx1 * sc[(static_cast<int64_t>(fy) + 1) * d.w + fx + 1];
                    dst[(static_cast<int64_t>(n) * d.c + c) * plane +
                        static_cast<int64_t>(i) * d.w + j] = acc;
                }
            }
        }
    }

    Var<T> ip = img, upv = u, vpv = v;
    return make_op_node<T>(std::move(out), {img, u, v}, [=](Node<T>& node) {
        const T* g = node.grad.data();
        const T* src = ip->value.data();
        const T* un = flow_plane(upv->value, d, "bilinear_warp u");
        const T* vn = flow_plane(vpv->value, d, "bilinear_warp v");
        T* gi = ip->requires_grad ? ip->ensure_grad().data() : nullptr;
        T* gu = upv->requires_grad ? upv->ensure_grad().data() : nullptr;
        T* gv = vpv->requires_grad ? vpv->ensure_grad().data() : nullptr;
        for (int n = 0; n < d.n; ++n) {
            for (int i = 0; i < d.h; ++i) {
                for (int j = 0; j < d.w; ++j) {
                    const int64_t pi = static_cast<int64_t>(i) * d.w + j;
                    const T y = T(i) + vn[n * plane + pi];
                    const T x = T(j) + un[n * plane + pi];
                    const int fy = static_cast<int>(std::floor(y));
                    const int fx = static_cast<int>(std::floor(x));
                    const T wy1 = y - T(fy), wy0 = T(1) - wy1;
                    const T wx1 = x - T(fx), wx0 = T(1) - wx1;
                    const bool y0 = fy >= 0 && fy < d.h, y1 = fy + 1 >= 0 && fy + 1 < d.h;
                    const bool x0 = fx >= 0 && fx < d.w, x1 = fx + 1 >= 0 && fx + 1 < d.w;
                    T du = T(0), dv = T(0);
                    for (int c = 0; c < d.c; ++c) {
                        const int64_t base = (static_cast<int64_t>(n) * d.c + c) * plane;
                        const T go = g[base + pi];
                        if (go == T(0)) continue;
                        T s00 = T(0), s01 = T(0), s10 = T(0), s11 = T(0);
                        if (y0 && x0) s00 = src[base + static_cast<int64_t>(fy) * d.w + fx];
                        if (y0 && x1) s01 = src[base + static_cast<int64_t>(fy) * d.w + fx + 1];
                        if (y1 && x0) s10 = src[base + (static_cast<int64_t>(fy) + 1) * d.w + fx];
                        if (y1 && x1)
                            s11 = src[base + (static_cast<int64_t>(fy) + 1) * d.w + fx + 1];
                        if (gi) {
                            if (y0 && x0) gi[base + static_cast<int64_t>(fy) * d.w + fx] += go * wy0 * wx0;
                            if (y0 && x1)
                                gi[base + static_cast<int64_t>(fy) * d.w + fx + 1] += go * wy0 * wx1;
                            if (y1 && x0)
                                gi[base + (static_cast<int64_t>(fy) + 1) * d.w + fx] += go * wy1 * wx0;
                            if (y1 && x1)
                                gi[base + (static_cast<int64_t>(fy) + 1) * d.w + fx + 1] +=
                                    go * wy1 * wx1;
                        }
                        // d/dx: tent derivative, one-sided inside the sampled cell
                        du += go * (wy0 * (s01 - s00) + wy1 * (s11 - s10));
                        dv += go * (wx0 * (s10 - s00) + wx1 * (s11 - s01));
                    }
                    if (gu) gu[n * plane + pi] += du;
                    if (gv) gv[n * plane + pi] += dv;
                }
            }
        }
    });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T negative_slope) {
    TensorT<T> out(x->value.shape());
    const int64_t n = x->value.numel();
    for (int64_t i = 0; i < n; ++i) {
        const T v = x->value[i];
        out[i] = v >= T(0) ? v : negative_slope * v;
    }
    Var<T> xp = x;
    return make_op_node<T>(std::move(out), {x}, [xp, negative_slope](Node<T>& node) {
        if (!xp->requires_grad) return;
        T* gx = xp->ensure_grad().data();
        const int64_t n = node.grad.numel();
        for (int64_t i = 0; i < n; ++i)
            gx[i] += node.grad[i] * (xp->value[i] >= T(0) ? T(1) : negative_slope);
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
    TensorT<T> out(x->value.shape());
    const int64_t n = x->value.numel();
    for (int64_t i = 0; i < n; ++i) {
        const T v = x->value[i];
        if (v >= T(0)) {
            out[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out[i] = e / (T(1) + e);
        }
    }
    Var<T> xp = x;
    return make_op_node<T>(std::move(out), {x}, [xp](Node<T>& node) {
        if (!xp->requires_grad) return;
        T* gx = xp->ensure_grad().data();
        const int64_t n = node.grad.numel();
        for (int64_t i = 0; i < n; ++i) {
            const T s = node.value[i];
            gx[i] += node.grad[i] * s * (T(1) - s);
        }
    });
}

namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
    if (!a->value.same_shape(b->value))
        fail(std::string(what) + " shape mismatch: " + shape_to_string(a->value.shape()) + " vs " +
             shape_to_string(b->value.shape()));
}

} // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "add");
    TensorT<T> out(a->value.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
    Var<T> ap = a, bp = b;
    return make_op_node<T>(std::move(out), {a, b}, [ap, bp](Node<T>& node) {
        const int64_t n = node.grad.numel();
        if (ap->requires_grad) {
            T* g = ap->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) g[i] += node.grad[i];
        }
        if (bp->requires_grad) {
            T* g = bp->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) g[i] += node.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a, b, "mul");
    TensorT<T> out(a->value.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] * b->value[i];
    Var<T> ap = a, bp = b;
    return make_op_node<T>(std::move(out), {a, b}, [ap, bp](Node<T>& node) {
        const int64_t n = node.grad.numel();
        if (ap->requires_grad) {
            T* g = ap->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) g[i] += node.grad[i] * bp->value[i];
        }
        if (bp->requires_grad) {
            T* g = bp->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) g[i] += node.grad[i] * ap->value[i];
        }
    });
}

template <typename T>
Var<T> one_minus(const Var<T>& x) {
    TensorT<T> out(x->value.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = T(1) - x->value[i];
    Var<T> xp = x;
    return make_op_node<T>(std::move(out), {x}, [xp](Node<T>& node) {
        if (!xp->requires_grad) return;
        T* g = xp->ensure_grad().data();
        const int64_t n = node.grad.numel();
        for (int64_t i = 0; i < n; ++i) g[i] -= node.grad[i];
    });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
    TensorT<T> out(x->value.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = s * x->value[i];
    Var<T> xp = x;
    return make_op_node<T>(std::move(out), {x}, [xp, s](Node<T>& node) {
        if (!xp->requires_grad) return;
        T* g = xp->ensure_grad().data();
        const int64_t n = node.grad.numel();
        for (int64_t i = 0; i < n; ++i) g[i] += s * node.grad[i];
    });
}

template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
    const ImgDims d = img_dims(x->value, "add_channel_bias");
    if (bias->value.rank() != 1 || bias->value.extent(0) != d.c)
        fail("add_channel_bias: bias shape " + shape_to_string(bias->value.shape()) +
             " does not match channels of " + shape_to_string(x->value.shape()));
    TensorT<T> out = x->value;
    add_bias_rows(out.data(), bias->value.data(), d.n, d.c, static_cast<int64_t>(d.h) * d.w);
    Var<T> xp = x, bp = bias;
    return make_op_node<T>(std::move(out), {x, bias}, [xp, bp, d](Node<T>& node) {
        const int64_t n = node.grad.numel();
        if (xp->requires_grad) {
            T* g = xp->ensure_grad().data();
            for (int64_t i = 0; i < n; ++i) g[i] += node.grad[i];
        }
        if (bp->requires_grad)
            reduce_bias_grad(node.grad.data(), bp->ensure_grad().data(), d.n, d.c,
                             static_cast<int64_t>(d.h) * d.w);
    });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
    if (xs.empty()) fail("concat_channels needs at least one tensor");
    const ImgDims d0 = img_dims(xs[0]->value, "concat_channels");
    int ctotal = 0;
    for (const auto& x : xs) {
        const ImgDims d = img_dims(x->value, "concat_channels");
        if (d.n != d0.n || d.h != d0.h || d.w != d0.w || d.batched != d0.batched)
            fail("concat_channels extents mismatch: " + shape_to_string(xs[0]->value.shape()) +
                 " vs " + shape_to_string(x->value.shape()));
        ctotal += d.c;
    }
    const int64_t plane = static_cast<int64_t>(d0.h) * d0.w;
    TensorT<T> out(img_shape(d0, ctotal, d0.h, d0.w));
    for (int n = 0; n < d0.n; ++n) {
        int64_t coff = 0;
        for (const auto& x : xs) {
            const int c = img_dims(x->value, "concat_channels").c;
            std::memcpy(out.data() + (static_cast<int64_t>(n) * ctotal + coff) * plane,
                        x->value.data() + static_cast<int64_t>(n) * c * plane,
                        sizeof(T) * static_cast<size_t>(c * plane));
            coff += c;
        }
    }
    std::vector<Var<T>> parents = xs;
    return make_op_node<T>(std::move(out), xs, [parents, d0, ctotal, plane](Node<T>& node) {
        for (int n = 0; n < d0.n; ++n) {
            int64_t coff = 0;
            for (const auto& x : parents) {
                const int c = x->value.rank() == 4 ? x->value.extent(1) : x->value.extent(0);
                if (x->requires_grad) {
                    T* g = x->ensure_grad().data() + static_cast<int64_t>(n) * c * plane;
                    const T* src =
                        node.grad.data() + (static_cast<int64_t>(n) * ctotal + coff) * plane;
                    for (int64_t i = 0; i < c * plane; ++i) g[i] += src[i];
                }
                coff += c;
            }
        }
    });
}

template <typename T>
Var<T> slice_channels(const Var<T>& x, int first, int count) {
    const ImgDims d = img_dims(x->value, "slice_channels");
    if (first < 0 || count < 1 || first + count > d.c)
        fail("slice_channels range [" + std::to_string(first) + "," +
             std::to_string(first + count) + ") out of bounds for " +
             shape_to_string(x->value.shape()));
    const int64_t plane = static_cast<int64_t>(d.h) * d.w;
    TensorT<T> out(img_shape(d, count, d.h, d.w));
    for (int n = 0; n < d.n; ++n)
        std::memcpy(out.data() + static_cast<int64_t>(n) * count * plane,
                    x->value.data() + (static_cast<int64_t>(n) * d.c + first) * plane,
                    sizeof(T) * static_cast<size_t>(count * plane));
    Var<T> xp = x;
    return make_op_node<T>(std::move(out), {x}, [xp, d, first, count, plane](Node<T>& node) {
        if (!xp->requires_grad) return;
        T* g = xp->ensure_grad().data();
        for (int n = 0; n < d.n; ++n) {
            const T* src = node.grad.data() + static_cast<int64_t>(n) * count * plane;
            T* dst = g + (static_cast<int64_t>(n) * d.c + first) * plane;
            for (int64_t i = 0; i < count * plane; ++i) dst[i] += src[i];
        }
    });
}

template <typename T>
Var<T> sum_vars(const std::vector<Var<T>>& xs) {
    if (xs.empty()) fail("sum_vars needs at least one tensor");
    Var<T> acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BNState<T>& state,
                  bool training, T momentum, T eps) {
    const ImgDims d = img_dims(x->value, "batch_norm");
    if (gamma->value.rank() != 1 || gamma->value.extent(0) != d.c ||
        beta->value.rank() != 1 || beta->value.extent(0) != d.c)
        fail("batch_norm gamma/beta must have shape [" + std::to_string(d.c) + "]");
    const int64_t plane = static_cast<int64_t>(d.h) * d.w;
    const int64_t m = static_cast<int64_t>(d.n) * plane;

    if (!state.initialized) {
        state.running_mean = TensorT<T>::zeros({d.c});
        state.running_var = TensorT<T>::full({d.c}, T(1));
        state.initialized = true;
    }

    auto mean = std::make_shared<TensorT<T>>(TensorT<T>::zeros({d.c}));
    auto ivar = std::make_shared<TensorT<T>>(TensorT<T>::zeros({d.c}));
    if (training) {
        for (int c = 0; c < d.c; ++c) {
            T acc = T(0);
            for (int n = 0; n < d.n; ++n) {
                const T* src = x->value.data() + (static_cast<int64_t>(n) * d.c + c) * plane;
                for (int64_t p = 0; p < plane; ++p) acc += src[p];
            }
            const T mu = acc / T(m);
            T vacc = T(0);
            for (int n = 0; n < d.n; ++n) {
                const T* src = x->value.data() + (static_cast<int64_t>(n) * d.c + c) * plane;
                for (int64_t p = 0; p < plane; ++p) {
                    const T dv = src[p] - mu;
                    vacc += dv * dv;
                }
            }
            const T var = vacc / T(m);
            (*mean)[c] = mu;
            (*ivar)[c] = T(1) / std::sqrt(var + eps);
            const T unbiased = m > 1 ? vacc / T(m - 1) : var;
            state.running_mean[c] = momentum * state.running_mean[c] + (T(1) - momentum) * mu;
            state.running_var[c] = momentum * state.running_var[c] + (T(1) - momentum) * unbiased;
        }
    } else {
        for (int c = 0; c < d.c; ++c) {
            (*mean)[c] = state.running_mean[c];
            (*ivar)[c] = T(1) / std::sqrt(state.running_var[c] + eps);
        }
    }

    TensorT<T> out(x->value.shape());
    for (int n = 0; n < d.n; ++n)
        for (int c = 0; c < d.c; ++c) {
            const T* src = x->value.data() + (static_cast<int64_t>(n) * d.c + c) * plane;
            T* dst = out.data() + (static_cast<int64_t>(n) * d.c + c) * plane;
            const T mu = (*mean)[c], iv = (*ivar)[c];
            const T gm = gamma->value[c], bt = beta->value[c];
            for (int64_t p = 0; p < plane; ++p) dst[p] = gm * (src[p] - mu) * iv + bt;
        }

    Var<T> xp = x, gp = gamma, bp = beta;
    return make_op_node<T>(std::move(out), {x, gamma, beta},
                           [xp, gp, bp, d, plane, m, mean, ivar, training](Node<T>& node) {
        const T* g = node.grad.data();
        for (int c = 0; c < d.c; ++c) {
            const T mu = (*mean)[c], iv = (*ivar)[c], gm = gp->value[c];
            T sum_g = T(0), sum_gx = T(0);
            for (int n = 0; n < d.n; ++n) {
                const T* gn = g + (static_cast<int64_t>(n) * d.c + c) * plane;
                const T* xn = xp->value.data() + (static_cast<int64_t>(n) * d.c + c) * plane;
                for (int64_t p = 0; p < plane; ++p) {
                    sum_g += gn[p];
                    sum_gx += gn[p] * (xn[p] - mu) * iv;
                }
            }
            if (gp->requires_grad) gp->ensure_grad()[c] += sum_gx;
            if (bp->requires_grad) bp->ensure_grad()[c] += sum_g;
            if (xp->requires_grad) {
                T* gx = xp->ensure_grad().data();
                for (int n = 0; n < d.n; ++n) {
                    const T* gn = g + (static_cast<int64_t>(n) * d.c + c) * plane;
                    const T* xn = xp->value.data() + (static_cast<int64_t>(n) * d.c + c) * plane;
                    T* gxn = gx + (static_cast<int64_t>(n) * d.c + c) * plane;
                    if (training) {
                        for (int64_t p = 0; p < plane; ++p) {
                            const T xhat = (xn[p] - mu) * iv;
                            gxn[p] += gm * iv *
                                      (gn[p] - sum_g / T(m) - xhat * sum_gx / T(m));
                        }
                    } else {
                        for (int64_t p = 0; p < plane; ++p) gxn[p] += gm * iv * gn[p];
                    }
                }
            }
        }
    });
}

namespace {

// softmax over the logit channels at one pixel; returns weights into w[121]
template <typename T>
void pixel_softmax(const T* logits, int64_t stride, int count, T* w) {
    T mx = logits[0];
    for (int k = 1; k < count; ++k) mx = std::max(mx, logits[static_cast<int64_t>(k) * stride]);
    T sum = T(0);
    for (int k = 0; k < count; ++k) {
        w[k] = std::exp(logits[static_cast<int64_t>(k) * stride] - mx);
        sum += w[k];
    }
    for (int k = 0; k < count; ++k) w[k] /= sum;
}

} // namespace

template <typename T>
Var<T> local_filter_apply(const Var<T>& logits, const Var<T>& frame, int extent) {
    const ImgDims dl = img_dims(logits->value, "local_filter_apply logits");
    const ImgDims df = img_dims(frame->value, "local_filter_apply frame");
    const int k2 = extent * extent;
    if (dl.c != k2)
        fail("local_filter_apply expects " + std::to_string(k2) + " logit channels, got " +
             shape_to_string(logits->value.shape()));
    if (df.c != 1 || df.h != dl.h || df.w != dl.w || df.n != dl.n)
        fail("local_filter_apply frame shape " + shape_to_string(frame->value.shape()) +
             " does not match logits " + shape_to_string(logits->value.shape()));
    const int r = extent / 2;
    const int64_t plane = static_cast<int64_t>(dl.h) * dl.w;

    TensorT<T> out(frame->value.shape());
    std::vector<T> w(static_cast<size_t>(k2));
    for (int n = 0; n < dl.n; ++n) {
        const T* lg = logits->value.data() + static_cast<int64_t>(n) * k2 * plane;
        const T* fr = frame->value.data() + static_cast<int64_t>(n) * plane;
        T* dst = out.data() + static_cast<int64_t>(n) * plane;
        for (int i = 0; i < dl.h; ++i)
            for (int j = 0; j < dl.w; ++j) {
                const int64_t pi = static_cast<int64_t>(i) * dl.w + j;
                pixel_softmax(lg + pi, plane, k2, w.data());
                T acc = T(0);
                int k = 0;
                for (int di = -r; di <= r; ++di)
                    for (int dj = -r; dj <= r; ++dj, ++k) {
                        const int yi = i + di, xj = j + dj;
                        if (yi >= 0 && yi < dl.h && xj >= 0 && xj < dl.w)
                            acc += w[static_cast<size_t>(k)] * fr[static_cast<int64_t>(yi) * dl.w + xj];
                    }
                dst[pi] = acc;
            }
    }

    Var<T> lp = logits, fp = frame;
    return make_op_node<T>(std::move(out), {logits, frame},
                           [lp, fp, dl, extent, k2, r, plane](Node<T>& node) {
        std::vector<T> w(static_cast<size_t>(k2));
        std::vector<T> pv(static_cast<size_t>(k2));
        for (int n = 0; n < dl.n; ++n) {
            const T* lg = lp->value.data() + static_cast<int64_t>(n) * k2 * plane;
            const T* fr = fp->value.data() + static_cast<int64_t>(n) * plane;
            const T* g = node.grad.data() + static_cast<int64_t>(n) * plane;
            T* gl = lp->requires_grad
                        ? lp->ensure_grad().data() + static_cast<int64_t>(n) * k2 * plane
                        : nullptr;
            T* gf = fp->requires_grad ? fp->ensure_grad().data() + static_cast<int64_t>(n) * plane
                                      : nullptr;
            for (int i = 0; i < dl.h; ++i)
                for (int j = 0; j < dl.w; ++j) {
                    const int64_t pi = static_cast<int64_t>(i) * dl.w + j;
                    const T go = g[pi];
                    if (go == T(0)) continue;
                    pixel_softmax(lg + pi, plane, k2, w.data());
                    T s = T(0);
                    int k = 0;
                    for (int di = -r; di <= r; ++di)
                        for (int dj = -r; dj <= r; ++dj, ++k) {
                            const int yi = i + di, xj = j + dj;
                            T v = T(0);
                            if (yi >= 0 && yi < dl.h && xj >= 0 && xj < dl.w) {
                                v = fr[static_cast<int64_t>(yi) * dl.w + xj];
                                if (gf) gf[static_cast<int64_t>(yi) * dl.w + xj] +=
                                    go * w[static_cast<size_t>(k)];
                            }
                            pv[static_cast<size_t>(k)] = v;
                            s += w[static_cast<size_t>(k)] * v;
                        }
                    if (gl)
                        for (k = 0; k < k2; ++k)
                            gl[static_cast<int64_t>(k) * plane + pi] +=
                                go * w[static_cast<size_t>(k)] * (pv[static_cast<size_t>(k)] - s);
                }
        }
    });
}

template <typename T>
Var<T> weighted_se_sum(const Var<T>& pred, TensorT<T> truth, TensorT<T> weights) {
    if (!pred->value.same_shape(truth) || !pred->value.same_shape(weights))
        fail("weighted_se_sum shape mismatch: pred " + shape_to_string(pred->value.shape()) +
             " truth " + shape_to_string(truth.shape()) + " weights " +
             shape_to_string(weights.shape()));
    auto t = std::make_shared<TensorT<T>>(std::move(truth));
    auto w = std::make_shared<TensorT<T>>(std::move(weights));
    T acc = T(0);
    const int64_t n = pred->value.numel();
    for (int64_t i = 0; i < n; ++i) {
        const T dv = pred->value[i] - (*t)[i];
        acc += (*w)[i] * dv * dv;
    }
    TensorT<T> out({1});
    out[0] = acc;
    Var<T> pp = pred;
    return make_op_node<T>(std::move(out), {pred}, [pp, t, w](Node<T>& node) {
        if (!pp->requires_grad) return;
        T* g = pp->ensure_grad().data();
        const T go = node.grad[0];
        const int64_t n = pp->value.numel();
        for (int64_t i = 0; i < n; ++i)
            g[i] += go * T(2) * (*w)[i] * (pp->value[i] - (*t)[i]);
    });
}

template <typename T>
Var<T> weighted_ae_sum(const Var<T>& pred, TensorT<T> truth, TensorT<T> weights) {
    if (!pred->value.same_shape(truth) || !pred->value.same_shape(weights))
        fail("weighted_ae_sum shape mismatch: pred " + shape_to_string(pred->value.shape()) +
             " truth " + shape_to_string(truth.shape()) + " weights " +
             shape_to_string(weights.shape()));
    auto t = std::make_shared<TensorT<T>>(std::move(truth));
    auto w = std::make_shared<TensorT<T>>(std::move(weights));
    T acc = T(0);
    const int64_t n = pred->value.numel();
    for (int64_t i = 0; i < n; ++i) acc += (*w)[i] * std::abs(pred->value[i] - (*t)[i]);
    TensorT<T> out({1});
    out[0] = acc;
    Var<T> pp = pred;
    return make_op_node<T>(std::move(out), {pred}, [pp, t, w](Node<T>& node) {
        if (!pp->requires_grad) return;
        T* g = pp->ensure_grad().data();
        const T go = node.grad[0];
        const int64_t n = pp->value.numel();
        for (int64_t i = 0; i < n; ++i) {
            const T dv = pp->value[i] - (*t)[i];
            if (dv > T(0)) g[i] += go * (*w)[i];
            else if (dv < T(0)) g[i] -= go * (*w)[i];
        }
    });
}

template <typename T>
Var<T> dot_const(const Var<T>& x, TensorT<T> r) {
    if (!x->value.same_shape(r))
        fail("dot_const shape mismatch: " + shape_to_string(x->value.shape()) + " vs " +
             shape_to_string(r.shape()));
    auto rc = std::make_shared<TensorT<T>>(std::move(r));
    T acc = T(0);
    const int64_t n = x->value.numel();
    for (int64_t i = 0; i < n; ++i) acc += x->value[i] * (*rc)[i];
    TensorT<T> out({1});
    out[0] = acc;
    Var<T> xp = x;
    return make_op_node<T>(std::move(out), {x}, [xp, rc](Node<T>& node) {
        if (!xp->requires_grad) return;
        T* g = xp->ensure_grad().data();
        const T go = node.grad[0];
        const int64_t n = xp->value.numel();
        for (int64_t i = 0; i < n; ++i) g[i] += go * (*rc)[i];
    });
}

#define NWLAB_INSTANTIATE_OPS(T)                                                              \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, const ConvSpec&); \
    template Var<T> transposed_conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&,        \
                                         const DeconvSpec&);                                 \
    template Var<T> bilinear_warp<T>(const Var<T>&, const Var<T>&, const Var<T>&);           \
    template Var<T> leaky_relu<T>(const Var<T>&, T);                                         \
    template Var<T> sigmoid<T>(const Var<T>&);                                               \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                    \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                    \
    template Var<T> one_minus<T>(const Var<T>&);                                             \
    template Var<T> scale<T>(const Var<T>&, T);                                              \
    template Var<T> add_channel_bias<T>(const Var<T>&, const Var<T>&);                       \
    template Var<T> concat_channels<T>(const std::vector<Var<T>>&);                          \
    template Var<T> slice_channels<T>(const Var<T>&, int, int);                              \
    template Var<T> sum_vars<T>(const std::vector<Var<T>>&);                                 \
    template Var<T> batch_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, BNState<T>&,  \
                                  bool, T, T);                                               \
    template Var<T> local_filter_apply<T>(const Var<T>&, const Var<T>&, int);                \
    template Var<T> weighted_se_sum<T>(const Var<T>&, TensorT<T>, TensorT<T>);               \
    template Var<T> weighted_ae_sum<T>(const Var<T>&, TensorT<T>, TensorT<T>);               \
    template Var<T> dot_const<T>(const Var<T>&, TensorT<T>);

NWLAB_INSTANTIATE_OPS(float)
NWLAB_INSTANTIATE_OPS(double)

} // namespace nwlab
