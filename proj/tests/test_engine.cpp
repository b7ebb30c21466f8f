#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "nwlab/gradcheck.hpp"
#include "nwlab/init.hpp"
#include "nwlab/ops.hpp"
#include "nwlab/optim.hpp"
#include "nwlab/rng.hpp"

using namespace nwlab;

namespace {

TensorT<double> randn(Rng& rng, std::vector<int> shape, double s = 0.5) {
    TensorT<double> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.gaussian(0.0, s);
    return t;
}

// flow values kept away from integer kink points
TensorT<double> random_flow(Rng& rng, std::vector<int> shape) {
    TensorT<double> t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) {
        double v = rng.uniform(-2.0, 2.0);
        const double frac = v - std::floor(v);
        if (frac < 0.05) v += 0.08;
        if (frac > 0.95) v -= 0.08;
        t[i] = v;
    }
    return t;
}

} // namespace

TEST_CASE("tensor shape and data invariants") {
    TensorT<double> t({2, 3, 4});
    CHECK(t.numel() == 24);
    CHECK_THROWS_AS(TensorT<double>({2, 0, 4}), std::invalid_argument);
    CHECK_THROWS_AS(TensorT<double>({2, 2}, std::vector<double>(5, 0.0)), std::invalid_argument);
}

TEST_CASE("tensor serialization round trip") {
    Rng rng(7);
    TensorT<double> t = randn(rng, {3, 5, 4});
    std::stringstream ss;
    write_tensor(ss, t);
    TensorT<double> u = read_tensor<double>(ss);
    REQUIRE(u.shape() == t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) CHECK(u[i] == t[i]);

    std::stringstream bad("bogus");
    CHECK_THROWS(read_tensor<double>(bad));
}

TEST_CASE("conv2d hand-computed example") {
    // 3x3 input, one 2x2 all-ones filter: [[12,16],[24,28]]
    auto x = make_input(TensorT<double>({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
    auto w = make_input(TensorT<double>::full({1, 1, 2, 2}, 1.0));
    auto y = conv2d(x, w, Var<double>{}, ConvSpec{});
    REQUIRE(y->value.shape() == std::vector<int>{1, 2, 2});
    CHECK(y->value[0] == doctest::Approx(12));
    CHECK(y->value[1] == doctest::Approx(16));
    CHECK(y->value[2] == doctest::Approx(24));
    CHECK(y->value[3] == doctest::Approx(28));
}

TEST_CASE("conv2d identity and shape examples") {
    Rng rng(3);
    auto x = make_input(randn(rng, {4, 8, 8}));
    auto w = make_input(TensorT<double>({1, 4, 1, 1}, {1, 0, 0, 0}));
    auto y = conv2d(x, w, Var<double>{}, ConvSpec{});
    for (int i = 0; i < 64; ++i) CHECK(y->value[i] == x->value[i]);

    // Table-style shape: 4 channels at 64x64 through 16 3x3 filters, pad 1
    auto xin = make_input(TensorT<double>::zeros({4, 64, 64}));
    auto w16 = make_input(TensorT<double>::zeros({16, 4, 3, 3}));
    auto b16 = make_input(TensorT<double>::zeros({16}));
    auto out = conv2d(xin, w16, b16, ConvSpec{1, 1, 1, 1, 1, 1});
    CHECK(out->value.shape() == std::vector<int>{16, 64, 64});
}

TEST_CASE("conv2d rejects mismatched channels and empty outputs") {
    auto x = make_input(TensorT<double>::zeros({3, 5, 5}));
    auto w = make_input(TensorT<double>::zeros({2, 4, 3, 3}));
    CHECK_THROWS_WITH_AS(conv2d(x, w, Var<double>{}, ConvSpec{}),
                         doctest::Contains("channel mismatch"), std::invalid_argument);
    auto w2 = make_input(TensorT<double>::zeros({2, 3, 7, 7}));
    CHECK_THROWS_AS(conv2d(x, w2, Var<double>{}, ConvSpec{}), std::invalid_argument);
}

TEST_CASE("transposed_conv2d examples") {
    // adjoint check: 1x1 input through a 2x2 all-ones kernel, stride 2
    auto x = make_input(TensorT<double>({1, 1, 1}, {2.0}));
    auto w = make_input(TensorT<double>::full({1, 1, 2, 2}, 1.0));
    auto y = transposed_conv2d(x, w, Var<double>{}, DeconvSpec{2, 2, 0, 0});
    REQUIRE(y->value.shape() == std::vector<int>{1, 2, 2});
    for (int i = 0; i < 4; ++i) CHECK(y->value[i] == doctest::Approx(2.0));

    // identity with a 1x1 kernel of weight 1
    Rng rng(5);
    auto z = make_input(randn(rng, {1, 4, 4}));
    auto w1 = make_input(TensorT<double>::full({1, 1, 1, 1}, 1.0));
    auto id = transposed_conv2d(z, w1, Var<double>{}, DeconvSpec{});
    for (int i = 0; i < 16; ++i) CHECK(id->value[i] == z->value[i]);

    // Table-style upsampling shape: 16x16 -> 32x32 with 4x4 stride-2 pad-1
    auto big = make_input(TensorT<double>::zeros({3, 16, 16}));
    auto wb = make_input(TensorT<double>::zeros({3, 3, 4, 4}));
    auto up = transposed_conv2d(big, wb, Var<double>{}, DeconvSpec{2, 2, 1, 1});
    CHECK(up->value.shape() == std::vector<int>{3, 32, 32});
}

TEST_CASE("conv and transposed conv are adjoint") {
    Rng rng(11);
    for (int rep = 0; rep < 10; ++rep) {
        const int ci = 2 + static_cast<int>(rng.uniform_index(3));
        const int co = 1 + static_cast<int>(rng.uniform_index(3));
        const int k = 1 + static_cast<int>(rng.uniform_index(4));
        const int s = 1 + static_cast<int>(rng.uniform_index(2));
        const int p = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(k)));
        // choose the small side first so the stride arithmetic is exact
        const int ho = 4 + static_cast<int>(rng.uniform_index(4));
        const int hh = deconv_out_extent(ho, k, s, p);
        if (hh < 1) continue;
        ConvSpec cs{s, s, p, p, 1, 1};
        REQUIRE(conv_out_extent(hh, k, s, p, 1) == ho);
        auto x = make_input(randn(rng, {ci, hh, hh}));
        auto w = make_input(randn(rng, {co, ci, k, k}));
        auto y = make_input(randn(rng, {co, ho, ho}));
        auto cx = conv2d(x, w, Var<double>{}, cs);
        // the deconv weight view (Cin=co, Cout=ci) shares the conv layout
        auto wt = make_input(w->value);
        auto ty = transposed_conv2d(y, wt, Var<double>{}, DeconvSpec{s, s, p, p});
        REQUIRE(ty->value.shape() == x->value.shape());
        double lhs = 0, rhs = 0;
        for (int64_t i = 0; i < cx->value.numel(); ++i) lhs += cx->value[i] * y->value[i];
        for (int64_t i = 0; i < x->value.numel(); ++i) rhs += x->value[i] * ty->value[i];
        CHECK(std::abs(lhs - rhs) / std::max({1.0, std::abs(lhs), std::abs(rhs)}) < 1e-10);
    }
}

TEST_CASE("bilinear_warp identities") {
    Rng rng(13);
    auto img = make_input(randn(rng, {3, 6, 7}));
    auto zu = make_input(TensorT<double>::zeros({6, 7}));
    auto zv = make_input(TensorT<double>::zeros({6, 7}));
    auto same = bilinear_warp(img, zu, zv);
    for (int64_t i = 0; i < img->value.numel(); ++i) CHECK(same->value[i] == img->value[i]);

    // V = 1: row i reads row i+1, last row sees the zero exterior
    auto v1 = make_input(TensorT<double>::full({6, 7}, 1.0));
    auto shifted = bilinear_warp(img, zu, v1);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 7; ++j) {
                const double expect = i + 1 < 6 ? img->value.at(c, i + 1, j) : 0.0;
                CHECK(shifted->value.at(c, i, j) == expect);
            }
}

TEST_CASE("bilinear_warp fractional hand value") {
    // I = [[1,2],[3,4]], U = 0.5, V = 0: output(0,0) = 0.5*1 + 0.5*2 = 1.5
    auto img = make_input(TensorT<double>({1, 2, 2}, {1, 2, 3, 4}));
    auto u = make_input(TensorT<double>::full({2, 2}, 0.5));
    auto v = make_input(TensorT<double>::zeros({2, 2}));
    auto y = bilinear_warp(img, u, v);
    CHECK(y->value.at(0, 0, 0) == doctest::Approx(1.5));
    CHECK(y->value.at(0, 1, 0) == doctest::Approx(3.5));
    // column 1 samples x=1.5: half weight on the zero exterior
    CHECK(y->value.at(0, 0, 1) == doctest::Approx(1.0));
}

TEST_CASE("bilinear_warp rejects mismatched flows") {
    auto img = make_input(TensorT<double>::zeros({1, 4, 4}));
    auto u = make_input(TensorT<double>::zeros({3, 3}));
    CHECK_THROWS_AS(bilinear_warp(img, u, u), std::invalid_argument);
}

TEST_CASE("activation examples") {
    auto x = make_input(TensorT<double>({3}, {-1.0, 0.0, 2.0}));
    auto y = leaky_relu(x, 0.2);
    CHECK(y->value[0] == doctest::Approx(-0.2));
    CHECK(y->value[1] == 0.0);
    CHECK(y->value[2] == doctest::Approx(2.0));

    auto s = sigmoid(make_input(TensorT<double>({1}, {0.0})));
    CHECK(s->value[0] == doctest::Approx(0.5));

    auto a = make_input(TensorT<double>::zeros({2, 4, 4}));
    auto b = make_input(TensorT<double>::zeros({3, 4, 4}));
    auto c = concat_channels<double>({a, b});
    CHECK(c->value.shape() == std::vector<int>{5, 4, 4});

    CHECK_THROWS_AS(add(make_input(TensorT<double>::zeros({2})),
                        make_input(TensorT<double>::zeros({3}))),
                    std::invalid_argument);
}

TEST_CASE("finite differences: every differentiable op, 20+ random cases") {
    Rng rng(101);
    double worst = 0;
    for (int rep = 0; rep < 20; ++rep) {
        const int hh = 5 + static_cast<int>(rng.uniform_index(4));
        const int ci = 1 + static_cast<int>(rng.uniform_index(3));
        const int co = 1 + static_cast<int>(rng.uniform_index(3));
        const int k = 1 + static_cast<int>(rng.uniform_index(3));
        const int s = 1 + static_cast<int>(rng.uniform_index(2));
        const int p = 1;
        ConvSpec cs{s, s, p, p, 1, 1};
        auto x = make_input(randn(rng, {ci, hh, hh}));
        auto w = make_input(randn(rng, {co, ci, k, k}));
        auto b = make_input(randn(rng, {co}));
        worst = std::max(worst, finite_difference_check(
                                    [&](const std::vector<Var<double>>& in) {
                                        return conv2d(in[0], in[1], in[2], cs);
                                    },
                                    {x, w, b}));

        ConvSpec dil{1, 1, 2, 2, 2, 2};
        worst = std::max(worst, finite_difference_check(
                                    [&](const std::vector<Var<double>>& in) {
                                        return conv2d(in[0], in[1], in[2], dil);
                                    },
                                    {x, make_input(randn(rng, {co, ci, 3, 3})), b}));

        auto dw = make_input(randn(rng, {ci, co, k + 1, k + 1}));
        DeconvSpec ds{2, 2, k > 1 ? 1 : 0, k > 1 ? 1 : 0};
        worst = std::max(worst, finite_difference_check(
                                    [&](const std::vector<Var<double>>& in) {
                                        return transposed_conv2d(in[0], in[1], in[2], ds);
                                    },
                                    {x, dw, b}));

        auto img = make_input(randn(rng, {ci, hh, hh}));
        auto u = make_input(random_flow(rng, {hh, hh}));
        auto v = make_input(random_flow(rng, {hh, hh}));
        worst = std::max(worst, finite_difference_check(
                                    [&](const std::vector<Var<double>>& in) {
                                        return bilinear_warp(in[0], in[1], in[2]);
                                    },
                                    {img, u, v}));

        auto e1 = make_input(randn(rng, {ci, 4, 4}));
        auto e2 = make_input(randn(rng, {ci, 4, 4}));
        worst = std::max(
            worst, finite_difference_check(
                       [&](const std::vector<Var<double>>& in) {
                           auto z = mul(sigmoid(in[0]), one_minus(leaky_relu(in[1], 0.2)));
                           return add(z, scale(in[0], 0.3));
                       },
                       {e1, e2}));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("finite differences: losses") {
    Rng rng(55);
    double worst = 0;
    for (int rep = 0; rep < 20; ++rep) {
        auto pred = make_input(randn(rng, {1, 4, 4}));
        TensorT<double> truth = randn(rng, {1, 4, 4});
        // keep residuals away from the |.| kink
        for (int64_t i = 0; i < truth.numel(); ++i)
            if (std::abs(pred->value[i] - truth[i]) < 0.05) truth[i] += 0.1;
        TensorT<double> wts(truth.shape());
        for (int64_t i = 0; i < wts.numel(); ++i) wts[i] = rng.uniform(0.0, 30.0);
        worst = std::max(worst, finite_difference_check(
                                    [&](const std::vector<Var<double>>& in) {
                                        return add(weighted_se_sum(in[0], truth, wts),
                                                   weighted_ae_sum(in[0], truth, wts));
                                    },
                                    {pred}));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("finite differences: batch_norm and local_filter_apply") {
    Rng rng(77);
    double worst = 0;
    for (int rep = 0; rep < 5; ++rep) {
        auto x = make_input(randn(rng, {2, 3, 4, 4}, 1.0));
        auto g = make_input(randn(rng, {3}, 0.3));
        auto bt = make_input(randn(rng, {3}, 0.3));
        for (int64_t i = 0; i < g->value.numel(); ++i) g->value[i] += 1.0;
        BNState<double> st;
        worst = std::max(worst, finite_difference_check(
                                    [&](const std::vector<Var<double>>& in) {
                                        BNState<double> fresh;
                                        return batch_norm(in[0], in[1], in[2], fresh, true);
                                    },
                                    {x, g, bt}));

        auto logits = make_input(randn(rng, {9, 5, 5}, 1.0));
        auto frame = make_input(randn(rng, {1, 5, 5}, 1.0));
        worst = std::max(worst, finite_difference_check(
                                    [&](const std::vector<Var<double>>& in) {
                                        return local_filter_apply(in[0], in[1], 3);
                                    },
                                    {logits, frame}));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("clip_global_norm") {
    TensorT<double> g1({2}, {3.0, 4.0});   // norm 5
    TensorT<double> g2({3}, {8.66025403784438646763723170752936, 5.0, 10.0});
    // joint norm: sqrt(25 + 75 + 25 + 100) = 15
    {
        TensorT<double> a = g1, b = g2;
        const double s = clip_global_norm<double>({&a, &b}, 7.5);
        CHECK(s == doctest::Approx(0.5));
        CHECK(a[0] == doctest::Approx(1.5));
        // idempotence: a second application is an exact no-op
        TensorT<double> a2 = a, b2 = b;
        CHECK(clip_global_norm<double>({&a2, &b2}, 7.5) == 1.0);
        for (int i = 0; i < 2; ++i) CHECK(a2[i] == a[i]);
        for (int i = 0; i < 3; ++i) CHECK(b2[i] == b[i]);
    }
    {
        TensorT<double> a = g1;
        CHECK(clip_global_norm<double>({&a}, 10.0) == 1.0);
        CHECK(a[0] == 3.0);
    }
    {
        TensorT<double> z = TensorT<double>::zeros({4});
        CHECK(clip_global_norm<double>({&z}, 10.0) == 1.0);
        CHECK(clip_global_norm<double>({}, 10.0) == 1.0);
    }
    Rng rng(21);
    for (int rep = 0; rep < 50; ++rep) {
        TensorT<double> a = randn(rng, {7}, 3.0);
        TensorT<double> b = randn(rng, {5}, 3.0);
        clip_global_norm<double>({&a, &b}, 1.0);
        TensorT<double> a2 = a, b2 = b;
        CHECK(clip_global_norm<double>({&a2, &b2}, 1.0) == 1.0);
    }
}

TEST_CASE("adam first step magnitude and zero-gradient fixed point") {
    auto p = make_param(TensorT<double>({1}, {1.0}));
    Adam<double> opt({p}, 1e-4, 0.5, 0.999, 1e-8);
    p->ensure_grad()[0] = 3.7;
    opt.step();
    // bias-corrected ratio is 1 on the first step, so |update| = lr
    CHECK(std::abs(1.0 - p->value[0]) == doctest::Approx(1e-4).epsilon(1e-3));

    auto q = make_param(TensorT<double>({3}, {1.0, -2.0, 0.5}));
    Adam<double> opt2({q});
    for (int i = 0; i < 10; ++i) {
        q->ensure_grad();
        q->zero_grad();
        opt2.step();
    }
    CHECK(q->value[0] == 1.0);
    CHECK(q->value[1] == -2.0);
    CHECK(q->value[2] == 0.5);
}

TEST_CASE("adagrad first step is -lr * sign(g)") {
    auto p = make_param(TensorT<double>({2}, {1.0, 1.0}));
    AdaGrad<double> opt({p}, 1e-4, 1e-8);
    p->ensure_grad()[0] = 2.5;
    p->grad[1] = -0.3;
    opt.step();
    CHECK(p->value[0] == doctest::Approx(1.0 - 1e-4).epsilon(1e-6));
    CHECK(p->value[1] == doctest::Approx(1.0 + 1e-4).epsilon(1e-6));

    auto q = make_param(TensorT<double>({1}, {4.0}));
    AdaGrad<double> opt2({q});
    q->ensure_grad();
    opt2.step();
    CHECK(q->value[0] == 4.0);
}

TEST_CASE("msra and zero initialization statistics") {
    CHECK(zero_init<double>({3, 4}).numel() == 12);
    for (int64_t i = 0; i < 12; ++i) CHECK(zero_init<double>({3, 4})[i] == 0.0);

    Rng rng(2024);
    const int fan_in = 50;
    const int n = 100000;
    TensorT<double> t = msra_init<double>({n}, fan_in, rng);
    double mean = 0;
    for (int64_t i = 0; i < n; ++i) mean += t[i];
    mean /= n;
    double var = 0;
    for (int64_t i = 0; i < n; ++i) var += (t[i] - mean) * (t[i] - mean);
    var /= n - 1;
    const double target = 2.0 / fan_in; // 0.04
    CHECK(std::abs(var - target) / target < 0.05);
    CHECK(std::abs(mean) < 3.0 * std::sqrt(target / n));
}

TEST_CASE("fixed seed reproducibility") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        auto x = make_input(randn(rng, {2, 6, 6}));
        auto w = make_param(randn(rng, {3, 2, 3, 3}));
        auto b = make_param(randn(rng, {3}));
        Adam<double> opt({w, b}, 1e-3, 0.5);
        double footprint = 0;
        for (int it = 0; it < 5; ++it) {
            zero_grads<double>({w, b});
            auto y = conv2d(x, w, b, ConvSpec{1, 1, 1, 1, 1, 1});
            auto loss = weighted_se_sum(y, TensorT<double>::zeros(y->value.shape()),
                                        TensorT<double>::full(y->value.shape(), 1.0));
            backward(loss);
            clip_global_norm_params<double>({w, b}, 10.0);
            opt.step();
            footprint = loss->value[0];
        }
        return std::make_pair(footprint, w->value[0]);
    };
    auto [l1, w1] = run(99);
    auto [l2, w2] = run(99);
    CHECK(l1 == l2);
    CHECK(w1 == w2);
}
