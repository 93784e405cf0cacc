#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "epg/core/error.hpp"
#include "epg/sampling.hpp"
#include "testutil.hpp"

using namespace epg;
using namespace epg::sample;
using testutil::tiny_net;

namespace {

// Least-squares slope of y against x.
double fit_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace

TEST_CASE("analytic gaussian denoiser fixed points") {
    ScoreField d = analytic_gaussian_denoiser(0.3, 0.7);
    Tensor x = Tensor::full({4}, 0.3);
    Tensor out = d.eval(x, 5.0, {});
    for (int64_t i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(0.3).epsilon(1e-12));

    Tensor y = Tensor::full({4}, 1.234);
    Tensor out0 = d.eval(y, 0.0, {});
    for (int64_t i = 0; i < 4; ++i) CHECK(out0[i] == 1.234);

    ScoreField d2 = analytic_gaussian_denoiser(0.0, 1.0);
    Tensor z = Tensor::full({1}, 2.0);
    CHECK(d2.eval(z, 1.0, {})[0] == doctest::Approx(1.0).epsilon(1e-12));

    CHECK_THROWS_AS(analytic_gaussian_denoiser(0.0, 0.0), std::invalid_argument);
}

TEST_CASE("zero drift: identity field leaves the state unchanged") {
    ScoreField ident(
        [](const Tensor& x, double, const std::vector<int>&) { return x; });
    sched::DiffusionConfig diff;
    auto times = sampling_times(16, diff, 64);
    Rng rng(1);
    Tensor z({8});
    for (int64_t i = 0; i < 8; ++i) z[i] = rng.normal();
    Tensor out = heun_sample(ident, z, times, {});
    for (int64_t i = 0; i < 8; ++i) CHECK(out[i] == z[i]);
    Tensor out2 = euler_sample(ident, z, times, {});
    for (int64_t i = 0; i < 8; ++i) CHECK(out2[i] == z[i]);
}

TEST_CASE("point-mass oracle: one euler step lands exactly on mu") {
    const double mu = 0.42;
    ScoreField pm([mu](const Tensor& x, double, const std::vector<int>&) {
        return Tensor::full(x.shape(), mu);
    });
    sched::DiffusionConfig diff;
    auto times = sampling_times(1, diff, 64);
    CHECK(times.size() == 1);
    CHECK(times[0] == 80.0);
    Rng rng(2);
    Tensor z({16});
    for (int64_t i = 0; i < 16; ++i) z[i] = 80.0 * rng.normal();
    Tensor out = euler_sample(pm, z, times, {});
    for (int64_t i = 0; i < 16; ++i) CHECK(out[i] == mu);
    CHECK(pm.nfe() == 1);
}

TEST_CASE("sampling grid: descending, shifted, endpoints") {
    sched::DiffusionConfig diff;
    auto times = sampling_times(32, diff, 64);
    CHECK(times.size() == 32);
    CHECK(times.front() == 80.0);
    CHECK(times.back() == doctest::Approx(0.002));
    for (size_t i = 1; i < times.size(); ++i) CHECK(times[i] < times[i - 1]);

    auto shifted = sampling_times(32, diff, 32);
    CHECK(shifted.front() == doctest::Approx(40.0));
    CHECK(shifted.back() == doctest::Approx(0.001));
}

TEST_CASE("gaussian oracle moments via heun, 32 steps") {
    const double mu = 0.2, sigma0 = 0.5;
    ScoreField field = analytic_gaussian_denoiser(mu, sigma0);
    sched::DiffusionConfig diff;
    auto times = sampling_times(32, diff, 64);

    Rng rng(7);
    const int64_t n = 20000;
    Tensor z({n});
    for (int64_t i = 0; i < n; ++i) z[i] = diff.t_max * rng.normal();
    Tensor out = heun_sample(field, z, times, {});

    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += out[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) var += (out[i] - mean) * (out[i] - mean);
    var /= static_cast<double>(n - 1);

    CHECK(std::abs(mean - mu) <= 0.02 * sigma0);
    CHECK(std::abs(std::sqrt(var) - sigma0) <= 0.03 * sigma0);
    CHECK(field.nfe() == 2 * 32 - 1);
}

TEST_CASE("convergence order: heun ~2, euler ~1 on the exact flow map") {
    const double mu = 0.15, sigma0 = 0.6;
    ScoreField field = analytic_gaussian_denoiser(mu, sigma0);
    sched::DiffusionConfig diff;

    Rng rng(11);
    Tensor z({64});
    for (int64_t i = 0; i < 64; ++i) z[i] = diff.t_max * rng.normal();
    Tensor exact = gaussian_flow_exact(z, mu, sigma0, diff.t_max, 0.0);

    std::vector<double> log_n, log_err_heun, log_err_euler;
    for (int64_t steps : {8, 16, 32, 64}) {
        auto times = sampling_times(steps, diff, 64);
        Tensor h = heun_sample(field, z, times, {});
        Tensor e = euler_sample(field, z, times, {});
        double se_h = 0, se_e = 0;
        for (int64_t i = 0; i < 64; ++i) {
            se_h += (h[i] - exact[i]) * (h[i] - exact[i]);
            se_e += (e[i] - exact[i]) * (e[i] - exact[i]);
        }
        log_n.push_back(std::log2(static_cast<double>(steps)));
        log_err_heun.push_back(std::log2(std::sqrt(se_h / 64)));
        log_err_euler.push_back(std::log2(std::sqrt(se_e / 64)));
    }
    const double slope_heun = -fit_slope(log_n, log_err_heun);
    const double slope_euler = -fit_slope(log_n, log_err_euler);
    CHECK(slope_heun == doctest::Approx(2.0).epsilon(0.2));
    CHECK(slope_euler == doctest::Approx(1.0).epsilon(0.4));
}

TEST_CASE("NFE accounting is exact") {
    ScoreField ident([](const Tensor& x, double, const std::vector<int>&) { return x; });
    sched::DiffusionConfig diff;
    Tensor z({4});
    for (int64_t steps : {1, 2, 8, 32}) {
        auto times = sampling_times(steps, diff, 64);
        ident.reset_nfe();
        heun_sample(ident, z, times, {});
        CHECK(ident.nfe() == expected_nfe(Method::Heun, steps));
        ident.reset_nfe();
        euler_sample(ident, z, times, {});
        CHECK(ident.nfe() == expected_nfe(Method::Euler, steps));
    }
    Rng rr(1);
    ident.reset_nfe();
    cm_sample(ident, z, 40.0, 0.001, {}, 1, rr);
    CHECK(ident.nfe() == 1);
    ident.reset_nfe();
    cm_sample(ident, z, 40.0, 0.001, {}, 2, rr);
    CHECK(ident.nfe() == 2);
}

TEST_CASE("cfg_blend: identity at w=1, interval gating, arithmetic") {
    Tensor cond = Tensor::full({3}, 2.0);
    Tensor uncond = Tensor::full({3}, 1.0);

    Tensor b1 = cfg_blend(cond, uncond, 1.0, 1.0, 0.19, 1.61);
    for (int64_t i = 0; i < 3; ++i) CHECK(b1[i] == 2.0);

    // Outside (0.19, 1.61]: cond regardless of w.
    Tensor b2 = cfg_blend(cond, uncond, 2.5, 5.0, 0.19, 1.61);
    for (int64_t i = 0; i < 3; ++i) CHECK(b2[i] == 2.0);
    Tensor b3 = cfg_blend(cond, uncond, 2.5, 0.19, 0.19, 1.61);  // boundary: open below
    for (int64_t i = 0; i < 3; ++i) CHECK(b3[i] == 2.0);

    // Inside: uncond + w (cond - uncond) = 1 + 2.5 = 3.5.
    Tensor b4 = cfg_blend(cond, uncond, 2.5, 1.0, 0.19, 1.61);
    for (int64_t i = 0; i < 3; ++i) CHECK(b4[i] == 3.5);
    Tensor b5 = cfg_blend(cond, uncond, 2.5, 1.61, 0.19, 1.61);  // boundary: closed above
    for (int64_t i = 0; i < 3; ++i) CHECK(b5[i] == 3.5);

    CHECK_THROWS_AS(cfg_blend(cond, uncond, 0.5, 1.0, 0.19, 1.61), std::invalid_argument);
}

TEST_CASE("model-backed field: boundary identity and sampler determinism") {
    Rng rng(13);
    sched::DiffusionConfig diff;
    nn::NetworkConfig net = tiny_net(16, 3);
    nn::ModelBundle b = nn::make_finetune_bundle(net, diff, nn::Stage::FinetuneDM, nullptr, rng);
    ScoreField field = model_field(b.enc, *b.dec, diff);

    // Boundary probe: D(x, 0) = x.
    Tensor x = testutil::random_images(2, 16, rng);
    Tensor d0 = field.eval(x, 0.0, {0, 1});
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(d0[i] == x[i]);

    // One-step consistency sampling is deterministic given (z, label).
    const double t_top = sched::shift_sigma(diff.t_max, 16, diff);
    const double smin = sched::shift_sigma(diff.sigma_min, 16, diff);
    Tensor z = testutil::random_images(2, 16, rng, t_top);
    Rng r1(5), r2(5);
    Tensor s1 = cm_sample(field, z, t_top, smin, {0, 1}, 1, r1);
    Tensor s2 = cm_sample(field, z, t_top, smin, {0, 1}, 1, r2);
    for (int64_t i = 0; i < s1.numel(); ++i) CHECK(s1[i] == s2[i]);

    // Two-step output differs from one-step but keeps the shape.
    Rng r3(5);
    Tensor s3 = cm_sample(field, z, t_top, smin, {0, 1}, 2, r3);
    CHECK(s3.same_shape(s1));
    double delta = 0.0;
    for (int64_t i = 0; i < s1.numel(); ++i) delta += std::abs(s3[i] - s1[i]);
    CHECK(delta > 1e-12);

    // Heun on the model field is deterministic given z.
    auto times = sampling_times(4, diff, 16);
    Tensor h1 = heun_sample(field, z, times, {0, 1});
    Tensor h2 = heun_sample(field, z, times, {0, 1});
    for (int64_t i = 0; i < h1.numel(); ++i) CHECK(h1[i] == h2[i]);
}

TEST_CASE("cfg field blends only inside the interval") {
    Rng rng(17);
    sched::DiffusionConfig diff;
    nn::NetworkConfig net = tiny_net(16, 3);
    nn::ModelBundle b = nn::make_finetune_bundle(net, diff, nn::Stage::FinetuneDM, nullptr, rng);

    ScoreField plain = model_field(b.enc, *b.dec, diff);
    ScoreField guided = cfg_field(b.enc, *b.dec, diff, 2.5, 0.19, 1.61);

    Tensor x = testutil::random_images(1, 16, rng);
    std::vector<int> lab = {1};

    // Outside the interval the two fields agree exactly.
    Tensor a = plain.eval(x, 5.0, lab);
    Tensor g = guided.eval(x, 5.0, lab);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == g[i]);

    // Inside, guidance changes the prediction.
    Tensor a2 = plain.eval(x, 1.0, lab);
    Tensor g2 = guided.eval(x, 1.0, lab);
    double delta = 0.0;
    for (int64_t i = 0; i < a2.numel(); ++i) delta += std::abs(a2[i] - g2[i]);
    CHECK(delta > 1e-12);
}

TEST_CASE("non-finite states abort with a step index") {
    ScoreField bad([](const Tensor& x, double, const std::vector<int>&) {
        Tensor out(x.shape());
        out[0] = std::numeric_limits<double>::quiet_NaN();
        return out;
    });
    sched::DiffusionConfig diff;
    auto times = sampling_times(4, diff, 64);
    Tensor z({4});
    CHECK_THROWS_AS(heun_sample(bad, z, times, {}), NumericalError);
}
