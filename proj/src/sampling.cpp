#include "epg/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "epg/core/error.hpp"
#include "epg/core/kernels.hpp"

namespace epg::sample {

void SamplerConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("SamplerConfig: steps must be >= 1");
    if (cfg_scale < 1.0) throw std::invalid_argument("SamplerConfig: cfg_scale must be >= 1");
    if (cfg_lo > cfg_hi) throw std::invalid_argument("SamplerConfig: cfg interval inverted");
}

int64_t expected_nfe(Method m, int64_t steps) {
    switch (m) {
        case Method::Heun: return 2 * steps - 1;
        case Method::Euler: return steps;
        case Method::CmOnestep: return steps;
    }
    return 0;
}

std::vector<double> sampling_times(int64_t steps, const sched::DiffusionConfig& diff,
                                   int64_t resolution) {
    std::vector<double> times;
    if (steps == 1) {
        times.push_back(sched::shift_sigma(diff.t_max, resolution, diff));
        return times;
    }
    const sched::TimeGrid grid = sched::karras_grid(steps, diff);
    times.resize(static_cast<size_t>(steps));
    for (int64_t i = 0; i < steps; ++i)
        times[static_cast<size_t>(i)] = sched::shift_sigma(grid[steps - 1 - i], resolution, diff);
    return times;
}

ScoreField analytic_gaussian_denoiser(double mu, double sigma0) {
    if (!(sigma0 > 0.0)) throw std::invalid_argument("analytic_gaussian_denoiser: sigma0 <= 0");
    const double s2 = sigma0 * sigma0;
    return ScoreField([mu, s2](const Tensor& x, double t, const std::vector<int>&) {
        Tensor d(x.shape());
        const double t2 = t * t;
        const double denom = s2 + t2;
        for (int64_t i = 0; i < x.numel(); ++i) d[i] = (s2 * x[i] + t2 * mu) / denom;
        return d;
    });
}

Tensor gaussian_flow_exact(const Tensor& z, double mu, double sigma0, double t_from, double t_to) {
    const double s2 = sigma0 * sigma0;
    const double scale = std::sqrt((s2 + t_to * t_to) / (s2 + t_from * t_from));
    Tensor out(z.shape());
    for (int64_t i = 0; i < z.numel(); ++i) out[i] = mu + (z[i] - mu) * scale;
    return out;
}

Tensor cfg_blend(const Tensor& cond, const Tensor& uncond, double w, double t, double t_lo,
                 double t_hi) {
    if (w < 1.0) throw std::invalid_argument("cfg_blend: w must be >= 1");
    if (!(t > t_lo && t <= t_hi)) return cond;
    Tensor out(cond.shape());
    for (int64_t i = 0; i < cond.numel(); ++i) out[i] = uncond[i] + w * (cond[i] - uncond[i]);
    return out;
}

ScoreField model_field(const nn::Encoder& enc, const nn::Decoder& dec,
                       const sched::DiffusionConfig& diff) {
    return ScoreField([&enc, &dec, diff](const Tensor& x, double t, const std::vector<int>& labels) {
        const std::vector<double> ts(static_cast<size_t>(x.dim(0)), t);
        return nn::denoise_fwd(enc, dec, diff, x, ts, labels, false, nullptr, nullptr);
    });
}

ScoreField cfg_field(const nn::Encoder& enc, const nn::Decoder& dec,
                     const sched::DiffusionConfig& diff, double w, double t_lo, double t_hi) {
    return ScoreField(
        [&enc, &dec, diff, w, t_lo, t_hi](const Tensor& x, double t, const std::vector<int>& labels) {
            const std::vector<double> ts(static_cast<size_t>(x.dim(0)), t);
            Tensor cond = nn::denoise_fwd(enc, dec, diff, x, ts, labels, false, nullptr, nullptr);
            if (w == 1.0 || !(t > t_lo && t <= t_hi)) return cond;
            const std::vector<int> null_labels(static_cast<size_t>(x.dim(0)), -1);
            Tensor uncond =
                nn::denoise_fwd(enc, dec, diff, x, ts, null_labels, false, nullptr, nullptr);
            return cfg_blend(cond, uncond, w, t, t_lo, t_hi);
        });
}

namespace {
void check_finite(const Tensor& x, int64_t step_index) {
    for (int64_t i = 0; i < x.numel(); ++i)
        if (!std::isfinite(x[i]))
            throw NumericalError("sampler: non-finite state at step " + std::to_string(step_index));
}

// dx/dt = (x - D(x,t)) / t, written into `drift`.
void drift_of(const Tensor& x, const Tensor& denoised, double t, Tensor& drift) {
    drift = Tensor(x.shape());
    const double inv_t = 1.0 / t;
    for (int64_t i = 0; i < x.numel(); ++i) drift[i] = (x[i] - denoised[i]) * inv_t;
}
}  // namespace

Tensor heun_sample(const ScoreField& field, const Tensor& z, const std::vector<double>& times,
                   const std::vector<int>& labels) {
    Tensor x = z;
    const int64_t n = static_cast<int64_t>(times.size());
    for (int64_t i = 0; i + 1 < n; ++i) {
        const double t0 = times[static_cast<size_t>(i)], t1 = times[static_cast<size_t>(i) + 1];
        const double h = t1 - t0;
        Tensor d1;
        drift_of(x, field.eval(x, t0, labels), t0, d1);
        Tensor xe = x;
        kern::axpy(h, d1.data(), xe.data(), xe.numel());
        Tensor d2;
        drift_of(xe, field.eval(xe, t1, labels), t1, d2);
        for (int64_t j = 0; j < x.numel(); ++j) x[j] += h * 0.5 * (d1[j] + d2[j]);
        check_finite(x, i);
    }
    // Final first-order step to t = 0: lands on the denoised estimate.
    x = field.eval(x, times.back(), labels);
    check_finite(x, n - 1);
    return x;
}

Tensor euler_sample(const ScoreField& field, const Tensor& z, const std::vector<double>& times,
                    const std::vector<int>& labels) {
    Tensor x = z;
    const int64_t n = static_cast<int64_t>(times.size());
    for (int64_t i = 0; i + 1 < n; ++i) {
        const double t0 = times[static_cast<size_t>(i)], t1 = times[static_cast<size_t>(i) + 1];
        Tensor d1;
        drift_of(x, field.eval(x, t0, labels), t0, d1);
        kern::axpy(t1 - t0, d1.data(), x.data(), x.numel());
        check_finite(x, i);
    }
    x = field.eval(x, times.back(), labels);
    check_finite(x, n - 1);
    return x;
}

Tensor cm_sample(const ScoreField& field, const Tensor& z, double t_top, double sigma_min_shifted,
                 const std::vector<int>& labels, int64_t steps, Rng& renoise_rng) {
    Tensor x = field.eval(z, t_top, labels);
    check_finite(x, 0);
    if (steps >= 2) {
        const double t_mid = std::sqrt(sigma_min_shifted * t_top);
        Tensor x_mid = x;
        for (int64_t i = 0; i < x_mid.numel(); ++i) x_mid[i] += t_mid * renoise_rng.normal();
        x = field.eval(x_mid, t_mid, labels);
        check_finite(x, 1);
    }
    return x;
}

}  // namespace epg::sample
