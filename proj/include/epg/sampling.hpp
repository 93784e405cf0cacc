#pragma once

#include <functional>
#include <vector>

#include "epg/core/rng.hpp"
#include "epg/core/tensor.hpp"
#include "epg/nnet.hpp"
#include "epg/schedules.hpp"

namespace epg::sample {

// A denoised-estimate view D(x, t): model-backed or analytic. Invocations are
// counted so NFE accounting is exact.
class ScoreField {
public:
    using Fn = std::function<Tensor(const Tensor& x, double t, const std::vector<int>& labels)>;

    explicit ScoreField(Fn fn) : fn_(std::move(fn)) {}

    Tensor eval(const Tensor& x, double t, const std::vector<int>& labels) const {
        ++nfe_;
        return fn_(x, t, labels);
    }

    int64_t nfe() const { return nfe_; }
    void reset_nfe() const { nfe_ = 0; }

private:
    Fn fn_;
    mutable int64_t nfe_ = 0;
};

enum class Method { Heun, Euler, CmOnestep };

struct SamplerConfig {
    Method method = Method::Heun;
    int64_t steps = 32;
    double cfg_scale = 1.0;
    double cfg_lo = 0.19, cfg_hi = 1.61;

    void validate() const;
};

int64_t expected_nfe(Method m, int64_t steps);

// Descending integration times: the warped grid shifted to `resolution`,
// traversed top-down (the final step to t=0 is implicit in the samplers).
std::vector<double> sampling_times(int64_t steps, const sched::DiffusionConfig& diff,
                                   int64_t resolution);

// Closed-form posterior mean for N(mu, sigma0^2) data under the forward
// process: D(x,t) = (sigma0^2 x + t^2 mu) / (sigma0^2 + t^2).
ScoreField analytic_gaussian_denoiser(double mu, double sigma0);

// Exact PF-ODE flow map for the Gaussian oracle (test/verification oracle):
// x(t_to) = mu + (x(t_from) - mu) * sqrt((sigma0^2 + t_to^2)/(sigma0^2 + t_from^2)).
Tensor gaussian_flow_exact(const Tensor& z, double mu, double sigma0, double t_from, double t_to);

// Blend predictions inside the guidance interval (t_lo, t_hi]; identity at w=1.
Tensor cfg_blend(const Tensor& cond, const Tensor& uncond, double w, double t, double t_lo,
                 double t_hi);

// Model-backed field on EMA or online weights; unconditional when labels empty.
ScoreField model_field(const nn::Encoder& enc, const nn::Decoder& dec,
                       const sched::DiffusionConfig& diff);

// Interval classifier-free guidance wrapper: cond/uncond passes blended per
// cfg_blend. Counts one invocation per node like any other field.
ScoreField cfg_field(const nn::Encoder& enc, const nn::Decoder& dec,
                     const sched::DiffusionConfig& diff, double w, double t_lo, double t_hi);

// Second-order integrator down the grid, first-order on the final step to 0.
// NFE = 2*steps - 1. Throws NumericalError (with step index) on non-finite state.
Tensor heun_sample(const ScoreField& field, const Tensor& z, const std::vector<double>& times,
                   const std::vector<int>& labels);

// First-order variant; NFE = steps.
Tensor euler_sample(const ScoreField& field, const Tensor& z, const std::vector<double>& times,
                    const std::vector<int>& labels);

// One- or two-step consistency sampling from t_top; the two-step variant
// re-noises to the geometric mean of sigma_min' and t_top.
Tensor cm_sample(const ScoreField& field, const Tensor& z, double t_top, double sigma_min_shifted,
                 const std::vector<int>& labels, int64_t steps, Rng& renoise_rng);

}  // namespace epg::sample
