#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "epg/core/rng.hpp"

namespace epg::sched {

// Global SDE constants shared by every training and sampling stage.
struct DiffusionConfig {
    double t_max = 80.0;      // top of the time horizon
    double sigma_min = 0.002;
    double sigma_data = 0.5;  // data std entering the boundary coefficients
    double rho = 7.0;         // grid warping exponent
    double shift_base = 64.0; // reference resolution for noise-level shifting

    void validate() const;
};

// Ascending discretization of [sigma_min, t_max].
struct TimeGrid {
    std::vector<double> times;

    int64_t size() const { return static_cast<int64_t>(times.size()); }
    double operator[](int64_t i) const { return times[static_cast<size_t>(i)]; }
    void validate(const DiffusionConfig& cfg) const;
};

// Step-count annealing for pre-training: doubles from n0 to n1 over the run.
struct DiscretizationSchedule {
    int64_t n0 = 20;
    int64_t n1 = 1280;
    int64_t total_steps = 0;

    void validate() const;
};

// Ratio schedule for continuous-time consistency pairs: rho(k) rises from 1/2
// toward 1 in `stages` doubling stages.
struct RatioSchedule {
    int64_t stages = 8;
    int64_t total_steps = 0;

    double ratio_at(int64_t k) const;
};

// Temperature interpolation for the representation-consistency objective.
// tau2 anneals toward tau1 over training on a cosine; position on the
// trajectory interpolates linearly between tau1 and the annealed tau2.
struct TemperatureSchedule {
    double tau1 = 0.1;
    double tau2_init = 0.2;
    int64_t total_steps = 0;

    void validate() const;
};

// Warped grid with exact endpoints sigma_min and t_max.
TimeGrid karras_grid(int64_t n, const DiffusionConfig& cfg);

// Piecewise-constant doubling step count, n0 at k=0 up to n1 at the end.
int64_t icm_steps(int64_t k, const DiscretizationSchedule& sched);

// Lognormal draw mapped to the nearest grid element; index forced >= 1 so a
// predecessor pair always exists. Returns (index, grid time).
std::pair<int64_t, double> sample_sigma_discrete(const TimeGrid& grid, Rng& rng, double mu = -1.2,
                                                 double sigma = 1.6);
// Same mapping given an already-drawn sigma (test hook / forced draws).
std::pair<int64_t, double> nearest_grid_index(const TimeGrid& grid, double sigma_draw);

// Continuous (t, r) pair for consistency tuning: t clamped lognormal,
// r = t * ratio_at(k), all within [sigma_min, t_max].
std::pair<double, double> ect_pair_times(int64_t k, const RatioSchedule& sched,
                                         const DiffusionConfig& cfg, Rng& rng, double mu = -0.4,
                                         double sigma = 1.6);
std::pair<double, double> ect_pair_times_forced(int64_t k, const RatioSchedule& sched,
                                                const DiffusionConfig& cfg, double t_draw);

// Multiplicative noise-level shift for a target resolution.
double shift_sigma(double t, int64_t resolution, const DiffusionConfig& cfg);

// Temperature at normalized trajectory position u and training progress p.
double temperature_at(double u, double p, const TemperatureSchedule& sched);

// Boundary coefficients (c_skip, c_out): exactly (1, 0) at t = 0.
std::pair<double, double> cskip_cout(double t, const DiffusionConfig& cfg);

// 1 / (t_hi - t_lo); rejects degenerate gaps.
double loss_weight(double t_hi, double t_lo);

}  // namespace epg::sched
