#include "epg/schedules.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace epg::sched {

void DiffusionConfig::validate() const {
    if (!(sigma_min > 0.0 && sigma_min < t_max))
        throw std::invalid_argument("DiffusionConfig: need 0 < sigma_min < t_max");
    if (!(sigma_data > 0.0)) throw std::invalid_argument("DiffusionConfig: sigma_data must be > 0");
    if (!(rho >= 1.0)) throw std::invalid_argument("DiffusionConfig: rho must be >= 1");
    if (!(shift_base >= 1.0)) throw std::invalid_argument("DiffusionConfig: shift_base must be >= 1");
}

void TimeGrid::validate(const DiffusionConfig& cfg) const {
    if (size() < 2) throw std::invalid_argument("TimeGrid: need at least 2 points");
    if (times.front() != cfg.sigma_min || times.back() != cfg.t_max)
        throw std::invalid_argument("TimeGrid: endpoints must be sigma_min and t_max");
    for (size_t i = 1; i < times.size(); ++i)
        if (!(times[i] > times[i - 1])) throw std::invalid_argument("TimeGrid: not increasing");
}

void DiscretizationSchedule::validate() const {
    if (n0 > n1) throw std::invalid_argument("DiscretizationSchedule: n0 > n1");
    int64_t r = n1 / n0;
    if (n0 * r != n1 || (r & (r - 1)) != 0)
        throw std::invalid_argument("DiscretizationSchedule: n1/n0 must be a power of 2");
    if (total_steps <= 0) throw std::invalid_argument("DiscretizationSchedule: total_steps <= 0");
}

void TemperatureSchedule::validate() const {
    if (tau1 > tau2_init) throw std::invalid_argument("TemperatureSchedule: tau1 > tau2_init");
}

TimeGrid karras_grid(int64_t n, const DiffusionConfig& cfg) {
    if (n < 2) throw std::invalid_argument("karras_grid: n must be >= 2");
    cfg.validate();
    TimeGrid grid;
    grid.times.resize(static_cast<size_t>(n));
    const double inv_rho = 1.0 / cfg.rho;
    const double lo = std::pow(cfg.sigma_min, inv_rho);
    const double hi = std::pow(cfg.t_max, inv_rho);
    for (int64_t i = 0; i < n; ++i) {
        const double u = static_cast<double>(i) / static_cast<double>(n - 1);
        grid.times[static_cast<size_t>(i)] = std::pow(lo + u * (hi - lo), cfg.rho);
    }
    // Endpoints exact regardless of pow round-trip.
    grid.times.front() = cfg.sigma_min;
    grid.times.back() = cfg.t_max;
    return grid;
}

int64_t icm_steps(int64_t k, const DiscretizationSchedule& sched) {
    sched.validate();
    if (k < 0 || k >= sched.total_steps) throw std::invalid_argument("icm_steps: step out of range");
    const double levels = std::log2(static_cast<double>(sched.n1) / static_cast<double>(sched.n0));
    const int64_t stage = static_cast<int64_t>(
        std::floor(static_cast<double>(k) * (levels + 1.0) / static_cast<double>(sched.total_steps)));
    const int64_t n = sched.n0 * (int64_t(1) << stage);
    return std::min(n, sched.n1);
}

std::pair<int64_t, double> nearest_grid_index(const TimeGrid& grid, double sigma_draw) {
    const auto& t = grid.times;
    int64_t best = 0;
    double best_dist = std::abs(t[0] - sigma_draw);
    for (size_t i = 1; i < t.size(); ++i) {
        const double d = std::abs(t[i] - sigma_draw);
        if (d < best_dist) {  // ties break toward the lower index
            best_dist = d;
            best = static_cast<int64_t>(i);
        }
    }
    if (best < 1) best = 1;  // a predecessor must exist
    return {best, t[static_cast<size_t>(best)]};
}

std::pair<int64_t, double> sample_sigma_discrete(const TimeGrid& grid, Rng& rng, double mu,
                                                 double sigma) {
    return nearest_grid_index(grid, rng.lognormal(mu, sigma));
}

double RatioSchedule::ratio_at(int64_t k) const {
    if (stages < 1) throw std::invalid_argument("RatioSchedule: stages must be >= 1");
    if (total_steps <= 0) throw std::invalid_argument("RatioSchedule: total_steps <= 0");
    if (k < 0 || k >= total_steps) throw std::invalid_argument("RatioSchedule: step out of range");
    const int64_t stage = std::min(
        stages - 1, static_cast<int64_t>(std::floor(static_cast<double>(k) * static_cast<double>(stages) /
                                                    static_cast<double>(total_steps))));
    return 1.0 - std::exp2(-static_cast<double>(1 + stage));
}

std::pair<double, double> ect_pair_times_forced(int64_t k, const RatioSchedule& sched,
                                                const DiffusionConfig& cfg, double t_draw) {
    cfg.validate();
    const double t = std::clamp(t_draw, cfg.sigma_min, cfg.t_max);
    const double ratio = sched.ratio_at(k);
    const double r = std::clamp(t * ratio, cfg.sigma_min, t);
    return {t, r};
}

std::pair<double, double> ect_pair_times(int64_t k, const RatioSchedule& sched,
                                         const DiffusionConfig& cfg, Rng& rng, double mu,
                                         double sigma) {
    return ect_pair_times_forced(k, sched, cfg, rng.lognormal(mu, sigma));
}

double shift_sigma(double t, int64_t resolution, const DiffusionConfig& cfg) {
    if (resolution < 1) throw std::invalid_argument("shift_sigma: resolution must be >= 1");
    return t * (static_cast<double>(resolution) / cfg.shift_base);
}

double temperature_at(double u, double p, const TemperatureSchedule& sched) {
    sched.validate();
    const double tau2 = sched.tau1 + (sched.tau2_init - sched.tau1) * 0.5 * (1.0 + std::cos(M_PI * p));
    // Written as tau1 + u*(tau2 - tau1) so a fully annealed (or fixed)
    // schedule returns tau1 exactly.
    return sched.tau1 + u * (tau2 - sched.tau1);
}

std::pair<double, double> cskip_cout(double t, const DiffusionConfig& cfg) {
    const double sd2 = cfg.sigma_data * cfg.sigma_data;
    const double denom = t * t + sd2;
    const double c_skip = sd2 / denom;
    const double c_out = t * cfg.sigma_data / std::sqrt(denom);
    return {c_skip, c_out};
}

double loss_weight(double t_hi, double t_lo) {
    if (!(t_hi > t_lo)) throw std::invalid_argument("loss_weight: need t_hi > t_lo");
    return 1.0 / (t_hi - t_lo);
}

}  // namespace epg::sched
