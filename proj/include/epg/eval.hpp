#pragma once

#include <vector>

#include "epg/core/rng.hpp"
#include "epg/core/tensor.hpp"
#include "epg/nnet.hpp"
#include "epg/schedules.hpp"

namespace epg::eval {

struct FeatureStats {
    Tensor mean;  // [d]
    Tensor cov;   // [d, d], unbiased
    int64_t count = 0;
};

// cls features of a frozen encoder at time t_feat, L2-normalized; [N, d].
// Images are encoded in chunks to bound memory.
Tensor extract_features(const nn::Encoder& enc, const Tensor& images, double t_feat);

FeatureStats gaussian_stats(const Tensor& features);

// Exact shard merge (associative reduction over sufficient statistics).
FeatureStats merge_stats(const FeatureStats& a, const FeatureStats& b);

// ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), eigenvalues clipped
// at 1e-10 before the square roots.
double frechet_distance(const FeatureStats& a, const FeatureStats& b);

// 8 log-spaced probe times in [sigma_min, t_max * res / shift_base].
std::vector<double> probe_times(const sched::DiffusionConfig& diff, int64_t resolution,
                                int64_t count = 8);

// For each probe time: perturb, encode, normalize, per-channel std across the
// sample axis; returns the channel-mean std per probe time.
std::vector<double> per_channel_std(const nn::Encoder& enc, const Tensor& images,
                                    const std::vector<double>& probes, Rng& rng);

}  // namespace epg::eval
