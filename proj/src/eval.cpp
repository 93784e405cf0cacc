#include "epg/eval.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "epg/core/kernels.hpp"

namespace epg::eval {

Tensor extract_features(const nn::Encoder& enc, const Tensor& images, double t_feat) {
    const int64_t N = images.dim(0);
    if (images.dim(2) != enc.cfg.resolution || images.dim(3) != enc.cfg.resolution)
        throw std::invalid_argument("extract_features: resolution mismatch");
    const int64_t d = enc.cfg.dim_enc;
    const int64_t chw = images.numel() / N;
    Tensor feats({N, d});
    const int64_t chunk = 64;
    for (int64_t lo = 0; lo < N; lo += chunk) {
        const int64_t n = std::min(chunk, N - lo);
        Tensor batch({n, 3, enc.cfg.resolution, enc.cfg.resolution});
        std::memcpy(batch.data(), images.data() + lo * chw,
                    sizeof(double) * static_cast<size_t>(n * chw));
        const std::vector<double> ts(static_cast<size_t>(n), t_feat);
        nn::Encoder::Acts acts;
        enc.fwd(batch, ts, {}, acts);
        for (int64_t i = 0; i < n; ++i) {
            const double* src = acts.out.cls.data() + i * d;
            double norm = std::sqrt(kern::sumsq(src, d));
            norm = std::max(norm, 1e-12);
            double* dst = feats.data() + (lo + i) * d;
            for (int64_t j = 0; j < d; ++j) dst[j] = src[j] / norm;
        }
    }
    return feats;
}

FeatureStats gaussian_stats(const Tensor& features) {
    const int64_t d = features.dim(features.ndim() - 1);
    const int64_t n = features.numel() / d;
    if (n < 2) throw std::invalid_argument("gaussian_stats: need at least 2 samples");
    FeatureStats s;
    s.count = n;
    s.mean = Tensor({d});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) s.mean[j] += features[i * d + j];
    for (int64_t j = 0; j < d; ++j) s.mean[j] /= static_cast<double>(n);
    s.cov = Tensor({d, d});
    for (int64_t i = 0; i < n; ++i) {
        const double* row = features.data() + i * d;
        for (int64_t a = 0; a < d; ++a) {
            const double da = row[a] - s.mean[a];
            for (int64_t b = 0; b < d; ++b) s.cov[a * d + b] += da * (row[b] - s.mean[b]);
        }
    }
    const double denom = static_cast<double>(n - 1);
    for (int64_t i = 0; i < d * d; ++i) s.cov[i] /= denom;
    return s;
}

FeatureStats merge_stats(const FeatureStats& a, const FeatureStats& b) {
    const int64_t d = a.mean.numel();
    if (b.mean.numel() != d) throw std::invalid_argument("merge_stats: dimension mismatch");
    const double na = static_cast<double>(a.count), nb = static_cast<double>(b.count);
    const double n = na + nb;
    FeatureStats out;
    out.count = a.count + b.count;
    out.mean = Tensor({d});
    for (int64_t j = 0; j < d; ++j) out.mean[j] = (na * a.mean[j] + nb * b.mean[j]) / n;
    // Recombine sums of squares: S = cov*(n-1) + n * mu mu^T per shard.
    out.cov = Tensor({d, d});
    for (int64_t i = 0; i < d; ++i)
        for (int64_t j = 0; j < d; ++j) {
            const double sa = a.cov[i * d + j] * (na - 1.0) + na * a.mean[i] * a.mean[j];
            const double sb = b.cov[i * d + j] * (nb - 1.0) + nb * b.mean[i] * b.mean[j];
            out.cov[i * d + j] = (sa + sb - n * out.mean[i] * out.mean[j]) / (n - 1.0);
        }
    return out;
}

double frechet_distance(const FeatureStats& a, const FeatureStats& b) {
    const int64_t d = a.mean.numel();
    if (b.mean.numel() != d) throw std::invalid_argument("frechet_distance: dimension mismatch");
    using Mat = Eigen::MatrixXd;
    Eigen::Map<const Mat> S1(a.cov.data(), d, d);
    Eigen::Map<const Mat> S2(b.cov.data(), d, d);

    double mean_term = 0.0;
    for (int64_t j = 0; j < d; ++j) {
        const double diff = a.mean[j] - b.mean[j];
        mean_term += diff * diff;
    }

    constexpr double kClip = 1e-10;
    Eigen::SelfAdjointEigenSolver<Mat> es1(0.5 * (S1 + S1.transpose()));
    Mat sqrt1 = Mat::Zero(d, d);
    {
        Eigen::VectorXd ev = es1.eigenvalues();
        for (int64_t i = 0; i < d; ++i) ev[i] = ev[i] < kClip ? 0.0 : std::sqrt(ev[i]);
        sqrt1 = es1.eigenvectors() * ev.asDiagonal() * es1.eigenvectors().transpose();
    }
    Mat M = sqrt1 * (0.5 * (S2 + S2.transpose())) * sqrt1;
    M = 0.5 * (M + M.transpose());
    Eigen::SelfAdjointEigenSolver<Mat> esM(M);
    double tr_sqrt = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        const double ev = esM.eigenvalues()[i];
        tr_sqrt += ev < kClip ? 0.0 : std::sqrt(ev);
    }
    return mean_term + S1.trace() + S2.trace() - 2.0 * tr_sqrt;
}

std::vector<double> probe_times(const sched::DiffusionConfig& diff, int64_t resolution,
                                int64_t count) {
    const double lo = diff.sigma_min;
    const double hi = sched::shift_sigma(diff.t_max, resolution, diff);
    std::vector<double> out(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        const double u = count == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(count - 1);
        out[static_cast<size_t>(i)] = std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo)));
    }
    return out;
}

std::vector<double> per_channel_std(const nn::Encoder& enc, const Tensor& images,
                                    const std::vector<double>& probes, Rng& rng) {
    const int64_t N = images.dim(0);
    const int64_t d = enc.cfg.dim_enc;
    std::vector<double> result;
    result.reserve(probes.size());
    for (double t : probes) {
        Tensor noisy = images;
        for (int64_t i = 0; i < noisy.numel(); ++i) noisy[i] += t * rng.normal();
        Tensor feats = extract_features(enc, noisy, t);
        // Per-channel std across samples, then channel mean.
        double mean_std = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double mu = 0.0;
            for (int64_t i = 0; i < N; ++i) mu += feats[i * d + j];
            mu /= static_cast<double>(N);
            double var = 0.0;
            for (int64_t i = 0; i < N; ++i) {
                const double dv = feats[i * d + j] - mu;
                var += dv * dv;
            }
            var /= static_cast<double>(N - 1);
            mean_std += std::sqrt(var);
        }
        result.push_back(mean_std / static_cast<double>(d));
    }
    return result;
}

}  // namespace epg::eval
