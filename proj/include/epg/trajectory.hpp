#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "epg/core/rng.hpp"
#include "epg/core/tensor.hpp"
#include "epg/io/image.hpp"
#include "epg/schedules.hpp"

namespace epg::data {

// Clean image in [-1, 1], label -1 means unlabeled / dropped.
struct CleanSample {
    Tensor x0;  // [3, res, res]
    int label = -1;
};

struct NoisySample {
    Tensor x_t;
    double t = 0.0;
    Tensor eps;  // unit-variance perturbation, stored so x_t is reconstructable
};

// Two points on one trajectory sharing a single perturbation draw.
struct TrajectoryPair {
    NoisySample hi;  // at t_n
    NoisySample lo;  // at t_{n-1}
    int64_t n = 0;
};

struct ViewPair {
    Tensor y1, y2;
};

struct AugmentConfig {
    double crop_scale_min = 0.2, crop_scale_max = 1.0;
    double crop_ratio_min = 3.0 / 4.0, crop_ratio_max = 4.0 / 3.0;
    double flip_p = 0.5;
    double jitter_p = 0.8;
    double brightness = 0.4, contrast = 0.4, saturation = 0.2, hue = 0.1;
    double grayscale_p = 0.2;
    double blur_p_first = 0.5, blur_p_second = 0.1;
    double blur_sigma_min = 0.1, blur_sigma_max = 2.0;

    static AugmentConfig identity() {
        AugmentConfig c;
        c.crop_scale_min = c.crop_scale_max = 1.0;
        c.crop_ratio_min = c.crop_ratio_max = 1.0;
        c.flip_p = c.jitter_p = c.grayscale_p = 0.0;
        c.blur_p_first = c.blur_p_second = 0.0;
        return c;
    }
};

// In-memory dataset: 8-bit images at a fixed resolution plus labels.
// Ordering is the sorted (class, filename) order, so a fixed seed fully
// determines every batch downstream.
class Dataset {
public:
    static Dataset load(const std::string& path, int resolution);

    static Dataset from_images(std::vector<io::ImageU8> images, std::vector<int> labels,
                               int num_classes, int resolution);

    int64_t size() const { return static_cast<int64_t>(images_.size()); }
    int num_classes() const { return num_classes_; }
    int resolution() const { return resolution_; }
    int64_t skipped() const { return skipped_; }

    CleanSample sample(int64_t i) const;
    int label(int64_t i) const { return labels_[static_cast<size_t>(i)]; }
    const io::ImageU8& image(int64_t i) const { return images_[static_cast<size_t>(i)]; }

private:
    std::vector<io::ImageU8> images_;
    std::vector<int> labels_;
    int num_classes_ = 0;
    int resolution_ = 0;
    int64_t skipped_ = 0;
};

// One application of the augmentation pipeline (crop -> flip -> jitter ->
// grayscale -> blur). blur_p selects the asymmetric blur probability.
Tensor augment_once(const Tensor& x, const AugmentConfig& cfg, double blur_p, Rng& rng);

// Two independent pipeline applications of one clean sample.
ViewPair augment_views(const CleanSample& x, const AugmentConfig& cfg, Rng& rng);

Tensor hflip(const Tensor& x);

NoisySample perturb(const CleanSample& x, double t, Rng& rng);
NoisySample perturb_with_eps(const CleanSample& x, double t, const Tensor& eps);

// Adjacent points at (t_n, t_{n-1}) built from one eps draw.
TrajectoryPair temporal_pair(const CleanSample& x, const sched::TimeGrid& grid, int64_t n, Rng& rng);
TrajectoryPair temporal_pair_with_eps(const CleanSample& x, const sched::TimeGrid& grid, int64_t n,
                                      const Tensor& eps);

// Returns -1 (null) with probability p_drop.
int label_dropout(int label, double p_drop, Rng& rng);

// Procedural 10-class shape dataset used at desk scale (and by the tests).
Dataset make_synthetic(int64_t per_class, int num_classes, int resolution, uint64_t seed);
io::ImageU8 synth_image(int cls, int resolution, Rng& rng);
void write_synthetic_tree(const std::string& root, int64_t per_class, int num_classes,
                          int resolution, uint64_t seed);

}  // namespace epg::data
