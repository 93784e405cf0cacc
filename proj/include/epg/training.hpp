#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "epg/config.hpp"
#include "epg/core/rng.hpp"
#include "epg/io/checkpoint.hpp"
#include "epg/losses.hpp"
#include "epg/nnet.hpp"
#include "epg/trajectory.hpp"

namespace epg::train {

// Decoupled-weight-decay adaptive-moment optimizer over a parameter registry.
// Momentum slots are keyed to the registry order; decay applies only to refs
// flagged for it (weights; never biases, norm gains, or embeddings).
class AdamW {
public:
    AdamW() = default;
    AdamW(const std::vector<nn::ParamRef>& refs, const cfg::OptimizerConfig& cfg);

    // Clips the global grad norm when configured, applies the update, returns
    // the pre-clip norm.
    double step(std::vector<nn::ParamRef>& refs, double lr);

    int64_t t() const { return t_; }
    void set_t(int64_t t) { t_ = t; }
    std::vector<Tensor>& moments_m() { return m_; }
    std::vector<Tensor>& moments_v() { return v_; }
    const cfg::OptimizerConfig& config() const { return cfg_; }

private:
    cfg::OptimizerConfig cfg_;
    std::vector<Tensor> m_, v_;
    int64_t t_ = 0;
};

struct StepRecord {
    int64_t step = 0;
    double lr = 0.0;
    double grad_norm = 0.0;
    double wall_ms = 0.0;
    loss::LossReport report;
};

// One experiment stage: owns the bundle, optimizer, dataset access and the
// deterministic batch pipeline. Batches are a pure function of (seed, step),
// so resume needs nothing beyond the step counter.
class Trainer {
public:
    Trainer(const cfg::RunConfig& cfg, const data::Dataset* dataset);

    // For fine-tuning stages: initialize the encoder from a pre-trained
    // checkpoint (projector dropped, decoder fresh).
    static Trainer from_config(const cfg::RunConfig& cfg, const data::Dataset* dataset);

    StepRecord train_step();

    int64_t step() const { return step_; }
    nn::ModelBundle& bundle() { return bundle_; }
    const cfg::RunConfig& config() const { return cfg_; }

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

    // Batch construction (exposed for tests).
    struct Batch {
        Tensor x0;
        Tensor eps;
        std::vector<int> labels;
        std::vector<int64_t> indices;
    };
    Batch build_batch(int64_t step, bool flip_augment, bool with_labels) const;

private:
    StepRecord pretrain_step();
    StepRecord dm_step();
    StepRecord cm_step();
    void apply_update(loss::LossReport& rep, StepRecord& rec);
    std::vector<nn::ParamRef> refs_without_decoder();
    static void restore_one(const io::LoadedCheckpoint& ck, const std::string& name, Tensor& dst);

    cfg::RunConfig cfg_;
    const data::Dataset* data_ = nullptr;
    nn::ModelBundle bundle_;
    AdamW opt_;
    Rng root_;
    int64_t step_ = 0;
    // Pre-training grid cache, keyed by the current discretization size.
    mutable int64_t cached_n_ = -1;
    mutable sched::TimeGrid cached_grid_;
    sched::TimeGrid dm_grid_;
};

// JSONL training log writer.
class StepLogger {
public:
    explicit StepLogger(const std::string& path);
    ~StepLogger();
    void log(const StepRecord& rec);

private:
    std::FILE* f_ = nullptr;
};

}  // namespace epg::train
