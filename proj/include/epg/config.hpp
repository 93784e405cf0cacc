#pragma once

#include <cstdint>
#include <string>

#include "epg/nnet.hpp"
#include "epg/sampling.hpp"
#include "epg/schedules.hpp"

namespace epg::cfg {

enum class LrSchedule { Constant, Cosine, StepWise };

struct OptimizerConfig {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // 0 disables clipping
    double warmup_frac = 0.02;
    LrSchedule schedule = LrSchedule::Constant;
    // Step-wise decay values and boundaries (fractions of total steps).
    double lr_mid = 3e-5, lr_final = 8e-6;
    double step_frac1 = 2.0 / 3.0, step_frac2 = 5.0 / 6.0;

    void validate() const;
};

double lr_at(int64_t k, int64_t total_steps, const OptimizerConfig& o);

struct SamplerSettings {
    std::string method = "heun";  // heun | euler | cm_onestep
    int64_t steps = 32;
    double cfg_scale = 1.0;
    double cfg_lo = 0.19, cfg_hi = 1.61;
    int64_t cm_steps = 1;

    sample::Method parsed_method() const;
};

struct RunConfig {
    std::string stage = "pretrain";  // pretrain | finetune-dm | finetune-cm
    std::string data_path;
    std::string out_dir = "runs/out";
    std::string init_checkpoint;     // pre-trained encoder for fine-tuning
    std::string feature_checkpoint;  // frozen feature encoder for eval
    uint64_t seed = 0;

    nn::NetworkConfig net;
    sched::DiffusionConfig diff;

    // pre-training
    int64_t pre_n0 = 20, pre_n1 = 1280;
    double tau1 = 0.1, tau2 = 0.2, tau_contrastive = 0.2;
    double ema_momentum = 0.99;

    // diffusion fine-tuning
    int64_t dm_grid_n = 1280;
    double dm_mu = -1.2, dm_sigma = 1.6;
    double label_dropout = 0.1;

    // consistency fine-tuning
    int64_t cm_stages = 8;
    double cm_mu = -0.4, cm_sigma = 1.6;
    double w_aux = 1.0, tau_aux = 0.2;
    double cm_dropout = 0.5;

    // loop
    int64_t steps = 20000, batch = 128;
    double ema_of_online = 0.9999;
    int64_t ckpt_every = 2000, log_every = 50, eval_every = 0;
    int64_t eval_count = 1000;

    OptimizerConfig optim;
    SamplerSettings sampler;

    // ablations
    bool no_consistency_term = false;
    bool no_aux_loss = false;
    bool from_scratch = false;
    bool fixed_tau = false;

    void validate() const;

    // Paper-table defaults per stage (optimizer family, decay, clipping).
    static RunConfig defaults_for(const std::string& stage);
};

// JSON round-trip; unknown keys are rejected with the offending key named.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
std::string serialize_config(const RunConfig& c);

// FNV-1a over the canonical (sorted-key) serialization; stable across the
// textual key order of the input file.
std::string config_hash(const RunConfig& c);

}  // namespace epg::cfg
