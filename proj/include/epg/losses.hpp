#pragma once

#include <map>
#include <string>
#include <vector>

#include "epg/core/rng.hpp"
#include "epg/core/tensor.hpp"
#include "epg/nnet.hpp"

namespace epg::loss {

struct LossReport {
    double total = 0.0;
    std::map<std::string, double> components;
    int64_t count = 0;

    bool finite() const;
};

// Contrastive objective on one anchor. Inputs are L2-normalized internally;
// overflow-safe via max subtraction. Empty negative set gives exactly 0.
// dq, when non-null, receives the gradient wrt the raw (unnormalized) q.
double infonce(const Tensor& q, const Tensor& q_pos, const std::vector<Tensor>& negs, double tau,
               Tensor* dq = nullptr);

// Batched in-batch-negatives form: anchor i pairs with Pos row i, every other
// Pos row is a negative. Returns the batch mean; dQ (when non-null) gets the
// gradient of the mean wrt each raw anchor row. Pos rows receive no gradient.
double infonce_batch(const Tensor& Q, const Tensor& Pos, const std::vector<double>& tau,
                     Tensor* dQ = nullptr);

// sqrt(|a-b|^2 + c^2) - c over the flattened pair; d_a optionally filled.
double pseudo_huber(const Tensor& a, const Tensor& b, double c, Tensor* d_a = nullptr);

// ---- Stage losses ----------------------------------------------------------------

struct PretrainInputs {
    Tensor y1, y2;      // augmented views, [B,3,H,W]
    Tensor x_hi, x_lo;  // temporal pair points
    std::vector<double> t_hi, t_lo;  // per-sample times (already shifted)
    std::vector<double> tau_cons;    // per-sample consistency temperature
    double tau_contrastive = 0.2;
    double t_clean = 0.0;  // time condition for clean views
    bool no_consistency = false;
};

// Two-term objective; gradients (when accum_grads) flow only into the online
// encoder and projector. Momentum and stop-grad branches are read-only.
LossReport pretrain_loss(nn::ModelBundle& b, const PretrainInputs& in, bool accum_grads);

struct DiffusionInputs {
    Tensor x0, eps;
    std::vector<double> t_hi, t_lo;
    std::vector<int> labels;
};

// Weighted x-prediction denoising loss, mean square over pixels and batch.
LossReport diffusion_loss(nn::ModelBundle& b, const DiffusionInputs& in, bool accum_grads);

struct ConsistencyInputs {
    Tensor x0, eps;
    std::vector<double> t, r;
    std::vector<int> labels;
    double w_aux = 1.0;
    double tau_aux = 0.2;
    double t_clean = 0.0;
    bool no_aux = false;
};

// Consistency loss against the stop-grad teacher plus the auxiliary
// contrastive term through the frozen encoder. drop_rng is taken by value so
// repeated calls reproduce the same dropout masks.
LossReport cm_loss(nn::ModelBundle& b, const ConsistencyInputs& in, Rng drop_rng, bool accum_grads);

// Standalone auxiliary objective: infonce between frozen-encoder features of
// the prediction (at time t) and of the clean image (at t_clean). Gradient
// reaches the prediction only; frozen parameters accumulate nothing.
double auxiliary_loss(nn::Encoder& frozen, const Tensor& pred, const Tensor& x0,
                      const std::vector<double>& t, double t_clean, double tau, Tensor* d_pred);

double pseudo_huber_c(int64_t pixels_per_image);

}  // namespace epg::loss
