#include "epg/losses.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "epg/core/kernels.hpp"

namespace epg::loss {

bool LossReport::finite() const {
    if (!std::isfinite(total)) return false;
    for (const auto& [k, v] : components)
        if (!std::isfinite(v)) return false;
    return true;
}

namespace {

void l2_normalize_rows(const Tensor& X, Tensor& Y, std::vector<double>& norms) {
    const int64_t d = X.dim(X.ndim() - 1);
    const int64_t rows = X.numel() / d;
    Y = X;
    norms.resize(static_cast<size_t>(rows));
    for (int64_t i = 0; i < rows; ++i) {
        double n = std::sqrt(kern::sumsq(X.data() + i * d, d));
        n = std::max(n, 1e-12);
        norms[static_cast<size_t>(i)] = n;
        kern::scale(Y.data() + i * d, 1.0 / n, d);
    }
}

// Pull the gradient wrt a normalized vector back to the raw vector.
void norm_bwd_row(const double* qh, const double* dqh, double norm, double* dq, int64_t d) {
    double proj = 0.0;
    for (int64_t i = 0; i < d; ++i) proj += qh[i] * dqh[i];
    for (int64_t i = 0; i < d; ++i) dq[i] = (dqh[i] - proj * qh[i]) / norm;
}

}  // namespace

double infonce(const Tensor& q, const Tensor& q_pos, const std::vector<Tensor>& negs, double tau,
               Tensor* dq) {
    if (tau <= 0.0) throw std::invalid_argument("infonce: tau must be > 0");
    const int64_t d = q.numel();
    if (q_pos.numel() != d) throw std::invalid_argument("infonce: dim mismatch");
    for (const auto& n : negs)
        if (n.numel() != d) throw std::invalid_argument("infonce: dim mismatch");

    if (dq) *dq = Tensor(q.shape());
    if (negs.empty()) return 0.0;  // -log(1)

    Tensor qh = q, ph = q_pos;
    double qn = std::max(std::sqrt(kern::sumsq(q.data(), d)), 1e-12);
    double pn = std::max(std::sqrt(kern::sumsq(q_pos.data(), d)), 1e-12);
    kern::scale(qh.data(), 1.0 / qn, d);
    kern::scale(ph.data(), 1.0 / pn, d);

    const int64_t K = static_cast<int64_t>(negs.size());
    std::vector<Tensor> nh(negs.size());
    std::vector<double> logits(static_cast<size_t>(K) + 1);
    logits[0] = kern::dot(qh.data(), ph.data(), d) / tau;
    for (int64_t k = 0; k < K; ++k) {
        nh[static_cast<size_t>(k)] = negs[static_cast<size_t>(k)];
        double nn = std::max(std::sqrt(kern::sumsq(negs[static_cast<size_t>(k)].data(), d)), 1e-12);
        kern::scale(nh[static_cast<size_t>(k)].data(), 1.0 / nn, d);
        logits[static_cast<size_t>(k) + 1] = kern::dot(qh.data(), nh[static_cast<size_t>(k)].data(), d) / tau;
    }

    double mx = logits[0];
    for (double l : logits) mx = std::max(mx, l);
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    const double loss = -(logits[0] - mx - std::log(z));

    if (dq) {
        std::vector<double> dqh(static_cast<size_t>(d), 0.0);
        const double p0 = std::exp(logits[0] - mx) / z;
        const double w0 = (p0 - 1.0) / tau;
        for (int64_t i = 0; i < d; ++i) dqh[static_cast<size_t>(i)] += w0 * ph[i];
        for (int64_t k = 0; k < K; ++k) {
            const double pk = std::exp(logits[static_cast<size_t>(k) + 1] - mx) / z;
            const double* nv = nh[static_cast<size_t>(k)].data();
            for (int64_t i = 0; i < d; ++i) dqh[static_cast<size_t>(i)] += (pk / tau) * nv[i];
        }
        norm_bwd_row(qh.data(), dqh.data(), qn, dq->data(), d);
    }
    return loss;
}

double infonce_batch(const Tensor& Q, const Tensor& Pos, const std::vector<double>& tau,
                     Tensor* dQ) {
    const int64_t d = Q.dim(Q.ndim() - 1);
    const int64_t B = Q.numel() / d;
    if (B < 2) throw std::invalid_argument("infonce_batch: need batch >= 2 for negatives");
    if (Pos.numel() != Q.numel()) throw std::invalid_argument("infonce_batch: shape mismatch");
    if (static_cast<int64_t>(tau.size()) != B)
        throw std::invalid_argument("infonce_batch: tau size mismatch");
    for (double t : tau)
        if (t <= 0.0) throw std::invalid_argument("infonce_batch: tau must be > 0");

    Tensor qh, ph;
    std::vector<double> qn, pn;
    l2_normalize_rows(Q, qh, qn);
    l2_normalize_rows(Pos, ph, pn);

    // S[i,j] = qh_i . ph_j
    Tensor S = Tensor::uninit({B, B});
    kern::gemm_nt(qh.data(), ph.data(), S.data(), B, d, B, false);

    if (dQ) *dQ = Tensor(Q.shape());
    double mean_loss = 0.0;
    for (int64_t i = 0; i < B; ++i) {
        const double ti = tau[static_cast<size_t>(i)];
        const double* srow = S.data() + i * B;
        double mx = srow[0] / ti;
        for (int64_t j = 1; j < B; ++j) mx = std::max(mx, srow[j] / ti);
        double z = 0.0;
        for (int64_t j = 0; j < B; ++j) z += std::exp(srow[j] / ti - mx);
        mean_loss += -(srow[i] / ti - mx - std::log(z));

        if (dQ) {
            std::vector<double> dqh(static_cast<size_t>(d), 0.0);
            for (int64_t j = 0; j < B; ++j) {
                double w = std::exp(srow[j] / ti - mx) / z;
                if (j == i) w -= 1.0;
                w /= ti * static_cast<double>(B);  // batch mean
                const double* pj = ph.data() + j * d;
                for (int64_t kk = 0; kk < d; ++kk) dqh[static_cast<size_t>(kk)] += w * pj[kk];
            }
            norm_bwd_row(qh.data() + i * d, dqh.data(), qn[static_cast<size_t>(i)],
                         dQ->data() + i * d, d);
        }
    }
    return mean_loss / static_cast<double>(B);
}

double pseudo_huber(const Tensor& a, const Tensor& b, double c, Tensor* d_a) {
    if (!a.same_shape(b)) throw std::invalid_argument("pseudo_huber: shape mismatch");
    double ss = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double diff = a[i] - b[i];
        ss += diff * diff;
    }
    const double root = std::sqrt(ss + c * c);
    if (d_a) {
        *d_a = Tensor(a.shape());
        for (int64_t i = 0; i < a.numel(); ++i) (*d_a)[i] = (a[i] - b[i]) / root;
    }
    return root - c;
}

double pseudo_huber_c(int64_t pixels_per_image) {
    return 0.00054 * std::sqrt(static_cast<double>(pixels_per_image));
}

// ---- pretrain ---------------------------------------------------------------------

LossReport pretrain_loss(nn::ModelBundle& b, const PretrainInputs& in, bool accum_grads) {
    if (!b.proj || !b.enc_momentum || !b.proj_momentum || !b.enc_sg)
        throw std::logic_error("pretrain_loss: bundle missing pre-training branches");
    const int64_t B = in.y1.dim(0);
    if (B < 2) throw std::invalid_argument("pretrain_loss: need batch >= 2");

    const std::vector<int> no_labels;
    const std::vector<double> t_clean(static_cast<size_t>(B), in.t_clean);
    const std::vector<double> tau_c(static_cast<size_t>(B), in.tau_contrastive);

    LossReport rep;
    rep.count = B;

    // Contrastive term: online(y1) vs momentum(y2), in-batch negatives.
    nn::Encoder::Acts ea_online;
    b.enc.fwd(in.y1, t_clean, no_labels, ea_online);
    nn::Projector::Cache pc_online;
    Tensor q;
    b.proj->fwd(ea_online.out.cls, q, pc_online);

    nn::Encoder::Acts ea_mom;
    b.enc_momentum->fwd(in.y2, t_clean, no_labels, ea_mom);
    nn::Projector::Cache pc_mom;
    Tensor q_pos;
    b.proj_momentum->fwd(ea_mom.out.cls, q_pos, pc_mom);

    Tensor dQ;
    const double contrastive = infonce_batch(q, q_pos, tau_c, accum_grads ? &dQ : nullptr);
    rep.components["contrastive"] = contrastive;
    if (accum_grads) {
        Tensor d_cls;
        b.proj->bwd(pc_online, dQ, d_cls, false, true);
        b.enc.bwd(ea_online, &d_cls, nullptr, nullptr, true, nullptr);
    }

    // Representation consistency term: online(x_hi, t_hi) vs stop-grad(x_lo, t_lo).
    double consistency = 0.0;
    if (!in.no_consistency) {
        nn::Encoder::Acts ea_hi;
        b.enc.fwd(in.x_hi, in.t_hi, no_labels, ea_hi);
        nn::Encoder::Acts ea_lo;
        b.enc_sg->fwd(in.x_lo, in.t_lo, no_labels, ea_lo);

        Tensor dQ2;
        consistency =
            infonce_batch(ea_hi.out.cls, ea_lo.out.cls, in.tau_cons, accum_grads ? &dQ2 : nullptr);
        if (accum_grads) b.enc.bwd(ea_hi, &dQ2, nullptr, nullptr, true, nullptr);
    }
    rep.components["rep_consistency"] = consistency;

    rep.total = contrastive + consistency;
    return rep;
}

// ---- diffusion ---------------------------------------------------------------------

LossReport diffusion_loss(nn::ModelBundle& b, const DiffusionInputs& in, bool accum_grads) {
    if (!b.dec) throw std::logic_error("diffusion_loss: bundle has no decoder");
    const int64_t B = in.x0.dim(0);
    const int64_t chw = in.x0.numel() / B;

    Tensor x_t = in.x0;
    for (int64_t i = 0; i < B; ++i)
        kern::axpy(in.t_hi[static_cast<size_t>(i)], in.eps.data() + i * chw, x_t.data() + i * chw,
                   chw);

    nn::DenoiseCache cache;
    Tensor f = nn::denoise_fwd(b.enc, *b.dec, b.diff, x_t, in.t_hi, in.labels, true, nullptr, &cache);

    LossReport rep;
    rep.count = B;
    double total = 0.0;
    Tensor df = Tensor::uninit(f.shape());
    for (int64_t i = 0; i < B; ++i) {
        const double lambda =
            sched::loss_weight(in.t_hi[static_cast<size_t>(i)], in.t_lo[static_cast<size_t>(i)]);
        const double* fp = f.data() + i * chw;
        const double* xp = in.x0.data() + i * chw;
        double se = 0.0;
        for (int64_t j = 0; j < chw; ++j) {
            const double diff = fp[j] - xp[j];
            se += diff * diff;
        }
        total += lambda * se / static_cast<double>(chw);
        if (accum_grads) {
            double* dp = df.data() + i * chw;
            const double w = 2.0 * lambda / (static_cast<double>(chw) * static_cast<double>(B));
            for (int64_t j = 0; j < chw; ++j) dp[j] = w * (fp[j] - xp[j]);
        }
    }
    total /= static_cast<double>(B);
    if (accum_grads) nn::denoise_bwd(b.enc, *b.dec, cache, df, true, nullptr);

    rep.components["denoise"] = total;
    rep.total = total;
    return rep;
}

// ---- consistency + auxiliary ----------------------------------------------------------

double auxiliary_loss(nn::Encoder& frozen, const Tensor& pred, const Tensor& x0,
                      const std::vector<double>& t, double t_clean, double tau, Tensor* d_pred) {
    const int64_t B = pred.dim(0);
    const std::vector<int> no_labels;
    const std::vector<double> tc(static_cast<size_t>(B), t_clean);
    const std::vector<double> taus(static_cast<size_t>(B), tau);

    nn::Encoder::Acts ea_pred;
    frozen.fwd(pred, t, no_labels, ea_pred);
    nn::Encoder::Acts ea_clean;
    frozen.fwd(x0, tc, no_labels, ea_clean);

    Tensor dQ;
    const double loss =
        infonce_batch(ea_pred.out.cls, ea_clean.out.cls, taus, d_pred ? &dQ : nullptr);
    if (d_pred) {
        *d_pred = Tensor(pred.shape());
        // Input gradient only; frozen parameters accumulate nothing.
        frozen.bwd(ea_pred, &dQ, nullptr, nullptr, false, d_pred);
    }
    return loss;
}

LossReport cm_loss(nn::ModelBundle& b, const ConsistencyInputs& in, Rng drop_rng, bool accum_grads) {
    if (!b.dec || !b.enc_sg || !b.dec_sg)
        throw std::logic_error("cm_loss: bundle missing consistency branches");
    if (!in.no_aux && !b.enc_frozen)
        throw std::logic_error("cm_loss: frozen encoder copy missing");
    const int64_t B = in.x0.dim(0);
    const int64_t chw = in.x0.numel() / B;
    for (int64_t i = 0; i < B; ++i)
        if (!(in.t[static_cast<size_t>(i)] > in.r[static_cast<size_t>(i)]))
            throw std::invalid_argument("cm_loss: need t > r");

    Tensor x_hi = in.x0, x_lo = in.x0;
    for (int64_t i = 0; i < B; ++i) {
        kern::axpy(in.t[static_cast<size_t>(i)], in.eps.data() + i * chw, x_hi.data() + i * chw, chw);
        kern::axpy(in.r[static_cast<size_t>(i)], in.eps.data() + i * chw, x_lo.data() + i * chw, chw);
    }

    // Teacher (stop-grad snapshot), eval mode.
    Tensor f_teacher = nn::denoise_fwd(*b.enc_sg, *b.dec_sg, b.diff, x_lo, in.r, in.labels, false,
                                       nullptr, nullptr);

    // Student, dropout active.
    nn::DenoiseCache cache;
    Tensor f_student =
        nn::denoise_fwd(b.enc, *b.dec, b.diff, x_hi, in.t, in.labels, true, &drop_rng, &cache);

    const double c = pseudo_huber_c(chw);
    LossReport rep;
    rep.count = B;
    double cons_total = 0.0;
    Tensor df = Tensor::uninit(f_student.shape());
    for (int64_t i = 0; i < B; ++i) {
        const double w = 1.0 / (in.t[static_cast<size_t>(i)] - in.r[static_cast<size_t>(i)]);
        const double* fs = f_student.data() + i * chw;
        const double* ft = f_teacher.data() + i * chw;
        double ss = 0.0;
        for (int64_t j = 0; j < chw; ++j) {
            const double d = fs[j] - ft[j];
            ss += d * d;
        }
        const double root = std::sqrt(ss + c * c);
        cons_total += w * (root - c);
        if (accum_grads) {
            double* dp = df.data() + i * chw;
            const double scale = w / (root * static_cast<double>(B));
            for (int64_t j = 0; j < chw; ++j) dp[j] = scale * (fs[j] - ft[j]);
        }
    }
    cons_total /= static_cast<double>(B);
    rep.components["consistency"] = cons_total;

    double aux = 0.0;
    if (!in.no_aux) {
        Tensor d_pred;
        aux = auxiliary_loss(*b.enc_frozen, f_student, in.x0, in.t, in.t_clean, in.tau_aux,
                             accum_grads ? &d_pred : nullptr);
        if (accum_grads) kern::axpy(in.w_aux, d_pred.data(), df.data(), df.numel());
    }
    rep.components["auxiliary"] = aux;

    if (accum_grads) nn::denoise_bwd(b.enc, *b.dec, cache, df, true, nullptr);

    rep.total = cons_total + in.w_aux * aux;
    return rep;
}

}  // namespace epg::loss
