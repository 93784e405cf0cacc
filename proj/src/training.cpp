#include "epg/training.hpp"

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "epg/core/error.hpp"
#include "epg/core/kernels.hpp"
#include "epg/io/checkpoint.hpp"

namespace epg::train {

// ---- AdamW -------------------------------------------------------------------

AdamW::AdamW(const std::vector<nn::ParamRef>& refs, const cfg::OptimizerConfig& cfg) : cfg_(cfg) {
    m_.reserve(refs.size());
    v_.reserve(refs.size());
    for (const auto& r : refs) {
        m_.emplace_back(r.value->shape());
        v_.emplace_back(r.value->shape());
    }
}

double AdamW::step(std::vector<nn::ParamRef>& refs, double lr) {
    if (refs.size() != m_.size()) throw std::invalid_argument("AdamW: registry size changed");
    const double norm = std::sqrt(nn::grad_sumsq(refs));
    double scale = 1.0;
    if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
    if (scale != 1.0)
        for (auto& r : refs) kern::scale(r.grad->data(), scale, r.grad->numel());

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < refs.size(); ++i) {
        auto& r = refs[i];
        const double wd = r.decay ? cfg_.weight_decay : 0.0;
        kern::adamw_update(r.value->data(), r.grad->data(), m_[i].data(), v_[i].data(),
                           r.value->numel(), lr, cfg_.beta1, cfg_.beta2, cfg_.eps, wd, bc1, bc2);
    }
    return norm;
}

// ---- Trainer ------------------------------------------------------------------

namespace {

nn::ModelBundle build_bundle(const cfg::RunConfig& cfg, const data::Dataset* dataset) {
    Rng init(cfg.seed);
    nn::NetworkConfig net = cfg.net;
    if (dataset) net.num_classes = dataset->num_classes();
    net.dec_dropout = cfg.stage == "finetune-cm" ? cfg.cm_dropout : 0.0;

    if (cfg.stage == "pretrain") return nn::make_pretrain_bundle(net, cfg.diff, init);

    const nn::Stage stage =
        cfg.stage == "finetune-dm" ? nn::Stage::FinetuneDM : nn::Stage::FinetuneCM;

    std::optional<nn::Encoder> pretrained;
    if (!cfg.from_scratch && !cfg.init_checkpoint.empty()) {
        io::LoadedCheckpoint ck = io::load_checkpoint(cfg.init_checkpoint);
        nn::NetworkConfig enc_net = net;
        enc_net.num_classes = 0;
        pretrained.emplace();
        Rng dummy(0);
        pretrained->init(enc_net, cfg.diff, dummy);
        for (auto& ref : nn::collect(*pretrained, std::string("enc."))) {
            auto it = ck.tensors.find(ref.name);
            if (it == ck.tensors.end())
                throw UsageError("init checkpoint missing tensor " + ref.name);
            if (!it->second.same_shape(*ref.value))
                throw UsageError("init checkpoint shape mismatch at " + ref.name);
            kern::copy(it->second.data(), ref.value->data(), ref.value->numel());
        }
    }
    return nn::make_finetune_bundle(net, cfg.diff, stage, pretrained ? &*pretrained : nullptr, init);
}

}  // namespace

Trainer::Trainer(const cfg::RunConfig& cfg, const data::Dataset* dataset)
    : cfg_(cfg), data_(dataset), bundle_(build_bundle(cfg, dataset)), root_(cfg.seed) {
    cfg_.validate();
    if (data_ && cfg_.net.resolution != data_->resolution())
        throw UsageError("Trainer: config resolution differs from dataset resolution");
    auto refs = bundle_.online_refs();
    opt_ = AdamW(refs, cfg_.optim);
    if (cfg_.stage == "finetune-dm") dm_grid_ = sched::karras_grid(cfg_.dm_grid_n, cfg_.diff);
}

Trainer Trainer::from_config(const cfg::RunConfig& cfg, const data::Dataset* dataset) {
    return Trainer(cfg, dataset);
}

Trainer::Batch Trainer::build_batch(int64_t step, bool flip_augment, bool with_labels) const {
    const int64_t B = cfg_.batch;
    const int64_t N = data_->size();
    const int64_t res = data_->resolution();
    const int64_t chw = 3 * res * res;

    Batch batch;
    batch.x0 = Tensor({B, 3, res, res});
    batch.eps = Tensor({B, 3, res, res});
    batch.labels.assign(static_cast<size_t>(B), -1);
    batch.indices.resize(static_cast<size_t>(B));

    // Epoch-shuffled order; every draw is a pure function of (seed, step, slot).
    for (int64_t s = 0; s < B; ++s) {
        const int64_t global = step * B + s;
        const int64_t epoch = global / N;
        const int64_t pos = global % N;
        Rng perm_rng = root_.substream(0x7065726dULL, static_cast<uint64_t>(epoch));
        // Fisher-Yates position lookup done directly: regenerate the epoch
        // permutation lazily per slot would be O(N); instead use a cheap
        // pseudo-shuffle: index = (a * pos + b) mod N with a coprime to N.
        uint64_t a = perm_rng.next_u64() % static_cast<uint64_t>(N);
        const uint64_t b = perm_rng.next_u64() % static_cast<uint64_t>(N);
        a = a | 1;  // odd
        while (std::gcd(static_cast<int64_t>(a), N) != 1) a += 2;
        batch.indices[static_cast<size_t>(s)] =
            static_cast<int64_t>((a * static_cast<uint64_t>(pos) + b) % static_cast<uint64_t>(N));
    }

#pragma omp parallel for schedule(static) if (kern::parallel() && B > 4)
    for (int64_t s = 0; s < B; ++s) {
        Rng r = root_.substream(0x64726177ULL, static_cast<uint64_t>(step), static_cast<uint64_t>(s));
        data::CleanSample cs = data_->sample(batch.indices[static_cast<size_t>(s)]);
        Tensor x = std::move(cs.x0);
        if (flip_augment && r.bernoulli(0.5)) x = data::hflip(x);
        std::memcpy(batch.x0.data() + s * chw, x.data(), sizeof(double) * static_cast<size_t>(chw));
        for (int64_t i = 0; i < chw; ++i) batch.eps[s * chw + i] = r.normal();
        if (with_labels) batch.labels[static_cast<size_t>(s)] = cs.label;
    }
    return batch;
}

void Trainer::apply_update(loss::LossReport& rep, StepRecord& rec) {
    if (!rep.finite())
        throw NumericalError("training: non-finite loss at step " + std::to_string(step_));
    auto refs = bundle_.online_refs();
    const double lr = cfg::lr_at(step_, cfg_.steps, cfg_.optim);
    rec.grad_norm = opt_.step(refs, lr);
    rec.lr = lr;
}

StepRecord Trainer::pretrain_step() {
    const int64_t B = cfg_.batch;
    const int64_t res = cfg_.net.resolution;
    const int64_t chw = 3 * res * res;
    const auto t0 = std::chrono::steady_clock::now();

    bundle_.refresh_sg();

    // Discretization annealing and the per-step grid.
    sched::DiscretizationSchedule disc{cfg_.pre_n0, cfg_.pre_n1, cfg_.steps};
    const int64_t N = sched::icm_steps(step_, disc);
    if (N != cached_n_) {
        cached_grid_ = sched::karras_grid(N, cfg_.diff);
        cached_n_ = N;
    }

    sched::TemperatureSchedule temp{cfg_.tau1, cfg_.fixed_tau ? cfg_.tau1 : cfg_.tau2, cfg_.steps};
    const double progress =
        cfg_.steps > 1 ? static_cast<double>(step_) / static_cast<double>(cfg_.steps - 1) : 1.0;

    Batch batch = build_batch(step_, false, false);

    loss::PretrainInputs in;
    in.y1 = Tensor({B, 3, res, res});
    in.y2 = Tensor({B, 3, res, res});
    in.x_hi = Tensor({B, 3, res, res});
    in.x_lo = Tensor({B, 3, res, res});
    in.t_hi.resize(static_cast<size_t>(B));
    in.t_lo.resize(static_cast<size_t>(B));
    in.tau_cons.resize(static_cast<size_t>(B));
    in.tau_contrastive = cfg_.tau_contrastive;
    in.t_clean = sched::shift_sigma(cfg_.diff.sigma_min, res, cfg_.diff);
    in.no_consistency = cfg_.no_consistency_term;

    data::AugmentConfig aug;
#pragma omp parallel for schedule(static) if (kern::parallel() && B > 4)
    for (int64_t s = 0; s < B; ++s) {
        Rng r = root_.substream(0x61756758ULL, static_cast<uint64_t>(step_), static_cast<uint64_t>(s));
        data::CleanSample cs;
        cs.x0 = Tensor({3, res, res});
        std::memcpy(cs.x0.data(), batch.x0.data() + s * chw, sizeof(double) * static_cast<size_t>(chw));
        data::ViewPair views = data::augment_views(cs, aug, r);
        std::memcpy(in.y1.data() + s * chw, views.y1.data(), sizeof(double) * static_cast<size_t>(chw));
        std::memcpy(in.y2.data() + s * chw, views.y2.data(), sizeof(double) * static_cast<size_t>(chw));

        const int64_t n = r.uniform_int(1, N - 1);
        const double t_hi = sched::shift_sigma(cached_grid_[n], res, cfg_.diff);
        const double t_lo = sched::shift_sigma(cached_grid_[n - 1], res, cfg_.diff);
        in.t_hi[static_cast<size_t>(s)] = t_hi;
        in.t_lo[static_cast<size_t>(s)] = t_lo;
        const double u = static_cast<double>(n) / static_cast<double>(N - 1);
        in.tau_cons[static_cast<size_t>(s)] = sched::temperature_at(u, progress, temp);
        for (int64_t i = 0; i < chw; ++i) {
            const double e = batch.eps[s * chw + i];
            in.x_hi[s * chw + i] = cs.x0[i] + t_hi * e;
            in.x_lo[s * chw + i] = cs.x0[i] + t_lo * e;
        }
    }

    auto refs = bundle_.online_refs();
    nn::zero_grads(refs);
    StepRecord rec;
    rec.report = loss::pretrain_loss(bundle_, in, true);
    apply_update(rec.report, rec);

    // Momentum branch trails the online encoder and projector.
    nn::ema_update(bundle_.momentum_refs(), refs_without_decoder(), cfg_.ema_momentum);

    rec.step = step_;
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ++step_;
    return rec;
}

StepRecord Trainer::dm_step() {
    const int64_t B = cfg_.batch;
    const int64_t res = cfg_.net.resolution;
    const auto t0 = std::chrono::steady_clock::now();

    Batch batch = build_batch(step_, true, true);

    loss::DiffusionInputs in;
    in.x0 = std::move(batch.x0);
    in.eps = std::move(batch.eps);
    in.t_hi.resize(static_cast<size_t>(B));
    in.t_lo.resize(static_cast<size_t>(B));
    in.labels = std::move(batch.labels);
    for (int64_t s = 0; s < B; ++s) {
        Rng r = root_.substream(0x73696758ULL, static_cast<uint64_t>(step_), static_cast<uint64_t>(s));
        const auto [n, tn] = sched::sample_sigma_discrete(dm_grid_, r, cfg_.dm_mu, cfg_.dm_sigma);
        in.t_hi[static_cast<size_t>(s)] = sched::shift_sigma(tn, res, cfg_.diff);
        in.t_lo[static_cast<size_t>(s)] = sched::shift_sigma(dm_grid_[n - 1], res, cfg_.diff);
        in.labels[static_cast<size_t>(s)] =
            data::label_dropout(in.labels[static_cast<size_t>(s)], cfg_.label_dropout, r);
    }

    auto refs = bundle_.online_refs();
    nn::zero_grads(refs);
    StepRecord rec;
    rec.report = loss::diffusion_loss(bundle_, in, true);
    apply_update(rec.report, rec);

    nn::ema_update(bundle_.ema_refs(), refs, cfg_.ema_of_online);

    rec.step = step_;
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ++step_;
    return rec;
}

StepRecord Trainer::cm_step() {
    const int64_t B = cfg_.batch;
    const int64_t res = cfg_.net.resolution;
    const auto t0 = std::chrono::steady_clock::now();

    bundle_.refresh_sg();

    Batch batch = build_batch(step_, true, true);

    sched::RatioSchedule ratio{cfg_.cm_stages, cfg_.steps};
    loss::ConsistencyInputs in;
    in.x0 = std::move(batch.x0);
    in.eps = std::move(batch.eps);
    in.t.resize(static_cast<size_t>(B));
    in.r.resize(static_cast<size_t>(B));
    in.labels = std::move(batch.labels);
    in.w_aux = cfg_.w_aux;
    in.tau_aux = cfg_.tau_aux;
    in.t_clean = sched::shift_sigma(cfg_.diff.sigma_min, res, cfg_.diff);
    in.no_aux = cfg_.no_aux_loss;
    for (int64_t s = 0; s < B; ++s) {
        Rng r = root_.substream(0x65637458ULL, static_cast<uint64_t>(step_), static_cast<uint64_t>(s));
        // Reject the degenerate boundary pair (t clamped onto sigma_min).
        double t = 0, rr = 0;
        for (int attempt = 0; attempt < 64; ++attempt) {
            std::tie(t, rr) = sched::ect_pair_times(step_, ratio, cfg_.diff, r, cfg_.cm_mu, cfg_.cm_sigma);
            if (t > rr) break;
        }
        if (!(t > rr)) {  // vanishingly unlikely; widen deterministically
            t = cfg_.diff.sigma_min * 2.0;
            rr = cfg_.diff.sigma_min;
        }
        in.t[static_cast<size_t>(s)] = sched::shift_sigma(t, res, cfg_.diff);
        in.r[static_cast<size_t>(s)] = sched::shift_sigma(rr, res, cfg_.diff);
    }

    Rng drop_rng = root_.substream(0x64726f70ULL, static_cast<uint64_t>(step_));

    auto refs = bundle_.online_refs();
    nn::zero_grads(refs);
    StepRecord rec;
    rec.report = loss::cm_loss(bundle_, in, drop_rng, true);
    apply_update(rec.report, rec);

    nn::ema_update(bundle_.ema_refs(), refs, cfg_.ema_of_online);

    rec.step = step_;
    rec.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ++step_;
    return rec;
}

std::vector<nn::ParamRef> Trainer::refs_without_decoder() {
    // Pre-training online refs (encoder + projector) for the momentum update.
    std::vector<nn::ParamRef> refs = nn::collect(bundle_.enc, std::string("enc."));
    if (bundle_.proj) {
        auto p = nn::collect(*bundle_.proj, std::string("proj."));
        refs.insert(refs.end(), p.begin(), p.end());
    }
    return refs;
}

StepRecord Trainer::train_step() {
    if (cfg_.stage == "pretrain") return pretrain_step();
    if (cfg_.stage == "finetune-dm") return dm_step();
    return cm_step();
}

void Trainer::save_checkpoint(const std::string& path) const {
    io::CheckpointManifest m;
    m.stage = cfg_.stage;
    m.config_hash = cfg::config_hash(cfg_);
    m.step = step_;
    m.rng_state = root_.state();
    m.opt_t = opt_.t();

    std::vector<std::pair<std::string, const Tensor*>> tensors;
    auto add_all = [&](std::vector<nn::ParamRef> refs, const std::string& prefix) {
        for (auto& r : refs) tensors.emplace_back(prefix + r.name, r.value);
    };
    auto& self = const_cast<Trainer&>(*this);
    add_all(self.bundle_.online_refs(), "");
    add_all(self.bundle_.momentum_refs(), "momentum.");
    add_all(self.bundle_.frozen_refs(), "frozen.");
    add_all(self.bundle_.ema_refs(), "ema.");
    {
        auto refs = self.bundle_.online_refs();
        auto& mm = self.opt_.moments_m();
        auto& vv = self.opt_.moments_v();
        for (size_t i = 0; i < refs.size(); ++i) {
            tensors.emplace_back("opt.m." + refs[i].name, &mm[i]);
            tensors.emplace_back("opt.v." + refs[i].name, &vv[i]);
        }
    }
    io::save_checkpoint(path, m, tensors);
}

void Trainer::load_checkpoint(const std::string& path) {
    io::LoadedCheckpoint ck = io::load_checkpoint(path);
    if (ck.manifest.config_hash != cfg::config_hash(cfg_))
        throw UsageError("checkpoint config hash mismatch: refusing to resume (" +
                         ck.manifest.config_hash + " vs " + cfg::config_hash(cfg_) + ")");
    if (ck.manifest.stage != cfg_.stage) throw UsageError("checkpoint stage mismatch");

    auto restore = [&](std::vector<nn::ParamRef> refs, const std::string& prefix) {
        for (auto& r : refs) {
            auto it = ck.tensors.find(prefix + r.name);
            if (it == ck.tensors.end())
                throw std::runtime_error("checkpoint missing tensor " + prefix + r.name);
            if (!it->second.same_shape(*r.value))
                throw std::runtime_error("checkpoint shape mismatch at " + prefix + r.name);
            kern::copy(it->second.data(), r.value->data(), r.value->numel());
        }
    };
    restore(bundle_.online_refs(), "");
    restore(bundle_.momentum_refs(), "momentum.");
    restore(bundle_.frozen_refs(), "frozen.");
    restore(bundle_.ema_refs(), "ema.");
    {
        auto refs = bundle_.online_refs();
        auto& mm = opt_.moments_m();
        auto& vv = opt_.moments_v();
        for (size_t i = 0; i < refs.size(); ++i) {
            restore_one(ck, "opt.m." + refs[i].name, mm[i]);
            restore_one(ck, "opt.v." + refs[i].name, vv[i]);
        }
    }
    step_ = ck.manifest.step;
    opt_.set_t(ck.manifest.opt_t);
    root_.set_state(ck.manifest.rng_state);
    bundle_.refresh_sg();
}

void Trainer::restore_one(const io::LoadedCheckpoint& ck, const std::string& name, Tensor& dst) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw std::runtime_error("checkpoint missing tensor " + name);
    if (!it->second.same_shape(dst)) throw std::runtime_error("checkpoint shape mismatch at " + name);
    kern::copy(it->second.data(), dst.data(), dst.numel());
}

// ---- Logger ---------------------------------------------------------------------

StepLogger::StepLogger(const std::string& path) {
    f_ = std::fopen(path.c_str(), "a");
    if (!f_) throw std::runtime_error("StepLogger: cannot open " + path);
}

StepLogger::~StepLogger() {
    if (f_) std::fclose(f_);
}

void StepLogger::log(const StepRecord& rec) {
    nlohmann::json j;
    j["step"] = rec.step;
    j["lr"] = rec.lr;
    j["grad_norm"] = rec.grad_norm;
    j["wall_ms"] = rec.wall_ms;
    j["total"] = rec.report.total;
    for (const auto& [k, v] : rec.report.components) j["loss"][k] = v;
    std::fprintf(f_, "%s\n", j.dump().c_str());
    std::fflush(f_);
}

}  // namespace epg::train
