// Acceptance suite: runs the numbered criteria and prints one pass/fail line
// per criterion. Long training-based criteria cache their runs under
// EPG_ACCEPT_DIR (default ./acceptance_work) keyed by config hash, so a
// re-run resumes instead of retraining.
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "epg/config.hpp"
#include "epg/core/error.hpp"
#include "epg/core/kernels.hpp"
#include "epg/eval.hpp"
#include "epg/io/checkpoint.hpp"
#include "epg/losses.hpp"
#include "epg/sampling.hpp"
#include "epg/schedules.hpp"
#include "epg/training.hpp"
#include "epg/trajectory.hpp"

namespace fs = std::filesystem;
using namespace epg;

namespace {

int g_failures = 0;

void report(int crit, const std::string& name, bool pass, const std::string& detail = "") {
    std::printf("[%s] criterion %2d: %s%s%s\n", pass ? "PASS" : "FAIL", crit, name.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

void info(const std::string& msg) {
    std::printf("       %s\n", msg.c_str());
    std::fflush(stdout);
}

std::string work_dir() {
    if (const char* d = std::getenv("EPG_ACCEPT_DIR")) return d;
    return "acceptance_work";
}

// ---- shared desk-scale experiment family -------------------------------------

constexpr int kRes = 32;
constexpr int kClasses = 10;
constexpr int64_t kPerClass = 1000;
constexpr uint64_t kDataSeed = 1234;

nn::NetworkConfig accept_net() {
    nn::NetworkConfig net;
    net.enc_blocks = 2;
    net.dec_blocks = 2;
    net.dim_enc = 24;
    net.dim_dec = 24;
    net.heads_enc = 4;
    net.heads_dec = 4;
    net.patch = 8;
    net.resolution = kRes;
    net.num_classes = kClasses;
    return net;
}

const data::Dataset& accept_data() {
    static data::Dataset ds = data::make_synthetic(kPerClass, kClasses, kRes, kDataSeed);
    return ds;
}

cfg::RunConfig pretrain_cfg(uint64_t seed, bool no_consistency) {
    cfg::RunConfig c = cfg::RunConfig::defaults_for("pretrain");
    c.net = accept_net();
    c.steps = 10000;  // criterion 8: tiny model, >= 10k steps
    c.batch = 64;
    c.seed = seed;
    c.pre_n0 = 20;
    c.pre_n1 = 1280;
    c.no_consistency_term = no_consistency;
    // The batch-linear lr rule undertrains badly at this batch size; 5e-4 was
    // picked by sweep (see the run logs).
    c.optim.lr = 5e-4;
    return c;
}

cfg::RunConfig dm_cfg(uint64_t seed, bool from_scratch, const std::string& init_ckpt) {
    cfg::RunConfig c = cfg::RunConfig::defaults_for("finetune-dm");
    c.net = accept_net();
    c.steps = 30000;  // criterion 9: matched fine-tuning budget
    c.batch = 128;
    c.seed = seed;
    c.from_scratch = from_scratch;
    c.init_checkpoint = from_scratch ? "" : init_ckpt;
    return c;
}

cfg::RunConfig cm_cfg(uint64_t seed, bool from_scratch, bool no_aux, const std::string& init_ckpt) {
    cfg::RunConfig c = cfg::RunConfig::defaults_for("finetune-cm");
    c.net = accept_net();
    c.steps = 8000;  // desk-scale consistency budget
    c.batch = 64;
    c.seed = seed;
    c.from_scratch = from_scratch;
    c.no_aux_loss = no_aux;
    c.init_checkpoint = from_scratch ? "" : init_ckpt;
    return c;
}

// Train (or resume) to cfg.steps; checkpoint cached at `path`.
train::Trainer run_cached(const cfg::RunConfig& c, const std::string& path) {
    train::Trainer tr(c, &accept_data());
    if (fs::exists(path)) {
        tr.load_checkpoint(path);
        info("resumed " + path + " at step " + std::to_string(tr.step()));
    }
    int64_t since_save = 0;
    while (tr.step() < c.steps) {
        train::StepRecord rec = tr.train_step();
        if (++since_save >= 1000) {
            tr.save_checkpoint(path);
            since_save = 0;
            std::printf("       ... %s step %" PRId64 "/%" PRId64 " loss %.4f\n", path.c_str(),
                        rec.step + 1, c.steps, rec.report.total);
            std::fflush(stdout);
        }
    }
    tr.save_checkpoint(path);
    return tr;
}

std::string pretrain_ckpt(uint64_t seed, bool no_consistency) {
    const cfg::RunConfig c = pretrain_cfg(seed, no_consistency);
    const std::string path = work_dir() + "/pre_" + (no_consistency ? "noc_" : "full_") +
                             std::to_string(seed) + "_" + cfg::config_hash(c) + ".epg";
    run_cached(c, path);
    return path;
}

nn::Encoder encoder_from_ckpt(const std::string& path) {
    io::LoadedCheckpoint ck = io::load_checkpoint(path);
    nn::NetworkConfig net = accept_net();
    net.num_classes = 0;
    nn::Encoder enc;
    Rng dummy(0);
    enc.init(net, sched::DiffusionConfig{}, dummy);
    for (auto& ref : nn::collect(enc, std::string("enc."))) {
        auto it = ck.tensors.find(ref.name);
        if (it == ck.tensors.end()) throw std::runtime_error("missing " + ref.name);
        kern::copy(it->second.data(), ref.value->data(), ref.value->numel());
    }
    return enc;
}

Tensor dataset_images(int64_t count, int64_t offset = 0) {
    const auto& ds = accept_data();
    const int64_t chw = 3 * kRes * kRes;
    Tensor imgs({count, 3, kRes, kRes});
    for (int64_t i = 0; i < count; ++i) {
        Tensor x = ds.sample((offset + i * 7) % ds.size()).x0;  // stride over classes
        std::memcpy(imgs.data() + i * chw, x.data(), sizeof(double) * static_cast<size_t>(chw));
    }
    return imgs;
}

// Class-conditional sampling from EMA weights (no guidance), then FID-proxy
// against reference features of the frozen feature encoder.
double fid_proxy_of(nn::Encoder& enc_ema, nn::Decoder& dec_ema, const nn::Encoder& feat_enc,
                    sample::Method method, int64_t steps, int64_t count, uint64_t seed) {
    sched::DiffusionConfig diff;
    const double t_top = sched::shift_sigma(diff.t_max, kRes, diff);
    const double smin = sched::shift_sigma(diff.sigma_min, kRes, diff);
    const double t_feat = smin;
    const auto times = sample::sampling_times(steps, diff, kRes);
    sample::ScoreField field = sample::model_field(enc_ema, dec_ema, diff);

    const int64_t chw = 3 * kRes * kRes;
    Tensor generated({count, 3, kRes, kRes});
    Rng root(seed);
    const int64_t batch = 64;
    for (int64_t done = 0; done < count; done += batch) {
        const int64_t n = std::min(batch, count - done);
        Tensor z({n, 3, kRes, kRes});
        std::vector<int> labels(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            Rng zr = root.substream(0x7a, static_cast<uint64_t>(done + i));
            for (int64_t j = 0; j < chw; ++j) z[i * chw + j] = t_top * zr.normal();
            labels[static_cast<size_t>(i)] = static_cast<int>(zr.uniform_int(0, kClasses - 1));
        }
        Tensor out;
        if (method == sample::Method::CmOnestep) {
            Rng rr = root.substream(0x52, static_cast<uint64_t>(done));
            out = sample::cm_sample(field, z, t_top, smin, labels, 1, rr);
        } else {
            out = sample::euler_sample(field, z, times, labels);
        }
        std::memcpy(generated.data() + done * chw, out.data(),
                    sizeof(double) * static_cast<size_t>(n * chw));
    }

    Tensor gen_feats = eval::extract_features(feat_enc, generated, t_feat);
    Tensor ref_imgs = dataset_images(2000);
    Tensor ref_feats = eval::extract_features(feat_enc, ref_imgs, t_feat);
    return eval::frechet_distance(eval::gaussian_stats(gen_feats), eval::gaussian_stats(ref_feats));
}

// ---- criteria ------------------------------------------------------------------

bool criterion1() {
    bool ok = true;
    auto near = [&](double a, double b) { return std::abs(a - b) <= 1e-6; };

    // infoNCE analytic cases.
    Tensor e0({4}), e1({4});
    e0[0] = 1.0;
    e1[1] = 1.0;
    ok &= loss::infonce(e0, e0, {}, 0.1) == 0.0;
    ok &= near(loss::infonce(e0, e1, {Tensor(e1)}, 0.7), std::log(2.0));
    ok &= near(loss::infonce(e0, e0, {Tensor(e1)}, 1.0), std::log(1.0 + std::exp(-1.0)));

    // Frechet cases.
    {
        eval::FeatureStats a, b;
        a.mean = Tensor({2});
        b.mean = Tensor({2});
        a.cov = Tensor({2, 2});
        b.cov = Tensor({2, 2});
        a.cov[0] = a.cov[3] = 0.5;
        b.cov = a.cov;
        a.count = b.count = 10;
        ok &= near(eval::frechet_distance(a, a), 0.0);
        b.mean[0] = 0.6;
        b.mean[1] = -0.8;  // ||v||^2 = 1.0
        ok &= near(eval::frechet_distance(a, b), 1.0);

        eval::FeatureStats s1, s2;
        s1.mean = Tensor({1});
        s2.mean = Tensor({1});
        s1.cov = Tensor::full({1, 1}, 1.0);
        s2.cov = Tensor::full({1, 1}, 4.0);
        s1.count = s2.count = 10;
        ok &= near(eval::frechet_distance(s1, s2), 1.0);
    }

    // Boundary coefficients and loss weighting.
    sched::DiffusionConfig diff;
    auto [cs, co] = sched::cskip_cout(0.0, diff);
    ok &= (cs == 1.0 && co == 0.0);
    ok &= near(sched::loss_weight(2.0, 1.0), 1.0);
    ok &= near(sched::loss_weight(80.0, 79.5), 2.0);
    bool threw = false;
    try {
        sched::loss_weight(1.0, 1.0);
    } catch (const std::invalid_argument&) {
        threw = true;
    }
    ok &= threw;

    report(1, "analytic value suite (1e-6)", ok);
    return ok;
}

bool criterion2() {
    sched::DiffusionConfig diff;
    nn::NetworkConfig net = accept_net();
    double worst = 0.0;
    for (int draw = 0; draw < 10; ++draw) {
        Rng rng(1000 + static_cast<uint64_t>(draw));
        nn::Encoder enc;
        enc.init(net, diff, rng);
        nn::Decoder dec;
        dec.init(net, rng);
        for (int xi = 0; xi < 10; ++xi) {
            Rng xr(50 + static_cast<uint64_t>(draw * 10 + xi));
            Tensor x({1, 3, kRes, kRes});
            for (int64_t i = 0; i < x.numel(); ++i) x[i] = 2.0 * xr.normal();
            std::vector<int> lab = {static_cast<int>(xr.uniform_int(-1, kClasses - 1))};
            Tensor f = nn::denoise_fwd(enc, dec, diff, x, {0.0}, lab, false, nullptr, nullptr);
            for (int64_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(f[i] - x[i]));
        }
    }
    const bool ok = worst <= 1e-5;
    report(2, "boundary identity denoise(x, 0) = x over 100 draws", ok,
           "max abs err " + std::to_string(worst));
    return ok;
}

// Small shared fixture for gradient criteria.
struct GradFixture {
    sched::DiffusionConfig diff;
    nn::NetworkConfig net;
    GradFixture() {
        net.enc_blocks = 2;
        net.dec_blocks = 2;
        net.dim_enc = 16;
        net.dim_dec = 16;
        net.heads_enc = 2;
        net.heads_dec = 2;
        net.patch = 8;
        net.resolution = 16;
        net.num_classes = 3;
    }
};

double fd_probe_worst(std::vector<nn::ParamRef>& refs, const std::function<double()>& loss_fn,
                      int probes, uint64_t seed) {
    struct Probe {
        Tensor* p;
        int64_t idx;
        double analytic;
    };
    std::vector<Probe> cands;
    for (auto& r : refs)
        for (int64_t i = 0; i < r.grad->numel(); ++i)
            if (std::abs((*r.grad)[i]) > 1e-9) cands.push_back({r.value, i, (*r.grad)[i]});
    if (cands.empty()) return 1e9;
    Rng rng(seed);
    double worst = 0.0;
    const double h = 1e-5;
    for (int p = 0; p < probes; ++p) {
        const auto& c = cands[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int64_t>(cands.size()) - 1))];
        const double orig = (*c.p)[c.idx];
        (*c.p)[c.idx] = orig + h;
        const double lp = loss_fn();
        (*c.p)[c.idx] = orig - h;
        const double lm = loss_fn();
        (*c.p)[c.idx] = orig;
        const double fd = (lp - lm) / (2.0 * h);
        worst = std::max(worst,
                         std::abs(c.analytic - fd) / std::max({std::abs(c.analytic), std::abs(fd), 1e-8}));
    }
    return worst;
}

Tensor rand_images(int64_t b, int64_t res, Rng& rng, double s = 0.5) {
    Tensor x({b, 3, res, res});
    for (int64_t i = 0; i < x.numel(); ++i) x[i] = s * rng.normal();
    return x;
}

bool criterion3() {
    GradFixture fx;
    Rng rng(77);
    bool ok = true;
    std::string detail;

    // Pre-training objective.
    {
        nn::ModelBundle b = nn::make_pretrain_bundle(fx.net, fx.diff, rng);
        b.refresh_sg();
        auto online = b.online_refs();
        const int64_t n_params = nn::param_count(online);
        if (n_params > 50000) {
            detail += "toy model too large; ";
            ok = false;
        }
        loss::PretrainInputs in;
        in.y1 = rand_images(3, 16, rng);
        in.y2 = rand_images(3, 16, rng);
        in.x_hi = rand_images(3, 16, rng);
        in.x_lo = rand_images(3, 16, rng);
        in.t_hi = {0.5, 2.0, 9.0};
        in.t_lo = {0.4, 1.7, 8.0};
        in.tau_cons = {0.12, 0.15, 0.18};
        in.t_clean = fx.diff.sigma_min;
        nn::zero_grads(online);
        loss::pretrain_loss(b, in, true);
        const double worst =
            fd_probe_worst(online, [&] { return loss::pretrain_loss(b, in, false).total; }, 20, 11);
        detail += "pretrain " + std::to_string(worst);
        ok &= worst < 1e-3;
    }

    // Diffusion objective.
    {
        Rng r2(177);
        nn::ModelBundle b = nn::make_finetune_bundle(fx.net, fx.diff, nn::Stage::FinetuneDM, nullptr, r2);
        loss::DiffusionInputs in;
        in.x0 = rand_images(2, 16, r2);
        in.eps = rand_images(2, 16, r2, 1.0);
        in.t_hi = {0.9, 4.0};
        in.t_lo = {0.7, 3.5};
        in.labels = {1, -1};
        auto online = b.online_refs();
        nn::zero_grads(online);
        loss::diffusion_loss(b, in, true);
        const double worst =
            fd_probe_worst(online, [&] { return loss::diffusion_loss(b, in, false).total; }, 20, 13);
        detail += ", diffusion " + std::to_string(worst);
        ok &= worst < 1e-3;
    }

    // Consistency + auxiliary objective.
    {
        Rng r3(377);
        nn::NetworkConfig net = fx.net;
        net.dec_dropout = 0.5;
        nn::ModelBundle b = nn::make_finetune_bundle(net, fx.diff, nn::Stage::FinetuneCM, nullptr, r3);
        b.refresh_sg();
        loss::ConsistencyInputs in;
        in.x0 = rand_images(3, 16, r3);
        in.eps = rand_images(3, 16, r3, 1.0);
        in.t = {0.8, 2.0, 11.0};
        in.r = {0.5, 1.6, 10.0};
        in.labels = {0, 2, -1};
        in.t_clean = fx.diff.sigma_min;
        auto online = b.online_refs();
        nn::zero_grads(online);
        loss::cm_loss(b, in, Rng(4242), true);
        const double worst = fd_probe_worst(
            online, [&] { return loss::cm_loss(b, in, Rng(4242), false).total; }, 20, 17);
        detail += ", consistency+aux " + std::to_string(worst);
        ok &= worst < 1e-3;
    }

    report(3, "gradient correctness vs central differences (rel < 1e-3)", ok, detail);
    return ok;
}

bool criterion4() {
    GradFixture fx;
    bool ok = true;

    auto max_grad = [](const std::vector<nn::ParamRef>& refs) {
        double m = 0.0;
        for (const auto& r : refs)
            for (int64_t i = 0; i < r.grad->numel(); ++i) m = std::max(m, std::abs((*r.grad)[i]));
        return m;
    };

    for (int trial = 0; trial < 3; ++trial) {
        Rng rng(900 + static_cast<uint64_t>(trial));
        nn::ModelBundle b = nn::make_pretrain_bundle(fx.net, fx.diff, rng);
        b.refresh_sg();
        loss::PretrainInputs in;
        in.y1 = rand_images(4, 16, rng);
        in.y2 = rand_images(4, 16, rng);
        in.x_hi = rand_images(4, 16, rng);
        in.x_lo = rand_images(4, 16, rng);
        in.t_hi = {0.5, 2.0, 9.0, 0.1};
        in.t_lo = {0.4, 1.7, 8.0, 0.05};
        in.tau_cons = {0.12, 0.15, 0.18, 0.1};
        in.t_clean = fx.diff.sigma_min;
        auto online = b.online_refs();
        auto momentum = b.momentum_refs();
        auto sg = b.sg_refs();
        nn::zero_grads(online);
        nn::zero_grads(momentum);
        nn::zero_grads(sg);
        loss::pretrain_loss(b, in, true);
        ok &= max_grad(momentum) == 0.0;
        ok &= max_grad(sg) == 0.0;
        ok &= max_grad(online) > 0.0;

        Rng r2(1400 + static_cast<uint64_t>(trial));
        nn::NetworkConfig net = fx.net;
        net.dec_dropout = 0.5;
        nn::ModelBundle bc = nn::make_finetune_bundle(net, fx.diff, nn::Stage::FinetuneCM, nullptr, r2);
        bc.refresh_sg();
        loss::ConsistencyInputs cin;
        cin.x0 = rand_images(3, 16, r2);
        cin.eps = rand_images(3, 16, r2, 1.0);
        cin.t = {0.8, 2.0, 11.0};
        cin.r = {0.5, 1.6, 10.0};
        cin.labels = {0, 1, 2};
        cin.t_clean = fx.diff.sigma_min;
        auto conline = bc.online_refs();
        auto csg = bc.sg_refs();
        auto cfrozen = bc.frozen_refs();
        nn::zero_grads(conline);
        nn::zero_grads(csg);
        nn::zero_grads(cfrozen);
        loss::cm_loss(bc, cin, Rng(7), true);
        ok &= max_grad(csg) == 0.0;
        ok &= max_grad(cfrozen) == 0.0;
        ok &= max_grad(conline) > 0.0;
    }
    report(4, "stop-grad / frozen branches accumulate exactly zero gradient", ok);
    return ok;
}

bool criterion5() {
    const double mu = 0.2, sigma0 = 0.5;
    sample::ScoreField field = sample::analytic_gaussian_denoiser(mu, sigma0);
    sched::DiffusionConfig diff;
    bool ok = true;
    std::string detail;

    // 10k-sample moments through 32-step Heun.
    {
        auto times = sample::sampling_times(32, diff, 64);
        Rng rng(5);
        const int64_t n = 10000;
        Tensor z({n});
        for (int64_t i = 0; i < n; ++i) z[i] = diff.t_max * rng.normal();
        Tensor out = sample::heun_sample(field, z, times, {});
        double mean = 0.0;
        for (int64_t i = 0; i < n; ++i) mean += out[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (int64_t i = 0; i < n; ++i) var += (out[i] - mean) * (out[i] - mean);
        const double std_out = std::sqrt(var / static_cast<double>(n - 1));
        ok &= std::abs(mean - mu) <= 0.02 * sigma0;
        ok &= std::abs(std_out - sigma0) <= 0.03 * sigma0;
        detail += "mean " + std::to_string(mean) + " std " + std::to_string(std_out);
    }

    // Convergence order on the exact flow map.
    {
        Rng rng(11);
        Tensor z({128});
        for (int64_t i = 0; i < 128; ++i) z[i] = diff.t_max * rng.normal();
        Tensor exact = sample::gaussian_flow_exact(z, mu, sigma0, diff.t_max, 0.0);
        std::vector<double> ln, lh, le;
        for (int64_t steps : {8, 16, 32, 64}) {
            auto times = sample::sampling_times(steps, diff, 64);
            Tensor h = sample::heun_sample(field, z, times, {});
            Tensor e = sample::euler_sample(field, z, times, {});
            double seh = 0, see = 0;
            for (int64_t i = 0; i < 128; ++i) {
                seh += (h[i] - exact[i]) * (h[i] - exact[i]);
                see += (e[i] - exact[i]) * (e[i] - exact[i]);
            }
            ln.push_back(std::log2(static_cast<double>(steps)));
            lh.push_back(std::log2(std::sqrt(seh / 128)));
            le.push_back(std::log2(std::sqrt(see / 128)));
        }
        auto slope = [](const std::vector<double>& x, const std::vector<double>& y) {
            const double n = static_cast<double>(x.size());
            double sx = 0, sy = 0, sxx = 0, sxy = 0;
            for (size_t i = 0; i < x.size(); ++i) {
                sx += x[i];
                sy += y[i];
                sxx += x[i] * x[i];
                sxy += x[i] * y[i];
            }
            return (n * sxy - sx * sy) / (n * sxx - sx * sx);
        };
        const double sh = -slope(ln, lh), se = -slope(ln, le);
        ok &= std::abs(sh - 2.0) <= 0.4;
        ok &= std::abs(se - 1.0) <= 0.4;
        detail += ", heun slope " + std::to_string(sh) + ", euler slope " + std::to_string(se);
    }

    report(5, "sampler vs analytic oracle (moments, convergence order)", ok, detail);
    return ok;
}

bool criterion6() {
    bool ok = true;
    sched::DiffusionConfig diff;

    sched::DiscretizationSchedule disc{20, 1280, 700};
    ok &= sched::icm_steps(0, disc) == 20;
    ok &= sched::icm_steps(699, disc) == 1280;
    std::set<int64_t> seen;
    int64_t prev = 0;
    for (int64_t k = 0; k < 700; ++k) {
        const int64_t n = sched::icm_steps(k, disc);
        ok &= n >= prev;
        prev = n;
        seen.insert(n);
    }
    ok &= seen == std::set<int64_t>{20, 40, 80, 160, 320, 640, 1280};

    sched::RatioSchedule rs{8, 1000};
    ok &= rs.ratio_at(0) == 0.5;
    ok &= rs.ratio_at(999) == 1.0 - std::exp2(-8);

    sched::TemperatureSchedule ts{0.1, 0.2, 100};
    ok &= sched::temperature_at(0.0, 0.0, ts) == 0.1;
    ok &= std::abs(sched::temperature_at(1.0, 0.0, ts) - 0.2) < 1e-15;
    ok &= sched::temperature_at(1.0, 1.0, ts) == 0.1;

    auto grid = sched::karras_grid(1280, diff);
    ok &= grid.times.front() == 0.002 && grid.times.back() == 80.0;

    report(6, "schedule suite (icm endpoints, ect ratio, temperature, grid)", ok);
    return ok;
}

bool criterion7() {
    Rng rng(3);
    sched::DiffusionConfig diff;
    auto grid = sched::karras_grid(64, diff);
    data::CleanSample s;
    s.x0 = Tensor({3, 8, 8});

    double worst = 0.0;
    bool eps_shared = true;
    bool reconstructable = true;
    for (int trial = 0; trial < 1000; ++trial) {
        for (int64_t i = 0; i < s.x0.numel(); ++i) s.x0[i] = rng.uniform(-1.0, 1.0);
        const int64_t n = rng.uniform_int(1, grid.size() - 1);
        data::TrajectoryPair p = data::temporal_pair(s, grid, n, rng);
        const double gap = grid[n] - grid[n - 1];
        for (int64_t i = 0; i < s.x0.numel(); ++i) {
            eps_shared &= (p.hi.eps[i] == p.lo.eps[i]);  // bit-level shared draw
            reconstructable &= (p.hi.x_t[i] == s.x0[i] + grid[n] * p.hi.eps[i]);
            reconstructable &= (p.lo.x_t[i] == s.x0[i] + grid[n - 1] * p.lo.eps[i]);
            worst = std::max(worst,
                             std::abs((p.hi.x_t[i] - p.lo.x_t[i]) - gap * p.hi.eps[i]));
        }
    }
    // The shared draw and both reconstructions are bit-exact; the difference
    // identity holds to rounding of the two stored sums.
    const bool ok = eps_shared && reconstructable && worst <= 1e-12;
    report(7, "trajectory-pair algebra over 1000 random pairs", ok,
           "max |(hi-lo) - gap*eps| = " + std::to_string(worst));
    return ok;
}

bool criterion8() {
    fs::create_directories(work_dir());
    const double ref = 1.0 / std::sqrt(static_cast<double>(accept_net().dim_enc));
    auto probes = eval::probe_times(sched::DiffusionConfig{}, kRes);
    Tensor diag_imgs = dataset_images(1000);

    int full_pass = 0, abl_pass = 0;
    std::string detail;
    for (uint64_t seed = 0; seed < 3; ++seed) {
        const std::string full_path = pretrain_ckpt(seed, false);
        nn::Encoder enc = encoder_from_ckpt(full_path);
        Rng diag_rng(500 + seed);
        auto stds = eval::per_channel_std(enc, diag_imgs, probes, diag_rng);
        bool in_band = true;
        for (double sd : stds) in_band &= (sd >= 0.5 * ref && sd <= 1.5 * ref);
        full_pass += in_band;
        detail += "s" + std::to_string(seed) + " full[" + std::to_string(stds.front()) + ".." +
                  std::to_string(stds.back()) + "] ";

        const std::string noc_path = pretrain_ckpt(seed, true);
        nn::Encoder enc_noc = encoder_from_ckpt(noc_path);
        Rng diag_rng2(600 + seed);
        auto stds_noc = eval::per_channel_std(enc_noc, diag_imgs, probes, diag_rng2);
        abl_pass += (stds_noc.back() < 0.2 * ref);
        detail += "noc_top " + std::to_string(stds_noc.back()) + "; ";
        info(detail);
    }
    const bool ok = full_pass >= 2 && abl_pass >= 2;
    report(8, "collapse diagnostic: full method in [0.5,1.5]/sqrt(d), ablation collapses", ok,
           detail + "(majority " + std::to_string(full_pass) + "/3 and " + std::to_string(abl_pass) +
               "/3)");
    return ok;
}

bool criterion9() {
    fs::create_directories(work_dir());
    const std::string pre = pretrain_ckpt(0, false);
    nn::Encoder feat_enc = encoder_from_ckpt(pre);

    double mean_rcm = 0.0, mean_scratch = 0.0;
    std::string detail;
    for (uint64_t seed = 0; seed < 3; ++seed) {
        cfg::RunConfig c_rcm = dm_cfg(seed, false, pre);
        const std::string p_rcm =
            work_dir() + "/dm_rcm_" + std::to_string(seed) + "_" + cfg::config_hash(c_rcm) + ".epg";
        train::Trainer t_rcm = run_cached(c_rcm, p_rcm);
        const double fid_rcm = fid_proxy_of(*t_rcm.bundle().enc_ema, *t_rcm.bundle().dec_ema,
                                            feat_enc, sample::Method::Euler, 50, 1000, 100 + seed);

        cfg::RunConfig c_scr = dm_cfg(seed, true, "");
        const std::string p_scr =
            work_dir() + "/dm_scratch_" + std::to_string(seed) + "_" + cfg::config_hash(c_scr) + ".epg";
        train::Trainer t_scr = run_cached(c_scr, p_scr);
        const double fid_scr = fid_proxy_of(*t_scr.bundle().enc_ema, *t_scr.bundle().dec_ema,
                                            feat_enc, sample::Method::Euler, 50, 1000, 100 + seed);

        mean_rcm += fid_rcm / 3.0;
        mean_scratch += fid_scr / 3.0;
        detail += "s" + std::to_string(seed) + " rcm " + std::to_string(fid_rcm) + " vs scratch " +
                  std::to_string(fid_scr) + "; ";
        info(detail);
    }
    const bool ok = mean_rcm <= 0.9 * mean_scratch;
    report(9, "pre-training benefit (diffusion): mean FID-proxy lower by >= 10%", ok,
           detail + "means " + std::to_string(mean_rcm) + " vs " + std::to_string(mean_scratch));
    return ok;
}

bool criterion10() {
    fs::create_directories(work_dir());
    const std::string pre = pretrain_ckpt(0, false);
    nn::Encoder feat_enc = encoder_from_ckpt(pre);

    bool full_ok = true;
    int aux_better = 0;
    std::string detail;
    for (uint64_t seed = 0; seed < 3; ++seed) {
        // FID at initialization (EMA = copy of the freshly initialized model).
        cfg::RunConfig c_full = cm_cfg(seed, false, false, pre);
        double fid_init;
        {
            train::Trainer t_init(c_full, &accept_data());
            fid_init = fid_proxy_of(*t_init.bundle().enc_ema, *t_init.bundle().dec_ema, feat_enc,
                                    sample::Method::CmOnestep, 1, 1000, 200 + seed);
        }
        const std::string p_full =
            work_dir() + "/cm_full_" + std::to_string(seed) + "_" + cfg::config_hash(c_full) + ".epg";
        train::Trainer t_full = run_cached(c_full, p_full);
        const double fid_full = fid_proxy_of(*t_full.bundle().enc_ema, *t_full.bundle().dec_ema,
                                             feat_enc, sample::Method::CmOnestep, 1, 1000, 200 + seed);
        full_ok &= (fid_full <= 0.5 * fid_init);

        cfg::RunConfig c_noaux = cm_cfg(seed, false, true, pre);
        const std::string p_noaux =
            work_dir() + "/cm_noaux_" + std::to_string(seed) + "_" + cfg::config_hash(c_noaux) + ".epg";
        train::Trainer t_noaux = run_cached(c_noaux, p_noaux);
        const double fid_noaux =
            fid_proxy_of(*t_noaux.bundle().enc_ema, *t_noaux.bundle().dec_ema, feat_enc,
                         sample::Method::CmOnestep, 1, 1000, 200 + seed);
        aux_better += (fid_noaux > fid_full);

        detail += "s" + std::to_string(seed) + " init " + std::to_string(fid_init) + " full " +
                  std::to_string(fid_full) + " noaux " + std::to_string(fid_noaux) + "; ";
        info(detail);
    }

    // From-scratch run: allowed to trip the non-finite abort, which must come
    // out as the structured NumericalError (the clean abort path).
    bool scratch_clean = true;
    {
        cfg::RunConfig c_scr = cm_cfg(0, true, false, "");
        c_scr.steps = 4000;
        try {
            train::Trainer t(c_scr, &accept_data());
            while (t.step() < c_scr.steps) t.train_step();
            detail += "scratch finished finite; ";
        } catch (const NumericalError& e) {
            detail += std::string("scratch aborted cleanly (") + e.what() + "); ";
        } catch (...) {
            scratch_clean = false;
        }
    }

    const bool ok = full_ok && aux_better >= 2 && scratch_clean;
    report(10, "consistency trainability: >=50% FID gain, w/o-aux worse on >=2/3 seeds", ok, detail);
    return ok;
}

bool criterion11() {
    Rng rng(91);
    sched::DiffusionConfig diff;
    nn::NetworkConfig net = accept_net();
    nn::ModelBundle b = nn::make_finetune_bundle(net, diff, nn::Stage::FinetuneDM, nullptr, rng);

    const auto times = sample::sampling_times(8, diff, kRes);
    Tensor z({2, 3, kRes, kRes});
    Rng zr(17);
    for (int64_t i = 0; i < z.numel(); ++i) z[i] = times.front() * zr.normal();
    std::vector<int> labels = {3, 7};

    sample::ScoreField plain = sample::model_field(b.enc, *b.dec, diff);
    sample::ScoreField guided = sample::cfg_field(b.enc, *b.dec, diff, 2.5, 0.19, 1.61);
    sample::ScoreField degenerate = sample::cfg_field(b.enc, *b.dec, diff, 2.5, 1.0, 1.0);

    Tensor base = sample::heun_sample(plain, z, times, labels);
    Tensor with_cfg = sample::heun_sample(guided, z, times, labels);
    Tensor degen = sample::heun_sample(degenerate, z, times, labels);

    double diff_cfg = 0.0;
    bool degen_equal = true;
    for (int64_t i = 0; i < base.numel(); ++i) {
        diff_cfg += std::abs(with_cfg[i] - base[i]);
        degen_equal &= (degen[i] == base[i]);
    }
    const bool ok = diff_cfg > 1e-9 && degen_equal;
    report(11, "interval CFG: w=2.5 changes outputs, degenerate interval reproduces w=1 bit-exactly",
           ok, "L1 gap " + std::to_string(diff_cfg));
    return ok;
}

bool criterion12() {
    fs::create_directories(work_dir());
    bool ok = true;
    std::string detail;

    // Save/load/resume equivalence on a real (small) run.
    {
        cfg::RunConfig c = cfg::RunConfig::defaults_for("pretrain");
        c.net = accept_net();
        c.net.dim_enc = 16;
        c.net.dim_dec = 16;
        c.net.heads_enc = 2;
        c.net.heads_dec = 2;
        c.steps = 20;
        c.batch = 4;
        c.seed = 3;
        c.pre_n1 = 160;
        data::Dataset ds = data::make_synthetic(4, 2, kRes, 9);
        train::Trainer a(c, &ds);
        for (int i = 0; i < 8; ++i) a.train_step();
        const std::string path = work_dir() + "/c12_state.epg";
        a.save_checkpoint(path);
        train::Trainer b(c, &ds);
        b.load_checkpoint(path);
        for (int i = 0; i < 8; ++i) {
            auto ra = a.train_step();
            auto rb = b.train_step();
            ok &= (ra.report.total == rb.report.total);
            ok &= (ra.grad_norm == rb.grad_norm);
        }
        detail += "resume streams identical; ";
    }

    // Seed determinism of sampling.
    {
        Rng rng(5);
        sched::DiffusionConfig diff;
        nn::ModelBundle b = nn::make_finetune_bundle(accept_net(), diff, nn::Stage::FinetuneDM,
                                                     nullptr, rng);
        sample::ScoreField field = sample::model_field(b.enc, *b.dec, diff);
        auto times = sample::sampling_times(4, diff, kRes);
        auto draw = [&](uint64_t seed) {
            Rng zr2(seed);
            Tensor z({1, 3, kRes, kRes});
            for (int64_t i = 0; i < z.numel(); ++i) z[i] = times.front() * zr2.normal();
            return sample::heun_sample(field, z, times, {4});
        };
        Tensor s1 = draw(42), s2 = draw(42), s3 = draw(43);
        bool same = true;
        double gap = 0.0;
        for (int64_t i = 0; i < s1.numel(); ++i) {
            same &= (s1[i] == s2[i]);
            gap += std::abs(s3[i] - s1[i]);
        }
        ok &= same && gap > 0.0;
        detail += "sampling deterministic per seed";
    }

    report(12, "reproducibility: checkpoint resume equivalence, sampling determinism", ok, detail);
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) {
        if (std::strcmp(argv[i], "--criteria") == 0 && i + 1 < argc) {
            const char* p = argv[i + 1];
            while (*p) {
                selected.insert(std::atoi(p));
                while (*p && *p != ',') ++p;
                if (*p == ',') ++p;
            }
            ++i;
        }
    }
    auto want = [&](int c) { return selected.empty() || selected.count(c) > 0; };

    const std::pair<int, bool (*)()> criteria[] = {
        {1, criterion1}, {2, criterion2}, {3, criterion3},   {4, criterion4},
        {5, criterion5}, {6, criterion6}, {7, criterion7},   {8, criterion8},
        {9, criterion9}, {10, criterion10}, {11, criterion11}, {12, criterion12},
    };
    for (const auto& [id, fn] : criteria)
        if (want(id)) fn();

    if (g_failures > 0) {
        std::printf("%d criterion(s) FAILED\n", g_failures);
        return 1;
    }
    std::printf("all selected criteria passed\n");
    return 0;
}
