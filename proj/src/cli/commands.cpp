#include "epg/cli/commands.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "epg/core/error.hpp"
#include "epg/eval.hpp"
#include "epg/io/checkpoint.hpp"
#include "epg/io/image.hpp"
#include "epg/io/plot.hpp"
#include "epg/sampling.hpp"
#include "epg/training.hpp"
#include "epg/trajectory.hpp"

namespace fs = std::filesystem;

namespace epg::cli {

using json = nlohmann::json;

cfg::RunConfig resolve_config(const CommonArgs& args, const std::string& expected_stage) {
    if (args.config_path.empty()) throw UsageError("--config is required");
    cfg::RunConfig c = cfg::load_config(args.config_path);
    if (!expected_stage.empty() && c.stage != expected_stage)
        throw UsageError("config stage is '" + c.stage + "', expected '" + expected_stage + "'");
    if (args.seed >= 0) c.seed = static_cast<uint64_t>(args.seed);
    if (!args.out_dir.empty()) c.out_dir = args.out_dir;
    if (args.count > 0) c.eval_count = args.count;
    return c;
}

namespace {

void write_run_manifest(const cfg::RunConfig& c, const std::string& extra_key = "",
                        const json& extra = {}) {
    json j;
    j["config"] = json::parse(cfg::serialize_config(c));
    j["config_hash"] = cfg::config_hash(c);
    j["seed"] = c.seed;
    if (!extra_key.empty()) j[extra_key] = extra;
    std::ofstream out(fs::path(c.out_dir) / "manifest.json");
    out << j.dump(2) << "\n";
}

void write_diag_dump(const cfg::RunConfig& c, int64_t step, const std::string& what) {
    json j;
    j["step"] = step;
    j["error"] = what;
    j["config_hash"] = cfg::config_hash(c);
    std::ofstream out(fs::path(c.out_dir) / "diagnostic_dump.json");
    out << j.dump(2) << "\n";
    std::fprintf(stderr, "numerical failure at step %" PRId64 ": %s\ndump: %s\n", step, what.c_str(),
                 (fs::path(c.out_dir) / "diagnostic_dump.json").string().c_str());
}

// Encoder restored from a checkpoint's unconditional ("enc.") tensors.
nn::Encoder load_feature_encoder(const std::string& ckpt_path, const cfg::RunConfig& c) {
    io::LoadedCheckpoint ck = io::load_checkpoint(ckpt_path);
    nn::NetworkConfig net = c.net;
    net.num_classes = 0;
    net.dec_dropout = 0.0;
    nn::Encoder enc;
    Rng dummy(0);
    enc.init(net, c.diff, dummy);
    for (auto& ref : nn::collect(enc, std::string("enc."))) {
        auto it = ck.tensors.find(ref.name);
        if (it == ck.tensors.end()) {
            it = ck.tensors.find("ema." + ref.name);
            if (it == ck.tensors.end())
                throw UsageError("feature checkpoint missing tensor " + ref.name);
        }
        if (!it->second.same_shape(*ref.value))
            throw UsageError("feature checkpoint shape mismatch at " + ref.name);
        for (int64_t i = 0; i < ref.value->numel(); ++i) (*ref.value)[i] = it->second[i];
    }
    return enc;
}

// Conditional EMA model (encoder + decoder) for sampling/eval.
struct SamplingModel {
    nn::NetworkConfig net;
    nn::Encoder enc;
    nn::Decoder dec;
};

SamplingModel load_sampling_model(const std::string& ckpt_path, const cfg::RunConfig& c) {
    io::LoadedCheckpoint ck = io::load_checkpoint(ckpt_path);
    if (ck.manifest.stage == "pretrain")
        throw UsageError("cannot sample from a pre-training checkpoint");
    SamplingModel m;
    m.net = c.net;
    m.net.dec_dropout = 0.0;
    Rng dummy(0);
    m.enc.init(m.net, c.diff, dummy);
    m.dec.init(m.net, dummy);
    auto restore = [&](std::vector<nn::ParamRef> refs) {
        for (auto& ref : refs) {
            auto it = ck.tensors.find("ema." + ref.name);
            if (it == ck.tensors.end())
                throw UsageError("checkpoint missing EMA tensor ema." + ref.name);
            if (!it->second.same_shape(*ref.value))
                throw UsageError("checkpoint shape mismatch at ema." + ref.name);
            for (int64_t i = 0; i < ref.value->numel(); ++i) (*ref.value)[i] = it->second[i];
        }
    };
    restore(nn::collect(m.enc, std::string("enc.")));
    restore(nn::collect(m.dec, std::string("dec.")));
    return m;
}

struct SampleResult {
    Tensor images;  // [N, 3, res, res]
    int64_t nfe_per_image = 0;
};

SampleResult run_sampler(const SamplingModel& m, const cfg::RunConfig& c, int64_t count,
                         uint64_t seed) {
    const int64_t res = c.net.resolution;
    const double t_top = sched::shift_sigma(c.diff.t_max, res, c.diff);
    const double smin = sched::shift_sigma(c.diff.sigma_min, res, c.diff);
    const sample::Method method = c.sampler.parsed_method();
    sample::SamplerConfig sc{method, c.sampler.steps, c.sampler.cfg_scale, c.sampler.cfg_lo,
                             c.sampler.cfg_hi};
    sc.validate();
    const std::vector<double> times = sample::sampling_times(c.sampler.steps, c.diff, res);

    SampleResult out;
    out.images = Tensor({count, 3, res, res});
    const int64_t chw = 3 * res * res;

    const int64_t batch = std::min<int64_t>(count, 32);
    Rng root(seed);
    int64_t done = 0;
    while (done < count) {
        const int64_t n = std::min(batch, count - done);
        Tensor z({n, 3, res, res});
        std::vector<int> labels(static_cast<size_t>(n), -1);
        for (int64_t i = 0; i < n; ++i) {
            Rng zr = root.substream(0x7a6e6f69ULL, static_cast<uint64_t>(done + i));
            for (int64_t j = 0; j < chw; ++j) z[i * chw + j] = t_top * zr.normal();
            if (m.net.num_classes > 0)
                labels[static_cast<size_t>(i)] =
                    static_cast<int>(zr.uniform_int(0, m.net.num_classes - 1));
        }

        sample::ScoreField field =
            (c.sampler.cfg_scale > 1.0 && m.net.num_classes > 0)
                ? sample::cfg_field(m.enc, m.dec, c.diff, c.sampler.cfg_scale, c.sampler.cfg_lo,
                                    c.sampler.cfg_hi)
                : sample::model_field(m.enc, m.dec, c.diff);

        Tensor batch_out;
        switch (method) {
            case sample::Method::Heun:
                batch_out = sample::heun_sample(field, z, times, labels);
                break;
            case sample::Method::Euler:
                batch_out = sample::euler_sample(field, z, times, labels);
                break;
            case sample::Method::CmOnestep: {
                Rng renoise = root.substream(0x726e6f69ULL, static_cast<uint64_t>(done));
                batch_out =
                    sample::cm_sample(field, z, t_top, smin, labels, c.sampler.cm_steps, renoise);
                break;
            }
        }
        out.nfe_per_image = field.nfe();
        for (int64_t i = 0; i < n * chw; ++i) out.images[done * chw + i] = batch_out[i];
        done += n;
    }
    return out;
}

double fid_proxy(const nn::Encoder& feat_enc, const cfg::RunConfig& c, const Tensor& generated,
                 const data::Dataset& reference, int64_t ref_count) {
    const double t_feat = sched::shift_sigma(c.diff.sigma_min, c.net.resolution, c.diff);
    Tensor gen_feats = eval::extract_features(feat_enc, generated, t_feat);

    const int64_t n_ref = std::min<int64_t>(ref_count, reference.size());
    const int64_t res = reference.resolution();
    const int64_t chw = 3 * res * res;
    Tensor ref_imgs({n_ref, 3, res, res});
    for (int64_t i = 0; i < n_ref; ++i) {
        const Tensor img = reference.sample(i).x0;
        for (int64_t j = 0; j < chw; ++j) ref_imgs[i * chw + j] = img[j];
    }
    Tensor ref_feats = eval::extract_features(feat_enc, ref_imgs, t_feat);

    return eval::frechet_distance(eval::gaussian_stats(gen_feats), eval::gaussian_stats(ref_feats));
}

}  // namespace

int cmd_pretrain(const CommonArgs& args) {
    cfg::RunConfig c = resolve_config(args, "pretrain");
    fs::create_directories(c.out_dir);
    data::Dataset ds = data::Dataset::load(c.data_path, static_cast<int>(c.net.resolution));
    train::Trainer trainer(c, &ds);
    if (!args.resume.empty()) trainer.load_checkpoint(args.resume);
    write_run_manifest(c);
    train::StepLogger logger((fs::path(c.out_dir) / "train_log.jsonl").string());

    const std::string ckpt = (fs::path(c.out_dir) / "checkpoint.epg").string();
    try {
        while (trainer.step() < c.steps) {
            train::StepRecord rec = trainer.train_step();
            if (c.log_every > 0 && rec.step % c.log_every == 0) logger.log(rec);
            if (c.ckpt_every > 0 && (rec.step + 1) % c.ckpt_every == 0) trainer.save_checkpoint(ckpt);
            if (c.eval_every > 0 && (rec.step + 1) % c.eval_every == 0) {
                // Collapse diagnostic on the training data with current weights.
                const int64_t n_diag = std::min<int64_t>(256, ds.size());
                const int64_t chw = 3 * c.net.resolution * c.net.resolution;
                Tensor imgs({n_diag, 3, c.net.resolution, c.net.resolution});
                for (int64_t i = 0; i < n_diag; ++i) {
                    const Tensor img = ds.sample(i).x0;
                    for (int64_t j = 0; j < chw; ++j) imgs[i * chw + j] = img[j];
                }
                Rng diag_rng(c.seed ^ 0xd1a6);
                auto probes = eval::probe_times(c.diff, c.net.resolution);
                auto stds = eval::per_channel_std(trainer.bundle().enc, imgs, probes, diag_rng);
                json dj;
                dj["step"] = rec.step;
                dj["probe_t"] = probes;
                dj["channel_mean_std"] = stds;
                std::ofstream out(fs::path(c.out_dir) / "collapse_diag.jsonl", std::ios::app);
                out << dj.dump() << "\n";
            }
        }
        trainer.save_checkpoint(ckpt);
    } catch (const NumericalError& e) {
        write_diag_dump(c, trainer.step(), e.what());
        return 3;
    }
    std::printf("pretrain done: %s\n", ckpt.c_str());
    return 0;
}

int cmd_finetune(const CommonArgs& args, const std::string& stage) {
    cfg::RunConfig c = resolve_config(args, stage);
    fs::create_directories(c.out_dir);
    data::Dataset ds = data::Dataset::load(c.data_path, static_cast<int>(c.net.resolution));
    if (!c.from_scratch && c.init_checkpoint.empty() && args.resume.empty())
        throw UsageError("fine-tuning needs init_checkpoint (or ablation.from_scratch)");
    train::Trainer trainer(c, &ds);
    if (!args.resume.empty()) trainer.load_checkpoint(args.resume);
    write_run_manifest(c);
    train::StepLogger logger((fs::path(c.out_dir) / "train_log.jsonl").string());

    std::optional<nn::Encoder> feat_enc;
    if (c.eval_every > 0 && !c.feature_checkpoint.empty())
        feat_enc = load_feature_encoder(c.feature_checkpoint, c);

    const std::string ckpt = (fs::path(c.out_dir) / "checkpoint.epg").string();
    try {
        while (trainer.step() < c.steps) {
            train::StepRecord rec = trainer.train_step();
            if (c.log_every > 0 && rec.step % c.log_every == 0) logger.log(rec);
            if (c.ckpt_every > 0 && (rec.step + 1) % c.ckpt_every == 0) trainer.save_checkpoint(ckpt);
            if (feat_enc && c.eval_every > 0 && (rec.step + 1) % c.eval_every == 0) {
                trainer.save_checkpoint(ckpt);
                SamplingModel m = load_sampling_model(ckpt, c);
                SampleResult sr = run_sampler(m, c, std::min<int64_t>(c.eval_count, 512), c.seed);
                const double fid = fid_proxy(*feat_enc, c, sr.images, ds, c.eval_count);
                json ej;
                ej["step"] = rec.step;
                ej["fid_proxy"] = fid;
                std::ofstream out(fs::path(c.out_dir) / "eval_log.jsonl", std::ios::app);
                out << ej.dump() << "\n";
            }
        }
        trainer.save_checkpoint(ckpt);
    } catch (const NumericalError& e) {
        write_diag_dump(c, trainer.step(), e.what());
        return 3;
    }

    // Metric-vs-step curve from the periodic evaluations, if any ran.
    if (fs::exists(fs::path(c.out_dir) / "eval_log.jsonl")) {
        io::Series s;
        s.name = "fid_proxy";
        std::ifstream in(fs::path(c.out_dir) / "eval_log.jsonl");
        std::string line;
        while (std::getline(in, line)) {
            json rec = json::parse(line);
            s.x.push_back(rec["step"].get<double>());
            s.y.push_back(rec["fid_proxy"].get<double>());
        }
        if (!s.x.empty())
            io::write_svg_plot((fs::path(c.out_dir) / "fid_vs_step.svg").string(), {s},
                               "FID-proxy over training", "step", "FID-proxy");
    }
    std::printf("%s done: %s\n", stage.c_str(), ckpt.c_str());
    return 0;
}

int cmd_sample(const CommonArgs& args) {
    cfg::RunConfig c = resolve_config(args, "");
    if (args.resume.empty()) throw UsageError("sample: --resume <checkpoint> is required");
    fs::create_directories(c.out_dir);
    const int64_t count = args.count > 0 ? args.count : 64;

    SamplingModel m = load_sampling_model(args.resume, c);
    SampleResult sr = run_sampler(m, c, count, c.seed);

    const int64_t res = c.net.resolution;
    const int64_t chw = 3 * res * res;
    std::vector<Tensor> tiles;
    tiles.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        Tensor t({3, res, res});
        for (int64_t j = 0; j < chw; ++j) t[j] = sr.images[i * chw + j];
        tiles.push_back(std::move(t));
    }
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(count))));
    const std::string grid_path = (fs::path(c.out_dir) / "samples.png").string();
    io::save_png(grid_path, io::make_grid(tiles, cols));

    json manifest;
    manifest["seed"] = c.seed;
    manifest["count"] = count;
    manifest["nfe"] = sr.nfe_per_image;
    manifest["sampler"] = {{"method", c.sampler.method},
                           {"steps", c.sampler.steps},
                           {"cfg_scale", c.sampler.cfg_scale},
                           {"cfg_lo", c.sampler.cfg_lo},
                           {"cfg_hi", c.sampler.cfg_hi},
                           {"cm_steps", c.sampler.cm_steps}};
    manifest["config_hash"] = cfg::config_hash(c);
    manifest["files"] = {grid_path};
    std::ofstream out(fs::path(c.out_dir) / "sample_manifest.json");
    out << manifest.dump(2) << "\n";
    std::printf("wrote %s (NFE %" PRId64 ")\n", grid_path.c_str(), sr.nfe_per_image);
    return 0;
}

int cmd_eval(const CommonArgs& args) {
    cfg::RunConfig c = resolve_config(args, "");
    if (args.resume.empty()) throw UsageError("eval: --resume <checkpoint> is required");
    if (c.feature_checkpoint.empty()) throw UsageError("eval: feature_checkpoint is required");
    fs::create_directories(c.out_dir);
    data::Dataset ds = data::Dataset::load(c.data_path, static_cast<int>(c.net.resolution));

    const int64_t count = args.count > 0 ? args.count : c.eval_count;
    const int64_t d = c.net.dim_enc;
    if (count < d)
        std::fprintf(stderr, "warning: eval count %" PRId64 " below feature dim %" PRId64
                             "; covariance will be unstable\n",
                     count, d);

    nn::Encoder feat_enc = load_feature_encoder(c.feature_checkpoint, c);
    SamplingModel m = load_sampling_model(args.resume, c);
    SampleResult sr = run_sampler(m, c, count, c.seed);
    const double fid = fid_proxy(feat_enc, c, sr.images, ds, count);

    json rj;
    rj["metric"] = "fid_proxy";
    rj["value"] = fid;
    rj["count"] = count;
    rj["nfe"] = sr.nfe_per_image;
    rj["config_hash"] = cfg::config_hash(c);
    rj["sampler"] = c.sampler.method;
    std::ofstream out(fs::path(c.out_dir) / "metrics.json");
    out << rj.dump(2) << "\n";
    std::printf("fid_proxy = %.6f (n=%" PRId64 ")\n", fid, count);
    return 0;
}

int cmd_diag(const CommonArgs& args) {
    cfg::RunConfig c = resolve_config(args, "");
    if (args.resume.empty()) throw UsageError("diag: --resume <checkpoint> is required");
    fs::create_directories(c.out_dir);
    data::Dataset ds = data::Dataset::load(c.data_path, static_cast<int>(c.net.resolution));

    nn::Encoder enc = load_feature_encoder(args.resume, c);
    const int64_t n = std::min<int64_t>(1000, ds.size());
    const int64_t chw = 3 * c.net.resolution * c.net.resolution;
    Tensor imgs({n, 3, c.net.resolution, c.net.resolution});
    for (int64_t i = 0; i < n; ++i) {
        const Tensor img = ds.sample(i).x0;
        for (int64_t j = 0; j < chw; ++j) imgs[i * chw + j] = img[j];
    }
    Rng rng(c.seed ^ 0xd1a6);
    auto probes = eval::probe_times(c.diff, c.net.resolution);
    auto stds = eval::per_channel_std(enc, imgs, probes, rng);

    json rj;
    rj["probe_t"] = probes;
    rj["channel_mean_std"] = stds;
    rj["reference"] = 1.0 / std::sqrt(static_cast<double>(c.net.dim_enc));
    rj["count"] = n;
    rj["config_hash"] = cfg::config_hash(c);
    std::ofstream out(fs::path(c.out_dir) / "diag_report.json");
    out << rj.dump(2) << "\n";

    io::Series s{"channel-mean std", probes, stds};
    io::Series ref{"1/sqrt(d)", probes,
                   std::vector<double>(probes.size(), 1.0 / std::sqrt(static_cast<double>(c.net.dim_enc)))};
    io::write_svg_plot((fs::path(c.out_dir) / "diag_std_vs_t.svg").string(), {s, ref},
                       "Feature spread vs noise level", "t", "channel-mean std", true);
    for (size_t i = 0; i < probes.size(); ++i)
        std::printf("t=%-10.4f std=%.6f\n", probes[i], stds[i]);
    return 0;
}

}  // namespace epg::cli
