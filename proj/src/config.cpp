#include "epg/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "epg/core/error.hpp"

namespace epg::cfg {

using json = nlohmann::json;

void OptimizerConfig::validate() const {
    if (!(lr > 0.0)) throw UsageError("optim.lr must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw UsageError("optim betas must lie in [0, 1)");
    if (grad_clip < 0.0) throw UsageError("optim.grad_clip must be >= 0");
    if (warmup_frac < 0.0 || warmup_frac > 0.5) throw UsageError("optim.warmup_frac out of range");
}

double lr_at(int64_t k, int64_t total_steps, const OptimizerConfig& o) {
    const int64_t warmup = std::max<int64_t>(1, static_cast<int64_t>(o.warmup_frac * static_cast<double>(total_steps)));
    const double ramp = std::min(1.0, static_cast<double>(k + 1) / static_cast<double>(warmup));
    double base = o.lr;
    switch (o.schedule) {
        case LrSchedule::Constant: break;
        case LrSchedule::Cosine: {
            const double p = total_steps > 1
                                 ? static_cast<double>(k) / static_cast<double>(total_steps - 1)
                                 : 1.0;
            base = o.lr * 0.5 * (1.0 + std::cos(M_PI * p));
            break;
        }
        case LrSchedule::StepWise: {
            const double frac = static_cast<double>(k) / static_cast<double>(total_steps);
            base = frac < o.step_frac1 ? o.lr : (frac < o.step_frac2 ? o.lr_mid : o.lr_final);
            break;
        }
    }
    return ramp * base;
}

sample::Method SamplerSettings::parsed_method() const {
    if (method == "heun") return sample::Method::Heun;
    if (method == "euler") return sample::Method::Euler;
    if (method == "cm_onestep") return sample::Method::CmOnestep;
    throw UsageError("sampler.method: unknown sampler '" + method + "'");
}

void RunConfig::validate() const {
    if (stage != "pretrain" && stage != "finetune-dm" && stage != "finetune-cm")
        throw UsageError("stage: must be pretrain | finetune-dm | finetune-cm");
    net.validate();
    diff.validate();
    optim.validate();
    if (batch < 2) throw UsageError("batch: must be >= 2");
    if (steps < 1) throw UsageError("steps: must be >= 1");
    if (label_dropout < 0.0 || label_dropout > 1.0) throw UsageError("label_dropout out of [0,1]");
    if (tau1 > tau2) throw UsageError("tau1 must be <= tau2");
    sampler.parsed_method();
}

RunConfig RunConfig::defaults_for(const std::string& stage) {
    RunConfig c;
    c.stage = stage;
    if (stage == "pretrain") {
        c.optim.schedule = LrSchedule::Cosine;
        c.optim.lr = 6e-4 * static_cast<double>(c.batch) / 1024.0;
        c.optim.beta1 = 0.9;
        c.optim.beta2 = 0.999;
        c.optim.weight_decay = 0.03;
        c.optim.grad_clip = 0.0;
    } else if (stage == "finetune-dm") {
        c.optim.schedule = LrSchedule::Constant;
        c.optim.lr = 1e-4;
        c.optim.beta1 = 0.9;
        c.optim.beta2 = 0.999;
        c.optim.weight_decay = 0.01;
        c.optim.grad_clip = 0.5;
        c.steps = 30000;
    } else if (stage == "finetune-cm") {
        c.optim.schedule = LrSchedule::StepWise;
        c.optim.lr = 1e-4;
        c.optim.lr_mid = 3e-5;
        c.optim.lr_final = 8e-6;
        c.optim.beta1 = 0.9;
        c.optim.beta2 = 0.99;
        c.optim.weight_decay = 0.01;
        c.optim.grad_clip = 0.0;
        c.steps = 30000;
        c.net.dec_dropout = 0.5;
        c.sampler.method = "cm_onestep";
        c.sampler.steps = 1;
    }
    return c;
}

namespace {

void check_keys(const json& j, const std::set<std::string>& known, const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw UsageError("config: unknown key '" + scope + it.key() + "'");
}

LrSchedule parse_schedule(const std::string& s) {
    if (s == "constant") return LrSchedule::Constant;
    if (s == "cosine") return LrSchedule::Cosine;
    if (s == "stepwise") return LrSchedule::StepWise;
    throw UsageError("optim.schedule: unknown schedule '" + s + "'");
}

std::string schedule_name(LrSchedule s) {
    switch (s) {
        case LrSchedule::Constant: return "constant";
        case LrSchedule::Cosine: return "cosine";
        case LrSchedule::StepWise: return "stepwise";
    }
    return "constant";
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw UsageError(std::string("config: JSON parse failure: ") + e.what());
    }

    check_keys(j, {"stage", "data", "network", "diffusion", "pretrain", "dm", "cm", "train",
                   "optim", "sampler", "ablation", "out_dir", "seed", "init_checkpoint",
                   "feature_checkpoint"},
               "");

    const std::string stage = j.value("stage", std::string("pretrain"));
    RunConfig c = RunConfig::defaults_for(stage);
    get_if(j, "out_dir", c.out_dir);
    get_if(j, "seed", c.seed);
    get_if(j, "init_checkpoint", c.init_checkpoint);
    get_if(j, "feature_checkpoint", c.feature_checkpoint);

    if (j.contains("data")) {
        const auto& d = j.at("data");
        check_keys(d, {"path", "resolution", "num_classes"}, "data.");
        get_if(d, "path", c.data_path);
        int64_t res = c.net.resolution;
        get_if(d, "resolution", res);
        c.net.resolution = res;
        get_if(d, "num_classes", c.net.num_classes);
    }
    if (j.contains("network")) {
        const auto& n = j.at("network");
        check_keys(n, {"enc_blocks", "dec_blocks", "dim_enc", "dim_dec", "heads_enc", "heads_dec",
                       "patch", "dropout"},
                   "network.");
        get_if(n, "enc_blocks", c.net.enc_blocks);
        get_if(n, "dec_blocks", c.net.dec_blocks);
        get_if(n, "dim_enc", c.net.dim_enc);
        get_if(n, "dim_dec", c.net.dim_dec);
        get_if(n, "heads_enc", c.net.heads_enc);
        get_if(n, "heads_dec", c.net.heads_dec);
        get_if(n, "patch", c.net.patch);
        get_if(n, "dropout", c.net.dec_dropout);
    }
    if (j.contains("diffusion")) {
        const auto& d = j.at("diffusion");
        check_keys(d, {"t_max", "sigma_min", "sigma_data", "rho", "shift_base"}, "diffusion.");
        get_if(d, "t_max", c.diff.t_max);
        get_if(d, "sigma_min", c.diff.sigma_min);
        get_if(d, "sigma_data", c.diff.sigma_data);
        get_if(d, "rho", c.diff.rho);
        get_if(d, "shift_base", c.diff.shift_base);
    }
    if (j.contains("pretrain")) {
        const auto& p = j.at("pretrain");
        check_keys(p, {"n0", "n1", "tau1", "tau2", "tau_contrastive", "ema_momentum"}, "pretrain.");
        get_if(p, "n0", c.pre_n0);
        get_if(p, "n1", c.pre_n1);
        get_if(p, "tau1", c.tau1);
        get_if(p, "tau2", c.tau2);
        get_if(p, "tau_contrastive", c.tau_contrastive);
        get_if(p, "ema_momentum", c.ema_momentum);
    }
    if (j.contains("dm")) {
        const auto& d = j.at("dm");
        check_keys(d, {"grid_n", "mu", "sigma", "label_dropout"}, "dm.");
        get_if(d, "grid_n", c.dm_grid_n);
        get_if(d, "mu", c.dm_mu);
        get_if(d, "sigma", c.dm_sigma);
        get_if(d, "label_dropout", c.label_dropout);
    }
    if (j.contains("cm")) {
        const auto& m = j.at("cm");
        check_keys(m, {"stages", "mu", "sigma", "w_aux", "tau_aux", "dropout"}, "cm.");
        get_if(m, "stages", c.cm_stages);
        get_if(m, "mu", c.cm_mu);
        get_if(m, "sigma", c.cm_sigma);
        get_if(m, "w_aux", c.w_aux);
        get_if(m, "tau_aux", c.tau_aux);
        get_if(m, "dropout", c.cm_dropout);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        check_keys(t, {"steps", "batch", "ema_of_online", "ckpt_every", "log_every", "eval_every",
                       "eval_count"},
                   "train.");
        get_if(t, "steps", c.steps);
        get_if(t, "batch", c.batch);
        get_if(t, "ema_of_online", c.ema_of_online);
        get_if(t, "ckpt_every", c.ckpt_every);
        get_if(t, "log_every", c.log_every);
        get_if(t, "eval_every", c.eval_every);
        get_if(t, "eval_count", c.eval_count);
    }
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        check_keys(o, {"lr", "beta1", "beta2", "eps", "weight_decay", "grad_clip", "warmup_frac",
                       "schedule", "lr_mid", "lr_final", "step_frac1", "step_frac2"},
                   "optim.");
        get_if(o, "lr", c.optim.lr);
        get_if(o, "beta1", c.optim.beta1);
        get_if(o, "beta2", c.optim.beta2);
        get_if(o, "eps", c.optim.eps);
        get_if(o, "weight_decay", c.optim.weight_decay);
        get_if(o, "grad_clip", c.optim.grad_clip);
        get_if(o, "warmup_frac", c.optim.warmup_frac);
        if (o.contains("schedule")) c.optim.schedule = parse_schedule(o.at("schedule"));
        get_if(o, "lr_mid", c.optim.lr_mid);
        get_if(o, "lr_final", c.optim.lr_final);
        get_if(o, "step_frac1", c.optim.step_frac1);
        get_if(o, "step_frac2", c.optim.step_frac2);
    }
    if (j.contains("sampler")) {
        const auto& s = j.at("sampler");
        check_keys(s, {"method", "steps", "cfg_scale", "cfg_lo", "cfg_hi", "cm_steps"}, "sampler.");
        get_if(s, "method", c.sampler.method);
        get_if(s, "steps", c.sampler.steps);
        get_if(s, "cfg_scale", c.sampler.cfg_scale);
        get_if(s, "cfg_lo", c.sampler.cfg_lo);
        get_if(s, "cfg_hi", c.sampler.cfg_hi);
        get_if(s, "cm_steps", c.sampler.cm_steps);
    }
    if (j.contains("ablation")) {
        const auto& a = j.at("ablation");
        check_keys(a, {"no_consistency_term", "no_aux_loss", "from_scratch", "fixed_tau"},
                   "ablation.");
        get_if(a, "no_consistency_term", c.no_consistency_term);
        get_if(a, "no_aux_loss", c.no_aux_loss);
        get_if(a, "from_scratch", c.from_scratch);
        get_if(a, "fixed_tau", c.fixed_tau);
    }

    c.validate();
    return c;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("config: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& c) {
    json j;
    j["stage"] = c.stage;
    j["out_dir"] = c.out_dir;
    j["seed"] = c.seed;
    j["init_checkpoint"] = c.init_checkpoint;
    j["feature_checkpoint"] = c.feature_checkpoint;
    j["data"] = {{"path", c.data_path},
                 {"resolution", c.net.resolution},
                 {"num_classes", c.net.num_classes}};
    j["network"] = {{"enc_blocks", c.net.enc_blocks}, {"dec_blocks", c.net.dec_blocks},
                    {"dim_enc", c.net.dim_enc},       {"dim_dec", c.net.dim_dec},
                    {"heads_enc", c.net.heads_enc},   {"heads_dec", c.net.heads_dec},
                    {"patch", c.net.patch},           {"dropout", c.net.dec_dropout}};
    j["diffusion"] = {{"t_max", c.diff.t_max},
                      {"sigma_min", c.diff.sigma_min},
                      {"sigma_data", c.diff.sigma_data},
                      {"rho", c.diff.rho},
                      {"shift_base", c.diff.shift_base}};
    j["pretrain"] = {{"n0", c.pre_n0},   {"n1", c.pre_n1},
                     {"tau1", c.tau1},   {"tau2", c.tau2},
                     {"tau_contrastive", c.tau_contrastive},
                     {"ema_momentum", c.ema_momentum}};
    j["dm"] = {{"grid_n", c.dm_grid_n},
               {"mu", c.dm_mu},
               {"sigma", c.dm_sigma},
               {"label_dropout", c.label_dropout}};
    j["cm"] = {{"stages", c.cm_stages}, {"mu", c.cm_mu},       {"sigma", c.cm_sigma},
               {"w_aux", c.w_aux},      {"tau_aux", c.tau_aux}, {"dropout", c.cm_dropout}};
    j["train"] = {{"steps", c.steps},
                  {"batch", c.batch},
                  {"ema_of_online", c.ema_of_online},
                  {"ckpt_every", c.ckpt_every},
                  {"log_every", c.log_every},
                  {"eval_every", c.eval_every},
                  {"eval_count", c.eval_count}};
    j["optim"] = {{"lr", c.optim.lr},
                  {"beta1", c.optim.beta1},
                  {"beta2", c.optim.beta2},
                  {"eps", c.optim.eps},
                  {"weight_decay", c.optim.weight_decay},
                  {"grad_clip", c.optim.grad_clip},
                  {"warmup_frac", c.optim.warmup_frac},
                  {"schedule", schedule_name(c.optim.schedule)},
                  {"lr_mid", c.optim.lr_mid},
                  {"lr_final", c.optim.lr_final},
                  {"step_frac1", c.optim.step_frac1},
                  {"step_frac2", c.optim.step_frac2}};
    j["sampler"] = {{"method", c.sampler.method},   {"steps", c.sampler.steps},
                    {"cfg_scale", c.sampler.cfg_scale}, {"cfg_lo", c.sampler.cfg_lo},
                    {"cfg_hi", c.sampler.cfg_hi},   {"cm_steps", c.sampler.cm_steps}};
    j["ablation"] = {{"no_consistency_term", c.no_consistency_term},
                     {"no_aux_loss", c.no_aux_loss},
                     {"from_scratch", c.from_scratch},
                     {"fixed_tau", c.fixed_tau}};
    return j.dump(2);
}

std::string config_hash(const RunConfig& c) {
    // nlohmann::json orders keys, so the dump is canonical regardless of the
    // order keys appeared in the source file.
    const std::string s = serialize_config(c);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace epg::cfg
