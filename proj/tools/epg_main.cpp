#include <omp.h>

#include <cstdio>
#include <cstdlib>
#include <string>

#include <CLI11.hpp>

#include "epg/cli/commands.hpp"
#include "epg/core/error.hpp"

int main(int argc, char** argv) {
    if (const char* threads = std::getenv("EPG_THREADS")) {
        const int n = std::atoi(threads);
        if (n > 0) omp_set_num_threads(n);
    }

    CLI::App app{"epg: two-stage pixel-space generative modeling"};
    app.require_subcommand(1);

    epg::cli::CommonArgs args;
    auto add_common = [&](CLI::App* sub, bool with_count) {
        sub->add_option("--config", args.config_path, "run config JSON")->required();
        sub->add_option("--resume", args.resume, "checkpoint to resume from / operate on");
        sub->add_option("--seed", args.seed, "seed override");
        sub->add_option("--out", args.out_dir, "output directory override");
        if (with_count) sub->add_option("--count", args.count, "number of images");
    };

    CLI::App* pre = app.add_subcommand("pretrain", "representation-consistency pre-training");
    add_common(pre, false);
    CLI::App* ftdm = app.add_subcommand("finetune-dm", "diffusion fine-tuning");
    add_common(ftdm, false);
    CLI::App* ftcm = app.add_subcommand("finetune-cm", "consistency fine-tuning");
    add_common(ftcm, false);
    CLI::App* smp = app.add_subcommand("sample", "generate images from a checkpoint");
    add_common(smp, true);
    CLI::App* evl = app.add_subcommand("eval", "FID-proxy evaluation");
    add_common(evl, true);
    CLI::App* dig = app.add_subcommand("diag", "per-channel-std collapse diagnostic");
    add_common(dig, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (pre->parsed()) return epg::cli::cmd_pretrain(args);
        if (ftdm->parsed()) return epg::cli::cmd_finetune(args, "finetune-dm");
        if (ftcm->parsed()) return epg::cli::cmd_finetune(args, "finetune-cm");
        if (smp->parsed()) return epg::cli::cmd_sample(args);
        if (evl->parsed()) return epg::cli::cmd_eval(args);
        if (dig->parsed()) return epg::cli::cmd_diag(args);
    } catch (const epg::UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 2;
    } catch (const epg::NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
