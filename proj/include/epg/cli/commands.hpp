#pragma once

#include <string>

#include "epg/config.hpp"

namespace epg::cli {

struct CommonArgs {
    std::string config_path;
    std::string resume;      // checkpoint to resume from / operate on
    std::string out_dir;     // overrides config out_dir when set
    int64_t seed = -1;       // overrides config seed when >= 0
    int64_t count = -1;      // sample/eval count override
};

cfg::RunConfig resolve_config(const CommonArgs& args, const std::string& expected_stage);

int cmd_pretrain(const CommonArgs& args);
int cmd_finetune(const CommonArgs& args, const std::string& stage);
int cmd_sample(const CommonArgs& args);
int cmd_eval(const CommonArgs& args);
int cmd_diag(const CommonArgs& args);

}  // namespace epg::cli
