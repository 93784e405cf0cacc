// Writes the procedural shapes dataset as a class-per-subdirectory PNG tree,
// ready for `epg pretrain / finetune-* / eval`.
#include <cstdio>

#include <CLI11.hpp>

#include "epg/trajectory.hpp"

int main(int argc, char** argv) {
    CLI::App app{"generate the synthetic shapes dataset"};
    std::string out = "data/synth";
    int per_class = 500;
    int classes = 10;
    int resolution = 32;
    uint64_t seed = 0;
    app.add_option("--out", out, "output root directory");
    app.add_option("--per-class", per_class, "images per class");
    app.add_option("--classes", classes, "number of classes (max 10 distinct shapes)");
    app.add_option("--resolution", resolution, "image side");
    app.add_option("--seed", seed, "generator seed");
    CLI11_PARSE(app, argc, argv);

    epg::data::write_synthetic_tree(out, per_class, classes, resolution, seed);
    std::printf("wrote %d x %d images at %dx%d under %s\n", classes, per_class, resolution,
                resolution, out.c_str());
    return 0;
}
