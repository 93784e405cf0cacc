#include "epg/trajectory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace epg::data {

// ---- Dataset ingestion -------------------------------------------------------

Dataset Dataset::from_images(std::vector<io::ImageU8> images, std::vector<int> labels,
                             int num_classes, int resolution) {
    Dataset d;
    d.images_ = std::move(images);
    d.labels_ = std::move(labels);
    d.num_classes_ = num_classes;
    d.resolution_ = resolution;
    if (d.images_.empty()) throw std::runtime_error("Dataset: empty dataset");
    return d;
}

Dataset Dataset::load(const std::string& path, int resolution) {
    std::vector<std::pair<std::string, int>> entries;  // (file path, class id)
    int num_classes = 0;

    if (fs::is_directory(path)) {
        std::vector<std::string> class_dirs;
        for (const auto& e : fs::directory_iterator(path))
            if (e.is_directory()) class_dirs.push_back(e.path().filename().string());
        std::sort(class_dirs.begin(), class_dirs.end());
        num_classes = static_cast<int>(class_dirs.size());
        for (int c = 0; c < num_classes; ++c) {
            std::vector<std::string> files;
            for (const auto& e : fs::directory_iterator(fs::path(path) / class_dirs[static_cast<size_t>(c)])) {
                if (!e.is_regular_file()) continue;
                auto ext = e.path().extension().string();
                std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
                if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path().string());
            }
            std::sort(files.begin(), files.end());
            for (auto& f : files) entries.emplace_back(std::move(f), c);
        }
    } else if (fs::is_regular_file(path)) {
        // Packed index: one "relative_path<TAB>class_id" record per line.
        std::ifstream in(path);
        if (!in) throw std::runtime_error("Dataset: cannot open index " + path);
        const fs::path base = fs::path(path).parent_path();
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto tab = line.find('\t');
            if (tab == std::string::npos)
                throw std::runtime_error("Dataset: malformed index record: " + line);
            const std::string rel = line.substr(0, tab);
            const int cls = std::stoi(line.substr(tab + 1));
            num_classes = std::max(num_classes, cls + 1);
            entries.emplace_back((base / rel).string(), cls);
        }
    } else {
        throw std::runtime_error("Dataset: no such path " + path);
    }

    Dataset d;
    d.resolution_ = resolution;
    d.num_classes_ = num_classes;
    for (const auto& [file, cls] : entries) {
        auto img = io::load_image(file);
        if (!img) {
            ++d.skipped_;
            std::fprintf(stderr, "warning: skipping unreadable image %s\n", file.c_str());
            continue;
        }
        d.images_.push_back(io::center_crop_resize(*img, resolution));
        d.labels_.push_back(cls);
    }
    if (d.images_.empty()) throw std::runtime_error("Dataset: empty dataset at " + path);
    return d;
}

CleanSample Dataset::sample(int64_t i) const {
    CleanSample s;
    s.x0 = io::image_to_tensor(images_[static_cast<size_t>(i)]);
    s.label = labels_[static_cast<size_t>(i)];
    return s;
}

// ---- Augmentation -------------------------------------------------------------

namespace {

int res_of(const Tensor& x) { return static_cast<int>(x.dim(1)); }

Tensor random_resized_crop(const Tensor& x, const AugmentConfig& cfg, Rng& rng) {
    const int res = res_of(x);
    const double area = static_cast<double>(res) * res;
    double ch = res, cw = res, cy0 = 0, cx0 = 0;
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max);
        const double ratio =
            std::exp(rng.uniform(std::log(cfg.crop_ratio_min), std::log(cfg.crop_ratio_max)));
        const double w = std::sqrt(target * ratio);
        const double h = std::sqrt(target / ratio);
        if (w <= res && h <= res) {
            cw = w;
            ch = h;
            cy0 = rng.uniform(0.0, res - h);
            cx0 = rng.uniform(0.0, res - w);
            break;
        }
    }
    Tensor out({3, res, res});
    const int64_t hw = static_cast<int64_t>(res) * res;
    const double sy = ch / res, sx = cw / res;
    for (int y = 0; y < res; ++y) {
        for (int xx = 0; xx < res; ++xx) {
            const double fy = cy0 + (y + 0.5) * sy - 0.5;
            const double fx = cx0 + (xx + 0.5) * sx - 0.5;
            const int iy = static_cast<int>(std::floor(fy));
            const int ix = static_cast<int>(std::floor(fx));
            const double wy = fy - iy, wx = fx - ix;
            for (int c = 0; c < 3; ++c) {
                auto pix = [&](int yy, int xc) {
                    yy = std::clamp(yy, 0, res - 1);
                    xc = std::clamp(xc, 0, res - 1);
                    return x[c * hw + static_cast<int64_t>(yy) * res + xc];
                };
                out[c * hw + static_cast<int64_t>(y) * res + xx] =
                    (1 - wy) * ((1 - wx) * pix(iy, ix) + wx * pix(iy, ix + 1)) +
                    wy * ((1 - wx) * pix(iy + 1, ix) + wx * pix(iy + 1, ix + 1));
            }
        }
    }
    return out;
}

// Jitter works in [0, 1] space; hue rotates the chroma plane (YIQ).
void color_jitter(Tensor& x, const AugmentConfig& cfg, Rng& rng) {
    const int res = res_of(x);
    const int64_t hw = static_cast<int64_t>(res) * res;
    const double fb = rng.uniform(std::max(0.0, 1.0 - cfg.brightness), 1.0 + cfg.brightness);
    const double fc = rng.uniform(std::max(0.0, 1.0 - cfg.contrast), 1.0 + cfg.contrast);
    const double fs = rng.uniform(std::max(0.0, 1.0 - cfg.saturation), 1.0 + cfg.saturation);
    const double fh = rng.uniform(-cfg.hue, cfg.hue) * 2.0 * M_PI;

    double mean_gray = 0.0;
    for (int64_t i = 0; i < hw; ++i) {
        const double r = (x[i] + 1) * 0.5, g = (x[hw + i] + 1) * 0.5, b = (x[2 * hw + i] + 1) * 0.5;
        mean_gray += 0.299 * r + 0.587 * g + 0.114 * b;
    }
    mean_gray /= static_cast<double>(hw);

    const double ch = std::cos(fh), sh = std::sin(fh);
    for (int64_t i = 0; i < hw; ++i) {
        double r = (x[i] + 1) * 0.5, g = (x[hw + i] + 1) * 0.5, b = (x[2 * hw + i] + 1) * 0.5;
        r *= fb;
        g *= fb;
        b *= fb;
        r = mean_gray + fc * (r - mean_gray);
        g = mean_gray + fc * (g - mean_gray);
        b = mean_gray + fc * (b - mean_gray);
        const double gray = 0.299 * r + 0.587 * g + 0.114 * b;
        r = gray + fs * (r - gray);
        g = gray + fs * (g - gray);
        b = gray + fs * (b - gray);
        // YIQ hue rotation
        const double yy = 0.299 * r + 0.587 * g + 0.114 * b;
        const double ii = 0.596 * r - 0.274 * g - 0.322 * b;
        const double qq = 0.211 * r - 0.523 * g + 0.312 * b;
        const double ir = ii * ch - qq * sh;
        const double qr = ii * sh + qq * ch;
        r = yy + 0.956 * ir + 0.621 * qr;
        g = yy - 0.272 * ir - 0.647 * qr;
        b = yy - 1.106 * ir + 1.703 * qr;
        x[i] = r * 2 - 1;
        x[hw + i] = g * 2 - 1;
        x[2 * hw + i] = b * 2 - 1;
    }
}

void to_grayscale(Tensor& x) {
    const int64_t hw = x.dim(1) * x.dim(2);
    for (int64_t i = 0; i < hw; ++i) {
        const double gray = 0.299 * x[i] + 0.587 * x[hw + i] + 0.114 * x[2 * hw + i];
        x[i] = x[hw + i] = x[2 * hw + i] = gray;
    }
}

void gaussian_blur(Tensor& x, double sigma) {
    const int res = res_of(x);
    const int64_t hw = static_cast<int64_t>(res) * res;
    const int radius = std::max(1, static_cast<int>(std::ceil(2.0 * sigma)));
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double ksum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        ksum += k[static_cast<size_t>(i + radius)];
    }
    for (auto& v : k) v /= ksum;

    Tensor tmp({3, res, res});
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < res; ++y)
            for (int xx = 0; xx < res; ++xx) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    s += k[static_cast<size_t>(i + radius)] *
                         x[c * hw + static_cast<int64_t>(y) * res + std::clamp(xx + i, 0, res - 1)];
                tmp[c * hw + static_cast<int64_t>(y) * res + xx] = s;
            }
        for (int y = 0; y < res; ++y)
            for (int xx = 0; xx < res; ++xx) {
                double s = 0.0;
                for (int i = -radius; i <= radius; ++i)
                    s += k[static_cast<size_t>(i + radius)] *
                         tmp[c * hw + static_cast<int64_t>(std::clamp(y + i, 0, res - 1)) * res + xx];
                x[c * hw + static_cast<int64_t>(y) * res + xx] = s;
            }
    }
}

}  // namespace

Tensor hflip(const Tensor& x) {
    const int res = res_of(x);
    const int64_t hw = static_cast<int64_t>(res) * res;
    Tensor out({3, res, res});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < res; ++y)
            for (int xx = 0; xx < res; ++xx)
                out[c * hw + static_cast<int64_t>(y) * res + xx] =
                    x[c * hw + static_cast<int64_t>(y) * res + (res - 1 - xx)];
    return out;
}

Tensor augment_once(const Tensor& x, const AugmentConfig& cfg, double blur_p, Rng& rng) {
    Tensor out = random_resized_crop(x, cfg, rng);
    if (rng.bernoulli(cfg.flip_p)) out = hflip(out);
    if (rng.bernoulli(cfg.jitter_p)) color_jitter(out, cfg, rng);
    if (rng.bernoulli(cfg.grayscale_p)) to_grayscale(out);
    if (rng.bernoulli(blur_p)) gaussian_blur(out, rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max));
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], -1.0, 1.0);
    return out;
}

ViewPair augment_views(const CleanSample& x, const AugmentConfig& cfg, Rng& rng) {
    ViewPair v;
    v.y1 = augment_once(x.x0, cfg, cfg.blur_p_first, rng);
    v.y2 = augment_once(x.x0, cfg, cfg.blur_p_second, rng);
    return v;
}

// ---- Forward-marginal perturbation -----------------------------------------

NoisySample perturb_with_eps(const CleanSample& x, double t, const Tensor& eps) {
    if (t < 0) throw std::invalid_argument("perturb: t must be >= 0");
    if (!eps.same_shape(x.x0)) throw std::invalid_argument("perturb: eps shape mismatch");
    NoisySample s;
    s.t = t;
    s.eps = eps;
    s.x_t = x.x0;
    for (int64_t i = 0; i < s.x_t.numel(); ++i) s.x_t[i] += t * eps[i];
    return s;
}

NoisySample perturb(const CleanSample& x, double t, Rng& rng) {
    Tensor eps(x.x0.shape());
    for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normal();
    return perturb_with_eps(x, t, eps);
}

TrajectoryPair temporal_pair_with_eps(const CleanSample& x, const sched::TimeGrid& grid, int64_t n,
                                      const Tensor& eps) {
    if (n < 1 || n >= grid.size())
        throw std::invalid_argument("temporal_pair: index needs a predecessor (1 <= n < N)");
    TrajectoryPair p;
    p.n = n;
    p.hi = perturb_with_eps(x, grid[n], eps);
    p.lo = perturb_with_eps(x, grid[n - 1], eps);
    return p;
}

TrajectoryPair temporal_pair(const CleanSample& x, const sched::TimeGrid& grid, int64_t n, Rng& rng) {
    if (n < 1 || n >= grid.size())
        throw std::invalid_argument("temporal_pair: index needs a predecessor (1 <= n < N)");
    Tensor eps(x.x0.shape());
    for (int64_t i = 0; i < eps.numel(); ++i) eps[i] = rng.normal();
    return temporal_pair_with_eps(x, grid, n, eps);
}

int label_dropout(int label, double p_drop, Rng& rng) {
    if (p_drop < 0.0 || p_drop > 1.0) throw std::invalid_argument("label_dropout: p out of range");
    return rng.bernoulli(p_drop) ? -1 : label;
}

// ---- Synthetic shapes dataset -------------------------------------------------

namespace {

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = h - std::floor(h);
    const double i = std::floor(h * 6.0);
    const double f = h * 6.0 - i;
    const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
    switch (static_cast<int>(i) % 6) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

// Soft coverage in [0,1] of the class shape at normalized coords (u, v).
double shape_mask(int cls, double u, double v, double size, double rot, double soft) {
    const double cu = u * std::cos(rot) - v * std::sin(rot);
    const double cv = u * std::sin(rot) + v * std::cos(rot);
    auto smooth = [&](double d) { return std::clamp(0.5 - d / soft, 0.0, 1.0); };
    switch (cls % 10) {
        case 0: return smooth(std::hypot(cu, cv) - size);                           // disc
        case 1: return smooth(std::max(std::abs(cu), std::abs(cv)) - size);         // square
        case 2: {                                                                   // triangle
            const double d = std::max({-cv - size * 0.5, cv * 0.5 + std::abs(cu) * 0.866 - size * 0.7});
            return smooth(d);
        }
        case 3: return smooth(std::abs(std::hypot(cu, cv) - size) - size * 0.35);   // ring
        case 4: {                                                                   // plus
            const double bar = size * 0.35;
            const double d = std::min(std::max(std::abs(cu) - bar, std::abs(cv) - size),
                                      std::max(std::abs(cv) - bar, std::abs(cu) - size));
            return smooth(d);
        }
        case 5: return 0.5 + 0.5 * std::tanh(std::sin((cv * 3.5 + 1.0) * M_PI) / soft);  // h-stripes
        case 6: return 0.5 + 0.5 * std::tanh(std::sin((cu * 3.5 + 1.0) * M_PI) / soft);  // v-stripes
        case 7: {                                                                   // checker
            const double sx = std::sin(cu * 2.2 * M_PI), sy = std::sin(cv * 2.2 * M_PI);
            return 0.5 + 0.5 * std::tanh(sx * sy / (soft * 0.5));
        }
        case 8: return smooth(std::abs(cu) + std::abs(cv) - size * 1.2);            // diamond
        default: {                                                                  // x-cross
            const double bar = size * 0.3;
            const double d = std::min(std::abs(cu - cv) - bar, std::abs(cu + cv) - bar);
            return smooth(std::max(d, std::max(std::abs(cu), std::abs(cv)) - size * 1.1));
        }
    }
}

}  // namespace

io::ImageU8 synth_image(int cls, int resolution, Rng& rng) {
    const double class_hue = static_cast<double>(cls % 10) / 10.0;
    const double hue = class_hue + rng.uniform(-0.03, 0.03);
    double fr, fg, fb;
    hsv_to_rgb(hue, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0), fr, fg, fb);

    // Background: an oriented gradient between two dim colors plus a faint
    // stripe texture, so the appearance model has more to learn than a flat
    // fill.
    double b0r, b0g, b0b, b1r, b1g, b1b;
    hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.35), rng.uniform(0.05, 0.45), b0r, b0g, b0b);
    hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.35), rng.uniform(0.05, 0.45), b1r, b1g, b1b);
    const double gang = rng.uniform(0.0, 2.0 * M_PI);
    const double gx = std::cos(gang), gy = std::sin(gang);
    const double tex_amp = rng.uniform(0.0, 0.12);
    const double tex_freq = rng.uniform(1.5, 5.0) * M_PI;
    const double tex_phase = rng.uniform(0.0, 2.0 * M_PI);
    const double tex_ang = rng.uniform(0.0, M_PI);
    const double tx = std::cos(tex_ang), ty = std::sin(tex_ang);

    const double size = rng.uniform(0.35, 0.75);
    const double rot = rng.uniform(-0.3, 0.3);
    const double cx = rng.uniform(-0.3, 0.3), cy = rng.uniform(-0.3, 0.3);
    const double soft = 2.5 / resolution;
    const double noise = rng.uniform(0.0, 0.06);

    // Up to two small desaturated distractor shapes of other geometries.
    const int n_distract = static_cast<int>(rng.uniform_int(0, 2));
    struct Distract {
        int geom;
        double size, rot, cx, cy, r, g, b;
    } ds[2];
    for (int d = 0; d < n_distract; ++d) {
        ds[d].geom = static_cast<int>(rng.uniform_int(0, 9));
        ds[d].size = rng.uniform(0.12, 0.3);
        ds[d].rot = rng.uniform(-0.5, 0.5);
        ds[d].cx = rng.uniform(-0.65, 0.65);
        ds[d].cy = rng.uniform(-0.65, 0.65);
        hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.25), rng.uniform(0.3, 0.8), ds[d].r, ds[d].g,
                   ds[d].b);
    }

    io::ImageU8 img;
    img.width = img.height = resolution;
    img.pixels.resize(static_cast<size_t>(resolution) * resolution * 3);
    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            const double px = 2.0 * (x + 0.5) / resolution - 1.0;
            const double py = 2.0 * (y + 0.5) / resolution - 1.0;
            const double g = std::clamp(0.5 + 0.5 * (px * gx + py * gy), 0.0, 1.0);
            const double tex = tex_amp * std::sin((px * tx + py * ty) * tex_freq + tex_phase);
            double rr = b0r + (b1r - b0r) * g + tex;
            double gg = b0g + (b1g - b0g) * g + tex;
            double bbv = b0b + (b1b - b0b) * g + tex;
            for (int d = 0; d < n_distract; ++d) {
                const double md =
                    shape_mask(ds[d].geom, px - ds[d].cx, py - ds[d].cy, ds[d].size, ds[d].rot, soft);
                rr += (ds[d].r - rr) * md;
                gg += (ds[d].g - gg) * md;
                bbv += (ds[d].b - bbv) * md;
            }
            const double m = shape_mask(cls, px - cx, py - cy, size, rot, soft);
            rr += (fr - rr) * m + noise * rng.normal();
            gg += (fg - gg) * m + noise * rng.normal();
            bbv += (fb - bbv) * m + noise * rng.normal();
            img.at(y, x, 0) = static_cast<uint8_t>(std::lround(std::clamp(rr, 0.0, 1.0) * 255.0));
            img.at(y, x, 1) = static_cast<uint8_t>(std::lround(std::clamp(gg, 0.0, 1.0) * 255.0));
            img.at(y, x, 2) = static_cast<uint8_t>(std::lround(std::clamp(bbv, 0.0, 1.0) * 255.0));
        }
    }
    return img;
}

Dataset make_synthetic(int64_t per_class, int num_classes, int resolution, uint64_t seed) {
    std::vector<io::ImageU8> images;
    std::vector<int> labels;
    Rng root(seed);
    for (int c = 0; c < num_classes; ++c) {
        for (int64_t i = 0; i < per_class; ++i) {
            Rng r = root.substream(static_cast<uint64_t>(c), static_cast<uint64_t>(i), 0x53u);
            images.push_back(synth_image(c, resolution, r));
            labels.push_back(c);
        }
    }
    return Dataset::from_images(std::move(images), std::move(labels), num_classes, resolution);
}

void write_synthetic_tree(const std::string& root, int64_t per_class, int num_classes,
                          int resolution, uint64_t seed) {
    Rng rroot(seed);
    for (int c = 0; c < num_classes; ++c) {
        char cls_dir[32];
        std::snprintf(cls_dir, sizeof(cls_dir), "class_%02d", c);
        fs::create_directories(fs::path(root) / cls_dir);
        for (int64_t i = 0; i < per_class; ++i) {
            Rng r = rroot.substream(static_cast<uint64_t>(c), static_cast<uint64_t>(i), 0x53u);
            char name[32];
            std::snprintf(name, sizeof(name), "img_%05lld.png", static_cast<long long>(i));
            io::save_png((fs::path(root) / cls_dir / name).string(), synth_image(c, resolution, r));
        }
    }
}

}  // namespace epg::data
