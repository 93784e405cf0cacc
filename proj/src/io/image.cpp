#include "epg/io/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace epg::io {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

std::optional<ImageU8> load_png(FILE* f) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) return std::nullopt;
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        return std::nullopt;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        return std::nullopt;
    }
    png_init_io(png, f);
    png_read_info(png, info);

    // Normalize every color type / bit depth to 8-bit RGB.
    png_byte color_type = png_get_color_type(png, info);
    png_byte bit_depth = png_get_bit_depth(png, info);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    ImageU8 img;
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
    std::vector<png_bytep> rows(static_cast<size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[static_cast<size_t>(y)] = img.pixels.data() + static_cast<size_t>(y) * img.width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

std::optional<ImageU8> load_jpeg(FILE* f) {
    jpeg_decompress_struct cinfo;
    jpeg_error_mgr jerr;
    cinfo.err = jpeg_std_error(&jerr);
    jerr.error_exit = [](j_common_ptr ci) { throw std::runtime_error(ci->err->jpeg_message_table[0]); };
    try {
        jpeg_create_decompress(&cinfo);
        jpeg_stdio_src(&cinfo, f);
        jpeg_read_header(&cinfo, TRUE);
        cinfo.out_color_space = JCS_RGB;
        jpeg_start_decompress(&cinfo);
        ImageU8 img;
        img.width = static_cast<int>(cinfo.output_width);
        img.height = static_cast<int>(cinfo.output_height);
        img.pixels.resize(static_cast<size_t>(img.width) * img.height * 3);
        while (cinfo.output_scanline < cinfo.output_height) {
            JSAMPROW row = img.pixels.data() + static_cast<size_t>(cinfo.output_scanline) * img.width * 3;
            jpeg_read_scanlines(&cinfo, &row, 1);
        }
        jpeg_finish_decompress(&cinfo);
        jpeg_destroy_decompress(&cinfo);
        return img;
    } catch (const std::exception&) {
        jpeg_destroy_decompress(&cinfo);
        return std::nullopt;
    }
}

}  // namespace

std::optional<ImageU8> load_image(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) return std::nullopt;
    unsigned char magic[8] = {};
    if (std::fread(magic, 1, 8, f.get()) != 8) return std::nullopt;
    std::rewind(f.get());
    if (!png_sig_cmp(magic, 0, 8)) return load_png(f.get());
    if (magic[0] == 0xFF && magic[1] == 0xD8) return load_jpeg(f.get());
    return std::nullopt;
}

void save_png(const std::string& path, const ImageU8& img) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw std::runtime_error("save_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("save_png: libpng failure for " + path);
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(img.pixels.data() + static_cast<size_t>(y) * img.width * 3));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

ImageU8 center_crop_resize(const ImageU8& img, int resolution) {
    const int side = std::min(img.width, img.height);
    const int x0 = (img.width - side) / 2;
    const int y0 = (img.height - side) / 2;
    ImageU8 out;
    out.width = out.height = resolution;
    out.pixels.resize(static_cast<size_t>(resolution) * resolution * 3);
    const double s = static_cast<double>(side) / resolution;
    for (int y = 0; y < resolution; ++y) {
        for (int x = 0; x < resolution; ++x) {
            // Sample at pixel centers of the crop.
            const double sy = y0 + (y + 0.5) * s - 0.5;
            const double sx = x0 + (x + 0.5) * s - 0.5;
            const int iy = static_cast<int>(std::floor(sy));
            const int ix = static_cast<int>(std::floor(sx));
            const double fy = sy - iy, fx = sx - ix;
            for (int c = 0; c < 3; ++c) {
                auto sample = [&](int yy, int xx) {
                    yy = std::clamp(yy, 0, img.height - 1);
                    xx = std::clamp(xx, 0, img.width - 1);
                    return static_cast<double>(img.at(yy, xx, c));
                };
                const double v = (1 - fy) * ((1 - fx) * sample(iy, ix) + fx * sample(iy, ix + 1)) +
                                 fy * ((1 - fx) * sample(iy + 1, ix) + fx * sample(iy + 1, ix + 1));
                out.at(y, x, c) = static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
            }
        }
    }
    return out;
}

Tensor image_to_tensor(const ImageU8& img) {
    Tensor t({3, img.height, img.width});
    const int64_t hw = static_cast<int64_t>(img.height) * img.width;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                t[c * hw + static_cast<int64_t>(y) * img.width + x] =
                    static_cast<double>(img.at(y, x, c)) / 127.5 - 1.0;
    return t;
}

ImageU8 tensor_to_image(const Tensor& t) {
    if (t.ndim() != 3 || t.dim(0) != 3) throw std::invalid_argument("tensor_to_image: want [3,H,W]");
    const int h = static_cast<int>(t.dim(1));
    const int w = static_cast<int>(t.dim(2));
    ImageU8 img;
    img.width = w;
    img.height = h;
    img.pixels.resize(static_cast<size_t>(h) * w * 3);
    const int64_t hw = static_cast<int64_t>(h) * w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const double v = std::clamp(t[c * hw + static_cast<int64_t>(y) * w + x], -1.0, 1.0);
                img.at(y, x, c) = static_cast<uint8_t>(std::lround((v + 1.0) * 127.5));
            }
    return img;
}

ImageU8 make_grid(const std::vector<Tensor>& images, int cols) {
    if (images.empty()) throw std::invalid_argument("make_grid: empty batch");
    const int n = static_cast<int>(images.size());
    cols = std::max(1, std::min(cols, n));
    const int rows = (n + cols - 1) / cols;
    const int h = static_cast<int>(images[0].dim(1));
    const int w = static_cast<int>(images[0].dim(2));
    const int pad = 2;
    ImageU8 grid;
    grid.width = cols * (w + pad) + pad;
    grid.height = rows * (h + pad) + pad;
    grid.pixels.assign(static_cast<size_t>(grid.width) * grid.height * 3, 24);
    for (int i = 0; i < n; ++i) {
        const ImageU8 tile = tensor_to_image(images[static_cast<size_t>(i)]);
        const int r = i / cols, c = i % cols;
        const int oy = pad + r * (h + pad), ox = pad + c * (w + pad);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int ch = 0; ch < 3; ++ch) grid.at(oy + y, ox + x, ch) = tile.at(y, x, ch);
    }
    return grid;
}

}  // namespace epg::io
