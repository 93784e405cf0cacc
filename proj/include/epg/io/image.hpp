#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "epg/core/tensor.hpp"

namespace epg::io {

// Interleaved 8-bit RGB image.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;  // height * width * 3

    uint8_t& at(int y, int x, int c) { return pixels[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    uint8_t at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
};

// PNG or JPEG, detected by magic bytes. Returns nullopt on unreadable input.
std::optional<ImageU8> load_image(const std::string& path);

void save_png(const std::string& path, const ImageU8& img);

// Center crop to square then bilinear resize.
ImageU8 center_crop_resize(const ImageU8& img, int resolution);

// Byte 0 -> -1.0, byte 255 -> +1.0; output [3, H, W].
Tensor image_to_tensor(const ImageU8& img);

// Clamp to [-1, 1] and quantize.
ImageU8 tensor_to_image(const Tensor& t);

// Pack [N, 3, H, W] style batches (as a vector of [3,H,W] tensors) into a grid.
ImageU8 make_grid(const std::vector<Tensor>& images, int cols);

}  // namespace epg::io
