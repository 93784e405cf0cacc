#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "epg/core/tensor.hpp"

namespace epg::io {

// Named-tensor container, little-endian, CRC-checked. Layout:
//   magic "EPGCKPT1" | u32 version | u64 manifest_len | manifest JSON |
//   u64 tensor_count | { u32 name_len | name | u32 ndim | i64 dims[] | f64 data[] }* |
//   u32 crc32 of everything before it
struct CheckpointManifest {
    std::string stage;
    std::string config_hash;
    int64_t step = 0;
    std::array<uint64_t, 4> rng_state{};
    int64_t opt_t = 0;

    std::string to_json() const;
    static CheckpointManifest from_json(const std::string& s);
};

// Written to <path>.tmp then renamed, so an interrupted save never corrupts an
// existing checkpoint.
void save_checkpoint(const std::string& path, const CheckpointManifest& manifest,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors);

struct LoadedCheckpoint {
    CheckpointManifest manifest;
    std::map<std::string, Tensor> tensors;
};

// Throws std::runtime_error on bad magic, truncation, or CRC mismatch.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace epg::io
