#include "epg/io/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <stdexcept>

#include <nlohmann/json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace epg::io {

using json = nlohmann::json;

namespace {
constexpr char kMagic[8] = {'E', 'P', 'G', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

struct Writer {
    std::string buf;

    void raw(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void i64(int64_t v) { raw(&v, 8); }
};

struct Reader {
    const char* p;
    size_t left;

    void raw(void* out, size_t n) {
        if (n > left) throw std::runtime_error("checkpoint: truncated archive");
        std::memcpy(out, p, n);
        p += n;
        left -= n;
    }
    uint32_t u32() {
        uint32_t v;
        raw(&v, 4);
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        raw(&v, 8);
        return v;
    }
    int64_t i64() {
        int64_t v;
        raw(&v, 8);
        return v;
    }
};
}  // namespace

std::string CheckpointManifest::to_json() const {
    json j;
    j["stage"] = stage;
    j["config_hash"] = config_hash;
    j["step"] = step;
    j["opt_t"] = opt_t;
    j["rng_state"] = {rng_state[0], rng_state[1], rng_state[2], rng_state[3]};
    return j.dump();
}

CheckpointManifest CheckpointManifest::from_json(const std::string& s) {
    json j = json::parse(s);
    CheckpointManifest m;
    m.stage = j.at("stage").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.step = j.at("step").get<int64_t>();
    m.opt_t = j.at("opt_t").get<int64_t>();
    auto rs = j.at("rng_state");
    for (int i = 0; i < 4; ++i) m.rng_state[static_cast<size_t>(i)] = rs.at(i).get<uint64_t>();
    return m;
}

void save_checkpoint(const std::string& path, const CheckpointManifest& manifest,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    Writer w;
    w.raw(kMagic, 8);
    w.u32(kVersion);
    const std::string mj = manifest.to_json();
    w.u64(mj.size());
    w.raw(mj.data(), mj.size());
    w.u64(tensors.size());
    for (const auto& [name, t] : tensors) {
        w.u32(static_cast<uint32_t>(name.size()));
        w.raw(name.data(), name.size());
        w.u32(static_cast<uint32_t>(t->ndim()));
        for (int64_t d : t->shape()) w.i64(d);
        w.raw(t->data(), sizeof(double) * static_cast<size_t>(t->numel()));
    }
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(w.buf.data()), static_cast<uInt>(w.buf.size())));
    w.u32(crc);

    const std::string tmp = path + ".tmp";
    {
        FILE* f = std::fopen(tmp.c_str(), "wb");
        if (!f) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
        const size_t n = std::fwrite(w.buf.data(), 1, w.buf.size(), f);
        std::fclose(f);
        if (n != w.buf.size()) throw std::runtime_error("save_checkpoint: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::string buf;
    {
        FILE* f = std::fopen(path.c_str(), "rb");
        if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
        std::fseek(f, 0, SEEK_END);
        const long size = std::ftell(f);
        std::fseek(f, 0, SEEK_SET);
        buf.resize(static_cast<size_t>(size));
        const size_t n = std::fread(buf.data(), 1, buf.size(), f);
        std::fclose(f);
        if (n != buf.size()) throw std::runtime_error("load_checkpoint: short read from " + path);
    }
    if (buf.size() < 16) throw std::runtime_error("load_checkpoint: truncated archive");

    const uint32_t stored_crc = *reinterpret_cast<const uint32_t*>(buf.data() + buf.size() - 4);
    const uint32_t crc = static_cast<uint32_t>(crc32(
        0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size() - 4)));
    if (crc != stored_crc) throw std::runtime_error("load_checkpoint: CRC mismatch (corrupt archive)");

    Reader r{buf.data(), buf.size() - 4};
    char magic[8];
    r.raw(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    const uint32_t version = r.u32();
    if (version != kVersion) throw std::runtime_error("load_checkpoint: unsupported version");

    LoadedCheckpoint out;
    const uint64_t mlen = r.u64();
    std::string mj(mlen, '\0');
    r.raw(mj.data(), mlen);
    out.manifest = CheckpointManifest::from_json(mj);

    const uint64_t count = r.u64();
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t nlen = r.u32();
        std::string name(nlen, '\0');
        r.raw(name.data(), nlen);
        const uint32_t ndim = r.u32();
        std::vector<int64_t> dims(ndim);
        for (auto& d : dims) d = r.i64();
        Tensor t(dims);
        r.raw(t.data(), sizeof(double) * static_cast<size_t>(t.numel()));
        out.tensors.emplace(std::move(name), std::move(t));
    }
    return out;
}

}  // namespace epg::io
