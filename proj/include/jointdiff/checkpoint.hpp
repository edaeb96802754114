#ifndef JOINTDIFF_CHECKPOINT_HPP
#define JOINTDIFF_CHECKPOINT_HPP

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "jointdiff/error.hpp"
#include "jointdiff/tensor.hpp"

namespace jointdiff {

// Versioned binary checkpoint: header (magic, version, config hash, counters,
// rng state), then named little-endian float32 arrays. Round-trips bit-exact;
// all trainer state that must survive a resume lives in float32 or integers.
struct Checkpoint {
    static constexpr char kMagic[4] = {'J', 'D', 'C', 'K'};
    static constexpr std::uint32_t kVersion = 1;

    std::uint64_t config_hash = 0;
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
    std::uint64_t best_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    std::array<std::uint64_t, 4> rng_state{};

    std::vector<std::pair<std::string, ParamTensor>> arrays;

    void add_array(const std::string& name, ParamTensor tensor) {
        arrays.emplace_back(name, std::move(tensor));
    }

    void add_store(const std::string& prefix, const ParamStore& store) {
        for (std::size_t i = 0; i < store.count(); ++i)
            add_array(prefix + "." + store.name(i), store.at(i));
    }

    const ParamTensor* find(const std::string& name) const {
        for (const auto& [n, t] : arrays)
            if (n == name) return &t;
        return nullptr;
    }

    // rebuild a store with the layout of `layout`; every tensor must be
    // present with matching dims
    ParamStore extract_store(const std::string& prefix, const ParamStore& layout) const {
        ParamStore out = layout.clone();
        for (std::size_t i = 0; i < out.count(); ++i) {
            const std::string name = prefix + "." + out.name(i);
            const ParamTensor* src = find(name);
            if (!src) throw integrity_error("checkpoint missing array: " + name);
            if (src->dims != out.at(i).dims)
                throw integrity_error("checkpoint dim mismatch for " + name);
            out.at(i).data = src->data;
        }
        return out;
    }

    bool has_store(const std::string& prefix) const {
        for (const auto& [n, t] : arrays)
            if (n.rfind(prefix + ".", 0) == 0) return true;
        return false;
    }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

namespace detail {

inline void put_u32(std::FILE* f, std::uint32_t v) { std::fwrite(&v, sizeof(v), 1, f); }
inline void put_u64(std::FILE* f, std::uint64_t v) { std::fwrite(&v, sizeof(v), 1, f); }

inline std::uint32_t get_u32(std::FILE* f, const std::string& path) {
    std::uint32_t v = 0;
    if (std::fread(&v, sizeof(v), 1, f) != 1)
        throw parse_error("checkpoint truncated: " + path);
    return v;
}

inline std::uint64_t get_u64(std::FILE* f, const std::string& path) {
    std::uint64_t v = 0;
    if (std::fread(&v, sizeof(v), 1, f) != 1)
        throw parse_error("checkpoint truncated: " + path);
    return v;
}

} // namespace detail

inline void Checkpoint::save(const std::string& path) const {
    const std::string tmp = path + ".tmp";
    std::FILE* f = std::fopen(tmp.c_str(), "wb");
    if (!f) throw io_error("cannot open checkpoint for writing: " + tmp);

    std::fwrite(kMagic, 1, 4, f);
    detail::put_u32(f, kVersion);
    detail::put_u64(f, config_hash);
    detail::put_u64(f, epoch);
    detail::put_u64(f, step);
    detail::put_u64(f, best_epoch);
    std::uint64_t bv;
    static_assert(sizeof(bv) == sizeof(best_val));
    std::memcpy(&bv, &best_val, sizeof(bv));
    detail::put_u64(f, bv);
    for (auto s : rng_state) detail::put_u64(f, s);

    detail::put_u32(f, std::uint32_t(arrays.size()));
    for (const auto& [name, t] : arrays) {
        detail::put_u32(f, std::uint32_t(name.size()));
        std::fwrite(name.data(), 1, name.size(), f);
        detail::put_u32(f, std::uint32_t(t.dims.size()));
        for (int d : t.dims) detail::put_u32(f, std::uint32_t(d));
        if (std::fwrite(t.data.data(), sizeof(float), t.data.size(), f) != t.data.size()) {
            std::fclose(f);
            throw io_error("short write on checkpoint: " + tmp);
        }
    }
    std::fclose(f);
    std::filesystem::rename(tmp, path);
}

inline Checkpoint Checkpoint::load(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw io_error("checkpoint not found: " + path);
    struct Closer {
        std::FILE* f;
        ~Closer() { std::fclose(f); }
    } closer{f};

    char magic[4];
    if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, kMagic, 4) != 0)
        throw parse_error("not a checkpoint file: " + path);
    const std::uint32_t version = detail::get_u32(f, path);
    if (version != kVersion)
        throw version_error("unsupported checkpoint version " + std::to_string(version) + ": " + path);

    Checkpoint ck;
    ck.config_hash = detail::get_u64(f, path);
    ck.epoch = detail::get_u64(f, path);
    ck.step = detail::get_u64(f, path);
    ck.best_epoch = detail::get_u64(f, path);
    const std::uint64_t bv = detail::get_u64(f, path);
    std::memcpy(&ck.best_val, &bv, sizeof(bv));
    for (auto& s : ck.rng_state) s = detail::get_u64(f, path);

    const std::uint32_t n = detail::get_u32(f, path);
    ck.arrays.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        const std::uint32_t name_len = detail::get_u32(f, path);
        std::string name(name_len, '\0');
        if (std::fread(name.data(), 1, name_len, f) != name_len)
            throw parse_error("checkpoint truncated: " + path);
        const std::uint32_t ndim = detail::get_u32(f, path);
        ParamTensor t;
        std::size_t total = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            t.dims.push_back(int(detail::get_u32(f, path)));
            total *= std::size_t(t.dims.back());
        }
        t.data.resize(total);
        if (std::fread(t.data.data(), sizeof(float), total, f) != total)
            throw integrity_error("checkpoint payload truncated for " + name + ": " + path);
        ck.arrays.emplace_back(std::move(name), std::move(t));
    }
    return ck;
}

} // namespace jointdiff

#endif // JOINTDIFF_CHECKPOINT_HPP
