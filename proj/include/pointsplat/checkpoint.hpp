#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "pointsplat/config.hpp"
#include "pointsplat/tensor.hpp"

namespace pointsplat {

/// Named float32 parameter arrays in a fixed insertion order. The order is
/// part of the training determinism contract.
struct ParamStore {
    struct Entry {
        std::string name;
        Shape shape;
        std::vector<float> data;
    };

    std::vector<Entry> entries;
    std::unordered_map<std::string, size_t> index;

    Entry& add(const std::string& name, Shape shape, std::vector<float> data) {
        if (index.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
        if (static_cast<int64_t>(data.size()) != shape.numel())
            throw std::invalid_argument("parameter '" + name + "' data/shape mismatch");
        index[name] = entries.size();
        entries.push_back({name, std::move(shape), std::move(data)});
        return entries.back();
    }
    bool has(const std::string& name) const { return index.count(name) > 0; }
    const Entry& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("unknown parameter '" + name + "'");
        return entries[it->second];
    }
    Entry& at(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("unknown parameter '" + name + "'");
        return entries[it->second];
    }
};

/// Binds ParamStore entries to tape leaves on demand and reads gradients back
/// out, aligned with the store's entry order.
template <class T>
struct Binder {
    Tape<T>* tape = nullptr;
    const ParamStore* store = nullptr;
    std::unordered_map<size_t, TensorT<T>> bound;

    Binder(Tape<T>* t, const ParamStore* s) : tape(t), store(s) {}

    TensorT<T> operator()(const std::string& name) {
        size_t ei = store->index.at(name);
        auto it = bound.find(ei);
        if (it != bound.end()) return it->second;
        const auto& e = store->entries[ei];
        std::vector<T> v(e.data.begin(), e.data.end());
        TensorT<T> t = tape->leaf(e.shape, std::move(v));
        bound.emplace(ei, t);
        return t;
    }

    // Gradients per store entry; zeros for parameters not used by the graph.
    std::vector<std::vector<float>> read_grads() const {
        std::vector<std::vector<float>> out(store->entries.size());
        for (size_t i = 0; i < store->entries.size(); ++i)
            out[i].assign(store->entries[i].data.size(), 0.f);
        for (const auto& [ei, t] : bound) {
            const auto& node = tape->nodes[t.id];
            if (node.grad.empty()) continue;
            for (size_t j = 0; j < node.grad.size(); ++j)
                out[ei][j] = static_cast<float>(node.grad[j]);
        }
        return out;
    }
};

// Checkpoint file: magic "PSCKPT01", uint32 config length + flat key=value
// config text, uint32 entry count, then per entry: uint32 name length, name
// bytes, uint32 ndim, uint32 dims, float32 LE payload. Writes are atomic
// (temp file + rename).
inline constexpr char kCheckpointMagic[8] = {'P', 'S', 'C', 'K', 'P', 'T', '0', '1'};

namespace detail {
inline void put_u32(std::ofstream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}
inline uint32_t get_u32(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) throw std::runtime_error("truncated checkpoint '" + path + "'");
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}
}  // namespace detail

inline void save_checkpoint(const ParamStore& store, const KeyValues& config,
                            const std::string& path) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open '" + tmp + "' for writing");
        out.write(kCheckpointMagic, 8);
        std::string cfg = config.serialize();
        detail::put_u32(out, static_cast<uint32_t>(cfg.size()));
        out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
        detail::put_u32(out, static_cast<uint32_t>(store.entries.size()));
        for (const auto& e : store.entries) {
            detail::put_u32(out, static_cast<uint32_t>(e.name.size()));
            out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
            detail::put_u32(out, static_cast<uint32_t>(e.shape.dims.size()));
            for (int d : e.shape.dims) detail::put_u32(out, static_cast<uint32_t>(d));
            static_assert(sizeof(float) == 4);
            out.write(reinterpret_cast<const char*>(e.data.data()),
                      static_cast<std::streamsize>(e.data.size() * 4));
        }
        if (!out) throw std::runtime_error("write failure on '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot rename '" + tmp + "' to '" + path + "'");
}

inline std::pair<ParamStore, KeyValues> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("'" + path + "' is not a checkpoint file");
    uint32_t cfg_len = detail::get_u32(in, path);
    std::string cfg(cfg_len, '\0');
    in.read(cfg.data(), cfg_len);
    if (static_cast<uint32_t>(in.gcount()) != cfg_len)
        throw std::runtime_error("truncated checkpoint '" + path + "'");
    KeyValues kv = KeyValues::parse(cfg);
    ParamStore store;
    uint32_t n = detail::get_u32(in, path);
    for (uint32_t i = 0; i < n; ++i) {
        uint32_t name_len = detail::get_u32(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        uint32_t ndim = detail::get_u32(in, path);
        Shape shape;
        for (uint32_t d = 0; d < ndim; ++d)
            shape.dims.push_back(static_cast<int>(detail::get_u32(in, path)));
        std::vector<float> data(static_cast<size_t>(shape.numel()));
        in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * 4));
        if (static_cast<size_t>(in.gcount()) != data.size() * 4)
            throw std::runtime_error("truncated checkpoint '" + path + "'");
        store.add(name, std::move(shape), std::move(data));
    }
    return {std::move(store), std::move(kv)};
}

}  // namespace pointsplat
