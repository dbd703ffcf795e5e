#pragma once

// Checkpoint container: magic "DORLCKPT", u16 format version, a manifest of
// (name, dtype, shape, byte offset, frozen flag), then the raw little-endian
// tensor data.

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dorl/optim.hpp"

namespace dorl {

namespace ckpt_detail {

constexpr char kMagic[8] = {'D', 'O', 'R', 'L', 'C', 'K', 'P', 'T'};
constexpr uint16_t kVersion = 1;

template <typename T>
constexpr uint8_t dtype_tag() {
    if constexpr (std::is_same_v<T, float>)
        return 0;
    else
        return 1;
}

template <typename V>
void write_pod(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw DataError("checkpoint: truncated file");
    return v;
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store) {
    namespace d = ckpt_detail;
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("checkpoint: cannot open for writing: " + path);
    os.write(d::kMagic, 8);
    d::write_pod<uint16_t>(os, d::kVersion);
    d::write_pod<uint32_t>(os, (uint32_t)store.size());
    uint64_t offset = 0;
    for (auto& [name, t] : store.params()) {
        d::write_pod<uint16_t>(os, (uint16_t)name.size());
        os.write(name.data(), (std::streamsize)name.size());
        d::write_pod<uint8_t>(os, d::dtype_tag<T>());
        d::write_pod<uint8_t>(os, store.frozen(name) ? 1 : 0);
        d::write_pod<uint8_t>(os, (uint8_t)t.shape().size());
        for (int64_t dim : t.shape()) d::write_pod<uint64_t>(os, (uint64_t)dim);
        d::write_pod<uint64_t>(os, offset);
        offset += sizeof(T) * (uint64_t)t.numel();
    }
    for (auto& [name, t] : store.params())
        os.write(reinterpret_cast<const char*>(t.data()), (std::streamsize)(sizeof(T) * t.numel()));
    if (!os) throw DataError("checkpoint: write failed: " + path);
}

template <typename T>
ParamStore<T> load_checkpoint(const std::string& path) {
    namespace d = ckpt_detail;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, d::kMagic, 8) != 0) throw DataError("checkpoint: bad magic in " + path);
    uint16_t version = d::read_pod<uint16_t>(is);
    if (version != d::kVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
    uint32_t count = d::read_pod<uint32_t>(is);
    struct Entry {
        std::string name;
        bool frozen;
        Shape shape;
        uint64_t offset;
    };
    std::vector<Entry> entries;
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t len = d::read_pod<uint16_t>(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        uint8_t dtype = d::read_pod<uint8_t>(is);
        if (dtype != d::dtype_tag<T>()) throw DataError("checkpoint: dtype mismatch for " + name);
        uint8_t frozen = d::read_pod<uint8_t>(is);
        uint8_t ndim = d::read_pod<uint8_t>(is);
        Shape shape;
        for (uint8_t k = 0; k < ndim; ++k) shape.push_back((int64_t)d::read_pod<uint64_t>(is));
        uint64_t offset = d::read_pod<uint64_t>(is);
        entries.push_back({std::move(name), frozen != 0, std::move(shape), offset});
    }
    std::streampos data_start = is.tellg();
    ParamStore<T> store;
    for (auto& e : entries) {
        TensorData<T> t(e.shape);
        is.seekg(data_start + (std::streamoff)e.offset);
        is.read(reinterpret_cast<char*>(t.data()), (std::streamsize)(sizeof(T) * t.numel()));
        if (!is) throw DataError("checkpoint: truncated tensor data for " + e.name);
        store.add(e.name, std::move(t), e.frozen);
    }
    return store;
}

}  // namespace dorl
