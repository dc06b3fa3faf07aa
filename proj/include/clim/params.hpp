#pragma once

// Named parameter store. Every learnable tensor is addressable by a stable
// dotted name path, which drives freezing, checkpointing and Adam state.

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "clim/tensor.hpp"

namespace clim {

class ModelParams {
  public:
    void insert(const std::string& name, Tensor t) {
        if (index_.count(name))
            throw ContractError("parameter '" + name + "' already registered");
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(t), false});
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    Tensor& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
        return entries_[it->second].tensor;
    }
    const Tensor& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
        return entries_[it->second].tensor;
    }

    void set_frozen(const std::string& name, bool frozen) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
        entries_[it->second].frozen = frozen;
    }
    bool frozen(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
        return entries_[it->second].frozen;
    }

    struct Entry {
        std::string name;
        Tensor tensor;
        bool frozen;
    };
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    std::size_t size() const { return entries_.size(); }

    void zero_grads() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    // Deep copy (values and frozen flags; no tape linkage).
    ModelParams clone() const {
        ModelParams out;
        for (const auto& e : entries_) {
            out.insert(e.name, Tensor::param(e.tensor.shape(), e.tensor.values()));
            out.set_frozen(e.name, e.frozen);
        }
        return out;
    }

  private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Checkpoint container. Binary, versioned; doubles are stored raw so a
// write-then-read round trip is bit-exact. Layout:
//   magic "CLIMCKP1" | u32 version | blob(config) | u64 nvocab |
//     nvocab * (blob(vocab name) | u64 count | count * blob(entry)) |
//   u64 nparams | nparams * (blob(name) | u8 frozen | u32 ndim |
//     ndim * i64 | raw doubles)
// where blob = u64 length + bytes.

namespace ckpt_detail {

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_i64(std::ostream& os, std::int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_blob(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), std::streamsize(s.size()));
}
inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline std::int64_t read_i64(std::istream& is) {
    std::int64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline std::string read_blob(std::istream& is) {
    const std::uint64_t len = read_u64(is);
    std::string s(len, '\0');
    is.read(s.data(), std::streamsize(len));
    return s;
}

}  // namespace ckpt_detail

struct Checkpoint {
    std::string config_text;  // flat key=value run config, may be empty
    // named token lists (e.g. "word", "slot", "intent"), order defines ids
    std::map<std::string, std::vector<std::string>> vocabs;
    ModelParams params;
};

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    using namespace ckpt_detail;
    os.write("CLIMCKP1", 8);
    write_u32(os, 1);
    write_blob(os, ck.config_text);
    write_u64(os, ck.vocabs.size());
    for (const auto& [name, entries] : ck.vocabs) {
        write_blob(os, name);
        write_u64(os, entries.size());
        for (const auto& e : entries) write_blob(os, e);
    }
    write_u64(os, ck.params.size());
    for (const auto& e : ck.params.entries()) {
        write_blob(os, e.name);
        const char frozen = e.frozen ? 1 : 0;
        os.write(&frozen, 1);
        write_u32(os, std::uint32_t(e.tensor.ndim()));
        for (long d : e.tensor.shape()) write_i64(os, d);
        os.write(reinterpret_cast<const char*>(e.tensor.values().data()),
                 std::streamsize(e.tensor.size() * 8));
    }
    if (!os) throw DataError("short write to checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    using namespace ckpt_detail;
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "CLIMCKP1", 8) != 0)
        throw DataError("not a checkpoint file: " + path);
    const std::uint32_t version = read_u32(is);
    if (version != 1)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ck;
    ck.config_text = read_blob(is);
    const std::uint64_t nvocab = read_u64(is);
    for (std::uint64_t i = 0; i < nvocab; ++i) {
        std::string name = read_blob(is);
        const std::uint64_t count = read_u64(is);
        std::vector<std::string> entries;
        entries.reserve(count);
        for (std::uint64_t j = 0; j < count; ++j) entries.push_back(read_blob(is));
        ck.vocabs[name] = std::move(entries);
    }
    const std::uint64_t nparams = read_u64(is);
    for (std::uint64_t i = 0; i < nparams; ++i) {
        std::string name = read_blob(is);
        char frozen;
        is.read(&frozen, 1);
        const std::uint32_t ndim = read_u32(is);
        Shape shape;
        for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(read_i64(is));
        std::vector<double> values(std::size_t(numel(shape)));
        is.read(reinterpret_cast<char*>(values.data()),
                std::streamsize(values.size() * 8));
        if (!is) throw DataError("truncated checkpoint: " + path);
        ck.params.insert(name, Tensor::param(std::move(shape), std::move(values)));
        ck.params.set_frozen(name, frozen != 0);
    }
    return ck;
}

}  // namespace clim
