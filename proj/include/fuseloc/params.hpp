#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fuseloc/common.hpp"
#include "fuseloc/tensor.hpp"

namespace fuseloc {

static_assert(std::endian::native == std::endian::little, "serialization assumes little-endian host");

// Named, insertion-ordered parameter store. Holds every learnable tensor of
// the model plus non-trainable state (batch-norm running statistics). The
// same container doubles as a gradient table whose entries mirror parameter
// paths. Momentum buffers live beside their parameter and are never
// serialized. Entries live in a deque: references handed out by at()/accum()
// stay valid while further entries are added.
template <typename T>
class ParameterTable {
public:
    struct Entry {
        std::string path;
        Tensor<T> value;
        Tensor<T> momentum;  // empty until the optimizer touches it
        bool trainable = true;
    };

    Tensor<T>& add(const std::string& path, Tensor<T> value, bool trainable = true) {
        if (index_.count(path))
            throw ContractError("diffcore", "duplicate parameter path '" + path + "'");
        index_.emplace(path, entries_.size());
        entries_.push_back(Entry{path, std::move(value), Tensor<T>(), trainable});
        return entries_.back().value;
    }

    bool contains(const std::string& path) const { return index_.count(path) != 0; }

    Tensor<T>& at(const std::string& path) { return entry(path).value; }
    const Tensor<T>& at(const std::string& path) const { return entry(path).value; }

    Tensor<T>* find(const std::string& path) {
        auto it = index_.find(path);
        return it == index_.end() ? nullptr : &entries_[it->second].value;
    }
    const Tensor<T>* find(const std::string& path) const {
        auto it = index_.find(path);
        return it == index_.end() ? nullptr : &entries_[it->second].value;
    }

    Entry& entry(const std::string& path) {
        auto it = index_.find(path);
        if (it == index_.end()) throw ContractError("diffcore", "unknown parameter path '" + path + "'");
        return entries_[it->second];
    }
    const Entry& entry(const std::string& path) const {
        auto it = index_.find(path);
        if (it == index_.end()) throw ContractError("diffcore", "unknown parameter path '" + path + "'");
        return entries_[it->second];
    }

    std::size_t size() const { return entries_.size(); }
    const std::deque<Entry>& entries() const { return entries_; }
    std::deque<Entry>& entries() { return entries_; }

    // Gradient-table helper: fetch the accumulation buffer for `path`,
    // creating a zero tensor of the given shape on first use.
    Tensor<T>& accum(const std::string& path, const std::vector<int>& shape) {
        auto it = index_.find(path);
        if (it == index_.end()) return add(path, Tensor<T>(shape), true);
        Tensor<T>& t = entries_[it->second].value;
        if (t.shape() != shape)
            throw ContractError("diffcore", "gradient shape mismatch for '" + path + "'");
        return t;
    }

    void zero_values() {
        for (auto& e : entries_) e.value.fill(T(0));
    }

private:
    std::deque<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, std::size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
        throw FormatError("diffcore", std::string("truncated model file while reading ") + what);
}

}  // namespace detail

// Model file ("FLM1"): magic, u32 entry count, then per entry a u16 path
// length, the UTF-8 path, u32 rank, rank x u32 dims and the row-major float32
// payload. Little-endian throughout.
inline void save_parameters(const ParameterTable<float>& table, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("diffcore", "cannot open '" + path + "' for writing");
    os.write("FLM1", 4);
    std::uint32_t count = static_cast<std::uint32_t>(table.size());
    detail::write_bytes(os, &count, 4);
    for (const auto& e : table.entries()) {
        if (e.path.size() > 0xFFFF)
            throw ContractError("diffcore", "parameter path too long for serialization");
        std::uint16_t plen = static_cast<std::uint16_t>(e.path.size());
        detail::write_bytes(os, &plen, 2);
        detail::write_bytes(os, e.path.data(), plen);
        std::uint32_t rank = static_cast<std::uint32_t>(e.value.rank());
        detail::write_bytes(os, &rank, 4);
        for (int d : e.value.shape()) {
            std::uint32_t dim = static_cast<std::uint32_t>(d);
            detail::write_bytes(os, &dim, 4);
        }
        detail::write_bytes(os, e.value.data(), sizeof(float) * static_cast<std::size_t>(e.value.numel()));
    }
    if (!os) throw IoError("diffcore", "write failed for '" + path + "'");
}

// Reads an FLM1 file into a fresh table (entry order = file order). Trainable
// flags are not stored in the file; callers that need them load into an
// initialized model via load_parameters_into.
inline ParameterTable<float> load_parameters(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("diffcore", "cannot open '" + path + "'");
    char magic[4];
    detail::read_bytes(is, magic, 4, "magic");
    if (std::memcmp(magic, "FLM1", 4) != 0) throw FormatError("diffcore", "bad magic in '" + path + "'");
    std::uint32_t count = 0;
    detail::read_bytes(is, &count, 4, "entry count");
    ParameterTable<float> table;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint16_t plen = 0;
        detail::read_bytes(is, &plen, 2, "path length");
        std::string p(plen, '\0');
        detail::read_bytes(is, p.data(), plen, "path");
        std::uint32_t rank = 0;
        detail::read_bytes(is, &rank, 4, "rank");
        if (rank == 0 || rank > 8) throw FormatError("diffcore", "implausible tensor rank in '" + path + "'");
        std::vector<int> shape(rank);
        for (auto& d : shape) {
            std::uint32_t dim = 0;
            detail::read_bytes(is, &dim, 4, "dimension");
            if (dim == 0 || dim > (1u << 28)) throw FormatError("diffcore", "implausible dimension in '" + path + "'");
            d = static_cast<int>(dim);
        }
        Tensor<float> t(shape);
        detail::read_bytes(is, t.data(), sizeof(float) * static_cast<std::size_t>(t.numel()), "tensor data");
        table.add(p, std::move(t));
    }
    return table;
}

// Overwrites the values of an already-initialized table from a model file,
// validating that paths and shapes line up exactly in both directions.
inline void load_parameters_into(ParameterTable<float>& table, const std::string& path) {
    ParameterTable<float> loaded = load_parameters(path);
    if (loaded.size() != table.size())
        throw FormatError("diffcore", "model file '" + path + "' has " + std::to_string(loaded.size()) +
                                          " parameters, expected " + std::to_string(table.size()));
    for (const auto& e : loaded.entries()) {
        Tensor<float>* dst = table.find(e.path);
        if (dst == nullptr)
            throw FormatError("diffcore", "model file has unexpected parameter '" + e.path + "'");
        if (dst->shape() != e.value.shape())
            throw FormatError("diffcore", "shape mismatch for '" + e.path + "': file " +
                                              e.value.shape_string() + " vs model " + dst->shape_string());
        *dst = e.value;
    }
}

}  // namespace fuseloc
