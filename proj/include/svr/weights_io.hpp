#pragma once

// Weight container:
//   "SVRW1"
//   repeated until EOF:
//     u32 name_length, name bytes (UTF-8)
//     u32 rank, rank x u32 extents
//     prod(extents) x f32 values, row-major
// All integers and floats little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "svr/tensor.hpp"

namespace svr {

inline constexpr std::array<char, 5> kWeightMagic{'S', 'V', 'R', 'W', '1'};

/// Named tensor reference used to save and restore module state.
template <class T>
using NamedTensor = std::pair<std::string, BasicTensor<T>*>;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

}  // namespace detail

/// Serialize tensors in the given order. Values are stored as f32.
template <class T>
void write_weights(std::ostream& os, const std::vector<NamedTensor<T>>& tensors) {
    os.write(kWeightMagic.data(), kWeightMagic.size());
    for (const auto& [name, t] : tensors) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(t->rank()));
        for (auto e : t->shape()) detail::put_u32(os, static_cast<std::uint32_t>(e));
        for (std::size_t i = 0; i < t->size(); ++i)
            detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>((*t)[i])));
    }
    if (!os) throw IngestionError("failed writing weight data");
}

template <class T>
void save_weights(const std::string& path, const std::vector<NamedTensor<T>>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IngestionError("cannot open weight file for writing: " + path);
    write_weights(os, tensors);
}

/// Read every record into a name -> tensor map.
inline std::map<std::string, Tensor> read_weights(std::istream& is) {
    std::array<char, 5> magic{};
    if (!is.read(magic.data(), magic.size()) || magic != kWeightMagic)
        throw IngestionError("weight file: bad magic");
    std::map<std::string, Tensor> out;
    std::uint32_t len = 0;
    while (detail::get_u32(is, len)) {
        std::string name(len, '\0');
        std::uint32_t rank = 0;
        if (!is.read(name.data(), len) || !detail::get_u32(is, rank) || rank > 5)
            throw IngestionError("weight file: truncated record header");
        Shape shape(rank);
        for (auto& e : shape) {
            std::uint32_t v = 0;
            if (!detail::get_u32(is, v) || v == 0)
                throw IngestionError("weight file: bad extent for " + name);
            e = v;
        }
        Tensor t(shape);
        for (auto& v : t.data()) {
            std::uint32_t bits = 0;
            if (!detail::get_u32(is, bits))
                throw IngestionError("weight file: truncated values for " + name);
            v = std::bit_cast<float>(bits);
        }
        if (!out.emplace(name, std::move(t)).second)
            throw IngestionError("weight file: duplicate record " + name);
    }
    return out;
}

inline std::map<std::string, Tensor> load_weight_map(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IngestionError("cannot open weight file: " + path);
    return read_weights(is);
}

/// Copy records into `targets` by name. Every target must be present with
/// a matching shape; extra records (other modules) are ignored.
template <class T>
void assign_weights(const std::map<std::string, Tensor>& records,
                    const std::vector<NamedTensor<T>>& targets) {
    for (const auto& [name, t] : targets) {
        auto it = records.find(name);
        if (it == records.end()) throw IngestionError("weight file: missing record " + name);
        if (it->second.shape() != t->shape())
            throw IngestionError("weight file: shape mismatch for " + name + ": " +
                                 shape_string(it->second.shape()) + " vs " +
                                 shape_string(t->shape()));
        for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = static_cast<T>(it->second[i]);
    }
}

}  // namespace svr
