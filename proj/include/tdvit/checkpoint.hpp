#pragma once

// TDVT checkpoint container:
//
//   "TDVT" | version u32 | config record | precision u8 | tensor count u32
//   per tensor: name length u32 | name bytes | rank u32 | extents u32[rank] | values
//
// The config record is, in order: image_height, image_width, channels,
// patch_size, dim, heads, head_dim, depth, mlp_hidden, decoder_depth (u32 each),
// mode u8 (0 positional, 1 te, 2 ta), pairwise u8, shared-TEM u8,
// parts u8 (bit 0 classifier, bit 1 decoder), seed u64.
// Values are little-endian in the declared precision (4 = f32, 8 = f64).

#include "binary_io.hpp"
#include "model.hpp"

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

namespace tdvit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
struct Checkpoint {
    ModelParams<T> params;
    std::uint64_t seed = 0;
};

template <typename T>
void write_checkpoint(std::ostream& os, ModelParams<T>& params, std::uint64_t seed) {
    const auto& c = params.config;
    ByteWriter w(os);
    w.put_bytes("TDVT");
    w.put<std::uint32_t>(kCheckpointVersion);
    for (std::size_t v : {c.image_height, c.image_width, c.channels, c.patch_size, c.dim, c.heads, c.head_dim, c.depth,
                          c.mlp_hidden, c.decoder_depth}) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
    }
    w.put<std::uint8_t>(static_cast<std::uint8_t>(c.mode));
    w.put<std::uint8_t>(c.pairwise_rel_time ? 1 : 0);
    w.put<std::uint8_t>(c.share_tem_across_layers ? 1 : 0);
    w.put<std::uint8_t>(static_cast<std::uint8_t>((params.has_classifier ? 1 : 0) | (params.has_decoder ? 2 : 0)));
    w.put<std::uint64_t>(seed);
    w.put<std::uint8_t>(sizeof(T));
    const auto named = params.named_parameters();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, t] : named) {
        w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        w.put_bytes(name);
        w.put<std::uint32_t>(static_cast<std::uint32_t>(t->rank()));
        for (std::size_t e : t->shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
        for (T v : t->values()) {
            if constexpr (std::is_same_v<T, float>) {
                w.put_f32(v);
            } else {
                w.put_f64(v);
            }
        }
    }
}

template <typename T>
void write_checkpoint(const std::string& path, ModelParams<T>& params, std::uint64_t seed) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_checkpoint(out, params, seed);
    out.flush();
    if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

template <typename T>
Checkpoint<T> read_checkpoint(std::istream& is, const std::string& source) {
    ByteReader r(is, source);
    r.expect_magic("TDVT");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw FormatError("'" + source + "' has checkpoint version " + std::to_string(version));
    }
    ModelConfig c;
    for (std::size_t* f : {&c.image_height, &c.image_width, &c.channels, &c.patch_size, &c.dim, &c.heads, &c.head_dim,
                           &c.depth, &c.mlp_hidden, &c.decoder_depth}) {
        *f = r.get<std::uint32_t>();
    }
    const auto mode = r.get<std::uint8_t>();
    if (mode > 2) throw FormatError("'" + source + "' has unknown mode " + std::to_string(mode));
    c.mode = static_cast<TemporalMode>(mode);
    c.pairwise_rel_time = r.get<std::uint8_t>() != 0;
    c.share_tem_across_layers = r.get<std::uint8_t>() != 0;
    const auto parts = r.get<std::uint8_t>();
    const auto seed = r.get<std::uint64_t>();
    const auto precision = r.get<std::uint8_t>();
    if (precision != 4 && precision != 8) {
        throw FormatError("'" + source + "' declares unsupported precision " + std::to_string(precision));
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError("'" + source + "' has an invalid config: " + e.what());
    }

    Checkpoint<T> ck;
    ck.seed = seed;
    ck.params = init_weights<T>(c, 0, (parts & 1) != 0, (parts & 2) != 0);
    std::map<std::string, Tensor<T>*> slots;
    for (const auto& [name, t] : ck.params.named_parameters()) slots[name] = t;

    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::string name = r.get_bytes(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.get<std::uint32_t>());
        auto it = slots.find(name);
        if (it == slots.end()) throw FormatError("'" + source + "' contains unexpected tensor '" + name + "'");
        if (it->second->shape() != shape) {
            throw FormatError("'" + source + "' tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                              shape_str(it->second->shape()));
        }
        auto& values = it->second->values();
        for (auto& v : values) v = static_cast<T>(precision == 4 ? static_cast<double>(r.get_f32()) : r.get_f64());
        slots.erase(it);
    }
    if (!slots.empty()) throw FormatError("'" + source + "' is missing tensor '" + slots.begin()->first + "'");
    r.expect_end();
    ck.params.relink_shared_tem();
    return ck;
}

template <typename T>
Checkpoint<T> read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    return read_checkpoint<T>(in, path);
}

}  // namespace tdvit
