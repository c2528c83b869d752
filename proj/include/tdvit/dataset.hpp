#pragma once

// In-memory datasets, their generation, and the TDDS container:
//
//   "TDDS" | version u32 | n_samples u32 | T u8 | H u16 | W u16 | C u8 | precision u8
//   per sample: label u8 | times f32[T] | frames f32[T·H·W·C]
//
// All values little-endian; frames row-major (t, y, x, c). precision is the
// byte width of stored reals (always 4). Label 255 marks an unlabeled sample.

#include "binary_io.hpp"
#include "embedding.hpp"
#include "synth.hpp"

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace tdvit {

inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::uint8_t kUnlabeled = 255;

struct Dataset {
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<ImageSequence> samples;

    std::size_t size() const { return samples.size(); }
    bool operator==(const Dataset& o) const {
        if (frames != o.frames || height != o.height || width != o.width || channels != o.channels ||
            samples.size() != o.samples.size())
            return false;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto &a = samples[i], &b = o.samples[i];
            if (a.label != b.label || a.times != b.times || a.frames != b.frames) return false;
        }
        return true;
    }
};

struct GeneratedCohort {
    Dataset dataset;
    std::vector<SyntheticSample> provenance;  // frames moved into dataset; metadata kept
};

/// Balanced cohort; identical output for any worker count.
inline GeneratedCohort generate_dataset(const GeneratorSpec& spec, std::size_t n, std::size_t workers = 1) {
    if (n == 0) throw std::invalid_argument("generate_dataset: need at least one sample");
    spec.validate();
    std::vector<SyntheticSample> samples(n);
    auto run = [&](std::size_t begin, std::size_t stride) {
        for (std::size_t i = begin; i < n; i += stride) samples[i] = generate_sample(spec, i);
    };
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        run(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w, workers);
    }
    GeneratedCohort out;
    out.dataset.frames = spec.frames;
    out.dataset.height = out.dataset.width = spec.image_size;
    out.dataset.channels = spec.channels;
    for (auto& s : samples) {
        // times are stored as f32, so keep the in-memory copy identical to the file
        for (auto& t : s.sequence.times) t = static_cast<float>(t);
        s.sequence.validate();
        out.dataset.samples.push_back(std::move(s.sequence));
        s.sequence = {};
    }
    out.provenance = std::move(samples);
    return out;
}

inline void write_dataset(std::ostream& os, const Dataset& d) {
    ByteWriter w(os);
    w.put_bytes("TDDS");
    w.put<std::uint32_t>(kDatasetVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d.samples.size()));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(d.frames));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(d.height));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(d.width));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(d.channels));
    w.put<std::uint8_t>(4);
    for (const auto& s : d.samples) {
        if (s.length() != d.frames) throw std::invalid_argument("write_dataset: sample frame count differs from header");
        w.put<std::uint8_t>(s.label ? static_cast<std::uint8_t>(*s.label) : kUnlabeled);
        for (double t : s.times) w.put_f32(static_cast<float>(t));
        for (const auto& f : s.frames)
            for (float v : f.pixels) w.put_f32(v);
    }
}

inline void write_dataset(const std::string& path, const Dataset& d) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    write_dataset(out, d);
    out.flush();
    if (!out) throw std::runtime_error("failed writing dataset '" + path + "'");
}

inline Dataset read_dataset(std::istream& is, const std::string& source) {
    ByteReader r(is, source);
    r.expect_magic("TDDS");
    const auto version = r.get<std::uint32_t>();
    if (version != kDatasetVersion) {
        throw FormatError("'" + source + "' has dataset version " + std::to_string(version) + ", expected " +
                          std::to_string(kDatasetVersion));
    }
    Dataset d;
    const auto n = r.get<std::uint32_t>();
    d.frames = r.get<std::uint8_t>();
    d.height = r.get<std::uint16_t>();
    d.width = r.get<std::uint16_t>();
    d.channels = r.get<std::uint8_t>();
    const auto precision = r.get<std::uint8_t>();
    if (precision != 4) throw FormatError("'" + source + "' declares unsupported precision " + std::to_string(precision));
    if (d.frames == 0) throw FormatError("'" + source + "' declares zero frames per sample");
    d.samples.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        ImageSequence s;
        const auto label = r.get<std::uint8_t>();
        if (label == 0 || label == 1) {
            s.label = static_cast<Label>(label);
        } else if (label != kUnlabeled) {
            throw FormatError("'" + source + "' sample " + std::to_string(i) + " has invalid label " +
                              std::to_string(label));
        }
        for (std::size_t t = 0; t < d.frames; ++t) s.times.push_back(r.get_f32());
        for (std::size_t t = 0; t < d.frames; ++t) {
            Frame f(d.height, d.width, d.channels);
            for (auto& v : f.pixels) v = r.get_f32();
            s.frames.push_back(std::move(f));
        }
        d.samples.push_back(std::move(s));
    }
    r.expect_end();
    return d;
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset '" + path + "'");
    return read_dataset(in, path);
}

}  // namespace tdvit
