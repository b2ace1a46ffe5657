#pragma once

// MRD1 container for rendered datasets.
//
//   magic "MRD1" | u32 count | u16 H | u16 W | u8 channels | u8 k
//   per sample:    u8 label  | k*H*W image bytes
//
// All integers little-endian; round-trips are bit-exact.  k is the number of
// stimulus images per sample (1 for binary tasks).

#include "mareo/common.hpp"

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace mareo {

struct Dataset {
    int h = 0, w = 0;
    int channels = 1;
    int k = 1;  // stimuli per sample
    std::vector<std::uint8_t> labels;
    std::vector<std::uint8_t> pixels;  // count * k * h * w

    std::int64_t count() const { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t stimulus_bytes() const { return static_cast<std::int64_t>(h) * w * channels; }
    std::int64_t sample_bytes() const { return stimulus_bytes() * k; }

    std::span<const std::uint8_t> image(std::int64_t sample, int stimulus = 0) const {
        return {pixels.data() + sample * sample_bytes() + stimulus * stimulus_bytes(),
                static_cast<std::size_t>(stimulus_bytes())};
    }

    void append(std::uint8_t label, const std::vector<std::uint8_t>& sample_pixels) {
        if (static_cast<std::int64_t>(sample_pixels.size()) != sample_bytes())
            throw ShapeError("dataset append: sample pixel size mismatch");
        labels.push_back(label);
        pixels.insert(pixels.end(), sample_pixels.begin(), sample_pixels.end());
    }

    std::uint64_t content_hash() const {
        ContentHash hc;
        const std::uint32_t n = static_cast<std::uint32_t>(count());
        hc.update(&n, 4);
        const std::uint16_t hh = static_cast<std::uint16_t>(h), ww = static_cast<std::uint16_t>(w);
        hc.update(&hh, 2);
        hc.update(&ww, 2);
        const std::uint8_t ch = static_cast<std::uint8_t>(channels), kk = static_cast<std::uint8_t>(k);
        hc.update(&ch, 1);
        hc.update(&kk, 1);
        if (!labels.empty()) hc.update(labels.data(), labels.size());
        if (!pixels.empty()) hc.update(pixels.data(), pixels.size());
        return hc.value();
    }
};

namespace detail {

template <typename T>
void put_le(std::ofstream& os, T v) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::ifstream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw FormatError("mrd1: truncated header");
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void dataset_write(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("mrd1: cannot open for write: " + path);
    os.write("MRD1", 4);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.count()));
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(ds.h));
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(ds.w));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(ds.channels));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(ds.k));
    for (std::int64_t i = 0; i < ds.count(); ++i) {
        os.put(static_cast<char>(ds.labels[static_cast<std::size_t>(i)]));
        os.write(reinterpret_cast<const char*>(ds.pixels.data() + i * ds.sample_bytes()),
                 static_cast<std::streamsize>(ds.sample_bytes()));
    }
    if (!os) throw FormatError("mrd1: write failed: " + path);
}

inline Dataset dataset_read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("mrd1: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "MRD1") throw FormatError("mrd1: bad magic in " + path);
    Dataset ds;
    const std::uint32_t n = detail::get_le<std::uint32_t>(is);
    ds.h = detail::get_le<std::uint16_t>(is);
    ds.w = detail::get_le<std::uint16_t>(is);
    ds.channels = detail::get_le<std::uint8_t>(is);
    ds.k = detail::get_le<std::uint8_t>(is);
    if (ds.h < 1 || ds.w < 1 || ds.channels != 1 || ds.k < 1) throw FormatError("mrd1: bad header fields");
    ds.labels.reserve(n);
    ds.pixels.reserve(static_cast<std::size_t>(n) * static_cast<std::size_t>(ds.sample_bytes()));
    std::vector<char> buf(static_cast<std::size_t>(ds.sample_bytes()));
    for (std::uint32_t i = 0; i < n; ++i) {
        const int label = is.get();
        is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!is || label == EOF) throw FormatError("mrd1: truncated at sample " + std::to_string(i));
        ds.labels.push_back(static_cast<std::uint8_t>(label));
        ds.pixels.insert(ds.pixels.end(), buf.begin(), buf.end());
    }
    return ds;
}

}  // namespace mareo
