#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "sarwsl/binary_io.hpp"

namespace sarwsl {

inline constexpr std::uint8_t kNonForest = 0;
inline constexpr std::uint8_t kForest = 1;
inline constexpr std::uint8_t kUnlabeled = 255;

/// Multi-band float image, band-sequential row-major. SAR bands are in dB,
/// band 0 = VV and band 1 = VH.
struct Raster {
    std::size_t bands = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    float nodata = std::numeric_limits<float>::quiet_NaN();
    std::vector<float> data;

    Raster() = default;

    Raster(std::size_t b, std::size_t h, std::size_t w, float fill = 0.0f,
           float nodata_value = std::numeric_limits<float>::quiet_NaN())
        : bands(b), height(h), width(w), nodata(nodata_value), data(b * h * w, fill)
    {
        if (b == 0 || h == 0 || w == 0)
            throw std::invalid_argument("raster dimensions must be positive");
    }

    std::size_t pixels() const { return height * width; }

    float& at(std::size_t b, std::size_t y, std::size_t x) { return data[(b * height + y) * width + x]; }
    float at(std::size_t b, std::size_t y, std::size_t x) const { return data[(b * height + y) * width + x]; }

    std::span<float> band(std::size_t b) { return {data.data() + b * pixels(), pixels()}; }
    std::span<const float> band(std::size_t b) const { return {data.data() + b * pixels(), pixels()}; }

    /// NaN sentinels match any NaN payload.
    bool is_nodata(float v) const
    {
        if (std::isnan(nodata))
            return std::isnan(v);
        return v == nodata;
    }

    bool same_shape(const Raster& o) const { return bands == o.bands && height == o.height && width == o.width; }
};

/// Per-pixel class codes {non-forest=0, forest=1, unlabeled=255}.
struct ClassMap {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> codes;

    ClassMap() = default;
    ClassMap(std::size_t h, std::size_t w, std::uint8_t fill = kNonForest) : height(h), width(w), codes(h * w, fill) {}

    std::size_t pixels() const { return height * width; }
    std::uint8_t& at(std::size_t y, std::size_t x) { return codes[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return codes[y * width + x]; }

    bool dense() const
    {
        return std::none_of(codes.begin(), codes.end(), [](std::uint8_t c) { return c == kUnlabeled; });
    }

    std::size_t count(std::uint8_t code) const
    {
        return static_cast<std::size_t>(std::count(codes.begin(), codes.end(), code));
    }

    bool operator==(const ClassMap&) const = default;
};

inline bool valid_code(std::uint8_t c) { return c == kNonForest || c == kForest || c == kUnlabeled; }

inline Raster to_raster(const ClassMap& map)
{
    Raster r(1, map.height, map.width);
    for (std::size_t i = 0; i < map.pixels(); ++i)
        r.data[i] = static_cast<float>(map.codes[i]);
    return r;
}

inline ClassMap to_class_map(const Raster& r)
{
    if (r.bands != 1)
        throw FormatError("class map raster must have exactly one band");
    ClassMap map(r.height, r.width);
    for (std::size_t i = 0; i < r.pixels(); ++i) {
        const float v = r.data[i];
        if (v != 0.0f && v != 1.0f && v != 255.0f)
            throw FormatError("class map contains invalid code " + std::to_string(v));
        map.codes[i] = static_cast<std::uint8_t>(v);
    }
    return map;
}

/// Per-band, per-pixel median over the stack, skipping nodata entries.
/// Even counts average the two middle values; all-nodata pixels stay nodata.
inline Raster median_composite(std::span<const Raster> stack)
{
    if (stack.empty())
        throw std::invalid_argument("median_composite: empty stack");
    const Raster& first = stack.front();
    for (const Raster& r : stack)
        if (!r.same_shape(first))
            throw std::invalid_argument("median_composite: mismatched raster dimensions");

    Raster out(first.bands, first.height, first.width, 0.0f, first.nodata);
    std::vector<float> values;
    values.reserve(stack.size());
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        values.clear();
        for (const Raster& r : stack)
            if (!r.is_nodata(r.data[i]))
                values.push_back(r.data[i]);
        if (values.empty()) {
            out.data[i] = first.nodata;
            continue;
        }
        const std::size_t mid = values.size() / 2;
        std::nth_element(values.begin(), values.begin() + mid, values.end());
        const float upper = values[mid];
        if (values.size() % 2 == 1) {
            out.data[i] = upper;
        } else {
            const float lower = *std::max_element(values.begin(), values.begin() + mid);
            out.data[i] = static_cast<float>((static_cast<double>(lower) + upper) / 2.0);
        }
    }
    return out;
}

inline Raster median_composite(const std::vector<Raster>& stack)
{
    return median_composite(std::span<const Raster>(stack));
}

// WSLR layout, little-endian:
//   "WSLR" | u16 version=1 | u16 bands | u32 height | u32 width | f32 nodata | f32[b*h*w]
inline constexpr std::uint16_t kWslrVersion = 1;
inline constexpr std::size_t kWslrHeaderBytes = 20;

inline std::vector<char> encode_raster(const Raster& r)
{
    if (r.bands == 0 || r.height == 0 || r.width == 0)
        throw std::invalid_argument("write_raster: empty raster");
    if (r.bands > 0xffff || r.height > 0xffffffffULL || r.width > 0xffffffffULL)
        throw std::invalid_argument("write_raster: dimensions exceed format limits");
    if (r.data.size() != r.bands * r.height * r.width)
        throw std::invalid_argument("write_raster: data length does not match dimensions");
    ByteWriter w;
    w.bytes("WSLR");
    w.u16(kWslrVersion);
    w.u16(static_cast<std::uint16_t>(r.bands));
    w.u32(static_cast<std::uint32_t>(r.height));
    w.u32(static_cast<std::uint32_t>(r.width));
    w.f32(r.nodata);
    w.f32s(r.data.data(), r.data.size());
    return w.buffer();
}

inline Raster decode_raster(ByteReader in)
{
    if (in.remaining() < 4 || in.bytes(4) != "WSLR")
        throw FormatError(in.what() + ": bad magic (expected WSLR)");
    const std::uint16_t version = in.u16();
    if (version != kWslrVersion)
        throw FormatError(in.what() + ": unsupported WSLR version " + std::to_string(version));
    const std::uint64_t bands = in.u16();
    const std::uint64_t height = in.u32();
    const std::uint64_t width = in.u32();
    const float nodata = in.f32();
    if (bands == 0 || height == 0 || width == 0)
        throw FormatError(in.what() + ": zero dimension");
    // bands < 2^16 and height, width < 2^32, so only the final product can overflow.
    const std::uint64_t plane = height * width;
    if (plane / height != width || plane > std::numeric_limits<std::uint64_t>::max() / 4 / bands)
        throw FormatError(in.what() + ": dimension overflow");
    const std::uint64_t count = plane * bands;
    if (count > in.remaining() / 4)
        throw FormatError(in.what() + ": truncated payload (declares " + std::to_string(count) +
                          " values, holds " + std::to_string(in.remaining() / 4) + ")");
    if (in.remaining() != count * 4)
        throw FormatError(in.what() + ": trailing bytes after payload");
    Raster r;
    r.bands = bands;
    r.height = height;
    r.width = width;
    r.nodata = nodata;
    r.data.resize(count);
    in.f32s(r.data.data(), count);
    return r;
}

inline void write_raster(const Raster& r, const std::filesystem::path& path)
{
    const auto bytes = encode_raster(r);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw std::runtime_error("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw std::runtime_error("write failed: " + path.string());
}

inline Raster read_raster(const std::filesystem::path& path)
{
    return decode_raster(ByteReader::from_file(path));
}

inline void write_class_map(const ClassMap& map, const std::filesystem::path& path)
{
    write_raster(to_raster(map), path);
}

inline ClassMap read_class_map(const std::filesystem::path& path)
{
    return to_class_map(read_raster(path));
}

struct Rgb {
    std::uint8_t r, g, b;
    bool operator==(const Rgb&) const = default;
};

inline Rgb palette_color(std::uint8_t code)
{
    switch (code) {
    case kNonForest: return {210, 180, 140};
    case kForest: return {0, 100, 0};
    default: return {128, 128, 128};
    }
}

namespace detail {

inline void png_chunk(std::vector<unsigned char>& out, const char* type, const std::vector<unsigned char>& payload)
{
    const auto put32 = [&](std::uint32_t v) {
        for (int i = 3; i >= 0; --i)
            out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
    };
    put32(static_cast<std::uint32_t>(payload.size()));
    const std::size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, out.data() + start, static_cast<uInt>(out.size() - start));
    put32(static_cast<std::uint32_t>(crc));
}

} // namespace detail

/// Writes an 8-bit RGB PNG using the fixed class palette.
inline void export_png(const ClassMap& map, const std::filesystem::path& path)
{
    if (map.height == 0 || map.width == 0)
        throw std::invalid_argument("export_png: empty class map");

    std::vector<unsigned char> raw;
    raw.reserve(map.height * (1 + 3 * map.width));
    for (std::size_t y = 0; y < map.height; ++y) {
        raw.push_back(0); // filter: none
        for (std::size_t x = 0; x < map.width; ++x) {
            const Rgb c = palette_color(map.at(y, x));
            raw.insert(raw.end(), {c.r, c.g, c.b});
        }
    }
    uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
    std::vector<unsigned char> packed(packed_size);
    if (compress2(packed.data(), &packed_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("export_png: deflate failed");
    packed.resize(packed_size);

    std::vector<unsigned char> header;
    const auto put32 = [&](std::uint32_t v) {
        for (int i = 3; i >= 0; --i)
            header.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
    };
    put32(static_cast<std::uint32_t>(map.width));
    put32(static_cast<std::uint32_t>(map.height));
    header.insert(header.end(), {8, 2, 0, 0, 0}); // depth 8, truecolor, deflate, no filter, no interlace

    std::vector<unsigned char> png = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    detail::png_chunk(png, "IHDR", header);
    detail::png_chunk(png, "IDAT", packed);
    detail::png_chunk(png, "IEND", {});

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw std::runtime_error("export_png: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
    if (!out)
        throw std::runtime_error("export_png: write failed for " + path.string());
}

} // namespace sarwsl
