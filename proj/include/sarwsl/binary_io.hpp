#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sarwsl {

/// Malformed or unreadable on-disk artifact.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Little-endian byte sink.
class ByteWriter {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    void u16(std::uint16_t v)
    {
        for (int i = 0; i < 2; ++i)
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }

    void u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i)
            buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }

    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

    void f32s(const float* v, std::size_t n)
    {
        buf_.reserve(buf_.size() + 4 * n);
        for (std::size_t i = 0; i < n; ++i)
            f32(v[i]);
    }

    const std::vector<char>& buffer() const { return buf_; }

    void save(const std::filesystem::path& path) const
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out)
            throw std::runtime_error("cannot open for writing: " + path.string());
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out)
            throw std::runtime_error("write failed: " + path.string());
    }

private:
    std::vector<char> buf_;
};

/// Little-endian byte source with bounds checking; overruns raise FormatError.
class ByteReader {
public:
    explicit ByteReader(std::vector<char> data, std::string what = "file")
        : data_(std::move(data)), what_(std::move(what))
    {}

    static ByteReader from_file(const std::filesystem::path& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in)
            throw FormatError("cannot open " + path.string());
        std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return ByteReader(std::move(data), path.string());
    }

    std::string bytes(std::size_t n)
    {
        need(n);
        std::string s(data_.data() + pos_, n);
        pos_ += n;
        return s;
    }

    std::uint16_t u16()
    {
        need(2);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i)
            v |= static_cast<std::uint16_t>(static_cast<unsigned char>(data_[pos_++]) << (8 * i));
        return v;
    }

    std::uint32_t u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_++])) << (8 * i);
        return v;
    }

    float f32() { return std::bit_cast<float>(u32()); }

    void f32s(float* out, std::size_t n)
    {
        if (n > remaining() / 4)
            throw FormatError(what_ + ": truncated payload (expected " + std::to_string(n) +
                              " floats, found " + std::to_string(remaining() / 4) + ")");
        for (std::size_t i = 0; i < n; ++i)
            out[i] = f32();
    }

    std::size_t remaining() const { return data_.size() - pos_; }
    const std::string& what() const { return what_; }

private:
    void need(std::size_t n) const
    {
        if (n > remaining())
            throw FormatError(what_ + ": truncated header");
    }

    std::vector<char> data_;
    std::size_t pos_ = 0;
    std::string what_;
};

} // namespace sarwsl
