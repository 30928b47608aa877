#pragma once

#include <avd/error.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Little-endian primitive encoding shared by the AVDM and AVPF formats.
namespace avd::detail {

class ByteWriter {
public:
    void put_u16(std::uint16_t v)
    {
        bytes_.push_back(static_cast<std::uint8_t>(v & 0xFF));
        bytes_.push_back(static_cast<std::uint8_t>(v >> 8));
    }

    void put_i16(std::int16_t v) { put_u16(static_cast<std::uint16_t>(v)); }

    void put_u32(std::uint32_t v)
    {
        for (int i = 0; i < 4; ++i)
            bytes_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
    }

    void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }

    void put_magic(std::string_view magic)
    {
        bytes_.insert(bytes_.end(), magic.begin(), magic.end());
    }

    void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

    const std::vector<std::uint8_t>& bytes() const& { return bytes_; }
    std::vector<std::uint8_t> bytes() && { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint16_t get_u16()
    {
        need(2);
        const auto v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
        pos_ += 2;
        return v;
    }

    std::int16_t get_i16() { return static_cast<std::int16_t>(get_u16()); }

    std::uint32_t get_u32()
    {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    float get_f32() { return std::bit_cast<float>(get_u32()); }

    bool expect_magic(std::string_view magic)
    {
        need(magic.size());
        const bool ok = std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) == 0;
        pos_ += magic.size();
        return ok;
    }

    std::string get_string(std::size_t n)
    {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const
    {
        if (bytes_.size() - pos_ < n)
            throw Error("truncated binary record");
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace avd::detail
