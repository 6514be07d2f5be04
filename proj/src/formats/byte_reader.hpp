#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

#include "ecgx/error.hpp"

namespace ecgx::formats::detail {

// Bounds-checked little-endian cursor. Every overrun becomes a structured
// error with the caller's code so truncated files never read past the end.
class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> data, ErrorCode on_truncation,
               std::string_view what)
        : data_(data), code_(on_truncation), what_(what) {}

    std::size_t pos() const noexcept { return pos_; }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    bool at_end() const noexcept { return pos_ >= data_.size(); }

    void seek(std::size_t p) {
        if (p > data_.size()) truncated();
        pos_ = p;
    }
    void skip(std::size_t n) { take(n); }

    std::span<const std::uint8_t> take(std::size_t n) {
        if (n > remaining()) truncated();
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::string take_string(std::size_t n) {
        auto s = take(n);
        return {reinterpret_cast<const char*>(s.data()), s.size()};
    }

    std::uint8_t u8() { return take(1)[0]; }
    std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::uint64_t u64() { return le(8); }

    [[noreturn]] void truncated() const {
        fail(code_, std::string(what_) + ": unexpected end of data at byte " + std::to_string(pos_));
    }

private:
    std::uint64_t le(std::size_t n) {
        auto s = take(n);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
        return v;
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
    ErrorCode code_;
    std::string_view what_;
};

inline double read_f64(const std::uint8_t* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

inline float read_f32(const std::uint8_t* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    float v;
    std::memcpy(&v, &bits, sizeof v);
    return v;
}

inline std::int16_t read_i16(const std::uint8_t* p) {
    return static_cast<std::int16_t>(static_cast<std::uint16_t>(p[0] | (p[1] << 8)));
}

inline std::int32_t read_i32(const std::uint8_t* p) {
    return static_cast<std::int32_t>(static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                                     (static_cast<std::uint32_t>(p[2]) << 16) |
                                     (static_cast<std::uint32_t>(p[3]) << 24));
}

inline void append_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

}  // namespace ecgx::formats::detail
