#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "clf/types.hpp"

namespace clf {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class ByteWriter {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void i64(std::int64_t v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }
    void str(std::string_view s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    void magic(std::string_view m) { bytes(m.data(), m.size()); }
    void matrix(const Matrix& m) {
        u64(static_cast<std::uint64_t>(m.rows()));
        u64(static_cast<std::uint64_t>(m.cols()));
        bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    }
    template <typename T>
    void f64s(const std::vector<T>& v) {
        u64(v.size());
        for (auto x : v) f64(static_cast<double>(x));
    }

    const std::vector<std::uint8_t>& buffer() const { return buf_; }
    std::vector<std::uint8_t> take() { return std::move(buf_); }

private:
    std::vector<std::uint8_t> buf_;
};

class ByteReader {
public:
    ByteReader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}
    explicit ByteReader(const std::vector<std::uint8_t>& v) : ByteReader(v.data(), v.size()) {}

    void bytes(void* out, std::size_t n) {
        if (n > size_ - pos_) throw RuntimeError("binary read past end of buffer");
        std::memcpy(out, data_ + pos_, n);
        pos_ += n;
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, sizeof v); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, sizeof v); return v; }
    std::int64_t i64() { std::int64_t v; bytes(&v, sizeof v); return v; }
    double f64() { double v; bytes(&v, sizeof v); return v; }
    std::string str() {
        const auto n = u64();
        if (n > size_ - pos_) throw RuntimeError("binary string length exceeds buffer");
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    void expect_magic(std::string_view m) {
        std::string got(m.size(), '\0');
        bytes(got.data(), m.size());
        if (got != m) throw RuntimeError("bad magic: expected " + std::string(m));
    }
    Matrix matrix() {
        const auto r = u64();
        const auto c = u64();
        if (r != 0 && c > (size_ - pos_) / sizeof(double) / r) throw RuntimeError("matrix size exceeds buffer");
        Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        bytes(m.data(), sizeof(double) * r * c);
        return m;
    }
    std::vector<double> f64s() {
        const auto n = u64();
        if (n > (size_ - pos_) / sizeof(double)) throw RuntimeError("array length exceeds buffer");
        std::vector<double> v(n);
        for (auto& x : v) x = f64();
        return v;
    }

    bool at_end() const { return pos_ == size_; }
    std::size_t position() const { return pos_; }

private:
    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

}  // namespace clf
