#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kvpacket/error.hpp"

namespace kvp {

static_assert(sizeof(float) == 4, "f32 storage assumed");

// Little-endian binary buffer used by every on-disk container
// (KVPW weights, KVPC caches, KVPA adapters, KVDS sample sets).
class ByteWriter {
public:
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void i64(int64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void magic(const char m[4]) { buf_.append(m, 4); }

    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        buf_.append(s);
    }

    void f32_array(std::span<const float> v) { raw(v.data(), v.size() * 4); }

    void i32_array(std::span<const int> v) {
        u32(static_cast<uint32_t>(v.size()));
        raw(v.data(), v.size() * 4);
    }

    void i64_array(std::span<const int64_t> v) {
        u64(v.size());
        raw(v.data(), v.size() * 8);
    }

    void bytes(std::span<const uint8_t> b) { raw(b.data(), b.size()); }

    const std::string& buffer() const { return buf_; }

    void write_file(const std::filesystem::path& path) const;

private:
    void raw(const void* p, size_t n) { buf_.append(static_cast<const char*>(p), n); }
    std::string buf_;
};

class ByteReader {
public:
    explicit ByteReader(std::string data) : data_(std::move(data)) {}

    static ByteReader from_file(const std::filesystem::path& path);

    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    int64_t i64() { int64_t v; raw(&v, 8); return v; }
    float f32() { float v; raw(&v, 4); return v; }

    void expect_magic(const char m[4]) {
        char got[4];
        raw(got, 4);
        if (std::memcmp(got, m, 4) != 0)
            throw FormatError("bad magic: expected '" + std::string(m, 4) + "', got '" + std::string(got, 4) + "'");
    }

    std::string str() {
        uint32_t n = u32();
        check(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::vector<float> f32_array(size_t n) {
        std::vector<float> v(n);
        raw(v.data(), n * 4);
        return v;
    }

    std::vector<int> i32_array() {
        uint32_t n = u32();
        std::vector<int> v(n);
        raw(v.data(), static_cast<size_t>(n) * 4);
        return v;
    }

    std::vector<int64_t> i64_array() {
        uint64_t n = u64();
        if (n > (data_.size() - pos_) / 8)
            throw FormatError("truncated file: i64 array of " + std::to_string(n) +
                              " at offset " + std::to_string(pos_));
        std::vector<int64_t> v(n);
        raw(v.data(), static_cast<size_t>(n) * 8);
        return v;
    }

    std::vector<uint8_t> bytes(size_t n) {
        std::vector<uint8_t> v(n);
        raw(v.data(), n);
        return v;
    }

    bool at_end() const { return pos_ == data_.size(); }
    size_t size() const { return data_.size(); }

private:
    void check(size_t n) const {
        if (pos_ + n > data_.size()) throw FormatError("truncated file: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_));
    }
    void raw(void* p, size_t n) {
        check(n);
        std::memcpy(p, data_.data() + pos_, n);
        pos_ += n;
    }
    std::string data_;
    size_t pos_ = 0;
};

} // namespace kvp
