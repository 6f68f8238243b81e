#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "atc/error.hpp"

namespace atc {

// Explicit little-endian binary IO for the on-disk containers (episodes,
// checkpoints). Keeps files byte-stable regardless of host conventions.
class BinWriter {
  public:
    explicit BinWriter(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw Error("cannot open for writing: " + path);
        path_ = path;
    }
    void u8(uint8_t v) { raw(&v, 1); }
    void u32(uint32_t v) {
        uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8),
                        static_cast<uint8_t>(v >> 16), static_cast<uint8_t>(v >> 24)};
        raw(b, 4);
    }
    void u64(uint64_t v) {
        u32(static_cast<uint32_t>(v));
        u32(static_cast<uint32_t>(v >> 32));
    }
    void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }
    void f32(float v) {
        uint32_t u;
        std::memcpy(&u, &v, 4);
        u32(u);
    }
    void f32s(const float* p, size_t n) {
        for (size_t i = 0; i < n; ++i) f32(p[i]);
    }
    void bytes(const void* p, size_t n) { raw(p, n); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void close() {
        out_.close();
        if (!out_) throw Error("write failed: " + path_);
    }

  private:
    void raw(const void* p, size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    std::ofstream out_;
    std::string path_;
};

class BinReader {
  public:
    explicit BinReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw Error("cannot open for reading: " + path);
    }
    uint8_t u8() {
        uint8_t v;
        raw(&v, 1);
        return v;
    }
    uint32_t u32() {
        uint8_t b[4];
        raw(b, 4);
        return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
               static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
    }
    uint64_t u64() {
        const uint64_t lo = u32();
        return lo | static_cast<uint64_t>(u32()) << 32;
    }
    int32_t i32() { return static_cast<int32_t>(u32()); }
    float f32() {
        const uint32_t u = u32();
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
    void f32s(float* p, size_t n) {
        for (size_t i = 0; i < n; ++i) p[i] = f32();
    }
    void bytes(void* p, size_t n) { raw(p, n); }
    std::string str() {
        const uint32_t n = u32();
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }

  private:
    void raw(void* p, size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!in_) throw ParseError("unexpected end of file in " + path_);
    }
    std::ifstream in_;
    std::string path_;
};

}  // namespace atc
