#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "stereoworld/tensor.hpp"

namespace stw::io {

// Binary tensor file format "STW1":
//   bytes 0..3   magic "STW1"
//   u32 LE       dtype code (f32=1, f64=2, u8=3, bool=4)
//   u32 LE       ndim
//   u32 LE[ndim] dims
//   payload      row-major, little-endian
// Readers reject bad magic and payload-length mismatches.

enum class DType : uint32_t { F32 = 1, F64 = 2, U8 = 3, Bool = 4 };

inline size_t dtype_size(DType d) {
    switch (d) {
        case DType::F32: return 4;
        case DType::F64: return 8;
        case DType::U8:
        case DType::Bool: return 1;
    }
    throw std::invalid_argument("tensor_file: unknown dtype code");
}

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline void put_f32(std::string& out, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

inline void put_f64(std::string& out, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u32(out, static_cast<uint32_t>(bits & 0xffffffffull));
    put_u32(out, static_cast<uint32_t>(bits >> 32));
}

}  // namespace detail

inline std::string serialize_tensor(const Tensor& t, DType dt) {
    std::string out;
    out.reserve(12 + 4 * t.shape().size() + static_cast<size_t>(t.numel()) * dtype_size(dt));
    out += "STW1";
    detail::put_u32(out, static_cast<uint32_t>(dt));
    detail::put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) detail::put_u32(out, static_cast<uint32_t>(d));
    for (int64_t i = 0; i < t.numel(); ++i) {
        const double v = t[i];
        switch (dt) {
            case DType::F32: detail::put_f32(out, static_cast<float>(v)); break;
            case DType::F64: detail::put_f64(out, v); break;
            case DType::U8: out.push_back(static_cast<char>(static_cast<uint8_t>(v))); break;
            case DType::Bool: out.push_back(v != 0.0 ? 1 : 0); break;
        }
    }
    return out;
}

inline void write_tensor(const std::string& path, const Tensor& t, DType dt) {
    const std::string bytes = serialize_tensor(t, dt);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("tensor_file: cannot open for write: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("tensor_file: write failed: " + path);
}

inline Tensor parse_tensor(const std::vector<unsigned char>& buf, const std::string& origin,
                           DType* dtype_out = nullptr) {
    if (buf.size() < 12 || std::memcmp(buf.data(), "STW1", 4) != 0)
        throw std::runtime_error("tensor_file: bad magic in " + origin);
    const uint32_t code = detail::get_u32(buf.data() + 4);
    if (code < 1 || code > 4)
        throw std::runtime_error("tensor_file: bad dtype code in " + origin);
    const DType dt = static_cast<DType>(code);
    const uint32_t ndim = detail::get_u32(buf.data() + 8);
    if (buf.size() < 12 + 4ull * ndim)
        throw std::runtime_error("tensor_file: truncated header in " + origin);
    std::vector<int64_t> shape(ndim);
    uint64_t n = 1;
    for (uint32_t i = 0; i < ndim; ++i) {
        shape[i] = detail::get_u32(buf.data() + 12 + 4 * i);
        n *= static_cast<uint64_t>(shape[i]);
    }
    const size_t header = 12 + 4ull * ndim;
    if (buf.size() != header + n * dtype_size(dt))
        throw std::runtime_error("tensor_file: payload length mismatch in " + origin);
    Tensor t(shape);
    const unsigned char* p = buf.data() + header;
    for (uint64_t i = 0; i < n; ++i) {
        switch (dt) {
            case DType::F32: {
                uint32_t bits = detail::get_u32(p + 4 * i);
                float f;
                std::memcpy(&f, &bits, 4);
                t[static_cast<int64_t>(i)] = static_cast<double>(f);
                break;
            }
            case DType::F64: {
                uint64_t bits = static_cast<uint64_t>(detail::get_u32(p + 8 * i)) |
                                (static_cast<uint64_t>(detail::get_u32(p + 8 * i + 4)) << 32);
                double d;
                std::memcpy(&d, &bits, 8);
                t[static_cast<int64_t>(i)] = d;
                break;
            }
            case DType::U8: t[static_cast<int64_t>(i)] = static_cast<double>(p[i]); break;
            case DType::Bool: t[static_cast<int64_t>(i)] = p[i] ? 1.0 : 0.0; break;
        }
    }
    if (dtype_out) *dtype_out = dt;
    return t;
}

inline Tensor read_tensor(const std::string& path, DType* dtype_out = nullptr) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("tensor_file: cannot open for read: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    return parse_tensor(buf, path, dtype_out);
}

}  // namespace stw::io
