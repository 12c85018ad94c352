#pragma once

// Tensor binary file format and atomic file writes.
//
// Layout: magic "TFMF", u32 LE version (=1), u32 LE rank, u32 LE dims,
// then row-major float32 LE data. Values are widened to double on load
// and truncated to float on save.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tfm/tensor.hpp"

namespace tfm::io {

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                          (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
    os.write((const char*)b, 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read((char*)b, 4);
    if (!is) throw IoError("tensor file truncated");
    return (std::uint32_t)b[0] | ((std::uint32_t)b[1] << 8) | ((std::uint32_t)b[2] << 16) |
           ((std::uint32_t)b[3] << 24);
}

inline void put_f32(std::ostream& os, float f) {
    std::uint32_t v;
    static_assert(sizeof(float) == 4);
    std::memcpy(&v, &f, 4);
    put_u32(os, v);
}

inline float get_f32(std::istream& is) {
    std::uint32_t v = get_u32(is);
    float f;
    std::memcpy(&f, &v, 4);
    return f;
}

}  // namespace detail

inline void save_tensor(std::ostream& os, const Tensor& t) {
    os.write("TFMF", 4);
    detail::put_u32(os, 1);
    detail::put_u32(os, (std::uint32_t)t.rank());
    for (std::size_t d : t.shape()) detail::put_u32(os, (std::uint32_t)d);
    for (double v : t.data()) detail::put_f32(os, (float)v);
}

inline Tensor load_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "TFMF") throw IoError("bad tensor file magic");
    std::uint32_t version = detail::get_u32(is);
    if (version != 1) throw IoError("unsupported tensor file version " + std::to_string(version));
    std::uint32_t rank = detail::get_u32(is);
    Shape shape(rank);
    for (auto& d : shape) {
        d = detail::get_u32(is);
        if (d == 0) throw IoError("tensor file has zero dimension");
    }
    std::size_t n = numel(shape);
    std::vector<double> data(n);
    for (auto& v : data) v = (double)detail::get_f32(is);
    return Tensor(std::move(shape), std::move(data));
}

// write-temp-then-rename
template <typename WriteFn>
inline void atomic_write(const std::filesystem::path& path, WriteFn&& fn) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
        fn(os);
        if (!os) throw IoError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void save_tensor_file(const std::filesystem::path& path, const Tensor& t) {
    atomic_write(path, [&](std::ostream& os) { save_tensor(os, t); });
}

inline Tensor load_tensor_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open tensor file " + path.string());
    return load_tensor(is);
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
    atomic_write(path, [&](std::ostream& os) { os << text; });
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open file " + path.string());
    std::ostringstream oss;
    oss << is.rdbuf();
    return oss.str();
}

}  // namespace tfm::io
