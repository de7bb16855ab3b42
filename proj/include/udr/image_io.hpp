#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "udr/tensor.hpp"

// Binary PPM (P6) and PGM (P5) with maxval 255. Dependency-free and
// bit-exact, which keeps determinism checks honest.

namespace udr {

namespace detail {

inline void skip_header_space(std::istream& in) {
    for (;;) {
        int c = in.peek();
        if (c == '#') {
            std::string line;
            std::getline(in, line);
        } else if (c != EOF && std::isspace(c)) {
            in.get();
        } else {
            return;
        }
    }
}

inline long read_header_int(std::istream& in, const std::string& path) {
    skip_header_space(in);
    long v = -1;
    if (!(in >> v) || v < 0)
        throw std::runtime_error("image header: bad integer field in " + path);
    return v;
}

template <class T>
std::vector<unsigned char> quantize(const Tensor<T>& img) {
    std::vector<unsigned char> bytes(static_cast<std::size_t>(img.numel()));
    for (long i = 0; i < img.numel(); ++i) {
        const double v = std::clamp(static_cast<double>(img.data()[i]), 0.0, 1.0);
        bytes[static_cast<std::size_t>(i)] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    return bytes;
}

template <class T>
void write_pnm(const std::string& path, const Tensor<T>& img, long channels, const char* magic) {
    if (img.rank() != 3 || img.dim(0) != channels)
        throw std::invalid_argument(std::string("write_") + (channels == 3 ? "ppm" : "pgm") +
                                    ": expected [" + std::to_string(channels) + ",H,W], got " +
                                    shape_str(img.shape()));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    const long H = img.dim(1), W = img.dim(2);
    out << magic << "\n" << W << " " << H << "\n255\n";
    // planar [C,H,W] to interleaved rows
    const auto q = quantize(img);
    std::vector<unsigned char> row(static_cast<std::size_t>(W * channels));
    for (long i = 0; i < H; ++i) {
        for (long j = 0; j < W; ++j)
            for (long c = 0; c < channels; ++c)
                row[static_cast<std::size_t>(j * channels + c)] =
                    q[static_cast<std::size_t>(c * H * W + i * W + j)];
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("short write: " + path);
}

template <class T>
Tensor<T> read_pnm(const std::string& path, long channels, const char* magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    char m0 = 0, m1 = 0;
    in.get(m0);
    in.get(m1);
    if (m0 != magic[0] || m1 != magic[1])
        throw std::runtime_error("image header: expected " + std::string(magic) + " magic in " + path);
    const long W = read_header_int(in, path);
    const long H = read_header_int(in, path);
    const long maxval = read_header_int(in, path);
    if (maxval != 255)
        throw std::runtime_error("image header: only maxval 255 is supported, got " +
                                 std::to_string(maxval) + " in " + path);
    in.get(); // single whitespace byte before the raster
    std::vector<unsigned char> raw(static_cast<std::size_t>(H * W * channels));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size()))
        throw std::runtime_error("truncated raster data in " + path);
    Tensor<T> img = Tensor<T>::zeros({channels, H, W});
    for (long i = 0; i < H; ++i)
        for (long j = 0; j < W; ++j)
            for (long c = 0; c < channels; ++c)
                img.data()[c * H * W + i * W + j] =
                    static_cast<T>(raw[static_cast<std::size_t>((i * W + j) * channels + c)]) /
                    static_cast<T>(255);
    return img;
}

} // namespace detail

template <class T>
void write_ppm(const std::string& path, const Tensor<T>& img) {
    detail::write_pnm(path, img, 3, "P6");
}

template <class T>
Tensor<T> read_ppm(const std::string& path) {
    return detail::read_pnm<T>(path, 3, "P6");
}

template <class T>
void write_pgm(const std::string& path, const Tensor<T>& img) {
    detail::write_pnm(path, img, 1, "P5");
}

template <class T>
Tensor<T> read_pgm(const std::string& path) {
    return detail::read_pnm<T>(path, 1, "P5");
}

} // namespace udr
