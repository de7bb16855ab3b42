#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "udr/param_store.hpp"
#include "udr/tensor.hpp"

// Binary checkpoint ("UDDF"): magic, u32 version, the run config as UTF-8
// JSON, a tensor table, and a trailing CRC32 over everything before it.
// Little-endian throughout. Loading verifies the CRC before parsing a
// single tensor, so a damaged file never yields partial state.

namespace udr {

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { io, magic, version, format, crc };
    CheckpointError(Kind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
    Kind kind;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Standard reflected CRC32 (same polynomial family as zip/png).
inline std::uint32_t crc32(const unsigned char* data, std::size_t n) {
    static const auto table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t crc = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

namespace detail {

template <class T>
constexpr std::uint8_t dtype_code() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                  "checkpoints hold float or double tensors");
    return std::is_same_v<T, float> ? 0 : 1;
}

inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
    b.push_back(static_cast<unsigned char>(v & 0xFF));
    b.push_back(static_cast<unsigned char>(v >> 8));
}

inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

template <class T>
void put_scalar(std::vector<unsigned char>& b, T v) {
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    b.insert(b.end(), raw, raw + sizeof(T));
}

// Bounds-checked cursor over the loaded byte image; any overrun is a
// format error (the CRC already passed, so the length fields are wrong).
struct Reader {
    const unsigned char* p;
    std::size_t n, at = 0;

    const unsigned char* take(std::size_t k, const char* what) {
        if (at + k > n)
            throw CheckpointError(CheckpointError::Kind::format,
                                  std::string("checkpoint field out of bounds: ") + what);
        const unsigned char* r = p + at;
        at += k;
        return r;
    }
    std::uint32_t u32(const char* what) { return get_u32(take(4, what)); }
};

} // namespace detail

template <class T>
void save_checkpoint(ParamStore<T>& store, const std::string& config_json,
                     const std::string& path) {
    std::vector<unsigned char> buf;
    buf.insert(buf.end(), {'U', 'D', 'D', 'F'});
    detail::put_u32(buf, kCheckpointVersion);
    detail::put_u32(buf, static_cast<std::uint32_t>(config_json.size()));
    buf.insert(buf.end(), config_json.begin(), config_json.end());

    const auto names = store.names(); // sorted, so files are reproducible
    detail::put_u32(buf, static_cast<std::uint32_t>(names.size()));
    for (const auto& name : names) {
        const Tensor<T>& t = store.get(name);
        detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        buf.push_back(detail::dtype_code<T>());
        buf.push_back(static_cast<unsigned char>(t.rank()));
        for (int d = 0; d < t.rank(); ++d)
            detail::put_u32(buf, static_cast<std::uint32_t>(t.dim(d)));
        for (long i = 0; i < t.numel(); ++i) detail::put_scalar(buf, t.data()[i]);
    }
    detail::put_u32(buf, crc32(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "short write: " + path);
}

// Fills `store` (which must not already hold any of the names) and returns
// the embedded config JSON.
template <class T>
std::string load_checkpoint(const std::string& path, ParamStore<T>& store) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() >= 4 && std::memcmp(buf.data(), "UDDF", 4) != 0)
        throw CheckpointError(CheckpointError::Kind::magic, "not a checkpoint file: " + path);
    if (buf.size() < 12 ||
        detail::get_u32(buf.data() + buf.size() - 4) != crc32(buf.data(), buf.size() - 4))
        throw CheckpointError(CheckpointError::Kind::crc,
                              "checksum mismatch (truncated or corrupted): " + path);
    detail::Reader r{buf.data(), buf.size() - 4};
    r.take(4, "magic");
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw CheckpointError(CheckpointError::Kind::version,
                              "unsupported checkpoint version " + std::to_string(version) +
                                  " (expected " + std::to_string(kCheckpointVersion) + ")");
    const std::uint32_t cfg_len = r.u32("config length");
    const unsigned char* cfg = r.take(cfg_len, "config");
    std::string config_json(reinterpret_cast<const char*>(cfg), cfg_len);

    const std::uint32_t count = r.u32("tensor count");
    std::vector<std::pair<std::string, Tensor<T>>> loaded;
    loaded.reserve(count);
    for (std::uint32_t k = 0; k < count; ++k) {
        const std::uint32_t name_len = r.u32("name length");
        const unsigned char* nb = r.take(name_len, "name");
        std::string name(reinterpret_cast<const char*>(nb), name_len);
        const std::uint8_t dtype = *r.take(1, "dtype");
        if (dtype != detail::dtype_code<T>())
            throw CheckpointError(CheckpointError::Kind::format,
                                  "tensor " + name + " has dtype code " + std::to_string(dtype) +
                                      ", store expects " +
                                      std::to_string(detail::dtype_code<T>()));
        const std::uint8_t rank = *r.take(1, "rank");
        Shape shape(rank);
        long numel = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            shape[d] = static_cast<long>(r.u32("dim"));
            numel *= shape[d];
        }
        const unsigned char* raw = r.take(static_cast<std::size_t>(numel) * sizeof(T), "data");
        std::vector<T> values(static_cast<std::size_t>(numel));
        std::memcpy(values.data(), raw, values.size() * sizeof(T));
        loaded.emplace_back(std::move(name), Tensor<T>::from_data(shape, std::move(values)));
    }
    if (r.at != r.n)
        throw CheckpointError(CheckpointError::Kind::format,
                              "trailing bytes after tensor table: " + path);
    for (auto& [name, tensor] : loaded) store.add(name, tensor);
    return config_json;
}

// Backward-map dump ("UDBM"): u16 version, u16 grid size, then the 2*G*G
// float32 values in channel-row-column order.
template <class T>
void write_bm(const std::string& path, const Tensor<T>& bm) {
    if (bm.rank() != 3 || bm.dim(0) != 2 || bm.dim(1) != bm.dim(2))
        throw std::invalid_argument("write_bm: expected [2,G,G], got " + shape_str(bm.shape()));
    std::vector<unsigned char> buf;
    buf.insert(buf.end(), {'U', 'D', 'B', 'M'});
    detail::put_u16(buf, 1);
    detail::put_u16(buf, static_cast<std::uint16_t>(bm.dim(1)));
    for (long i = 0; i < bm.numel(); ++i)
        detail::put_scalar(buf, static_cast<float>(bm.data()[i]));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "short write: " + path);
}

template <class T>
Tensor<T> read_bm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open: " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
    if (buf.size() < 8 || std::memcmp(buf.data(), "UDBM", 4) != 0)
        throw CheckpointError(CheckpointError::Kind::magic, "not a backward-map file: " + path);
    const std::uint16_t version = static_cast<std::uint16_t>(buf[4] | (buf[5] << 8));
    if (version != 1)
        throw CheckpointError(CheckpointError::Kind::version,
                              "unsupported map version " + std::to_string(version));
    const long G = static_cast<long>(buf[6] | (buf[7] << 8));
    const std::size_t need = 8 + static_cast<std::size_t>(2 * G * G) * sizeof(float);
    if (buf.size() != need)
        throw CheckpointError(CheckpointError::Kind::format,
                              "backward-map payload size mismatch in " + path);
    Tensor<T> bm = Tensor<T>::zeros({2, G, G});
    for (long i = 0; i < bm.numel(); ++i) {
        float v = 0;
        std::memcpy(&v, buf.data() + 8 + static_cast<std::size_t>(i) * sizeof(float),
                    sizeof(float));
        bm.data()[i] = static_cast<T>(v);
    }
    return bm;
}

} // namespace udr
