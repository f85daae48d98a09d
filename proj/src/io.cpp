#include "tqvsr/io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "tqvsr/rng.hpp"

namespace tqvsr::io {

namespace {

constexpr char kFeatureMagic[4] = {'T', 'Q', 'V', 'F'};
constexpr uint32_t kFeatureVersion = 1;

[[noreturn]] void fail(const std::filesystem::path& p, const std::string& what) {
    throw std::runtime_error(p.string() + ": " + what);
}

}  // namespace

void write_u16(std::ostream& os, uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void write_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

void write_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

void write_string(std::ostream& os, const std::string& s) {
    if (s.size() > UINT16_MAX) throw std::runtime_error("string too long for u16 prefix");
    write_u16(os, static_cast<uint16_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    if (!is) throw std::runtime_error("unexpected end of file reading u16");
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("unexpected end of file reading u32");
    uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("unexpected end of file reading u64");
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

float read_f32(std::istream& is) {
    uint32_t bits = read_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

std::string read_string(std::istream& is) {
    const uint16_t n = read_u16(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("unexpected end of file reading string");
    return s;
}

void write_feature_file(const std::filesystem::path& path, const FloatMatrix& m) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) fail(path, "cannot open for writing");
    os.write(kFeatureMagic, 4);
    write_u32(os, kFeatureVersion);
    write_u32(os, static_cast<uint32_t>(m.cols));
    write_u64(os, m.rows);
    for (float v : m.data) write_f32(os, v);
    if (!os) fail(path, "write failed");
}

FloatMatrix read_feature_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(path, "cannot open");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kFeatureMagic, 4) != 0) fail(path, "bad magic, not a TQVF file");
    const uint32_t version = read_u32(is);
    if (version != kFeatureVersion) fail(path, "unsupported TQVF version " + std::to_string(version));
    FloatMatrix m;
    m.cols = read_u32(is);
    m.rows = read_u64(is);
    m.data.resize(m.rows * m.cols);
    for (float& v : m.data) v = read_f32(is);
    return m;
}

std::string file_fingerprint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(path, "cannot open");
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[4096];
    while (is.read(buf, sizeof(buf)) || is.gcount() > 0) {
        const std::streamsize n = is.gcount();
        for (std::streamsize i = 0; i < n; ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!is) break;
    }
    static const char* hex = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = hex[h & 0xf];
        h >>= 4;
    }
    return out;
}

}  // namespace tqvsr::io
