#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "tqvsr/types.hpp"

namespace tqvsr::io {

// Little-endian primitives. The on-disk formats are defined byte level, so
// these never go through host-order shortcuts.
void write_u16(std::ostream& os, uint16_t v);
void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f32(std::ostream& os, float v);
void write_string(std::ostream& os, const std::string& s);  // u16 length prefix

uint16_t read_u16(std::istream& is);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
float read_f32(std::istream& is);
std::string read_string(std::istream& is);

// Feature file: magic "TQVF", u32 version=1, u32 dim, u64 row_count,
// then row_count*dim little-endian IEEE-754 float32, row major.
void write_feature_file(const std::filesystem::path& path, const FloatMatrix& m);
FloatMatrix read_feature_file(const std::filesystem::path& path);

// FNV-1a over a whole file, as a 16-hex-digit string. Used as a stable
// checkpoint identity for index provenance.
std::string file_fingerprint(const std::filesystem::path& path);

}  // namespace tqvsr::io
