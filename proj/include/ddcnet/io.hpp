#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace ddc {

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Writes via a sibling temp file and rename, so readers never observe a
/// truncated file. Throws IoError if the parent directory is missing.
void write_file_atomic(const std::string& path, std::string_view bytes);
std::vector<std::uint8_t> read_file_bytes(const std::string& path);
std::string read_file_text(const std::string& path);

/// Little-endian scalar packing shared by the binary formats.
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_i32(std::vector<std::uint8_t>& out, std::int32_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);
std::uint32_t get_u32(const std::uint8_t* p);
std::int32_t get_i32(const std::uint8_t* p);
float get_f32(const std::uint8_t* p);

/// `key=value` lines, '#' comments. Throws IoError naming the bad line.
std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace ddc
