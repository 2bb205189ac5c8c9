#include "ddcnet/checkpoint.hpp"

#include "ddcnet/io.hpp"

namespace ddc {

std::vector<std::uint8_t> encode_checkpoint(const ParamStore<float>& params) {
  std::vector<std::uint8_t> out = {'D', 'D', 'C', 'P'};
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(params.kernels.size()));
  std::uint32_t id = 1;
  for (const auto& k : params.kernels) {
    put_u32(out, id++);
    for (int v : {k.kh, k.kw, k.c_in, k.c_out, k.dy, k.sy})
      put_u32(out, static_cast<std::uint32_t>(v));
  }
  for (const auto& k : params.kernels) {
    for (float w : k.weights) put_f32(out, w);
    for (float b : k.bias) put_f32(out, b);
  }
  return out;
}

ParamStore<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > bytes.size())
      throw IoError("checkpoint truncated at offset " + std::to_string(pos));
  };
  need(12);
  if (bytes[0] != 'D' || bytes[1] != 'D' || bytes[2] != 'C' || bytes[3] != 'P')
    throw IoError("checkpoint magic mismatch at offset 0");
  const auto version = get_u32(&bytes[4]);
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto count = get_u32(&bytes[8]);
  pos = 12;
  ParamStore<float> ps;
  for (std::uint32_t i = 0; i < count; ++i) {
    need(28);
    const auto id = get_u32(&bytes[pos]);
    if (id != i + 1)
      throw IoError("checkpoint layer table out of order at offset " + std::to_string(pos));
    int f[6];
    for (int j = 0; j < 6; ++j) f[j] = static_cast<int>(get_u32(&bytes[pos + 4 + 4 * j]));
    try {
      ConvKernel<float> k(f[0], f[1], f[2], f[3], f[4], f[5]);
      ps.kernels.push_back(std::move(k));
    } catch (const ShapeError& e) {
      throw IoError("bad layer entry at offset " + std::to_string(pos) + ": " + e.what());
    }
    pos += 28;
  }
  for (auto& k : ps.kernels) {
    need(4 * (k.weights.size() + k.bias.size()));
    for (auto& w : k.weights) { w = get_f32(&bytes[pos]); pos += 4; }
    for (auto& b : k.bias) { b = get_f32(&bytes[pos]); pos += 4; }
  }
  if (pos != bytes.size())
    throw IoError("trailing bytes after checkpoint payload at offset " + std::to_string(pos));
  return ps;
}

void save_checkpoint(const std::string& path, const ParamStore<float>& params) {
  const auto bytes = encode_checkpoint(params);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                           bytes.size()));
}

ParamStore<float> load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file_bytes(path));
}

}  // namespace ddc
