#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddcnet/network.hpp"

namespace ddc {

/// Parameter checkpoint, little-endian:
///
///   "DDCP"  u32 version  u32 layer_count
///   layer_count x { u32 id, kh, kw, c_in, c_out, dilation, stride }
///   for each layer in order: kh*kw*c_in*c_out weights then c_out biases, f32
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const ParamStore<float>& params);
ParamStore<float> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const std::string& path, const ParamStore<float>& params);
ParamStore<float> load_checkpoint(const std::string& path);

}  // namespace ddc
