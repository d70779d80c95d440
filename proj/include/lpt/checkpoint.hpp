#pragma once

#include <filesystem>
#include <string>

#include "lpt/optim.hpp"

namespace lpt {

// Binary layout, little-endian:
//   "LPT1" | u32 count | count × (u32 name_len, name bytes, u32 rank,
//   rank × u64 dim, u8 dtype) | payloads in header order.
// dtype 0 = float32, 1 = float64.
enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <std::floating_point T>
std::string encode_checkpoint(const ParameterList<T>& tensors);

// Payloads stored in the other precision are converted on load.
template <std::floating_point T>
ParameterList<T> decode_checkpoint(const std::string& bytes);

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& path, const ParameterList<T>& tensors);

template <std::floating_point T>
ParameterList<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace lpt
