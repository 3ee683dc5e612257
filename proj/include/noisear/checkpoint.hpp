#pragma once

#include <string>

#include "noisear/model.hpp"

namespace noisear {

// NARC checkpoint: magic "NARC", u32 LE version (=1), u64 LE metadata length,
// UTF-8 JSON metadata (config plus ordered tensor table of name/shape/byte
// offset), then all tensors concatenated as little-endian f32 in table order.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace noisear
