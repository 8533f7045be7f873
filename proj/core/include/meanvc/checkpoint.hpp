#pragma once

#include <string>

#include "meanvc/param_store.hpp"

namespace meanvc {

// Checkpoint container, little-endian:
//   magic "MVC1", version u32, entry count u32, then per entry:
//   name length u32 + UTF-8 name, rank u32, dims u64 each, float32 data.
// Values are narrowed to float32 on save and widened on load, so
// save(load(f)) reproduces f byte for byte.
void save_checkpoint(const std::string& path, const ParamStore& params);
ParamStore load_checkpoint(const std::string& path);

}  // namespace meanvc
