#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "mechshift/model.hpp"

namespace mechshift {

// Layout: text manifest of key=value lines (config fields, then one
// "tensor=<name> shape=<d0,d1> offset=<o> bytes=<n>" line per tensor),
// terminated by "end", followed by the little-endian float32 blobs in
// manifest order. Offsets are relative to the first blob byte.
std::string serialize_checkpoint(const Weights& weights);
Weights parse_checkpoint(std::string_view bytes);

void save_checkpoint(const Weights& weights, const std::filesystem::path& path);
Weights load_checkpoint(const std::filesystem::path& path);

}  // namespace mechshift
