#pragma once
#include <string>
#include <vector>

#include "gconv/tensor.hpp"

namespace gconv {

// Checkpoint format: a JSON manifest listing {name, shape, dtype:"f64",
// offset} per parameter (offset in bytes into the blob) plus a little-endian
// flat binary of all values concatenated in manifest order.
void save_checkpoint(const std::vector<const Param*>& params, const std::string& manifest_path,
                     const std::string& blob_path);
void save_checkpoint(const std::vector<Param*>& params, const std::string& manifest_path,
                     const std::string& blob_path);

// Loads by name; every manifest entry must match a parameter with the same
// shape, and every parameter must be present.
void load_checkpoint(const std::vector<Param*>& params, const std::string& manifest_path,
                     const std::string& blob_path);

}  // namespace gconv
