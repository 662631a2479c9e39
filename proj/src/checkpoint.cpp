#include "gconv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written little-endian via raw stores");

namespace gconv {

using nlohmann::json;

void save_checkpoint(const std::vector<const Param*>& params, const std::string& manifest_path,
                     const std::string& blob_path) {
  json manifest = json::array();
  std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
  if (!blob) throw ValueError("checkpoint: cannot open " + blob_path + " for writing");
  size_t offset = 0;
  for (const Param* p : params) {
    manifest.push_back({{"name", p->name},
                        {"shape", p->value.shape},
                        {"dtype", "f64"},
                        {"offset", offset}});
    blob.write(reinterpret_cast<const char*>(p->value.ptr()),
               std::streamsize(sizeof(double) * p->value.size()));
    offset += sizeof(double) * p->value.size();
  }
  if (!blob) throw ValueError("checkpoint: write to " + blob_path + " failed");
  std::ofstream mf(manifest_path, std::ios::trunc);
  if (!mf) throw ValueError("checkpoint: cannot open " + manifest_path + " for writing");
  mf << manifest.dump(2) << "\n";
}

void save_checkpoint(const std::vector<Param*>& params, const std::string& manifest_path,
                     const std::string& blob_path) {
  std::vector<const Param*> cp(params.begin(), params.end());
  save_checkpoint(cp, manifest_path, blob_path);
}

void load_checkpoint(const std::vector<Param*>& params, const std::string& manifest_path,
                     const std::string& blob_path) {
  std::ifstream mf(manifest_path);
  if (!mf) throw ValueError("checkpoint: cannot open " + manifest_path);
  json manifest = json::parse(mf, nullptr, /*allow_exceptions=*/true);
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw ValueError("checkpoint: cannot open " + blob_path);

  std::unordered_map<std::string, Param*> by_name;
  for (Param* p : params) by_name[p->name] = p;

  size_t matched = 0;
  for (const auto& entry : manifest) {
    const std::string name = entry.at("name").get<std::string>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValueError("checkpoint: unknown parameter '" + name + "'");
    Param* p = it->second;
    const std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    if (shape != p->value.shape)
      throw ShapeError("checkpoint: parameter '" + name + "' has shape " +
                       shape_str(p->value.shape) + " but manifest says " + shape_str(shape));
    if (entry.at("dtype").get<std::string>() != "f64")
      throw ValueError("checkpoint: parameter '" + name + "' is not f64");
    const size_t offset = entry.at("offset").get<size_t>();
    blob.seekg(std::streamoff(offset));
    blob.read(reinterpret_cast<char*>(p->value.ptr()),
              std::streamsize(sizeof(double) * p->value.size()));
    if (!blob) throw ValueError("checkpoint: blob truncated reading '" + name + "'");
    ++matched;
  }
  if (matched != params.size())
    throw ValueError("checkpoint: manifest lists " + std::to_string(matched) + " of " +
                     std::to_string(params.size()) + " parameters");
}

}  // namespace gconv
