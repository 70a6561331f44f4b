#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "malfuse/autodiff.hpp"

namespace malfuse {

// Self-describing binary model container:
//
//   "MFUSEMDL"                magic, 8 bytes
//   u32 version               currently 1
//   u32 len, bytes            model kind
//   u64 len, bytes            JSON metadata (layer specs, config)
//   u32 count                 number of arrays, then per array:
//     u32 len, bytes          name
//     u32 rank, u64 dims[]    shape
//     f64 data[]              little-endian values
class ModelArchive {
 public:
  static constexpr std::string_view kMagic = "MFUSEMDL";
  static constexpr std::uint32_t kVersion = 1;

  std::string kind;
  nlohmann::json meta = nlohmann::json::object();

  void add(const std::string& name, const Tensor& value);
  void add(const Parameter& p) { add(p.name, p.value); }
  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  // Copies the array named p.name into p, checking the shape.
  void load_into(Parameter& p) const;
  const std::vector<std::pair<std::string, Tensor>>& arrays() const { return arrays_; }

  std::string to_bytes() const;
  static ModelArchive from_bytes(std::string_view bytes);
  void save(const std::filesystem::path& path) const;
  static ModelArchive load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, Tensor>> arrays_;
};

}  // namespace malfuse
