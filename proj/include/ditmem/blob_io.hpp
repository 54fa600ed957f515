#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "ditmem/tensor.hpp"

namespace ditmem {

// Tensor-blob layout (".dmem"), all integers little-endian:
//   "DMEM" | u32 version | u32 dtype (0 = float32, 1 = float64) | u32 rank |
//   u64 dims[rank] | row-major data | u64 FNV-1a checksum of the data bytes
enum class DType : std::uint32_t { kFloat32 = 0, kFloat64 = 1 };

inline constexpr std::uint32_t kBlobVersion = 1;

std::vector<unsigned char> encode_blob(const Tensor& t, DType dtype = DType::kFloat64);
Tensor decode_blob(const std::vector<unsigned char>& bytes, DType* dtype_out = nullptr);

void write_blob(const std::filesystem::path& path, const Tensor& t, DType dtype = DType::kFloat64);
Tensor read_blob(const std::filesystem::path& path, DType* dtype_out = nullptr);

// Writes to a sibling temp file and renames over the target.
void write_file_atomic(const std::filesystem::path& path, const std::vector<unsigned char>& bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<unsigned char> read_file(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

// Named tensors stored as one blob per tensor plus "manifest.json".
struct TensorArchive {
  std::map<std::string, Tensor> tensors;
  nlohmann::json meta = nlohmann::json::object();
};

void save_archive(const std::filesystem::path& dir, const TensorArchive& archive,
                  DType dtype = DType::kFloat64);
TensorArchive load_archive(const std::filesystem::path& dir);

}  // namespace ditmem
