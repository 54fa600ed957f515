#include "ditmem/blob_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ditmem/errors.hpp"
#include "ditmem/hashing.hpp"

namespace ditmem {

namespace fs = std::filesystem;

namespace {

constexpr unsigned char kMagic[4] = {'D', 'M', 'E', 'M'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
 public:
  explicit Reader(const std::vector<unsigned char>& b) : b_(b) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::size_t pos() const { return pos_; }
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw DataError("tensor blob truncated");
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  const std::vector<unsigned char>& b_;
  std::size_t pos_ = 0;
};

std::string sanitize(const std::string& name) {
  std::string out = name;
  for (auto& c : out) {
    if (c == '/' || c == '\\' || c == ':') c = '_';
  }
  return out;
}

}  // namespace

std::vector<unsigned char> encode_blob(const Tensor& t, DType dtype) {
  std::vector<unsigned char> out(kMagic, kMagic + 4);
  put_u32(out, kBlobVersion);
  put_u32(out, static_cast<std::uint32_t>(dtype));
  put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u64(out, d);
  const std::size_t payload_start = out.size();
  for (double v : t.data()) {
    if (dtype == DType::kFloat64) {
      put_u64(out, std::bit_cast<std::uint64_t>(v));
    } else {
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  const std::uint64_t checksum =
      fnv1a64(std::span(out.data() + payload_start, out.size() - payload_start));
  put_u64(out, checksum);
  return out;
}

Tensor decode_blob(const std::vector<unsigned char>& bytes, DType* dtype_out) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw DataError("not a tensor blob (bad magic)");
  }
  Reader r(bytes);
  r.skip(4);
  const auto version = r.u32();
  if (version != kBlobVersion) throw DataError("unsupported blob version " + std::to_string(version));
  const auto code = r.u32();
  if (code > 1) throw DataError("unknown blob dtype code " + std::to_string(code));
  const auto dtype = static_cast<DType>(code);
  const auto rank = r.u32();
  Shape shape(rank);
  for (auto& d : shape) d = r.u64();
  const std::size_t n = shape_numel(shape);
  const std::size_t width = dtype == DType::kFloat64 ? 8 : 4;
  const std::size_t payload_start = r.pos();
  r.need(n * width + 8);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (dtype == DType::kFloat64) {
      data[i] = std::bit_cast<double>(r.u64());
    } else {
      data[i] = static_cast<double>(std::bit_cast<float>(r.u32()));
    }
  }
  const std::uint64_t expected = fnv1a64(std::span(bytes.data() + payload_start, n * width));
  if (r.u64() != expected) throw DataError("tensor blob checksum mismatch");
  if (r.pos() != bytes.size()) throw DataError("trailing bytes after tensor blob");
  if (dtype_out) *dtype_out = dtype;
  return Tensor(std::move(shape), std::move(data));
}

void write_file_atomic(const fs::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<unsigned char>(text.begin(), text.end()));
}

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string read_text(const fs::path& path) {
  auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

void write_blob(const fs::path& path, const Tensor& t, DType dtype) {
  write_file_atomic(path, encode_blob(t, dtype));
}

Tensor read_blob(const fs::path& path, DType* dtype_out) {
  return decode_blob(read_file(path), dtype_out);
}

void save_archive(const fs::path& dir, const TensorArchive& archive, DType dtype) {
  fs::create_directories(dir);
  nlohmann::json files = nlohmann::json::object();
  for (const auto& [name, t] : archive.tensors) {
    const std::string file = sanitize(name) + ".dmem";
    write_blob(dir / file, t, dtype);
    files[name] = file;
  }
  nlohmann::json manifest = {{"format", "ditmem-archive"}, {"tensors", files}, {"meta", archive.meta}};
  write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

TensorArchive load_archive(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw DataError("missing archive manifest " + mpath.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text(mpath));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt archive manifest " + mpath.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "ditmem-archive") throw DataError("not a ditmem archive");
  TensorArchive out;
  for (const auto& [name, file] : manifest.at("tensors").items()) {
    out.tensors.emplace(name, read_blob(dir / file.get<std::string>()));
  }
  out.meta = manifest.value("meta", nlohmann::json::object());
  return out;
}

}  // namespace ditmem
