#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "capsf/error.hpp"
#include "capsf/tensor.hpp"

namespace capsf {

enum class DType { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

struct ArchiveEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::uint64_t offset = 0;

  std::uint64_t byte_size() const { return shape_numel(shape) * dtype_size(dtype); }
};

/// Named tensors plus string metadata, stored as
///
///   bytes 0..7    magic "CAPSFWA1"
///   bytes 8..15   header length H, uint64 little-endian
///   next H bytes  UTF-8 header, one record per line:
///                   meta <key> <value>
///                   tensor <name> <f32|f64> <d0,d1,...> <byte offset>
///   remainder     blob of little-endian IEEE-754 values
///
/// Tensors are laid out back to back in header order, so offsets are
/// contiguous and the blob length equals the sum of entry sizes.
class WeightArchive {
 public:
  static constexpr char kMagic[9] = "CAPSFWA1";

  const std::vector<ArchiveEntry>& entries() const { return entries_; }
  const std::map<std::string, std::string>& meta() const { return meta_; }
  std::size_t blob_size() const { return blob_.size(); }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const ArchiveEntry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("missing tensor " + name);
    return entries_[it->second];
  }

  void set_meta(const std::string& key, const std::string& value) {
    if (key.empty() || key.find_first_of(" \t\n\r") != std::string::npos)
      throw UsageError("archive meta key must be a non-empty token: '" + key + "'");
    if (value.find_first_of("\n\r") != std::string::npos)
      throw UsageError("archive meta value for '" + key + "' contains a newline");
    meta_[key] = value;
  }

  std::string meta_value(const std::string& key) const {
    auto it = meta_.find(key);
    if (it == meta_.end()) throw DataError("archive is missing metadata '" + key + "'");
    return it->second;
  }

  std::string meta_or(const std::string& key, const std::string& fallback) const {
    auto it = meta_.find(key);
    return it == meta_.end() ? fallback : it->second;
  }

  template <typename T>
  void add(const std::string& name, const Tensor<T>& tensor, DType dtype = DType::f32) {
    if (name.empty() || name.find_first_of(" \t\n\r") != std::string::npos)
      throw UsageError("archive tensor name must be a non-empty token: '" + name + "'");
    if (contains(name)) throw UsageError("duplicate tensor name " + name);
    ArchiveEntry e{name, dtype, tensor.shape(), blob_.size()};
    blob_.resize(blob_.size() + e.byte_size());
    std::uint8_t* out = blob_.data() + e.offset;
    for (T v : tensor.data()) {
      if (dtype == DType::f32) {
        write_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        out += 4;
      } else {
        write_le(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
        out += 8;
      }
    }
    index_[name] = entries_.size();
    entries_.push_back(std::move(e));
  }

  template <typename T>
  Tensor<T> get(const std::string& name, bool requires_grad = false) const {
    const ArchiveEntry& e = entry(name);
    const std::size_t n = shape_numel(e.shape);
    std::vector<T> values(n);
    const std::uint8_t* in = blob_.data() + e.offset;
    for (std::size_t i = 0; i < n; ++i) {
      if (e.dtype == DType::f32) {
        values[i] = static_cast<T>(std::bit_cast<float>(read_le<std::uint32_t>(in + 4 * i)));
      } else {
        values[i] = static_cast<T>(std::bit_cast<double>(read_le<std::uint64_t>(in + 8 * i)));
      }
    }
    return Tensor<T>(e.shape, std::move(values), requires_grad);
  }

  // Like get(), but also checks the stored shape.
  template <typename T>
  Tensor<T> get(const std::string& name, const Shape& expected, bool requires_grad = false) const {
    const ArchiveEntry& e = entry(name);
    if (e.shape != expected) {
      throw DataError("tensor " + name + " has shape " + shape_str(e.shape) + ", expected " +
                      shape_str(expected));
    }
    return get<T>(name, requires_grad);
  }

  std::string header_text() const {
    std::ostringstream oss;
    for (const auto& [k, v] : meta_) oss << "meta " << k << ' ' << v << '\n';
    for (const auto& e : entries_) {
      oss << "tensor " << e.name << ' ' << dtype_name(e.dtype) << ' ';
      for (std::size_t i = 0; i < e.shape.size(); ++i) oss << (i ? "," : "") << e.shape[i];
      oss << ' ' << e.offset << '\n';
    }
    return oss.str();
  }

  std::vector<std::uint8_t> to_bytes() const {
    const std::string header = header_text();
    std::vector<std::uint8_t> out(16 + header.size() + blob_.size());
    std::memcpy(out.data(), kMagic, 8);
    write_le(out.data() + 8, static_cast<std::uint64_t>(header.size()));
    std::memcpy(out.data() + 16, header.data(), header.size());
    if (!blob_.empty()) std::memcpy(out.data() + 16 + header.size(), blob_.data(), blob_.size());
    return out;
  }

  static WeightArchive from_bytes(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0)
      throw DataError("corrupt weight archive: bad magic");
    const std::uint64_t hlen = read_le<std::uint64_t>(bytes.data() + 8);
    if (hlen > bytes.size() - 16) throw DataError("corrupt weight archive: header length exceeds file size");
    const std::string header(reinterpret_cast<const char*>(bytes.data() + 16), hlen);

    WeightArchive ar;
    std::istringstream lines(header);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(lines, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto fail = [&](const std::string& why) {
        return DataError("corrupt weight archive manifest, line " + std::to_string(lineno) + ": " + why);
      };
      std::istringstream fields(line);
      std::string kind;
      fields >> kind;
      if (kind == "meta") {
        std::string key;
        fields >> key;
        if (key.empty()) throw fail("meta record without key");
        std::string value;
        std::getline(fields, value);
        if (!value.empty() && value[0] == ' ') value.erase(0, 1);
        if (!ar.meta_.emplace(key, value).second) throw fail("duplicate meta key " + key);
      } else if (kind == "tensor") {
        std::string name, dtype, dims;
        std::uint64_t offset = 0;
        if (!(fields >> name >> dtype >> dims >> offset)) throw fail("malformed tensor record");
        ArchiveEntry e;
        e.name = name;
        if (dtype == "f32") e.dtype = DType::f32;
        else if (dtype == "f64") e.dtype = DType::f64;
        else throw fail("unknown dtype " + dtype);
        std::istringstream ds(dims);
        std::string tok;
        while (std::getline(ds, tok, ',')) {
          std::size_t used = 0;
          unsigned long long d = 0;
          try {
            d = std::stoull(tok, &used);
          } catch (const std::exception&) {
            throw fail("bad dimension '" + tok + "'");
          }
          if (used != tok.size() || d == 0) throw fail("bad dimension '" + tok + "'");
          e.shape.push_back(static_cast<std::size_t>(d));
        }
        if (e.shape.empty()) throw fail("tensor " + name + " has no dimensions");
        e.offset = offset;
        if (ar.contains(name)) throw fail("duplicate tensor name " + name);
        ar.index_[name] = ar.entries_.size();
        ar.entries_.push_back(std::move(e));
      } else {
        throw fail("unknown record '" + kind + "'");
      }
    }
    ar.blob_.assign(bytes.begin() + 16 + static_cast<long>(hlen), bytes.end());
    ar.validate();
    return ar;
  }

  // Offsets must tile the blob exactly with no overlap or gap.
  void validate() const {
    std::vector<const ArchiveEntry*> sorted;
    for (const auto& e : entries_) sorted.push_back(&e);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->offset < b->offset; });
    std::uint64_t cursor = 0;
    for (const auto* e : sorted) {
      if (e->offset != cursor)
        throw DataError("corrupt weight archive: tensor " + e->name + " at offset " +
                        std::to_string(e->offset) + ", expected " + std::to_string(cursor));
      cursor += e->byte_size();
    }
    if (cursor != blob_.size())
      throw DataError("corrupt weight archive: entries cover " + std::to_string(cursor) +
                      " bytes but blob holds " + std::to_string(blob_.size()));
  }

  void save(const std::filesystem::path& path) const {
    const auto bytes = to_bytes();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write weight archive " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing weight archive " + path.string());
  }

  static WeightArchive load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open weight archive " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
      return from_bytes(bytes);
    } catch (const DataError& e) {
      throw DataError(path.string() + ": " + e.what());
    }
  }

 private:
  template <typename U>
  static void write_le(std::uint8_t* out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out[i] = static_cast<std::uint8_t>(value >> (8 * i));
  }

  template <typename U>
  static U read_le(const std::uint8_t* in) {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(in[i]) << (8 * i);
    return value;
  }

  std::vector<ArchiveEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, std::string> meta_;
  std::vector<std::uint8_t> blob_;
};

/// Load an archive from a file.
inline WeightArchive load_archive(const std::filesystem::path& path) { return WeightArchive::load(path); }

}  // namespace capsf
