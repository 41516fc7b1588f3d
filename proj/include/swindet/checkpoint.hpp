#pragma once

// Checkpoint container: a little-endian u64 header giving the byte length of
// a JSON index, the index itself, then tightly packed raw tensor buffers.
// The index maps tensor name -> { dtype, shape, offset } with offsets
// relative to the start of the data section; the reserved "__meta__" key
// carries run metadata (epoch, step, precision).

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swindet/tensor.hpp"

namespace swindet {

namespace detail {
template <typename T>
constexpr const char* dtype_name();
template <>
constexpr const char* dtype_name<float>() {
  return "f32";
}
template <>
constexpr const char* dtype_name<double>() {
  return "f64";
}
}  // namespace detail

class Checkpoint {
 public:
  struct Entry {
    std::string dtype;
    Shape shape;
    std::vector<unsigned char> bytes;
  };

  template <typename T>
  void put(const std::string& name, Shape shape, const std::vector<T>& data) {
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw usage_error("checkpoint: " + name + " size mismatch for " + shape_str(shape));
    Entry e;
    e.dtype = detail::dtype_name<T>();
    e.shape = std::move(shape);
    e.bytes.resize(data.size() * sizeof(T));
    std::memcpy(e.bytes.data(), data.data(), e.bytes.size());
    entries_[name] = std::move(e);
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  template <typename T>
  std::pair<Shape, std::vector<T>> get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw io_error("checkpoint: missing tensor " + name);
    const Entry& e = it->second;
    if (e.dtype != detail::dtype_name<T>())
      throw io_error("checkpoint: " + name + " stored as " + e.dtype + ", requested " +
                     detail::dtype_name<T>());
    std::vector<T> out(e.bytes.size() / sizeof(T));
    std::memcpy(out.data(), e.bytes.data(), e.bytes.size());
    return {e.shape, std::move(out)};
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [k, v] : entries_) out.push_back(k);
    return out;
  }

  nlohmann::json meta;

  void save(const std::string& path) const {
    nlohmann::json index;
    index["__meta__"] = meta.is_null() ? nlohmann::json::object() : meta;
    std::uint64_t offset = 0;
    for (const auto& [name, e] : entries_) {
      index[name] = {{"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset}};
      offset += e.bytes.size();
    }
    const std::string js = index.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw io_error("checkpoint: cannot open " + path + " for writing");
    const std::uint64_t len = js.size();
    unsigned char hdr[8];
    for (int i = 0; i < 8; ++i) hdr[i] = static_cast<unsigned char>((len >> (8 * i)) & 0xff);
    f.write(reinterpret_cast<const char*>(hdr), 8);
    f.write(js.data(), static_cast<std::streamsize>(js.size()));
    for (const auto& [name, e] : entries_)
      f.write(reinterpret_cast<const char*>(e.bytes.data()),
              static_cast<std::streamsize>(e.bytes.size()));
    if (!f) throw io_error("checkpoint: write failed for " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw io_error("checkpoint: cannot open " + path);
    unsigned char hdr[8];
    f.read(reinterpret_cast<char*>(hdr), 8);
    if (f.gcount() != 8) throw io_error("checkpoint: truncated header in " + path);
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(hdr[i]) << (8 * i);
    std::string js(len, '\0');
    f.read(js.data(), static_cast<std::streamsize>(len));
    if (static_cast<std::uint64_t>(f.gcount()) != len)
      throw io_error("checkpoint: truncated index in " + path);
    nlohmann::json index = nlohmann::json::parse(js, nullptr, false);
    if (index.is_discarded()) throw io_error("checkpoint: corrupt index in " + path);
    std::vector<unsigned char> data((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    Checkpoint ck;
    for (auto& [name, v] : index.items()) {
      if (name == "__meta__") {
        ck.meta = v;
        continue;
      }
      Entry e;
      e.dtype = v.at("dtype").get<std::string>();
      e.shape = v.at("shape").get<Shape>();
      const std::size_t esize = e.dtype == "f64" ? 8 : 4;
      const std::uint64_t off = v.at("offset").get<std::uint64_t>();
      const std::uint64_t nbytes = static_cast<std::uint64_t>(shape_numel(e.shape)) * esize;
      if (off + nbytes > data.size())
        throw io_error("checkpoint: " + name + " extends past end of " + path);
      e.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(off),
                     data.begin() + static_cast<std::ptrdiff_t>(off + nbytes));
      ck.entries_[name] = std::move(e);
    }
    return ck;
  }

 private:
  std::map<std::string, Entry> entries_;
};

}  // namespace swindet
