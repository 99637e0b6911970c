// SPDX-License-Identifier: Apache-2.0
#pragma once

// Single-file container of named arrays plus a string manifest.
//
// Layout:
//   line 1   "C2RBOX 1"
//   line 2   decimal byte length L of the header
//   L bytes  JSON header {"manifest": {...}, "arrays": [{name, dtype, shape, offset, bytes}]}
//   payload  raw little-endian array data, offsets relative to payload start
//
// Doubles are stored as raw IEEE-754 bits so a save/load cycle is bit-exact.
// The header is dumped with sorted keys, so equal contents give equal bytes.

#include "c2r/core.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace c2r {

struct NamedArray {
  std::vector<std::int64_t> shape;
  std::vector<double> f64;
  std::vector<std::int64_t> i64;
  bool is_integer = false;

  std::int64_t count() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

class Container {
 public:
  std::map<std::string, std::string> manifest;

  void put(const std::string& name, const Matrix& m) {
    NamedArray a;
    a.shape = {m.rows(), m.cols()};
    a.f64.assign(m.data(), m.data() + m.size());
    arrays_[name] = std::move(a);
  }

  void put(const std::string& name, const Vector& v) {
    NamedArray a;
    a.shape = {v.size()};
    a.f64.assign(v.data(), v.data() + v.size());
    arrays_[name] = std::move(a);
  }

  void put(const std::string& name, std::vector<std::int64_t> values) {
    NamedArray a;
    a.shape = {static_cast<std::int64_t>(values.size())};
    a.i64 = std::move(values);
    a.is_integer = true;
    arrays_[name] = std::move(a);
  }

  void put_ints(const std::string& name, const std::vector<int>& values) {
    put(name, std::vector<std::int64_t>(values.begin(), values.end()));
  }

  bool has(const std::string& name) const { return arrays_.count(name) != 0; }

  const NamedArray& array(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw IngestionError("container: missing array '" + name + "'");
    return it->second;
  }

  Matrix matrix(const std::string& name) const {
    const auto& a = array(name);
    if (a.is_integer || a.shape.size() != 2)
      throw IngestionError("container: array '" + name + "' is not a 2-d float array");
    Matrix m(a.shape[0], a.shape[1]);
    if (!a.f64.empty()) std::memcpy(m.data(), a.f64.data(), a.f64.size() * sizeof(double));
    return m;
  }

  Vector vector(const std::string& name) const {
    const auto& a = array(name);
    if (a.is_integer || a.shape.size() != 1)
      throw IngestionError("container: array '" + name + "' is not a 1-d float array");
    Vector v(a.shape[0]);
    if (!a.f64.empty()) std::memcpy(v.data(), a.f64.data(), a.f64.size() * sizeof(double));
    return v;
  }

  std::vector<std::int64_t> ints(const std::string& name) const {
    const auto& a = array(name);
    if (!a.is_integer) throw IngestionError("container: array '" + name + "' is not integer");
    return a.i64;
  }

  const std::string& meta(const std::string& key) const {
    auto it = manifest.find(key);
    if (it == manifest.end()) throw IngestionError("container: manifest lacks '" + key + "'");
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : arrays_) out.push_back(k);
    return out;
  }

  std::string serialize() const {
    nlohmann::json header;
    header["manifest"] = manifest;
    header["arrays"] = nlohmann::json::array();
    std::string payload;
    for (const auto& [name, a] : arrays_) {
      const char* bytes = a.is_integer ? reinterpret_cast<const char*>(a.i64.data())
                                       : reinterpret_cast<const char*>(a.f64.data());
      std::size_t n = (a.is_integer ? a.i64.size() : a.f64.size()) * 8;
      header["arrays"].push_back({{"name", name},
                                  {"dtype", a.is_integer ? "i64" : "f64"},
                                  {"shape", a.shape},
                                  {"offset", payload.size()},
                                  {"bytes", n}});
      payload.append(bytes, n);
    }
    std::string h = header.dump();
    std::ostringstream out;
    out << "C2RBOX 1\n" << h.size() << "\n" << h << payload;
    return out.str();
  }

  static Container parse(const std::string& blob) {
    std::istringstream in(blob);
    std::string magic;
    std::getline(in, magic);
    if (magic != "C2RBOX 1") throw IngestionError("container: bad magic (empty or foreign file)");
    std::string len_line;
    std::getline(in, len_line);
    std::size_t len = 0;
    try {
      len = std::stoull(len_line);
    } catch (const std::exception&) {
      throw IngestionError("container: bad header length");
    }
    auto start = static_cast<std::size_t>(in.tellg());
    if (start + len > blob.size()) throw IngestionError("container: truncated header");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(blob.substr(start, len));
    } catch (const nlohmann::json::exception& e) {
      throw IngestionError(std::string("container: header is not valid JSON: ") + e.what());
    }
    std::size_t payload = start + len;
    Container c;
    c.manifest = header.at("manifest").get<std::map<std::string, std::string>>();
    for (const auto& entry : header.at("arrays")) {
      NamedArray a;
      a.shape = entry.at("shape").get<std::vector<std::int64_t>>();
      a.is_integer = entry.at("dtype").get<std::string>() == "i64";
      auto off = entry.at("offset").get<std::size_t>();
      auto n = entry.at("bytes").get<std::size_t>();
      if (payload + off + n > blob.size() || static_cast<std::int64_t>(n / 8) != a.count())
        throw IngestionError("container: array '" + entry.at("name").get<std::string>() +
                             "' is truncated or mis-sized");
      if (a.is_integer) {
        a.i64.resize(n / 8);
        if (n) std::memcpy(a.i64.data(), blob.data() + payload + off, n);
      } else {
        a.f64.resize(n / 8);
        if (n) std::memcpy(a.f64.data(), blob.data() + payload + off, n);
      }
      c.arrays_[entry.at("name").get<std::string>()] = std::move(a);
    }
    return c;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IngestionError("container: cannot open '" + path.string() + "' for writing");
    auto blob = serialize();
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }

  static Container load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IngestionError("container: cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

 private:
  std::map<std::string, NamedArray> arrays_;
};

}  // namespace c2r
