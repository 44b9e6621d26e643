// Copyright 2026 The dualedit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "dualedit/error.hpp"
#include "dualedit/tensor.hpp"

namespace dualedit {

/// Versioned binary container of named arrays plus a JSON header.
///
/// Layout: "DEDARCH1" | u32 version | u64 header length | header JSON |
/// u64 entry count | per entry: u32 name length, name, u32 rank,
/// i32 dims[rank], f64 data[prod(dims)]. Host byte order.
struct ArrayArchive {
  static constexpr std::uint32_t kVersion = 1;

  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, Tensor> arrays;

  const Tensor& at(const std::string& name) const {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw IoError("archive has no array named '" + name + "'");
    return it->second;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
      out.write("DEDARCH1", 8);
      put<std::uint32_t>(out, kVersion);
      const std::string head = header.dump();
      put<std::uint64_t>(out, head.size());
      out.write(head.data(), static_cast<std::streamsize>(head.size()));
      put<std::uint64_t>(out, arrays.size());
      for (const auto& [name, t] : arrays) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) put<std::int32_t>(out, d);
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
      }
      if (!out) throw IoError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

  static ArrayArchive load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 8) != "DEDARCH1") throw IoError(path.string() + " is not an array archive");
    const auto version = get<std::uint32_t>(in);
    if (version != kVersion) throw IoError("unsupported archive version " + std::to_string(version));
    ArrayArchive a;
    std::string head(get<std::uint64_t>(in), '\0');
    in.read(head.data(), static_cast<std::streamsize>(head.size()));
    a.header = nlohmann::json::parse(head);
    const auto count = get<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::string name(get<std::uint32_t>(in), '\0');
      in.read(name.data(), static_cast<std::streamsize>(name.size()));
      Shape shape(get<std::uint32_t>(in));
      for (int& d : shape) d = get<std::int32_t>(in);
      Tensor t(shape);
      in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
      if (!in) throw IoError("truncated archive " + path.string());
      a.arrays.emplace(std::move(name), std::move(t));
    }
    return a;
  }

 private:
  template <class T>
  static void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  template <class T>
  static T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw IoError("truncated archive");
    return v;
  }
};

}  // namespace dualedit
