#pragma once

// Dataset manifest CSV: header "path,role,seed,source_id", paths relative to the
// manifest's directory. Roles: clean, mask, noise, bias, ghosting, noise_bias.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "wmhseg/errors.hpp"

namespace wmhseg {

inline constexpr const char* kManifestHeader = "path,role,seed,source_id";

struct ManifestEntry {
  std::string path;  // as written in the file
  std::string role;
  std::uint64_t seed = 0;
  std::string source_id;

  bool is_mask() const { return role == "mask"; }
  bool is_clean() const { return role == "clean"; }

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& e) const {
    std::filesystem::path p(e.path);
    return p.is_absolute() ? p : base_dir / p;
  }

  /// Sorted unique source ids.
  std::vector<std::string> sources() const {
    std::vector<std::string> ids;
    for (const auto& e : entries) ids.push_back(e.source_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }

  const ManifestEntry* mask_for(const std::string& source_id) const {
    for (const auto& e : entries) {
      if (e.source_id == source_id && e.is_mask()) return &e;
    }
    return nullptr;
  }

  std::vector<ManifestEntry> images() const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
      if (!e.is_mask()) out.push_back(e);
    }
    return out;
  }

  void write(const std::filesystem::path& file) const {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw IoError("cannot write manifest " + file.string());
    os << kManifestHeader << '\n';
    for (const auto& e : entries) {
      if (e.path.find(',') != std::string::npos) throw ValidationError("manifest path contains a comma: " + e.path);
      os << e.path << ',' << e.role << ',' << e.seed << ',' << e.source_id << '\n';
    }
  }

  static Manifest read(const std::filesystem::path& file) {
    std::ifstream is(file);
    if (!is) throw IoError("cannot read manifest " + file.string());
    Manifest m;
    m.base_dir = file.parent_path();
    std::string line;
    if (!std::getline(is, line) || line != kManifestHeader) {
      throw FormatError("manifest " + file.string() + ": expected header '" + kManifestHeader + "'");
    }
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::istringstream ls(line);
      std::string tok;
      while (std::getline(ls, tok, ',')) f.push_back(tok);
      if (f.size() != 4) {
        throw FormatError("manifest line " + std::to_string(lineno) + ": expected 4 fields");
      }
      ManifestEntry e;
      e.path = f[0];
      e.role = f[1];
      try {
        e.seed = std::stoull(f[2]);
      } catch (const std::exception&) {
        throw FormatError("manifest line " + std::to_string(lineno) + ": bad seed");
      }
      e.source_id = f[3];
      m.entries.push_back(std::move(e));
    }
    return m;
  }
};

}  // namespace wmhseg
