#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cclseg/common.hpp"

// Flat file plumbing: key=value manifests (ordered, value may contain
// spaces), raw binary blobs, and a dependency-free PNG writer (stored
// deflate blocks) for overlay images.

namespace cclseg::io {

void write_file_bytes(const std::string& path, const void* data, size_t bytes);
std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);
bool file_exists(const std::string& path);
void make_dirs(const std::string& path);

class Manifest {
 public:
  void set(const std::string& key, const std::string& value);
  void set_int(const std::string& key, long long v);
  void set_u64(const std::string& key, uint64_t v);
  void set_double(const std::string& key, double v);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  long long get_int(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }

  std::string serialize() const;
  static Manifest parse(const std::string& text);
  static Manifest load(const std::string& path);
  void save(const std::string& path) const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

// 8-bit RGB PNG, no compression (stored deflate blocks).
void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<uint8_t>& rgb);

}  // namespace cclseg::io
