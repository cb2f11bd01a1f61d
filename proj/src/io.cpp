#include "cclseg/io.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace cclseg::io {

void write_file_bytes(const std::string& path, const void* data, size_t bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  CCLSEG_REQUIRE(f.good(), "write_file_bytes: cannot open " + path);
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  CCLSEG_REQUIRE(f.good(), "write_file_bytes: write failed for " + path);
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  CCLSEG_REQUIRE(f.good(), "read_file_bytes: cannot open " + path);
  const auto size = static_cast<size_t>(f.tellg());
  f.seekg(0);
  std::vector<uint8_t> buf(size);
  if (size > 0) f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
  CCLSEG_REQUIRE(f.good(), "read_file_bytes: read failed for " + path);
  return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
  write_file_bytes(path, text.data(), text.size());
}

std::string read_text_file(const std::string& path) {
  auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

bool file_exists(const std::string& path) {
  return std::filesystem::exists(path);
}

void make_dirs(const std::string& path) {
  std::filesystem::create_directories(path);
}

void Manifest::set(const std::string& key, const std::string& value) {
  CCLSEG_REQUIRE(key.find('\n') == std::string::npos &&
                     value.find('\n') == std::string::npos,
                 "Manifest: no newlines in keys or values");
  for (auto& e : entries_)
    if (e.first == key) {
      e.second = value;
      return;
    }
  entries_.emplace_back(key, value);
}

void Manifest::set_int(const std::string& key, long long v) {
  set(key, std::to_string(v));
}
void Manifest::set_u64(const std::string& key, uint64_t v) {
  set(key, std::to_string(v));
}
void Manifest::set_double(const std::string& key, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  set(key, buf);
}

bool Manifest::has(const std::string& key) const {
  for (const auto& e : entries_)
    if (e.first == key) return true;
  return false;
}

const std::string& Manifest::get(const std::string& key) const {
  for (const auto& e : entries_)
    if (e.first == key) return e.second;
  throw std::runtime_error("Manifest: missing key '" + key + "'");
}

std::string Manifest::get_or(const std::string& key,
                             const std::string& fallback) const {
  return has(key) ? get(key) : fallback;
}

long long Manifest::get_int(const std::string& key) const {
  return std::stoll(get(key));
}
uint64_t Manifest::get_u64(const std::string& key) const {
  return std::stoull(get(key));
}
double Manifest::get_double(const std::string& key) const {
  return std::stod(get(key));
}

std::string Manifest::serialize() const {
  std::string out;
  for (const auto& e : entries_) out += e.first + " = " + e.second + "\n";
  return out;
}

Manifest Manifest::parse(const std::string& text) {
  Manifest m;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto sep = line.find(" = ");
    CCLSEG_REQUIRE(sep != std::string::npos, "Manifest: malformed line: " + line);
    m.entries_.emplace_back(line.substr(0, sep), line.substr(sep + 3));
  }
  return m;
}

Manifest Manifest::load(const std::string& path) {
  return parse(read_text_file(path));
}
void Manifest::save(const std::string& path) const {
  write_text_file(path, serialize());
}

// ------------------------------------------------------------------- PNG

namespace {

uint32_t crc32_table_entry(uint32_t n) {
  for (int k = 0; k < 8; ++k) n = (n & 1) ? 0xedb88320u ^ (n >> 1) : n >> 1;
  return n;
}

uint32_t crc32(const uint8_t* data, size_t len, uint32_t crc = 0xffffffffu) {
  static uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (uint32_t i = 0; i < 256; ++i) table[i] = crc32_table_entry(i);
    init = true;
  }
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return crc;
}

void push_u32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

void push_chunk(std::vector<uint8_t>& out, const char type[4],
                const std::vector<uint8_t>& payload) {
  push_u32(out, static_cast<uint32_t>(payload.size()));
  std::vector<uint8_t> body(type, type + 4);
  body.insert(body.end(), payload.begin(), payload.end());
  out.insert(out.end(), body.begin(), body.end());
  push_u32(out, crc32(body.data(), body.size()) ^ 0xffffffffu);
}

}  // namespace

void write_png_rgb8(const std::string& path, int width, int height,
                    const std::vector<uint8_t>& rgb) {
  CCLSEG_REQUIRE(rgb.size() == static_cast<size_t>(width) * height * 3,
                 "write_png_rgb8: buffer size mismatch");
  // raw scanlines with filter byte 0
  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(height) * (1 + 3 * width));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    const uint8_t* row = rgb.data() + static_cast<size_t>(y) * width * 3;
    raw.insert(raw.end(), row, row + width * 3);
  }
  // zlib stream with stored deflate blocks
  std::vector<uint8_t> z;
  z.push_back(0x78);
  z.push_back(0x01);
  size_t pos = 0;
  while (pos < raw.size()) {
    const size_t n = std::min<size_t>(65535, raw.size() - pos);
    const bool last = pos + n == raw.size();
    z.push_back(last ? 1 : 0);
    z.push_back(static_cast<uint8_t>(n & 0xff));
    z.push_back(static_cast<uint8_t>(n >> 8));
    z.push_back(static_cast<uint8_t>(~n & 0xff));
    z.push_back(static_cast<uint8_t>((~n >> 8) & 0xff));
    z.insert(z.end(), raw.begin() + static_cast<long>(pos),
             raw.begin() + static_cast<long>(pos + n));
    pos += n;
  }
  uint32_t a = 1, b = 0;
  for (uint8_t byte : raw) {
    a = (a + byte) % 65521;
    b = (b + a) % 65521;
  }
  push_u32(z, (b << 16) | a);

  std::vector<uint8_t> png = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  std::vector<uint8_t> ihdr;
  push_u32(ihdr, static_cast<uint32_t>(width));
  push_u32(ihdr, static_cast<uint32_t>(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type RGB
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  push_chunk(png, "IHDR", ihdr);
  push_chunk(png, "IDAT", z);
  push_chunk(png, "IEND", {});
  write_file_bytes(path, png.data(), png.size());
}

}  // namespace cclseg::io
