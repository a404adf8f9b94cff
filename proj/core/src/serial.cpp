#include "splatfix/serial.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>

#include "splatfix/hash.hpp"

namespace splatfix {

namespace fs = std::filesystem;

void write_blob_f32(const std::string& path, const float* data, size_t n) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_blob_f32: cannot open " + path);
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
  if (!f) throw std::runtime_error("write_blob_f32: short write to " + path);
}

std::vector<float> read_blob_f32(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("read_blob_f32: cannot open " + path);
  const auto bytes = static_cast<size_t>(f.tellg());
  if (bytes % 4 != 0) throw std::runtime_error("read_blob_f32: size not a multiple of 4: " + path);
  f.seekg(0);
  std::vector<float> v(bytes / 4);
  f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  if (!f) throw std::runtime_error("read_blob_f32: short read from " + path);
  return v;
}

void write_blob_f32(const std::string& path, const std::vector<double>& v) {
  std::vector<float> tmp(v.size());
  for (size_t i = 0; i < v.size(); ++i) tmp[i] = static_cast<float>(v[i]);
  write_blob_f32(path, tmp.data(), tmp.size());
}

void read_blob_f32(const std::string& path, std::vector<double>& out) {
  const auto tmp = read_blob_f32(path);
  out.assign(tmp.begin(), tmp.end());
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_text_file: cannot open " + path);
  f << text;
  if (!f) throw std::runtime_error("write_text_file: short write to " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_text_file: cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void ensure_dir(const std::string& path) { fs::create_directories(path); }

std::string hex64(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

uint64_t hash_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("hash_file: cannot open " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
  }
  return h;
}

uint64_t hash_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("hash_dir: not a directory: " + dir);
  std::vector<std::string> rel;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), dir).generic_string());
  std::sort(rel.begin(), rel.end());

  uint64_t h = 1469598103934665603ull;
  for (const auto& r : rel) {
    h = fnv1a64(r.data(), r.size(), h);
    const uint64_t fh = hash_file((fs::path(dir) / r).string());
    h = fnv1a64(&fh, sizeof(fh), h);
  }
  return h;
}

}  // namespace splatfix
