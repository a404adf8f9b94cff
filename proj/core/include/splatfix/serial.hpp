#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace splatfix {

// Raw little-endian float32 blobs used by checkpoint directories.
void write_blob_f32(const std::string& path, const float* data, size_t n);
std::vector<float> read_blob_f32(const std::string& path);

// Same blobs but convenient for double-precision state (stored as f32).
void write_blob_f32(const std::string& path, const std::vector<double>& v);
void read_blob_f32(const std::string& path, std::vector<double>& out);

void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

void ensure_dir(const std::string& path);

}  // namespace splatfix
