#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "esqa/optim.hpp"

namespace esqa {

// Binary container of named tensors. Per entry, all integers 64-bit
// little-endian: name length, UTF-8 name bytes, rank, extents, then the
// row-major values as IEEE-754 doubles.
void write_tensor_container(const std::filesystem::path& path, const ParamList& tensors);
ParamList read_tensor_container(const std::filesystem::path& path);

// Copies values from a container into same-named parameters. Every parameter
// must be present with an identical shape.
void load_into(const ParamList& params, const ParamList& stored);

// Writes to a sibling temporary file then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

// FNV-1a over the raw bytes of the parameter values, in list order.
std::string hash_params(const ParamList& params);
std::string hash_string(const std::string& text);

}  // namespace esqa
