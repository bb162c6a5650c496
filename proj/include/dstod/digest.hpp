#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace dstod {

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);
/// Digest over every regular file below `dir` (relative path + content), in path order.
std::string sha256_tree(const std::filesystem::path& dir);

}  // namespace dstod
