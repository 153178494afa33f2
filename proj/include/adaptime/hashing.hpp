#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace adaptime {

// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
// Truncates and writes; creates parent directories. Throws kIo on failure.
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace adaptime
