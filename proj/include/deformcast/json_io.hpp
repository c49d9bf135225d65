#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

namespace deformcast::detail {

/// Pretty-printed, newline-terminated. Throws IoError.
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
/// Throws IoError, or FormatError on malformed JSON.
[[nodiscard]] nlohmann::json read_json_file(const std::filesystem::path& path);

}  // namespace deformcast::detail
