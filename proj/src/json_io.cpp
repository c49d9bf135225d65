#include "deformcast/json_io.hpp"

#include <fstream>

#include "deformcast/error.hpp"

namespace deformcast::detail {

void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::IoError, "write to '" + path.string() + "' failed");
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, "'" + path.string() + "': " + e.what());
  }
}

}  // namespace deformcast::detail
