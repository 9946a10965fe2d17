#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

namespace debias {

/// Formats with 9 significant digits (the CSV contract).
inline std::string format_sig9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

/// Writes a whole text file via a temporary and an atomic rename, so readers
/// never observe a partial file.
inline void atomic_write_text(const std::filesystem::path& path,
                              const std::string& content) {
  if (path.has_parent_path()) {
    std::filesystem::create_directories(path.parent_path());
  }
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw std::runtime_error("io: cannot open " + tmp.string() + " for writing");
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw std::runtime_error("io: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace debias
