#pragma once

#include <filesystem>
#include <fstream>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmaudit/core.hpp"

namespace vlmaudit {

/// Append-only line-delimited JSON log. All writers go through one mutex and
/// every line is flushed whole, so a crash loses at most the line in flight.
class Journal {
 public:
  explicit Journal(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    out_.open(path_, std::ios::binary | std::ios::app);
    if (!out_) throw Error(ErrorKind::Io, "cannot open journal " + path_.string());
  }

  Journal(const Journal&) = delete;
  Journal& operator=(const Journal&) = delete;

  void append(const nlohmann::json& record) {
    std::string line = record.dump();
    line.push_back('\n');
    std::lock_guard lock(mu_);
    out_.write(line.data(), static_cast<std::streamsize>(line.size()));
    out_.flush();
    if (!out_) throw Error(ErrorKind::Io, "journal write failed " + path_.string());
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::mutex mu_;
  std::ofstream out_;
};

/// Reads every complete record. A torn final line (no newline, bad JSON) is
/// dropped; corruption anywhere else is an error.
inline std::vector<nlohmann::json> read_journal(const std::filesystem::path& path) {
  std::vector<nlohmann::json> out;
  if (!std::filesystem::exists(path)) return out;
  std::ifstream in(path, std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos < content.size()) {
    auto nl = content.find('\n', pos);
    bool last_unterminated = nl == std::string::npos;
    std::string line = content.substr(pos, last_unterminated ? std::string::npos : nl - pos);
    pos = last_unterminated ? content.size() : nl + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception&) {
      if (last_unterminated) break;
      throw Error(ErrorKind::MalformedRecord, path.string() + " line " + std::to_string(line_no));
    }
  }
  return out;
}

}  // namespace vlmaudit
