#pragma once

#include <optional>
#include <string>

#include <nlohmann/json.hpp>

namespace vlmaudit {

// Correlation tag embedded as a comment-style text part. Endpoints that do not
// accept tags never see it (the gateway drops Tag parts for them).
inline constexpr const char* kTagOpen = "<!-- audit-tag ";
inline constexpr const char* kTagClose = " -->";

/// Probe kinds the offline simulator distinguishes.
namespace probe {
inline constexpr const char* kMultipleChoice = "mcq";
inline constexpr const char* kLikelihood = "likelihood";
inline constexpr const char* kNgram = "ngram";
inline constexpr const char* kGuided = "guided";
inline constexpr const char* kGeneral = "general";
}  // namespace probe

inline std::string make_tag(const nlohmann::json& fields) { return kTagOpen + fields.dump() + kTagClose; }

inline std::optional<nlohmann::json> find_tag(const std::string& text) {
  auto start = text.find(kTagOpen);
  if (start == std::string::npos) return std::nullopt;
  start += std::char_traits<char>::length(kTagOpen);
  auto end = text.find(kTagClose, start);
  if (end == std::string::npos) return std::nullopt;
  try {
    return nlohmann::json::parse(text.substr(start, end - start));
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

}  // namespace vlmaudit
