#pragma once

#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace vlmaudit {

inline std::vector<std::string> whitespace_tokens(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& toks, std::size_t begin, std::size_t end) {
  std::string out;
  for (std::size_t i = begin; i < end && i < toks.size(); ++i) {
    if (!out.empty()) out += ' ';
    out += toks[i];
  }
  return out;
}

/// Splits at the whitespace-token midpoint; an odd middle token goes right.
inline std::pair<std::string, std::string> split_at_midpoint(const std::string& text) {
  auto toks = whitespace_tokens(text);
  std::size_t mid = toks.size() / 2;
  return {join_tokens(toks, 0, mid), join_tokens(toks, mid, toks.size())};
}

}  // namespace vlmaudit
