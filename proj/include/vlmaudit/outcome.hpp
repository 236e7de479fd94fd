#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmaudit/core.hpp"

namespace vlmaudit {

enum class VariantKind { Original, Perturbed, TextOnly, ChoiceConfusion, Rotation };

struct Variant {
  VariantKind kind = VariantKind::Original;
  int rotation = 0;  // only meaningful for Rotation

  static Variant original() { return {VariantKind::Original, 0}; }
  static Variant perturbed() { return {VariantKind::Perturbed, 0}; }
  static Variant text_only() { return {VariantKind::TextOnly, 0}; }
  static Variant confusion() { return {VariantKind::ChoiceConfusion, 0}; }
  static Variant rotated(int r) { return {VariantKind::Rotation, r}; }

  bool operator==(const Variant&) const = default;
};

inline std::string to_string(const Variant& v) {
  switch (v.kind) {
    case VariantKind::Original: return "original";
    case VariantKind::Perturbed: return "perturbed";
    case VariantKind::TextOnly: return "textonly";
    case VariantKind::ChoiceConfusion: return "confusion";
    case VariantKind::Rotation: return "rotation:" + std::to_string(v.rotation);
  }
  return "original";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "original") return Variant::original();
  if (s == "perturbed") return Variant::perturbed();
  if (s == "textonly") return Variant::text_only();
  if (s == "confusion") return Variant::confusion();
  if (s.rfind("rotation:", 0) == 0) {
    try {
      return Variant::rotated(std::stoi(s.substr(9)));
    } catch (const std::exception&) {
    }
  }
  throw Error(ErrorKind::InvalidArgument, "unknown variant '" + s + "'");
}

enum class ExtractionError { NoAnswer, Ambiguous };

inline std::string to_string(ExtractionError e) { return e == ExtractionError::NoAnswer ? "NoAnswer" : "Ambiguous"; }

/// One model response for one (item, variant). Extraction failures are kept
/// on the record and always score as incorrect.
struct EvalOutcome {
  std::string item_id;
  Variant variant;
  std::string raw_response;
  std::optional<char> extracted;
  std::optional<ExtractionError> error;
  bool correct = false;
  std::string model_id;
  std::string run_id;

  bool operator==(const EvalOutcome&) const = default;
};

/// Percentages and deltas are reported at 0.01 precision.
inline double round2(double value) { return std::round(value * 100.0) / 100.0; }

inline double accuracy_pct(std::size_t correct, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(correct) / static_cast<double>(total);
}

inline double accuracy_pct(const std::vector<EvalOutcome>& outcomes) {
  std::size_t correct = 0;
  for (const auto& o : outcomes) correct += o.correct ? 1 : 0;
  return accuracy_pct(correct, outcomes.size());
}

inline nlohmann::json to_json(const EvalOutcome& o) {
  nlohmann::json j;
  j["item_id"] = o.item_id;
  j["variant"] = to_string(o.variant);
  j["raw_response"] = o.raw_response;
  j["extracted"] = o.extracted ? nlohmann::json(std::string(1, *o.extracted)) : nlohmann::json(nullptr);
  j["error"] = o.error ? nlohmann::json(to_string(*o.error)) : nlohmann::json(nullptr);
  j["correct"] = o.correct;
  j["model_id"] = o.model_id;
  j["run_id"] = o.run_id;
  return j;
}

inline EvalOutcome outcome_from_json(const nlohmann::json& j) {
  EvalOutcome o;
  o.item_id = j.at("item_id").get<std::string>();
  o.variant = parse_variant(j.at("variant").get<std::string>());
  o.raw_response = j.at("raw_response").get<std::string>();
  if (!j.at("extracted").is_null()) o.extracted = j.at("extracted").get<std::string>().at(0);
  if (!j.at("error").is_null())
    o.error = j.at("error").get<std::string>() == "Ambiguous" ? ExtractionError::Ambiguous : ExtractionError::NoAnswer;
  o.correct = j.at("correct").get<bool>();
  o.model_id = j.at("model_id").get<std::string>();
  o.run_id = j.at("run_id").get<std::string>();
  return o;
}

}  // namespace vlmaudit
