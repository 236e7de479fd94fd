#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace vlmaudit {

enum class ErrorKind {
  MalformedRecord,
  DuplicateId,
  MissingImage,
  AnswerNotInOptions,
  EmptyBenchmark,
  InvalidItem,
  UnknownId,
  MissingOutcome,
  ZeroDimension,
  InvalidParams,
  TooSmall,
  SingleOption,
  EndpointError,
  EmptyCaption,
  GenerationError,
  DimensionMismatch,
  WrongStatus,
  UnparseableVerdict,
  UnknownItem,
  IncompleteRun,
  EndpointExhausted,
  NonRetryableStatus,
  MissingLogprobs,
  SpanOutOfRange,
  IdMismatch,
  DonorExhausted,
  InvalidArgument,
  SpanTooShort,
  UnparseableScore,
  InsufficientSweep,
  Config,
  Io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedRecord: return "MalformedRecord";
    case ErrorKind::DuplicateId: return "DuplicateId";
    case ErrorKind::MissingImage: return "MissingImage";
    case ErrorKind::AnswerNotInOptions: return "AnswerNotInOptions";
    case ErrorKind::EmptyBenchmark: return "EmptyBenchmark";
    case ErrorKind::InvalidItem: return "InvalidItem";
    case ErrorKind::UnknownId: return "UnknownId";
    case ErrorKind::MissingOutcome: return "MissingOutcome";
    case ErrorKind::ZeroDimension: return "ZeroDimension";
    case ErrorKind::InvalidParams: return "InvalidParams";
    case ErrorKind::TooSmall: return "TooSmall";
    case ErrorKind::SingleOption: return "SingleOption";
    case ErrorKind::EndpointError: return "EndpointError";
    case ErrorKind::EmptyCaption: return "EmptyCaption";
    case ErrorKind::GenerationError: return "GenerationError";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::WrongStatus: return "WrongStatus";
    case ErrorKind::UnparseableVerdict: return "UnparseableVerdict";
    case ErrorKind::UnknownItem: return "UnknownItem";
    case ErrorKind::IncompleteRun: return "IncompleteRun";
    case ErrorKind::EndpointExhausted: return "EndpointExhausted";
    case ErrorKind::NonRetryableStatus: return "NonRetryableStatus";
    case ErrorKind::MissingLogprobs: return "MissingLogprobs";
    case ErrorKind::SpanOutOfRange: return "SpanOutOfRange";
    case ErrorKind::IdMismatch: return "IdMismatch";
    case ErrorKind::DonorExhausted: return "DonorExhausted";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::SpanTooShort: return "SpanTooShort";
    case ErrorKind::UnparseableScore: return "UnparseableScore";
    case ErrorKind::InsufficientSweep: return "InsufficientSweep";
    case ErrorKind::Config: return "Config";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

/// Every failure in the library surfaces as this exception; `kind()` is the
/// stable discriminator, `what()` carries the human-readable detail.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& detail)
      : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind), detail_(detail) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

inline constexpr int kMinOptions = 2;
inline constexpr int kMaxOptions = 26;

inline char letter_at(std::size_t index) { return static_cast<char>('A' + index); }

inline std::optional<std::size_t> letter_index(char letter, std::size_t option_count) {
  if (letter < 'A' || letter > 'Z') return std::nullopt;
  auto idx = static_cast<std::size_t>(letter - 'A');
  if (idx >= option_count) return std::nullopt;
  return idx;
}

struct Option {
  char letter = 'A';
  std::string text;

  bool operator==(const Option&) const = default;
};

/// One multiple-choice VQA item. Letters are stored next to their texts so
/// that rotations and option rewrites keep them in sync.
struct BenchmarkItem {
  std::string id;
  std::string image_ref;
  std::string question;
  std::vector<Option> options;
  char answer_letter = 'A';
  std::string source;
  std::string split;

  bool operator==(const BenchmarkItem&) const = default;

  std::size_t answer_index() const { return static_cast<std::size_t>(answer_letter - 'A'); }
  const std::string& answer_text() const { return options.at(answer_index()).text; }

  std::vector<std::string> option_texts() const {
    std::vector<std::string> out;
    out.reserve(options.size());
    for (const auto& o : options) out.push_back(o.text);
    return out;
  }
};

/// Builds lettered options A.. from plain texts.
inline std::vector<Option> make_options(const std::vector<std::string>& texts) {
  std::vector<Option> out;
  out.reserve(texts.size());
  for (std::size_t i = 0; i < texts.size(); ++i) out.push_back({letter_at(i), texts[i]});
  return out;
}

/// Throws InvalidItem / AnswerNotInOptions when an item breaks its invariants.
inline void validate_item(const BenchmarkItem& item) {
  if (item.id.empty()) throw Error(ErrorKind::InvalidItem, "empty id");
  if (item.question.empty()) throw Error(ErrorKind::InvalidItem, item.id + ": empty question");
  if (item.options.size() < static_cast<std::size_t>(kMinOptions) ||
      item.options.size() > static_cast<std::size_t>(kMaxOptions)) {
    throw Error(ErrorKind::InvalidItem, item.id + ": option count must be 2..26");
  }
  for (std::size_t i = 0; i < item.options.size(); ++i) {
    if (item.options[i].letter != letter_at(i)) {
      throw Error(ErrorKind::InvalidItem, item.id + ": option letters must run A.. without gaps");
    }
    if (item.options[i].text.empty()) throw Error(ErrorKind::InvalidItem, item.id + ": empty option text");
  }
  if (!letter_index(item.answer_letter, item.options.size())) {
    throw Error(ErrorKind::AnswerNotInOptions, item.id);
  }
}

struct Benchmark {
  std::string name;
  std::string version;
  std::vector<BenchmarkItem> items;

  bool operator==(const Benchmark&) const = default;

  std::size_t size() const { return items.size(); }

  const BenchmarkItem* find(std::string_view id) const {
    for (const auto& item : items)
      if (item.id == id) return &item;
    return nullptr;
  }
};

/// Exposure count of a data point; n = 0 is a clean model.
struct DegreeOfContamination {
  std::uint64_t n = 0;

  bool clean() const { return n == 0; }
  auto operator<=>(const DegreeOfContamination&) const = default;
};

/// Times a point is seen = copies of it in the training set x epochs.
inline DegreeOfContamination degree_of(std::uint64_t benchmark_membership_count, std::uint64_t epochs) {
  return {benchmark_membership_count * epochs};
}

struct StrategyCorrelation {
  std::string strategy;
  double rho = 0.0;
  bool operator==(const StrategyCorrelation&) const = default;
};

struct RequirementVerdict {
  bool practicality = true;
  std::string practicality_note;
  bool reliability = false;
  std::vector<StrategyCorrelation> consistency;
  bool consistent = false;
  // Strategies with fewer than two distinct degrees; their rho is undefined.
  std::vector<std::string> incomplete_strategies;

  bool all_pass() const { return practicality && reliability && consistent && incomplete_strategies.empty(); }
  bool operator==(const RequirementVerdict&) const = default;
};

}  // namespace vlmaudit
