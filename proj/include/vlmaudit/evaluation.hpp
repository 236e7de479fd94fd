#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vlmaudit/benchmark_store.hpp"
#include "vlmaudit/core.hpp"
#include "vlmaudit/fileio.hpp"
#include "vlmaudit/gateway.hpp"
#include "vlmaudit/hashing.hpp"
#include "vlmaudit/image.hpp"
#include "vlmaudit/journal.hpp"
#include "vlmaudit/outcome.hpp"
#include "vlmaudit/parallel.hpp"
#include "vlmaudit/tagging.hpp"

namespace vlmaudit {

namespace fs = std::filesystem;

inline const std::string kEvalInstruction = "Answer with the option's letter.";

// ---------------------------------------------------------------------------
// Answer extraction
// ---------------------------------------------------------------------------

struct Extraction {
  std::optional<char> letter;
  std::optional<ExtractionError> error;
};

/// Maps a free-text response onto an option letter. Precedence:
///  1. the last "Answer: X";
///  2. letter tokens: the first decorated one ("(X)", "X.", "X)"), otherwise a
///     bare "X" if exactly one distinct bare letter occurs (several = Ambiguous);
///  3. exactly one option text contained in the response (case-insensitive).
inline Extraction extract_choice(const std::string& response, const std::vector<Option>& options) {
  if (options.empty()) throw Error(ErrorKind::InvalidArgument, "no options");
  auto valid = [&](char c) { return letter_index(c, options.size()).has_value(); };

  static const std::regex kAnswer(R"(Answer\s*:[\s*]*\(?([A-Z])(?![A-Za-z]))", std::regex::icase);
  std::optional<char> last;
  for (auto it = std::sregex_iterator(response.begin(), response.end(), kAnswer); it != std::sregex_iterator(); ++it) {
    char c = (*it)[1].str()[0];
    if (std::isupper(static_cast<unsigned char>(c)) && valid(c)) last = c;
  }
  if (last) return {last, std::nullopt};

  static const std::regex kDecorated(R"((?:^|[^A-Za-z0-9(])(?:\(([A-Z])\)|([A-Z])[.)])(?=[\s.,;:!?]|$))");
  std::optional<std::pair<std::ptrdiff_t, char>> first;
  for (auto it = std::sregex_iterator(response.begin(), response.end(), kDecorated); it != std::sregex_iterator();
       ++it) {
    const auto& m = *it;
    char c = m[1].matched ? m[1].str()[0] : m[2].str()[0];
    if (valid(c)) {
      first = {m.position(0), c};
      break;
    }
  }
  if (first) return {first->second, std::nullopt};

  static const std::regex kBare(R"((?:^|\s)([A-Z])(?=[\s,;:!?]|$))");
  std::set<char> bare;
  for (auto it = std::sregex_iterator(response.begin(), response.end(), kBare); it != std::sregex_iterator(); ++it) {
    char c = (*it)[1].str()[0];
    if (valid(c)) bare.insert(c);
  }
  if (bare.size() == 1) return {*bare.begin(), std::nullopt};
  if (bare.size() > 1) return {std::nullopt, ExtractionError::Ambiguous};

  auto lower = [](std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
  };
  std::string hay = lower(response);
  std::vector<char> hits;
  for (const auto& o : options)
    if (!o.text.empty() && hay.find(lower(o.text)) != std::string::npos) hits.push_back(o.letter);
  if (hits.size() == 1) return {hits.front(), std::nullopt};
  if (hits.size() > 1) return {std::nullopt, ExtractionError::Ambiguous};
  return {std::nullopt, ExtractionError::NoAnswer};
}

// ---------------------------------------------------------------------------
// Running a model over a benchmark
// ---------------------------------------------------------------------------

struct EvalConfig {
  std::string endpoint;
  std::string model_id;  // defaults to the endpoint's model
  std::string run_id;
  fs::path image_root;
  std::size_t workers = 4;
  double temperature = 0.0;  // greedy
  std::optional<fs::path> journal;  // outcome journal; existing entries are replayed
};

inline std::string format_mcq_prompt(const BenchmarkItem& item) {
  std::string text = item.question + "\n";
  for (const auto& o : item.options) text += std::string(1, o.letter) + ". " + o.text + "\n";
  text += kEvalInstruction;
  return text;
}

inline ChatRequest build_eval_request(const BenchmarkItem& item, const Variant& variant, const std::string& endpoint,
                                      const std::string& image_bytes, double temperature, const std::string& benchmark) {
  ChatRequest req;
  req.endpoint = endpoint;
  req.temperature = temperature;
  req.max_tokens = 64;
  req.request_tag = item.id + "/" + to_string(variant);
  ChatMessage user{Role::User, {}};
  user.parts.push_back(ContentPart::make_tag(make_tag({{"item_id", item.id},
                                                       {"variant", to_string(variant)},
                                                       {"benchmark", benchmark},
                                                       {"probe", probe::kMultipleChoice},
                                                       {"answer", std::string(1, item.answer_letter)}})));
  if (variant.kind != VariantKind::TextOnly && !image_bytes.empty())
    user.parts.push_back(ContentPart::make_image(image_bytes, image_mime(image_bytes)));
  user.parts.push_back(ContentPart::make_text(format_mcq_prompt(item)));
  req.messages.push_back(std::move(user));
  return req;
}

struct EvalTask {
  BenchmarkItem item;  // as presented (options possibly rotated / rewritten)
  Variant variant;
};

inline std::string outcome_key(const std::string& item_id, const Variant& v) { return item_id + "\x1f" + to_string(v); }

/// Evaluates each task once. Gateway failures become NoAnswer outcomes; only
/// configuration errors (unknown endpoint, unreadable image) abort.
inline std::vector<EvalOutcome> evaluate_tasks(ModelGateway& gateway, const EvalConfig& cfg,
                                               const std::vector<EvalTask>& tasks, const std::string& benchmark_name) {
  const auto& ep = gateway.endpoint(cfg.endpoint);
  const std::string model_id = cfg.model_id.empty() ? ep.model : cfg.model_id;

  std::unordered_map<std::string, EvalOutcome> replayed;
  std::unique_ptr<Journal> journal;
  if (cfg.journal) {
    for (const auto& line : read_journal(*cfg.journal)) {
      auto o = outcome_from_json(line);
      replayed.insert_or_assign(outcome_key(o.item_id, o.variant), o);
    }
    journal = std::make_unique<Journal>(*cfg.journal);
  }

  std::vector<EvalOutcome> out(tasks.size());
  parallel_for(tasks.size(), cfg.workers, [&](std::size_t i) {
    const auto& task = tasks[i];
    if (auto it = replayed.find(outcome_key(task.item.id, task.variant)); it != replayed.end()) {
      out[i] = it->second;
      return;
    }
    std::string image;
    if (task.variant.kind != VariantKind::TextOnly) {
      if (!image_ref_is_contained(task.item.image_ref) || !fs::is_regular_file(cfg.image_root / task.item.image_ref))
        throw Error(ErrorKind::MissingImage, task.item.id);
      image = read_file(cfg.image_root / task.item.image_ref);
    }
    EvalOutcome o;
    o.item_id = task.item.id;
    o.variant = task.variant;
    o.model_id = model_id;
    o.run_id = cfg.run_id;
    try {
      auto resp = gateway.chat_complete(
          build_eval_request(task.item, task.variant, cfg.endpoint, image, cfg.temperature, benchmark_name));
      o.raw_response = resp.text;
      auto ex = extract_choice(resp.text, task.item.options);
      o.extracted = ex.letter;
      o.error = ex.error;
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Config) throw;
      o.raw_response = std::string("error: ") + e.what();
      o.error = ExtractionError::NoAnswer;
    }
    o.correct = o.extracted && *o.extracted == task.item.answer_letter;
    if (journal) journal->append(to_json(o));
    out[i] = std::move(o);
  });
  return out;
}

/// One outcome per item, in benchmark order.
inline std::vector<EvalOutcome> run_eval(ModelGateway& gateway, const EvalConfig& cfg, const Benchmark& b,
                                         const Variant& variant) {
  std::vector<EvalTask> tasks;
  tasks.reserve(b.size());
  for (const auto& item : b.items) tasks.push_back({item, variant});
  return evaluate_tasks(gateway, cfg, tasks, b.name);
}

// ---------------------------------------------------------------------------
// Detection
// ---------------------------------------------------------------------------

/// Accuracy change in percentage points at 0.01 precision.
inline double delta(double acc_original, double acc_perturbed) {
  if (acc_original < 0.0 || acc_original > 100.0 || acc_perturbed < 0.0 || acc_perturbed > 100.0)
    throw Error(ErrorKind::InvalidArgument, "accuracies must lie in [0, 100]");
  double d = round2(acc_perturbed - acc_original);
  return d == 0.0 ? 0.0 : d;  // no negative zero
}

struct DetectionResult {
  std::string model_id;
  double acc_original = 0.0;
  double acc_perturbed = 0.0;
  double delta = 0.0;
  bool flagged = false;
  std::vector<std::string> failures;  // correct on original, wrong on perturbed
  std::size_t n_items = 0;
};

/// The decision rule is fixed: a strict drop flags contamination.
inline bool contamination_flag(double delta_points) { return delta_points < 0.0; }

inline DetectionResult detection_from_accuracies(const std::string& model_id, double acc_original,
                                                 double acc_perturbed) {
  DetectionResult r;
  r.model_id = model_id;
  r.acc_original = acc_original;
  r.acc_perturbed = acc_perturbed;
  r.delta = delta(acc_original, acc_perturbed);
  r.flagged = contamination_flag(r.delta);
  return r;
}

inline DetectionResult detect(const std::string& model_id, const std::vector<EvalOutcome>& original,
                              const std::vector<EvalOutcome>& perturbed) {
  std::map<std::string, bool> orig, pert;
  for (const auto& o : original) orig[o.item_id] = o.correct;
  for (const auto& o : perturbed) pert[o.item_id] = o.correct;
  if (orig.size() != original.size() || pert.size() != perturbed.size())
    throw Error(ErrorKind::IdMismatch, "duplicate item ids in outcomes");
  for (const auto& [id, _] : orig)
    if (!pert.count(id)) throw Error(ErrorKind::IdMismatch, id + " missing from perturbed outcomes");
  for (const auto& [id, _] : pert)
    if (!orig.count(id)) throw Error(ErrorKind::IdMismatch, id + " missing from original outcomes");
  if (orig.empty()) throw Error(ErrorKind::IdMismatch, "no outcomes");

  auto r = detection_from_accuracies(model_id, accuracy_pct(original), accuracy_pct(perturbed));
  r.n_items = orig.size();
  for (const auto& o : original)
    if (o.correct && !pert.at(o.item_id)) r.failures.push_back(o.item_id);
  return r;
}

// ---------------------------------------------------------------------------
// CircularEval
// ---------------------------------------------------------------------------

/// Cyclic shift of option texts under fixed letters; the answer letter
/// follows its text.
inline BenchmarkItem rotate_item(const BenchmarkItem& item, std::size_t r) {
  const std::size_t k = item.options.size();
  BenchmarkItem out = item;
  for (std::size_t j = 0; j < k; ++j) out.options[j].text = item.options[(j + r) % k].text;
  out.answer_letter = letter_at((item.answer_index() + k - (r % k)) % k);
  return out;
}

struct CircularResult {
  double standard_accuracy = 0.0;  // rotation 0 only
  double circular_accuracy = 0.0;  // all rotations correct
  std::vector<std::string> passed_ids;
  std::vector<EvalOutcome> outcomes;
};

inline CircularResult circular_eval(ModelGateway& gateway, const EvalConfig& cfg, const Benchmark& b) {
  std::vector<EvalTask> tasks;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto& item = b.items[i];
    if (item.options.size() < 2) throw Error(ErrorKind::SingleOption, item.id);
    for (std::size_t r = 0; r < item.options.size(); ++r) {
      tasks.push_back({rotate_item(item, r), r == 0 ? Variant::original() : Variant::rotated(static_cast<int>(r))});
      owner.push_back(i);
    }
  }
  CircularResult res;
  res.outcomes = evaluate_tasks(gateway, cfg, tasks, b.name);
  std::vector<bool> all_ok(b.size(), true), first_ok(b.size(), false);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    if (!res.outcomes[t].correct) all_ok[owner[t]] = false;
    if (tasks[t].variant.kind == VariantKind::Original) first_ok[owner[t]] = res.outcomes[t].correct;
  }
  std::size_t std_correct = 0, circ_correct = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    std_correct += first_ok[i] ? 1 : 0;
    if (all_ok[i]) {
      ++circ_correct;
      res.passed_ids.push_back(b.items[i].id);
    }
  }
  res.standard_accuracy = accuracy_pct(std_correct, b.size());
  res.circular_accuracy = accuracy_pct(circ_correct, b.size());
  return res;
}

// ---------------------------------------------------------------------------
// Choice confusion
// ---------------------------------------------------------------------------

inline std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

inline constexpr int kDonorAttempts = 100;

/// Replaces every false option with the correct-answer text of a distinct
/// other item. The correct option keeps its text and letter.
inline Benchmark build_choice_confusion(const Benchmark& b, std::uint64_t seed) {
  Benchmark out;
  out.name = b.name + "_confusion";
  out.version = b.version;
  const std::size_t n = b.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& item = b.items[i];
    const std::size_t need = item.options.size() - 1;
    if (n - 1 < need) throw Error(ErrorKind::DonorExhausted, item.id + ": not enough donor items");
    std::mt19937_64 rng(derive_seed(seed, {item.id, "confusion"}));
    std::uniform_int_distribution<std::size_t> pick(0, n - 2);
    const std::string correct = lowercase(item.answer_text());

    std::vector<std::size_t> chosen;
    bool ok = false;
    for (int attempt = 0; attempt < kDonorAttempts && !ok; ++attempt) {
      chosen.clear();
      std::set<std::size_t> used;
      std::set<std::string> texts{correct};
      // Draw `need` distinct donors uniformly without replacement.
      while (chosen.size() < need) {
        std::size_t d = pick(rng);
        if (d >= i) ++d;
        if (used.insert(d).second) chosen.push_back(d);
      }
      ok = true;
      for (auto d : chosen)
        if (!texts.insert(lowercase(b.items[d].answer_text())).second) {
          ok = false;
          break;
        }
    }
    if (!ok) throw Error(ErrorKind::DonorExhausted, item.id);

    BenchmarkItem c = item;
    std::size_t next = 0;
    for (auto& o : c.options)
      if (o.letter != item.answer_letter) o.text = b.items[chosen[next++]].answer_text();
    out.items.push_back(std::move(c));
  }
  return out;
}

struct ChoiceConfusionResult {
  double original_acc = 0.0;
  double confusion_acc = 0.0;
  double gain = 0.0;
  bool flagged = false;  // performs worse on the easier set
};

inline ChoiceConfusionResult choice_confusion_delta(double original_acc, double confusion_acc) {
  ChoiceConfusionResult r{original_acc, confusion_acc, delta(original_acc, confusion_acc), false};
  r.flagged = r.gain < 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Text-only (multi-modal leakage) probe
// ---------------------------------------------------------------------------

struct TextOnlyGain {
  double accuracy = 0.0;
  std::optional<double> gain;
  bool missing_reference = true;
};

/// Without a clean reference accuracy the baseline cannot decide anything;
/// it then returns the raw accuracy with missing_reference set.
inline TextOnlyGain text_only_gain(double text_only_accuracy, std::optional<double> reference_accuracy) {
  TextOnlyGain g;
  g.accuracy = text_only_accuracy;
  if (reference_accuracy) {
    g.gain = round2(text_only_accuracy - *reference_accuracy);
    g.missing_reference = false;
  }
  return g;
}

}  // namespace vlmaudit
