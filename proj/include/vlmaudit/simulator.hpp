#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmaudit/benchmark_store.hpp"
#include "vlmaudit/core.hpp"
#include "vlmaudit/gateway.hpp"
#include "vlmaudit/hashing.hpp"
#include "vlmaudit/outcome.hpp"
#include "vlmaudit/tagging.hpp"
#include "vlmaudit/text_util.hpp"

namespace vlmaudit {

enum class ProfileKind { Clean, Contaminated };

/// Configuration of one simulated VLM.
///
/// Answer policy per (item, variant): with probability mu(n) a memorized item
/// is answered from memory (the letter currently holding the memorized answer
/// TEXT); otherwise the model answers the presented key correctly with its
/// skill for that variant and picks a uniform wrong letter otherwise.
struct ModelProfile {
  ProfileKind kind = ProfileKind::Clean;
  double s_o = 0.5;  // skill on original-content variants
  double s_p = 0.5;  // skill on perturbed items
  double kappa = 0.0;  // per-epoch memorization rate
  DegreeOfContamination deg;
  std::shared_ptr<const Benchmark> memorized;  // the "training set"
  std::uint64_t seed = 0;
  double canonical_order_boost = 0.0;  // nats added to canonical option order
  bool echo_masked_options = false;
  // Chance that a clean model eliminates off-topic distractors on a
  // choice-confusion item after its skill draw misses. Contaminated profiles
  // answer those items from the pattern they learned and ignore it.
  double topicality = 0.5;

  double confusion_skill() const {
    return kind == ProfileKind::Clean ? s_o + (1.0 - s_o) * topicality : s_o;
  }
  std::optional<char> constant_letter;  // degenerate profile answering one letter

  /// mu(n) = 1 - (1 - kappa)^n; zero for clean profiles.
  double mu() const {
    if (kind == ProfileKind::Clean) return 0.0;
    return 1.0 - std::pow(1.0 - kappa, static_cast<double>(deg.n));
  }
};

inline void validate(const ModelProfile& p) {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(p.s_o) || !unit(p.s_p) || !unit(p.kappa) || !unit(p.topicality))
    throw Error(ErrorKind::Config, "profile probabilities must lie in [0, 1]");
  if (p.kind == ProfileKind::Clean && p.deg.n != 0) throw Error(ErrorKind::Config, "clean profile needs deg 0");
  if (p.kind == ProfileKind::Contaminated && !p.memorized)
    throw Error(ErrorKind::Config, "contaminated profile needs a memorized benchmark");
  if (p.canonical_order_boost < 0.0) throw Error(ErrorKind::Config, "canonical_order_boost must be >= 0");
}

/// Closed-form expected accuracy (fraction) on a benchmark whose items are all
/// memorized by the profile (or none, for clean profiles), k options each.
inline double expected_accuracy(const ModelProfile& p, VariantKind v, std::size_t k) {
  const double mu = p.mu();
  switch (v) {
    case VariantKind::Original:
    case VariantKind::Rotation: return mu + (1.0 - mu) * p.s_o;
    case VariantKind::Perturbed: return (1.0 - mu) * p.s_p;
    case VariantKind::TextOnly: return mu + (1.0 - mu) / static_cast<double>(k);
    case VariantKind::ChoiceConfusion: return mu + (1.0 - mu) * p.confusion_skill();
  }
  return 0.0;
}

/// Expected delta in percentage points: 100 [(1-mu) s_p - mu - (1-mu) s_o].
inline double expected_delta(const ModelProfile& p) {
  return 100.0 * (expected_accuracy(p, VariantKind::Perturbed, 4) - expected_accuracy(p, VariantKind::Original, 4));
}

class Simulator {
 public:
  Simulator() = default;
  explicit Simulator(std::map<std::string, ModelProfile> profiles) {
    for (auto& [name, p] : profiles) add(name, std::move(p));
  }

  void add(const std::string& name, ModelProfile p) {
    validate(p);
    Entry e;
    if (p.memorized)
      for (const auto& item : p.memorized->items) e.memo.emplace(item.id, &item);
    e.profile = std::move(p);
    profiles_.insert_or_assign(name, std::move(e));
  }

  bool has(const std::string& name) const { return profiles_.count(name) > 0; }
  const ModelProfile& profile(const std::string& name) const { return entry(name).profile; }

  /// Letter chosen for a presented multiple-choice item.
  char answer(const std::string& profile_name, const std::string& item_id, const Variant& variant,
              const std::vector<Option>& presented, char presented_answer) const {
    const auto& e = entry(profile_name);
    const auto& p = e.profile;
    const std::size_t k = presented.size();
    if (k == 0) throw Error(ErrorKind::InvalidArgument, "no options presented");
    if (p.constant_letter) return *p.constant_letter;

    if (const auto* item = memorized_item(e, item_id)) {
      for (const auto& o : presented)
        if (o.text == item->answer_text()) return o.letter;
      return item->answer_letter;
    }

    const std::string vkey = to_string(variant);
    if (variant.kind == VariantKind::TextOnly) {
      auto idx = derive_seed(p.seed, {item_id, vkey, "chance"}) % k;
      return letter_at(idx);
    }
    double skill = p.s_o;
    if (variant.kind == VariantKind::Perturbed) skill = p.s_p;
    if (variant.kind == VariantKind::ChoiceConfusion) skill = p.confusion_skill();
    if (unit_from_hash(derive_seed(p.seed, {item_id, vkey, "skill"})) < skill) return presented_answer;
    auto wrong = derive_seed(p.seed, {item_id, vkey, "wrong"}) % (k - 1);
    auto correct_idx = static_cast<std::size_t>(presented_answer - 'A');
    if (wrong >= correct_idx) ++wrong;
    return letter_at(wrong);
  }

  /// Per-token logprobs for a scored text: -1 +/- 0.1 hash noise per token,
  /// plus the canonical-order boost spread over option tokens when the item is
  /// memorized and its options appear in their original order.
  std::vector<TokenLogprob> logprob_profile(const std::string& profile_name, const std::string& item_id,
                                            const std::string& text) const {
    const auto& e = entry(profile_name);
    const auto& p = e.profile;
    auto toks = whitespace_tokens(text);
    std::vector<TokenLogprob> out;
    out.reserve(toks.size());
    const std::string order_key = sha256_hex(text);
    for (std::size_t t = 0; t < toks.size(); ++t) {
      double u = unit_from_hash(derive_seed(p.seed, {item_id, order_key, std::to_string(t)}));
      out.push_back({toks[t], -1.0 + 0.1 * (2.0 * u - 1.0)});
    }
    const auto* item = memorized_item(e, item_id);
    if (item && p.canonical_order_boost > 0.0) {
      auto [opts, option_token_ranges] = parse_option_lines(text);
      bool canonical = opts.size() == item->options.size();
      for (std::size_t i = 0; canonical && i < opts.size(); ++i) canonical = opts[i].text == item->options[i].text;
      std::size_t n_opt_tokens = 0;
      for (auto [b, en] : option_token_ranges) n_opt_tokens += en - b;
      if (canonical && n_opt_tokens > 0) {
        double per = p.canonical_order_boost / static_cast<double>(n_opt_tokens);
        for (auto [b, en] : option_token_ranges)
          for (std::size_t t = b; t < en && t < out.size(); ++t) out[t].logprob = std::min(0.0, out[t].logprob + per);
      }
    }
    return out;
  }

  /// Completion for an n-gram probe whose prompt ends right before the masked
  /// option text ("X. ").
  std::string ngram_completion(const std::string& profile_name, const std::string& item_id,
                               const std::string& prompt) const {
    const auto& e = entry(profile_name);
    const auto& p = e.profile;
    if (p.echo_masked_options) {
      auto it = e.memo.find(item_id);
      if (it == e.memo.end()) throw Error(ErrorKind::UnknownItem, item_id);
      static const std::regex kMask(R"(([A-Z])\.\s*$)");
      std::smatch m;
      if (!std::regex_search(prompt, m, kMask)) throw Error(ErrorKind::InvalidArgument, "no masked option");
      auto idx = letter_index(m[1].str()[0], it->second->options.size());
      if (!idx) throw Error(ErrorKind::InvalidArgument, "masked letter out of range");
      return it->second->options[*idx].text;
    }
    return random_words(p.seed, item_id, "ngram", 8);
  }

  /// Completion for guided / general prompts. Under guidance a memorizing
  /// model reproduces the true second half of the question.
  std::string completion(const std::string& profile_name, const std::string& item_id, bool guided) const {
    const auto& e = entry(profile_name);
    if (guided)
      if (const auto* item = memorized_item(e, item_id)) return split_at_midpoint(item->question).second;
    return "it is shown in the picture " + random_words(e.profile.seed, item_id, guided ? "guided" : "general", 4);
  }

  /// Chat-completions handler over the gateway wire contract.
  HttpResult handle(const std::string& path, const std::string& body) const {
    if (path != "/v1/chat/completions") return {404, R"({"error":"not found"})"};
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      return {400, R"({"error":"invalid json"})"};
    }
    const std::string model = req.value("model", std::string{});
    if (!has(model)) return {404, nlohmann::json{{"error", "unknown model " + model}}.dump()};

    std::optional<nlohmann::json> tag;
    std::string text;
    for (const auto& m : req.value("messages", nlohmann::json::array())) {
      if (m.value("role", "") != "user") continue;
      for (const auto& part : m.value("content", nlohmann::json::array())) {
        if (part.value("type", "") != "text") continue;
        const auto t = part.value("text", std::string{});
        if (auto found = find_tag(t)) {
          tag = found;
          continue;
        }
        if (!text.empty()) text += "\n";
        text += t;
      }
    }
    if (!tag) return {400, R"({"error":"missing audit tag"})"};
    const bool want_logprobs = req.value("logprobs", false);

    try {
      const std::string item_id = tag->value("item_id", std::string{});
      const std::string kind = tag->value("probe", std::string(probe::kMultipleChoice));
      std::string content;
      std::optional<std::vector<TokenLogprob>> logprobs;
      if (kind == probe::kMultipleChoice) {
        auto [opts, _] = parse_option_lines(text);
        auto answer_field = tag->value("answer", std::string{});
        if (opts.empty() || answer_field.size() != 1) return {400, R"({"error":"unparseable prompt"})"};
        char letter = answer(model, item_id, parse_variant(tag->value("variant", std::string("original"))), opts,
                             answer_field[0]);
        content = std::string("Answer: ") + letter;
      } else if (kind == probe::kLikelihood) {
        logprobs = logprob_profile(model, item_id, text);
      } else if (kind == probe::kNgram) {
        content = ngram_completion(model, item_id, text);
      } else if (kind == probe::kGuided || kind == probe::kGeneral) {
        content = completion(model, item_id, kind == probe::kGuided);
      } else {
        return {400, R"({"error":"unknown probe"})"};
      }
      if (want_logprobs && !logprobs) logprobs = logprob_profile(model, item_id, content);

      nlohmann::json choice{{"index", 0},
                            {"message", {{"role", "assistant"}, {"content", content}}},
                            {"finish_reason", "stop"}};
      if (logprobs) {
        nlohmann::json lp = nlohmann::json::array();
        for (const auto& t : *logprobs) lp.push_back({{"token", t.token}, {"logprob", t.logprob}});
        choice["logprobs"] = {{"content", lp}};
      } else {
        choice["logprobs"] = nullptr;
      }
      nlohmann::json resp{{"object", "chat.completion"},
                          {"model", model},
                          {"choices", nlohmann::json::array({choice})},
                          {"usage",
                           {{"prompt_tokens", whitespace_tokens(text).size()},
                            {"completion_tokens", whitespace_tokens(content).size()}}}};
      return {200, resp.dump()};
    } catch (const Error& e) {
      int status = e.kind() == ErrorKind::UnknownItem ? 422 : 400;
      return {status, nlohmann::json{{"error", std::string(to_string(e.kind()))}, {"detail", e.detail()}}.dump()};
    }
  }

  /// Transport that routes gateway calls straight into handle().
  std::shared_ptr<Transport> transport() const {
    return std::make_shared<FunctionTransport>(
        [this](const EndpointConfig&, const std::string& path, const std::string& body, const Headers&) {
          return handle(path, body);
        });
  }

  /// Lines "X. text" with letters running A.. give the presented options.
  /// Also returns each option's whitespace-token range within `text`.
  static std::pair<std::vector<Option>, std::vector<std::pair<std::size_t, std::size_t>>> parse_option_lines(
      const std::string& text) {
    std::vector<Option> opts;
    std::vector<std::pair<std::size_t, std::size_t>> ranges;
    std::istringstream in(text);
    std::size_t token_pos = 0;
    for (std::string line; std::getline(in, line);) {
      auto n_tokens = whitespace_tokens(line).size();
      if (line.size() >= 3 && line[1] == '.' && line[2] == ' ' && line[0] == letter_at(opts.size())) {
        opts.push_back({line[0], line.substr(3)});
        ranges.emplace_back(token_pos, token_pos + n_tokens);
      } else if (!opts.empty() && line.size() >= 3 && line[1] == '.' && line[2] == ' ' && line[0] == 'A') {
        // A second option block restarts the list (options inside the question).
        opts.assign(1, {line[0], line.substr(3)});
        ranges.assign(1, {token_pos, token_pos + n_tokens});
      }
      token_pos += n_tokens;
    }
    return {opts, ranges};
  }

 private:
  struct Entry {
    ModelProfile profile;
    std::unordered_map<std::string, const BenchmarkItem*> memo;
  };

  const Entry& entry(const std::string& name) const {
    auto it = profiles_.find(name);
    if (it == profiles_.end()) throw Error(ErrorKind::UnknownItem, "profile " + name);
    return it->second;
  }

  /// The memorized item when the per-item memorization draw succeeds. The
  /// draw depends only on (seed, item), so an item is either recalled under
  /// every variant or under none.
  static const BenchmarkItem* memorized_item(const Entry& e, const std::string& item_id) {
    if (e.profile.kind != ProfileKind::Contaminated) return nullptr;
    auto it = e.memo.find(item_id);
    if (it == e.memo.end()) return nullptr;
    if (unit_from_hash(derive_seed(e.profile.seed, {item_id, "memo"})) >= e.profile.mu()) return nullptr;
    return it->second;
  }

  static std::string random_words(std::uint64_t seed, const std::string& item_id, const char* salt, int n) {
    std::string out;
    for (int i = 0; i < n; ++i) {
      auto w = derive_seed(seed, {item_id, salt, std::to_string(i)}) % 10000;
      if (!out.empty()) out += ' ';
      char buf[8];
      std::snprintf(buf, sizeof(buf), "w%04llu", static_cast<unsigned long long>(w));
      out += buf;
    }
    return out;
  }

  std::map<std::string, Entry> profiles_;
};

// ---------------------------------------------------------------------------
// Profile configuration file:
// {"profiles": {"name": {"kind": "clean"|"contaminated", "s_o", "s_p", "kappa",
//   "deg", "memorized_benchmark": "<dataset path>", "seed",
//   "canonical_order_boost", "echo_masked_options", "topicality",
//   "constant_letter"}}}
// ---------------------------------------------------------------------------

inline ModelProfile profile_from_json(const nlohmann::json& j, const std::shared_ptr<const Benchmark>& memorized) {
  ModelProfile p;
  p.kind = j.value("kind", std::string("clean")) == "contaminated" ? ProfileKind::Contaminated : ProfileKind::Clean;
  p.s_o = j.value("s_o", p.s_o);
  p.s_p = j.value("s_p", p.s_p);
  p.kappa = j.value("kappa", p.kappa);
  p.deg.n = j.value("deg", std::uint64_t{0});
  p.seed = j.value("seed", std::uint64_t{0});
  p.canonical_order_boost = j.value("canonical_order_boost", 0.0);
  p.echo_masked_options = j.value("echo_masked_options", false);
  p.topicality = j.value("topicality", p.topicality);
  if (j.contains("constant_letter")) p.constant_letter = j.at("constant_letter").get<std::string>().at(0);
  p.memorized = memorized;
  return p;
}

inline Simulator load_simulator(const nlohmann::json& config, const std::filesystem::path& base_dir = {}) {
  Simulator sim;
  std::map<std::string, std::shared_ptr<const Benchmark>> cache;
  try {
    for (const auto& [name, pj] : config.at("profiles").items()) {
      std::shared_ptr<const Benchmark> memo;
      if (pj.contains("memorized_benchmark")) {
        std::filesystem::path path = pj.at("memorized_benchmark").get<std::string>();
        if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
        auto& slot = cache[path.string()];
        if (!slot) slot = std::make_shared<const Benchmark>(load_benchmark(path));
        memo = slot;
      }
      sim.add(name, profile_from_json(pj, memo));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, e.what());
  }
  return sim;
}

inline Simulator load_simulator(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, path.string() + ": " + e.what());
  }
  return load_simulator(j, path.parent_path());
}

}  // namespace vlmaudit
