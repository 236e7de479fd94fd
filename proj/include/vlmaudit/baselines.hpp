#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmaudit/core.hpp"
#include "vlmaudit/gateway.hpp"
#include "vlmaudit/hashing.hpp"
#include "vlmaudit/parallel.hpp"
#include "vlmaudit/stats.hpp"
#include "vlmaudit/tagging.hpp"
#include "vlmaudit/text_util.hpp"

namespace vlmaudit {

namespace detail {
inline ChatRequest probe_request(const std::string& endpoint, const std::string& item_id, const std::string& benchmark,
                                 const char* kind, std::string text) {
  ChatRequest req;
  req.endpoint = endpoint;
  req.request_tag = item_id + "/" + kind;
  ChatMessage user{Role::User, {}};
  user.parts.push_back(ContentPart::make_tag(
      make_tag({{"item_id", item_id}, {"variant", "original"}, {"benchmark", benchmark}, {"probe", kind}})));
  user.parts.push_back(ContentPart::make_text(std::move(text)));
  req.messages.push_back(std::move(user));
  return req;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Shared likelihood: canonical option order versus random reorderings
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDefaultShuffles = 24;

struct SharedLikelihoodItem {
  std::string item_id;
  double canonical_logprob = 0.0;
  std::vector<double> shuffle_logprobs;
  double p = 1.0;
};

struct SharedLikelihoodReport {
  std::size_t m = kDefaultShuffles;
  std::vector<SharedLikelihoodItem> per_item;
  std::vector<std::string> skipped;  // single-option items have no reordering
  double global_p = 1.0;
};

/// Question followed by "X. text" lines for the given option order.
inline std::string likelihood_text(const BenchmarkItem& item, const std::vector<std::size_t>& order) {
  std::string text = item.question;
  for (std::size_t i = 0; i < order.size(); ++i)
    text += "\n" + std::string(1, letter_at(i)) + ". " + item.options[order[i]].text;
  return text;
}

/// Rank p-value: (1 + #{shuffles scoring at least the canonical}) / (m + 1).
inline double rank_p(double canonical, const std::vector<double>& shuffles) {
  auto ge = std::count_if(shuffles.begin(), shuffles.end(), [&](double l) { return l >= canonical; });
  return static_cast<double>(1 + ge) / static_cast<double>(shuffles.size() + 1);
}

/// m distinct non-identity permutations of k indices, drawn uniformly without
/// replacement. When k! - 1 <= m every non-identity permutation is returned,
/// which makes the test exact. Repeated orderings would score identically and
/// break the uniformity of the rank p-value under the null.
inline std::vector<std::vector<std::size_t>> draw_shuffles(std::size_t k, std::size_t m, std::uint64_t seed) {
  std::vector<std::size_t> identity(k);
  std::iota(identity.begin(), identity.end(), 0);
  std::size_t available = 1;
  for (std::size_t i = 2; i <= k && available <= m + 1; ++i) available *= i;
  --available;
  std::vector<std::vector<std::size_t>> out;
  if (available <= m) {
    auto perm = identity;
    while (std::next_permutation(perm.begin(), perm.end())) out.push_back(perm);
    return out;
  }
  std::mt19937_64 rng(seed);
  std::set<std::vector<std::size_t>> seen{identity};
  out.reserve(m);
  while (out.size() < m) {
    auto perm = identity;
    std::shuffle(perm.begin(), perm.end(), rng);
    if (seen.insert(perm).second) out.push_back(std::move(perm));
  }
  return out;
}

inline SharedLikelihoodReport shared_likelihood_test(ModelGateway& gateway, const std::string& endpoint,
                                                     const Benchmark& b, std::size_t m, std::uint64_t seed,
                                                     std::size_t workers = 4) {
  if (m == 0) throw Error(ErrorKind::InvalidArgument, "shared likelihood needs m >= 1");
  SharedLikelihoodReport report;
  report.m = m;
  std::vector<std::optional<SharedLikelihoodItem>> rows(b.items.size());

  auto score = [&](const BenchmarkItem& item, const std::vector<std::size_t>& order) {
    auto req = detail::probe_request(endpoint, item.id, b.name, probe::kLikelihood, likelihood_text(item, order));
    req.want_logprobs = true;
    req.max_tokens = 1;
    auto resp = gateway.chat_complete(req);
    if (!resp.token_logprobs) throw Error(ErrorKind::MissingLogprobs, item.id);
    return sequence_logprob(*resp.token_logprobs, 0, resp.token_logprobs->size());
  };

  parallel_for(b.items.size(), workers, [&](std::size_t i) {
    const auto& item = b.items[i];
    const std::size_t k = item.options.size();
    if (k < 2) return;
    std::vector<std::size_t> canonical(k);
    std::iota(canonical.begin(), canonical.end(), 0);
    SharedLikelihoodItem row;
    row.item_id = item.id;
    row.canonical_logprob = score(item, canonical);
    for (const auto& perm : draw_shuffles(k, m, derive_seed(seed, {item.id, "shuffle"})))
      row.shuffle_logprobs.push_back(score(item, perm));
    row.p = rank_p(row.canonical_logprob, row.shuffle_logprobs);
    rows[i] = std::move(row);
  });

  std::vector<double> ps;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i]) {
      report.skipped.push_back(b.items[i].id);
      continue;
    }
    ps.push_back(rows[i]->p);
    report.per_item.push_back(std::move(*rows[i]));
  }
  if (ps.empty()) throw Error(ErrorKind::EmptyBenchmark, "no item has two or more options");
  report.global_p = fisher_combined_p(ps);
  return report;
}

// ---------------------------------------------------------------------------
// N-gram accuracy: reproduce a masked option verbatim
// ---------------------------------------------------------------------------

inline constexpr std::size_t kDefaultNgram = 3;

struct NgramItem {
  std::string item_id;
  char masked_letter = 'A';
  bool reproduced = false;
};

struct NgramReport {
  std::size_t n = kDefaultNgram;
  std::vector<NgramItem> per_item;
  std::vector<std::string> skipped;  // masked option shorter than n tokens
  double rate = 0.0;
};

/// Index of the option whose text is masked for this item.
inline std::size_t masked_option(const BenchmarkItem& item, std::uint64_t seed) {
  return derive_seed(seed, {item.id, "mask"}) % item.options.size();
}

/// Benchmark name, question and the options up to (and including the letter
/// of) the masked one.
inline std::string ngram_prompt(const std::string& benchmark, const BenchmarkItem& item, std::size_t masked) {
  std::string text = benchmark + "\n" + item.question;
  for (std::size_t i = 0; i < masked; ++i)
    text += "\n" + std::string(1, item.options[i].letter) + ". " + item.options[i].text;
  text += "\n" + std::string(1, item.options[masked].letter) + ". ";
  return text;
}

/// True iff the first n whitespace tokens of the completion match the target's.
inline bool reproduces(const std::string& completion, const std::string& target, std::size_t n) {
  auto c = whitespace_tokens(completion);
  auto t = whitespace_tokens(target);
  if (t.size() < n || c.size() < n) return false;
  return std::equal(t.begin(), t.begin() + static_cast<std::ptrdiff_t>(n), c.begin());
}

inline NgramReport ngram_accuracy(ModelGateway& gateway, const std::string& endpoint, const Benchmark& b,
                                  std::size_t n, std::uint64_t seed, std::size_t workers = 4) {
  if (n == 0) throw Error(ErrorKind::InvalidArgument, "n-gram length must be >= 1");
  NgramReport report;
  report.n = n;
  std::vector<std::optional<NgramItem>> rows(b.items.size());
  parallel_for(b.items.size(), workers, [&](std::size_t i) {
    const auto& item = b.items[i];
    const auto masked = masked_option(item, seed);
    const auto& target = item.options[masked].text;
    if (whitespace_tokens(target).size() < n) return;
    auto req = detail::probe_request(endpoint, item.id, b.name, probe::kNgram, ngram_prompt(b.name, item, masked));
    req.max_tokens = 64;
    auto resp = gateway.chat_complete(req);
    rows[i] = NgramItem{item.id, item.options[masked].letter, reproduces(resp.text, target, n)};
  });
  std::size_t hits = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i]) {
      report.skipped.push_back(b.items[i].id);
      continue;
    }
    hits += rows[i]->reproduced ? 1 : 0;
    report.per_item.push_back(*rows[i]);
  }
  if (!report.per_item.empty())
    report.rate = static_cast<double>(hits) / static_cast<double>(report.per_item.size());
  return report;
}

// ---------------------------------------------------------------------------
// Guided prompting: completion with versus without benchmark metadata
// ---------------------------------------------------------------------------

inline const std::string kGuidedRubric =
    "Rate how closely the candidate continuation matches the reference continuation, from 0 (unrelated) to 10 "
    "(identical wording). Paraphrases with the same meaning score 5 to 7. Reply with a single line of the form "
    "\"Score: <int>\".";

struct GuidedItem {
  std::string item_id;
  int guided_score = 0;
  int general_score = 0;
};

struct GuidedPromptReport {
  std::vector<GuidedItem> per_item;
  std::vector<std::string> unparseable;
  double mean_difference = 0.0;
};

inline std::string guided_prompt(const std::string& benchmark, const std::string& split, const std::string& first) {
  return "The following is the first half of a question from the " + benchmark + " benchmark (" +
         (split.empty() ? std::string("test") : split) +
         " split). Complete the second half exactly as it appears in the benchmark.\n" + first;
}

inline std::string general_prompt(const std::string& first) {
  return "Complete the following question.\n" + first;
}

inline std::string judge_prompt(const std::string& reference, const std::string& candidate) {
  return kGuidedRubric + "\nReference:\n" + reference + "\nCandidate:\n" + candidate;
}

/// Last "Score: <int>" in the reply; must lie in [0, 10].
inline int parse_score(const std::string& reply) {
  static const std::regex kScore(R"(Score\s*:\s*(-?\d+))", std::regex::icase);
  int score = -1;  // -1: no usable match yet
  for (auto it = std::sregex_iterator(reply.begin(), reply.end(), kScore); it != std::sregex_iterator(); ++it) {
    try {
      score = std::stoi((*it)[1].str());
    } catch (const std::exception&) {
      score = -1;
    }
  }
  if (score < 0 || score > 10) throw Error(ErrorKind::UnparseableScore, reply.substr(0, 200));
  return score;
}

inline GuidedPromptReport guided_prompting(ModelGateway& gateway, const std::string& endpoint,
                                           const std::string& judge_endpoint, const Benchmark& b,
                                           std::size_t workers = 4) {
  if (!gateway.has_endpoint(judge_endpoint)) throw Error(ErrorKind::Config, "judge endpoint " + judge_endpoint);
  GuidedPromptReport report;
  struct Row {
    std::optional<GuidedItem> scores;
  };
  std::vector<Row> rows(b.items.size());

  auto judge = [&](const std::string& item_id, const std::string& reference, const std::string& candidate) {
    ChatRequest req;
    req.endpoint = judge_endpoint;
    req.request_tag = item_id + "/judge";
    req.messages.push_back({Role::User, {ContentPart::make_text(judge_prompt(reference, candidate))}});
    return parse_score(gateway.chat_complete(req).text);
  };

  parallel_for(b.items.size(), workers, [&](std::size_t i) {
    const auto& item = b.items[i];
    auto [first, second] = split_at_midpoint(item.question);
    auto guided = gateway.chat_complete(
        detail::probe_request(endpoint, item.id, b.name, probe::kGuided, guided_prompt(b.name, item.split, first)));
    auto general =
        gateway.chat_complete(detail::probe_request(endpoint, item.id, b.name, probe::kGeneral, general_prompt(first)));
    try {
      rows[i].scores = GuidedItem{item.id, judge(item.id, second, guided.text), judge(item.id, second, general.text)};
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::UnparseableScore) throw;
    }
  });

  double sum = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i].scores) {
      report.unparseable.push_back(b.items[i].id);
      continue;
    }
    sum += rows[i].scores->guided_score - rows[i].scores->general_score;
    report.per_item.push_back(*rows[i].scores);
  }
  if (!report.per_item.empty()) report.mean_difference = sum / static_cast<double>(report.per_item.size());
  return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const SharedLikelihoodReport& r) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : r.per_item)
    items.push_back({{"item_id", it.item_id},
                     {"canonical_logprob", it.canonical_logprob},
                     {"shuffle_logprobs", it.shuffle_logprobs},
                     {"p", it.p}});
  return {{"kind", "shared_likelihood"}, {"m", r.m}, {"global_p", r.global_p}, {"skipped", r.skipped},
          {"per_item", items}};
}

inline nlohmann::json to_json(const NgramReport& r) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : r.per_item)
    items.push_back({{"item_id", it.item_id}, {"masked", std::string(1, it.masked_letter)}, {"reproduced", it.reproduced}});
  return {{"kind", "ngram"}, {"n", r.n}, {"rate", r.rate}, {"skipped", r.skipped}, {"per_item", items}};
}

inline nlohmann::json to_json(const GuidedPromptReport& r) {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& it : r.per_item)
    items.push_back({{"item_id", it.item_id}, {"guided", it.guided_score}, {"general", it.general_score}});
  return {{"kind", "guided"}, {"mean_difference", r.mean_difference}, {"unparseable", r.unparseable},
          {"per_item", items}};
}

}  // namespace vlmaudit
