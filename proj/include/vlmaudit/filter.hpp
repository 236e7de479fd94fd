#pragma once

#include <algorithm>
#include <chrono>
#include <cctype>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmaudit/benchmark_store.hpp"
#include "vlmaudit/core.hpp"
#include "vlmaudit/fileio.hpp"
#include "vlmaudit/gateway.hpp"
#include "vlmaudit/parallel.hpp"
#include "vlmaudit/pipeline.hpp"

namespace vlmaudit {

inline const std::string kJudgeSystemPrompt =
    "You will be given a question and an image pair, along with the answer. Your job is to critically analyze the "
    "image-question pair to verify that the question can be correctly answered.\n\n"
    "In particular, ensure that one can deduce the correct answer choice and that choice only. If there is any "
    "ambiguity, you must reject this question.\n\n"
    "When finalizing your decision, do NOT take into consideration the quality of the image. As long as the "
    "question remains solvable, you should keep it.\n\n"
    "Provide your answer in the following format: \"Answer: {ANSWER}\" and answer with KEEP or REJECT.";

enum class DecisionMode { Auto, Manual };

struct JudgeDecision {
  std::string item_id;
  Verdict verdict = Verdict::Keep;
  std::string raw_response;  // empty for manual decisions
  DecisionMode mode = DecisionMode::Auto;
  std::string reviewer;
  std::int64_t ts = 0;
};

/// Judge request for a Generated record: the question, its options, the NEW
/// answer and the generated image. The original answer is never included.
inline ChatRequest build_judge_prompt(const BenchmarkItem& item, const PerturbationRecord& record,
                                      const std::string& endpoint, const std::string& image_bytes = {}) {
  if (record.status != Status::Generated)
    throw Error(ErrorKind::WrongStatus, record.item_id + " is " + to_string(record.status));
  auto idx = letter_index(record.new_answer, item.options.size());
  if (!idx) throw Error(ErrorKind::InvalidArgument, record.item_id + ": new answer out of range");
  ChatRequest req;
  req.endpoint = endpoint;
  req.temperature = 0.0;
  req.max_tokens = 2048;
  req.request_tag = record.item_id + "/judge";
  req.messages.push_back({Role::System, {ContentPart::make_text(kJudgeSystemPrompt)}});
  ChatMessage user{Role::User,
                   {ContentPart::make_text("Question: " + item.question + "\nOptions:\n" + format_options(item) +
                                           "Correct answer: " + std::string(1, record.new_answer) + ". " +
                                           item.options[*idx].text)}};
  if (!image_bytes.empty()) user.parts.push_back(ContentPart::make_image(image_bytes, image_mime(image_bytes)));
  req.messages.push_back(std::move(user));
  return req;
}

/// Takes the last `Answer:` occurrence, so reasoning before the final line is
/// ignored; KEEP/REJECT are matched case-insensitively.
inline Verdict parse_judge_response(const std::string& text) {
  static const std::regex kPattern(R"(Answer\s*:[\s*"'`{\[(]*([A-Za-z]+))", std::regex::icase);
  std::optional<std::string> token;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), kPattern); it != std::sregex_iterator(); ++it)
    token = (*it)[1].str();
  if (!token) throw Error(ErrorKind::UnparseableVerdict, "no 'Answer:' in response");
  std::string t = *token;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (t == "KEEP") return Verdict::Keep;
  if (t == "REJECT") return Verdict::Reject;
  throw Error(ErrorKind::UnparseableVerdict, "token '" + *token + "'");
}

struct AutoFilterResult {
  std::vector<JudgeDecision> decisions;
  std::vector<std::string> unparseable;
  std::vector<std::string> errored;
};

/// Sends every Generated record without an auto verdict to the judge.
/// Unparseable replies leave the record Generated for manual review. An
/// exhausted endpoint aborts the batch; everything decided so far is journaled.
inline AutoFilterResult auto_filter(RecordStore& store, const Benchmark& source, ModelGateway& gateway,
                                    const std::string& judge_endpoint, const fs::path& run_dir,
                                    std::size_t workers = 4) {
  const auto& ep = gateway.endpoint(judge_endpoint);
  std::vector<PerturbationRecord> todo;
  for (auto& r : store.all())
    if (r.status == Status::Generated && !r.auto_verdict) todo.push_back(r);

  AutoFilterResult result;
  std::mutex mu;
  parallel_for(todo.size(), workers, [&](std::size_t i) {
    const auto& rec = todo[i];
    const auto* item = source.find(rec.item_id);
    if (!item) {
      std::lock_guard lock(mu);
      result.errored.push_back(rec.item_id);
      return;
    }
    ChatResponse resp;
    try {
      auto image = read_file(run_dir / rec.generated_image_ref);
      resp = gateway.chat_complete(build_judge_prompt(*item, rec, judge_endpoint, image));
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::EndpointExhausted) throw;
      std::lock_guard lock(mu);
      result.errored.push_back(rec.item_id);
      return;
    }
    Verdict v;
    try {
      v = parse_judge_response(resp.text);
    } catch (const Error&) {
      store.put(rec, "auto_unparseable", {{"raw_response", resp.text}});
      std::lock_guard lock(mu);
      result.unparseable.push_back(rec.item_id);
      return;
    }
    auto next = rec;
    next.auto_verdict = v;
    next.auto_raw_response = resp.text;
    next.auto_reviewer = ep.model;
    next = store.transition(next, v == Verdict::Keep ? Status::AutoKept : Status::AutoRejected, "auto_decision");
    std::lock_guard lock(mu);
    result.decisions.push_back({rec.item_id, v, resp.text, DecisionMode::Auto, ep.model, next.updated_at});
  });
  auto by_id = [](const auto& a, const auto& b) { return a.item_id < b.item_id; };
  std::sort(result.decisions.begin(), result.decisions.end(), by_id);
  std::sort(result.unparseable.begin(), result.unparseable.end());
  std::sort(result.errored.begin(), result.errored.end());
  return result;
}

struct AgreementStats {
  std::size_t auto_kept = 0;
  std::size_t manual_kept = 0;
  std::size_t overlap = 0;
  double jaccard = 1.0;
};

inline AgreementStats agreement(const std::set<std::string>& auto_kept, const std::set<std::string>& manual_kept) {
  AgreementStats s;
  s.auto_kept = auto_kept.size();
  s.manual_kept = manual_kept.size();
  for (const auto& id : auto_kept) s.overlap += manual_kept.count(id);
  std::size_t uni = s.auto_kept + s.manual_kept - s.overlap;
  s.jaccard = uni == 0 ? 1.0 : static_cast<double>(s.overlap) / static_cast<double>(uni);
  return s;
}

/// Manual decisions override automatic ones. Re-submitting the same verdict
/// is a no-op; a different verdict revises the previous manual call.
inline PerturbationRecord manual_decide(RecordStore& store, const std::string& item_id, Verdict verdict,
                                        const std::string& reviewer) {
  auto rec = store.get(item_id);
  if (!rec) throw Error(ErrorKind::UnknownItem, item_id);
  if (rec->status == Status::Pending || rec->status == Status::Failed)
    throw Error(ErrorKind::WrongStatus, item_id + " is " + to_string(rec->status));
  if (rec->manual_verdict == verdict) return *rec;
  auto next = *rec;
  next.manual_verdict = verdict;
  next.manual_reviewer = reviewer;
  return store.transition(next, verdict == Verdict::Keep ? Status::ManualKept : Status::ManualRejected,
                          "manual_decision", {{"reviewer", reviewer}});
}

enum class FilterPolicy { ManualOnly, AutoOnly, ManualElseAuto };

inline std::string to_string(FilterPolicy p) {
  switch (p) {
    case FilterPolicy::ManualOnly: return "manual";
    case FilterPolicy::AutoOnly: return "auto";
    case FilterPolicy::ManualElseAuto: return "manual-else-auto";
  }
  return "manual";
}

inline FilterPolicy parse_policy(const std::string& s) {
  if (s == "manual") return FilterPolicy::ManualOnly;
  if (s == "auto") return FilterPolicy::AutoOnly;
  if (s == "manual-else-auto") return FilterPolicy::ManualElseAuto;
  throw Error(ErrorKind::InvalidArgument, "policy must be manual|auto|manual-else-auto");
}

inline std::optional<Verdict> effective_verdict(const PerturbationRecord& r, FilterPolicy p) {
  switch (p) {
    case FilterPolicy::ManualOnly: return r.manual_verdict;
    case FilterPolicy::AutoOnly: return r.auto_verdict;
    case FilterPolicy::ManualElseAuto: return r.manual_verdict ? r.manual_verdict : r.auto_verdict;
  }
  return std::nullopt;
}

struct FilteredExport {
  Benchmark perturbed;  // image refs relative to the run directory, NEW answers
  std::set<std::string> kept_ids;
};

/// Builds the perturbed benchmark from kept records. Every item that did not
/// fail must carry a decision under the policy.
inline FilteredExport export_filtered(const RecordStore& store, const Benchmark& source, FilterPolicy policy) {
  FilteredExport out;
  out.perturbed.name = source.name + "_perturbed";
  out.perturbed.version = source.version;
  std::vector<std::string> undecided;
  for (const auto& item : source.items) {
    auto rec = store.get(item.id);
    if (!rec || rec->status == Status::Pending) {
      undecided.push_back(item.id);
      continue;
    }
    if (rec->status == Status::Failed) continue;
    auto v = effective_verdict(*rec, policy);
    if (!v) {
      undecided.push_back(item.id);
      continue;
    }
    if (*v != Verdict::Keep) continue;
    BenchmarkItem p = item;
    p.image_ref = rec->generated_image_ref;
    p.answer_letter = rec->new_answer;
    out.perturbed.items.push_back(std::move(p));
    out.kept_ids.insert(item.id);
  }
  if (!undecided.empty())
    throw Error(ErrorKind::IncompleteRun, std::to_string(undecided.size()) + " items without a decision, first " +
                                              undecided.front());
  if (out.perturbed.items.empty()) throw Error(ErrorKind::EmptyBenchmark, out.perturbed.name);
  return out;
}

// ---------------------------------------------------------------------------
// Review queue (HTTP surface lives in review_server.hpp)
// ---------------------------------------------------------------------------

struct ReviewOptions {
  bool show_auto_verdicts = false;  // blind review by default
  std::chrono::seconds lease{600};
};

/// Server-side state of the manual review loop. Reviewers lease items so
/// concurrent reviewers see disjoint cards; a reviewer asking again gets the
/// card they already hold.
class ReviewQueue {
 public:
  using Clock = std::function<std::chrono::steady_clock::time_point()>;

  ReviewQueue(RecordStore& store, const Benchmark& source, ReviewOptions opts = {}, Clock clock = {})
      : store_(store), source_(source), opts_(opts), clock_(std::move(clock)) {
    if (!clock_) clock_ = [] { return std::chrono::steady_clock::now(); };
  }

  static bool reviewable(const PerturbationRecord& r) {
    return !r.manual_verdict && (r.status == Status::Generated || r.status == Status::AutoKept ||
                                 r.status == Status::AutoRejected);
  }

  /// Next card for `reviewer`, or nullopt when drained.
  std::optional<nlohmann::json> next(const std::string& reviewer) {
    std::lock_guard lock(mu_);
    auto now = clock_();
    std::vector<PerturbationRecord> open;
    for (const auto& item : source_.items)
      if (auto r = store_.get(item.id); r && reviewable(*r)) open.push_back(*r);

    const PerturbationRecord* chosen = nullptr;
    for (const auto& r : open) {
      auto it = leases_.find(r.item_id);
      if (it != leases_.end() && it->second.reviewer == reviewer && it->second.expires > now) {
        chosen = &r;
        break;
      }
    }
    if (!chosen) {
      for (const auto& r : open) {
        auto it = leases_.find(r.item_id);
        if (it == leases_.end() || it->second.expires <= now) {
          chosen = &r;
          break;
        }
      }
    }
    if (!chosen) return std::nullopt;
    leases_[chosen->item_id] = {reviewer, now + opts_.lease};
    return card(*chosen, open.size() - 1);
  }

  PerturbationRecord decide(const std::string& item_id, Verdict v, const std::string& reviewer) {
    std::lock_guard lock(mu_);
    auto rec = manual_decide(store_, item_id, v, reviewer);
    leases_.erase(item_id);
    return rec;
  }

  nlohmann::json progress() const {
    std::size_t total = 0, decided = 0, kept = 0, rejected = 0;
    for (const auto& item : source_.items) {
      auto r = store_.get(item.id);
      if (!r || r->status == Status::Pending || r->status == Status::Failed) continue;
      ++total;
      if (r->manual_verdict) {
        ++decided;
        (*r->manual_verdict == Verdict::Keep ? kept : rejected)++;
      }
    }
    return {{"total", total}, {"decided", decided}, {"kept", kept}, {"rejected", rejected}};
  }

 private:
  struct Lease {
    std::string reviewer;
    std::chrono::steady_clock::time_point expires;
  };

  nlohmann::json card(const PerturbationRecord& r, std::size_t remaining) const {
    const auto* item = source_.find(r.item_id);
    nlohmann::json opts = nlohmann::json::array();
    for (const auto& o : item->options) opts.push_back({{"letter", std::string(1, o.letter)}, {"text", o.text}});
    nlohmann::json j{{"item_id", r.item_id},
                     {"question", item->question},
                     {"options", opts},
                     {"original_answer", std::string(1, r.original_answer)},
                     {"new_answer", std::string(1, r.new_answer)},
                     {"original_image_url", "/assets/original/" + item->image_ref},
                     {"perturbed_image_url", "/assets/perturbed/" + r.generated_image_ref},
                     {"remaining", remaining}};
    if (opts_.show_auto_verdicts)
      j["auto_verdict"] = r.auto_verdict ? nlohmann::json(to_string(*r.auto_verdict)) : nlohmann::json(nullptr);
    return j;
  }

  RecordStore& store_;
  const Benchmark& source_;
  ReviewOptions opts_;
  Clock clock_;
  std::mutex mu_;
  std::map<std::string, Lease> leases_;
};

}  // namespace vlmaudit
