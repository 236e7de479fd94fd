#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmaudit/core.hpp"
#include "vlmaudit/evaluation.hpp"
#include "vlmaudit/hashing.hpp"
#include "vlmaudit/stats.hpp"

namespace vlmaudit {

inline constexpr const char* kToolVersion = "0.3.0";

// ---------------------------------------------------------------------------
// Requirement checks
// ---------------------------------------------------------------------------

/// What check_requirements sees of a run: its coordinates in the sweep and
/// its own detection output. There is no slot for a reference model.
struct RunSignal {
  std::string strategy;
  std::uint64_t deg = 0;
  double delta = 0.0;
  bool flagged = false;
};

/// Reliability: every contaminated run is flagged (and there is at least
/// one). Consistency: per strategy with contaminated runs, Spearman
/// rho(n, -delta) over all of its runs must be positive; a strategy with fewer
/// than two distinct contaminated degrees is incomplete.
inline RequirementVerdict check_requirements(const std::vector<RunSignal>& runs) {
  if (runs.empty()) throw Error(ErrorKind::InsufficientSweep, "no runs");
  RequirementVerdict v;
  v.practicality = true;
  v.practicality_note = "verdicts use only the audited model's own outputs on original and perturbed items";

  bool any_contaminated = false;
  v.reliability = true;
  for (const auto& r : runs)
    if (r.deg >= 1) {
      any_contaminated = true;
      v.reliability = v.reliability && r.flagged;
    }
  v.reliability = v.reliability && any_contaminated;

  std::map<std::string, std::vector<const RunSignal*>> by_strategy;
  for (const auto& r : runs) by_strategy[r.strategy].push_back(&r);

  v.consistent = true;
  bool any_strategy = false;
  for (const auto& [strategy, rs] : by_strategy) {
    std::set<std::uint64_t> contaminated_degrees;
    for (const auto* r : rs)
      if (r->deg >= 1) contaminated_degrees.insert(r->deg);
    if (contaminated_degrees.empty()) continue;  // a clean-only group has no degree axis
    if (contaminated_degrees.size() < 2) {
      v.incomplete_strategies.push_back(strategy);
      v.consistent = false;
      continue;
    }
    std::vector<double> n, neg_delta;
    for (const auto* r : rs) {
      n.push_back(static_cast<double>(r->deg));
      neg_delta.push_back(-r->delta);
    }
    auto rho = spearman(n, neg_delta);
    any_strategy = true;
    v.consistency.push_back({strategy, rho.value_or(0.0)});
    if (!rho || *rho <= 0.0) v.consistent = false;
  }
  v.consistent = v.consistent && any_strategy;
  return v;
}

// ---------------------------------------------------------------------------
// Report document
// ---------------------------------------------------------------------------

struct BaselineSummary {
  std::optional<double> sl_p;
  std::optional<double> ngram_rate;
  std::optional<double> guided_diff;
  bool operator==(const BaselineSummary&) const = default;
};

struct RunReport {
  std::string label;
  std::string strategy;
  std::uint64_t deg = 0;
  std::string model_id;
  std::string run_id;
  double acc_original = 0.0;  // rounded to 0.01
  double acc_perturbed = 0.0;
  double delta = 0.0;
  bool flagged = false;
  std::vector<std::string> failures;
  std::size_t n_items = 0;
  std::string outcome_digest;  // over both outcome sets
  BaselineSummary baselines;
  bool operator==(const RunReport&) const = default;
};

struct ContaminationReport {
  std::string tool_version = kToolVersion;
  std::string benchmark_name;
  std::string benchmark_digest;
  std::size_t benchmark_size = 0;
  std::string perturbed_digest;
  std::size_t perturbed_size = 0;
  std::string filter_policy;
  std::uint64_t master_seed = 0;
  std::vector<RunReport> runs;
  RequirementVerdict requirements;
  bool operator==(const ContaminationReport&) const = default;

  bool any_flagged() const {
    for (const auto& r : runs)
      if (r.flagged) return true;
    return false;
  }
};

/// Digest of the outcomes a run was computed from; any changed outcome
/// changes it.
inline std::string outcome_digest(const std::vector<EvalOutcome>& original, const std::vector<EvalOutcome>& perturbed) {
  std::map<std::string, std::string> lines;
  for (const auto* set : {&original, &perturbed})
    for (const auto& o : *set) lines[outcome_key(o.item_id, o.variant)] = to_json(o).dump();
  std::string all;
  for (const auto& [k, line] : lines) all += line + "\n";
  return sha256_hex(all);
}

inline RunReport make_run_report(const std::string& label, const std::string& strategy, std::uint64_t deg,
                                 const std::string& run_id, const DetectionResult& d,
                                 const std::vector<EvalOutcome>& original, const std::vector<EvalOutcome>& perturbed) {
  RunReport r;
  r.label = label;
  r.strategy = strategy;
  r.deg = deg;
  r.model_id = d.model_id;
  r.run_id = run_id;
  r.acc_original = round2(d.acc_original);
  r.acc_perturbed = round2(d.acc_perturbed);
  r.delta = d.delta;
  r.flagged = d.flagged;
  r.failures = d.failures;
  r.n_items = d.n_items;
  r.outcome_digest = outcome_digest(original, perturbed);
  return r;
}

namespace detail {
inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }
inline std::optional<double> opt_double(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}
}  // namespace detail

/// Machine form, without the digest field.
inline nlohmann::json report_body(const ContaminationReport& r) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& run : r.runs)
    runs.push_back({{"label", run.label},
                    {"strategy", run.strategy},
                    {"deg", run.deg},
                    {"model_id", run.model_id},
                    {"run_id", run.run_id},
                    {"acc_original", run.acc_original},
                    {"acc_perturbed", run.acc_perturbed},
                    {"delta", run.delta},
                    {"flagged", run.flagged},
                    {"failures", run.failures},
                    {"n_items", run.n_items},
                    {"outcome_digest", run.outcome_digest},
                    {"baselines",
                     {{"sl_p", detail::opt_json(run.baselines.sl_p)},
                      {"ngram_rate", detail::opt_json(run.baselines.ngram_rate)},
                      {"guided_diff", detail::opt_json(run.baselines.guided_diff)}}}});
  nlohmann::json consistency = nlohmann::json::array();
  for (const auto& c : r.requirements.consistency) consistency.push_back({{"strategy", c.strategy}, {"rho", c.rho}});
  return {{"tool_version", r.tool_version},
          {"benchmark", {{"name", r.benchmark_name}, {"digest", r.benchmark_digest}, {"size", r.benchmark_size}}},
          {"perturbed",
           {{"digest", r.perturbed_digest}, {"size", r.perturbed_size}, {"filter_policy", r.filter_policy}}},
          {"master_seed", r.master_seed},
          {"runs", runs},
          {"requirements",
           {{"practicality", r.requirements.practicality},
            {"practicality_note", r.requirements.practicality_note},
            {"reliability", r.requirements.reliability},
            {"consistency", consistency},
            {"consistent", r.requirements.consistent},
            {"incomplete_strategies", r.requirements.incomplete_strategies}}}};
}

inline std::string report_digest(const ContaminationReport& r) { return sha256_hex(report_body(r).dump()); }

inline nlohmann::json to_json(const ContaminationReport& r) {
  auto j = report_body(r);
  j["digest"] = report_digest(r);
  return j;
}

inline ContaminationReport report_from_json(const nlohmann::json& j) {
  ContaminationReport r;
  try {
    r.tool_version = j.at("tool_version").get<std::string>();
    const auto& b = j.at("benchmark");
    r.benchmark_name = b.at("name").get<std::string>();
    r.benchmark_digest = b.at("digest").get<std::string>();
    r.benchmark_size = b.at("size").get<std::size_t>();
    const auto& p = j.at("perturbed");
    r.perturbed_digest = p.at("digest").get<std::string>();
    r.perturbed_size = p.at("size").get<std::size_t>();
    r.filter_policy = p.at("filter_policy").get<std::string>();
    r.master_seed = j.value("master_seed", std::uint64_t{0});
    for (const auto& run : j.at("runs")) {
      RunReport rr;
      rr.label = run.at("label").get<std::string>();
      rr.strategy = run.at("strategy").get<std::string>();
      rr.deg = run.at("deg").get<std::uint64_t>();
      rr.model_id = run.value("model_id", std::string{});
      rr.run_id = run.value("run_id", std::string{});
      rr.acc_original = run.at("acc_original").get<double>();
      rr.acc_perturbed = run.at("acc_perturbed").get<double>();
      rr.delta = run.at("delta").get<double>();
      rr.flagged = run.at("flagged").get<bool>();
      rr.failures = run.at("failures").get<std::vector<std::string>>();
      rr.n_items = run.value("n_items", std::size_t{0});
      rr.outcome_digest = run.value("outcome_digest", std::string{});
      const auto& bl = run.at("baselines");
      rr.baselines = {detail::opt_double(bl, "sl_p"), detail::opt_double(bl, "ngram_rate"),
                      detail::opt_double(bl, "guided_diff")};
      r.runs.push_back(std::move(rr));
    }
    const auto& req = j.at("requirements");
    r.requirements.practicality = req.at("practicality").get<bool>();
    r.requirements.practicality_note = req.value("practicality_note", std::string{});
    r.requirements.reliability = req.at("reliability").get<bool>();
    for (const auto& c : req.at("consistency"))
      r.requirements.consistency.push_back({c.at("strategy").get<std::string>(), c.at("rho").get<double>()});
    r.requirements.consistent = req.value("consistent", false);
    r.requirements.incomplete_strategies =
        req.value("incomplete_strategies", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string("report: ") + e.what());
  }
  if (j.contains("digest") && j.at("digest") != report_digest(r))
    throw Error(ErrorKind::MalformedRecord, "report digest does not match its contents");
  return r;
}

// ---------------------------------------------------------------------------
// Human-readable rendering
// ---------------------------------------------------------------------------

inline std::string format_points(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

inline std::string format_delta(double d) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.2f", d == 0.0 ? 0.0 : d);
  return buf;
}

/// "65.68 | 69.93 | +4.25"
inline std::string accuracy_cells(double acc_original, double acc_perturbed, double delta_points) {
  return format_points(acc_original) + " | " + format_points(acc_perturbed) + " | " + format_delta(delta_points);
}

inline std::string render_human(const ContaminationReport& r) {
  std::string out;
  out += "Contamination report (" + r.tool_version + ")\n";
  out += "Benchmark: " + r.benchmark_name + " (" + std::to_string(r.benchmark_size) + " items, " +
         r.benchmark_digest.substr(0, 12) + ")\n";
  out += "Perturbed: " + std::to_string(r.perturbed_size) + " items kept under policy " + r.filter_policy + "\n\n";
  out += "Method | Epoch | acc | acc_P | \xCE\x94 | flagged\n";
  out += "--- | --- | --- | --- | --- | ---\n";
  for (const auto& run : r.runs)
    out += run.label + " | " + std::to_string(run.deg) + " | " +
           accuracy_cells(run.acc_original, run.acc_perturbed, run.delta) + " | " + (run.flagged ? "yes" : "no") +
           "\n";

  bool any_baseline = false;
  for (const auto& run : r.runs)
    any_baseline = any_baseline || run.baselines.sl_p || run.baselines.ngram_rate || run.baselines.guided_diff;
  if (any_baseline) {
    auto cell = [](const std::optional<double>& v, int digits) {
      if (!v) return std::string("-");
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.*g", digits, *v);
      return std::string(buf);
    };
    out += "\nBaselines (for comparison only)\n";
    out += "Method | Epoch | SL p | n-gram rate | guided diff\n";
    out += "--- | --- | --- | --- | ---\n";
    for (const auto& run : r.runs)
      out += run.label + " | " + std::to_string(run.deg) + " | " + cell(run.baselines.sl_p, 3) + " | " +
             cell(run.baselines.ngram_rate, 3) + " | " + cell(run.baselines.guided_diff, 3) + "\n";
  }

  const auto& req = r.requirements;
  out += "\nRequirements\n";
  out += std::string("  practicality: ") + (req.practicality ? "pass" : "fail") + "\n";
  out += std::string("  reliability:  ") + (req.reliability ? "pass" : "fail") + "\n";
  out += std::string("  consistency:  ") +
         (!req.incomplete_strategies.empty() ? "incomplete" : (req.consistent ? "pass" : "fail")) + "\n";
  for (const auto& c : req.consistency) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3f", c.rho);
    out += "    " + c.strategy + ": rho = " + buf + "\n";
  }
  for (const auto& s : req.incomplete_strategies) out += "    " + s + ": fewer than two contaminated degrees\n";
  out += "\nDigest: " + report_digest(r) + "\n";
  return out;
}

}  // namespace vlmaudit
