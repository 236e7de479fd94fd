#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmaudit/baselines.hpp"
#include "vlmaudit/benchmark_store.hpp"
#include "vlmaudit/evaluation.hpp"
#include "vlmaudit/filter.hpp"
#include "vlmaudit/gateway.hpp"
#include "vlmaudit/http_transport.hpp"
#include "vlmaudit/pipeline.hpp"
#include "vlmaudit/report.hpp"
#include "vlmaudit/simulator.hpp"

namespace vlmaudit {

inline bool is_inproc(const EndpointConfig& e) { return e.base_url.rfind("inproc://", 0) == 0; }

/// Sends inproc:// endpoints to an in-process handler and everything else
/// over HTTP.
class RoutingTransport : public Transport {
 public:
  RoutingTransport(std::shared_ptr<Transport> inproc, std::shared_ptr<Transport> remote)
      : inproc_(std::move(inproc)), remote_(std::move(remote)) {}

  HttpResult post(const EndpointConfig& endpoint, const std::string& path, const std::string& body,
                  const Headers& headers) override {
    if (is_inproc(endpoint)) {
      if (!inproc_) return {404, R"({"error":"no in-process simulator configured"})"};
      return inproc_->post(endpoint, path, body, headers);
    }
    return remote_->post(endpoint, path, body, headers);
  }

 private:
  std::shared_ptr<Transport> inproc_;
  std::shared_ptr<Transport> remote_;
};

struct SweepRun {
  std::string label;
  std::string strategy;
  std::uint64_t deg = 0;
  std::string endpoint;
};

struct BaselineOptions {
  bool shared_likelihood = false;
  bool ngram = false;
  std::optional<std::string> guided_judge;
  std::size_t m = kDefaultShuffles;
  std::size_t n = kDefaultNgram;
};

struct SweepConfig {
  fs::path dataset;
  fs::path image_root;
  std::uint64_t master_seed = 0;
  FilterPolicy filter_policy = FilterPolicy::AutoOnly;
  std::size_t workers = 8;
  GatewayConfig gateway;
  EndpointConfig generator;
  std::string caption_endpoint;
  std::string judge_endpoint;
  std::optional<fs::path> simulator_profiles;
  CannyParams canny;
  BaselineOptions baselines;
  std::vector<SweepRun> runs;
};

inline void validate(const SweepConfig& c) {
  if (c.runs.empty()) throw Error(ErrorKind::InsufficientSweep, "sweep has no runs");
  std::set<std::string> labels;
  for (const auto& r : c.runs) {
    if (r.label.empty() || !labels.insert(r.label).second)
      throw Error(ErrorKind::Config, "run labels must be unique and non-empty: '" + r.label + "'");
    c.gateway.find(r.endpoint);
  }
  c.gateway.find(c.caption_endpoint);
  c.gateway.find(c.judge_endpoint);
  if (c.baselines.guided_judge) c.gateway.find(*c.baselines.guided_judge);
  validate(c.canny);
  bool needs_sim = is_inproc(c.generator);
  for (const auto& e : c.gateway.endpoints) needs_sim = needs_sim || is_inproc(e);
  if (needs_sim && !c.simulator_profiles)
    throw Error(ErrorKind::Config, "inproc:// endpoints need simulator_profiles");
}

/// Relative paths resolve against `base_dir` (the config file's directory).
inline SweepConfig sweep_config_from_json(const nlohmann::json& j, const fs::path& base_dir = {}) {
  auto path = [&](const std::string& p) {
    fs::path out = p;
    return out.is_relative() && !base_dir.empty() ? base_dir / out : out;
  };
  SweepConfig c;
  try {
    c.dataset = path(j.at("dataset").get<std::string>());
    c.image_root = path(j.at("image_root").get<std::string>());
    c.master_seed = j.value("master_seed", std::uint64_t{0});
    c.filter_policy = parse_policy(j.value("filter_policy", std::string("auto")));
    c.workers = j.value("workers", c.workers);
    c.gateway = gateway_config_from_json(j.at("gateway"));
    c.generator = endpoint_from_json(j.at("generator"));
    c.caption_endpoint = j.at("caption_endpoint").get<std::string>();
    c.judge_endpoint = j.at("judge_endpoint").get<std::string>();
    if (j.contains("simulator_profiles")) c.simulator_profiles = path(j.at("simulator_profiles").get<std::string>());
    if (j.contains("canny")) {
      const auto& k = j.at("canny");
      c.canny.sigma = k.value("sigma", c.canny.sigma);
      c.canny.kernel_radius = k.value("kernel_radius", c.canny.kernel_radius);
      c.canny.low_threshold = k.value("low", c.canny.low_threshold);
      c.canny.high_threshold = k.value("high", c.canny.high_threshold);
    }
    if (j.contains("baselines")) {
      const auto& b = j.at("baselines");
      c.baselines.shared_likelihood = b.value("shared_likelihood", false);
      c.baselines.ngram = b.value("ngram", false);
      if (b.contains("guided_judge")) c.baselines.guided_judge = b.at("guided_judge").get<std::string>();
      c.baselines.m = b.value("m", c.baselines.m);
      c.baselines.n = b.value("n", c.baselines.n);
    }
    for (const auto& r : j.at("runs"))
      c.runs.push_back({r.at("label").get<std::string>(), r.value("strategy", std::string("default")),
                        r.value("deg", std::uint64_t{0}), r.at("endpoint").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, std::string("sweep config: ") + e.what());
  }
  validate(c);
  return c;
}

inline SweepConfig load_sweep_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, path.string() + ": " + e.what());
  }
  return sweep_config_from_json(j, path.parent_path());
}

/// Layout of a sweep's output directory.
struct SweepPaths {
  fs::path root;
  fs::path manifest() const { return root / "manifest.json"; }
  fs::path records() const { return root / "perturb.jsonl"; }
  fs::path gateway_journal() const { return root / "gateway.jsonl"; }
  fs::path perturbed() const { return root / "perturbed.jsonl"; }
  fs::path outcomes(const std::string& label, const char* variant) const {
    return root / "runs" / safe_stem(label) / (std::string(variant) + ".jsonl");
  }
  fs::path baselines(const std::string& label) const { return root / "runs" / safe_stem(label) / "baselines.json"; }
  fs::path report_json() const { return root / "report.json"; }
  fs::path report_txt() const { return root / "report.txt"; }
};

/// Evaluates one model on matched original / perturbed benchmarks, resuming
/// from the run's outcome journals.
inline RunReport evaluate_run(ModelGateway& gateway, const SweepRun& run, const Benchmark& original,
                              const fs::path& image_root, const Benchmark& perturbed, const fs::path& perturbed_root,
                              const SweepPaths& paths, std::size_t workers) {
  EvalConfig cfg;
  cfg.endpoint = run.endpoint;
  cfg.run_id = run.label;
  cfg.workers = workers;
  cfg.image_root = image_root;
  cfg.journal = paths.outcomes(run.label, "original");
  fs::create_directories(cfg.journal->parent_path());
  auto orig = run_eval(gateway, cfg, original, Variant::original());
  cfg.image_root = perturbed_root;
  cfg.journal = paths.outcomes(run.label, "perturbed");
  auto pert = run_eval(gateway, cfg, perturbed, Variant::perturbed());
  auto d = detect(gateway.endpoint(run.endpoint).model, orig, pert);
  return make_run_report(run.label, run.strategy, run.deg, run.label, d, orig, pert);
}

/// Baseline scores for one run, cached next to its outcome journals and
/// reused while the options that produced them are unchanged.
inline BaselineSummary run_baselines(ModelGateway& gateway, const SweepConfig& cfg, const SweepRun& run,
                                     const Benchmark& original, const SweepPaths& paths) {
  const auto& opt = cfg.baselines;
  BaselineSummary out;
  if (!opt.shared_likelihood && !opt.ngram && !opt.guided_judge) return out;
  const auto seed = derive_seed(cfg.master_seed, {run.label, "baselines"});
  nlohmann::json key{{"sl", opt.shared_likelihood}, {"ngram", opt.ngram},     {"judge", opt.guided_judge.value_or("")},
                     {"m", opt.m},                  {"n", opt.n},             {"seed", seed},
                     {"items", content_digest(original)}};
  const auto cache = paths.baselines(run.label);
  if (fs::exists(cache)) {
    auto j = nlohmann::json::parse(read_file(cache), nullptr, false);
    if (!j.is_discarded() && j.value("key", nlohmann::json()) == key) {
      out.sl_p = detail::opt_double(j, "sl_p");
      out.ngram_rate = detail::opt_double(j, "ngram_rate");
      out.guided_diff = detail::opt_double(j, "guided_diff");
      return out;
    }
  }
  if (opt.shared_likelihood)
    out.sl_p = shared_likelihood_test(gateway, run.endpoint, original, opt.m, seed, cfg.workers).global_p;
  if (opt.ngram) out.ngram_rate = ngram_accuracy(gateway, run.endpoint, original, opt.n, seed, cfg.workers).rate;
  if (opt.guided_judge)
    out.guided_diff =
        guided_prompting(gateway, run.endpoint, *opt.guided_judge, original, cfg.workers).mean_difference;
  nlohmann::json j{{"key", key},
                   {"sl_p", detail::opt_json(out.sl_p)},
                   {"ngram_rate", detail::opt_json(out.ngram_rate)},
                   {"guided_diff", detail::opt_json(out.guided_diff)}};
  write_file(cache, j.dump() + "\n");
  return out;
}

/// ingest -> perturb -> auto-filter -> export -> eval -> detect -> report.
/// Every stage resumes from its journal, so rerunning over the same output
/// directory reproduces the same report.
inline ContaminationReport run_sweep(const SweepConfig& cfg, const fs::path& out_dir,
                                     std::shared_ptr<Transport> transport) {
  validate(cfg);
  SweepPaths paths{out_dir};
  fs::create_directories(out_dir);

  auto manifest = ingest(cfg.dataset, cfg.image_root, paths.manifest());
  auto source = load_from_manifest(manifest);

  Journal gateway_journal(paths.gateway_journal());
  ModelGateway gateway(cfg.gateway, transport, &gateway_journal);
  GenerationClient generator(cfg.generator, transport);
  RecordStore store(paths.records());

  PipelineDeps deps;
  deps.gateway = &gateway;
  deps.caption_endpoint = cfg.caption_endpoint;
  deps.generator = &generator;
  deps.store = &store;
  deps.image_root = cfg.image_root;
  deps.run_dir = out_dir;
  deps.canny = cfg.canny;
  deps.master_seed = cfg.master_seed;
  perturb_all(source, deps, cfg.workers);

  auto_filter(store, source, gateway, cfg.judge_endpoint, out_dir, cfg.workers);
  auto exported = export_filtered(store, source, cfg.filter_policy);
  save_benchmark(exported.perturbed, paths.perturbed());
  auto original = subset(source, exported.kept_ids, "kept");

  ContaminationReport report;
  report.benchmark_name = source.name;
  report.benchmark_digest = manifest.digest;
  report.benchmark_size = source.size();
  report.perturbed_digest = content_digest(exported.perturbed);
  report.perturbed_size = exported.perturbed.size();
  report.filter_policy = to_string(cfg.filter_policy);
  report.master_seed = cfg.master_seed;

  std::vector<RunSignal> signals;
  for (const auto& run : cfg.runs) {
    auto rr = evaluate_run(gateway, run, original, cfg.image_root, exported.perturbed, out_dir, paths, cfg.workers);
    rr.baselines = run_baselines(gateway, cfg, run, original, paths);
    signals.push_back({run.strategy, run.deg, rr.delta, rr.flagged});
    report.runs.push_back(std::move(rr));
  }
  report.requirements = check_requirements(signals);

  write_file(paths.report_json(), to_json(report).dump(2) + "\n");
  write_file(paths.report_txt(), render_human(report));
  return report;
}

/// Transport for a sweep: the configured simulator (if any) behind inproc://
/// endpoints, HTTP for the rest. The simulator must outlive the transport.
inline std::shared_ptr<Transport> sweep_transport(const Simulator* sim) {
  return std::make_shared<RoutingTransport>(sim ? sim->transport() : nullptr, std::make_shared<HttpTransport>());
}

}  // namespace vlmaudit
