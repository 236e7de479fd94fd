// audit: command-line front end for the contamination audit toolkit.
//
// Exit codes: 0 = ran cleanly and nothing was flagged, 2 = contamination
// flagged, 1 = error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "vlmaudit/baselines.hpp"
#include "vlmaudit/benchmark_store.hpp"
#include "vlmaudit/edges.hpp"
#include "vlmaudit/evaluation.hpp"
#include "vlmaudit/filter.hpp"
#include "vlmaudit/gateway.hpp"
#include "vlmaudit/http_transport.hpp"
#include "vlmaudit/pipeline.hpp"
#include "vlmaudit/report.hpp"
#include "vlmaudit/review_server.hpp"
#include "vlmaudit/simulator.hpp"
#include "vlmaudit/simulator_server.hpp"
#include "vlmaudit/sweep.hpp"

namespace fs = std::filesystem;
using namespace vlmaudit;

namespace {

constexpr int kExitClean = 0;
constexpr int kExitError = 1;
constexpr int kExitFlagged = 2;

struct Loaded {
  Benchmark benchmark;
  fs::path image_root;
};

/// A manifest (.json) or a dataset file plus --images.
Loaded load_benchmark_arg(const fs::path& path, const std::string& images) {
  if (path.extension() == ".json") {
    auto m = read_manifest(path);
    return {load_from_manifest(m), m.image_root};
  }
  if (images.empty()) throw Error(ErrorKind::Config, "--images is required when --benchmark is a dataset file");
  return {load_benchmark(path, fs::path(images)), images};
}

/// Shared wiring: gateway config plus an optional in-process simulator that
/// answers inproc:// endpoints.
struct Context {
  std::string gateway_path = "gateway.json";
  std::string profiles_path;
  std::optional<Simulator> sim;
  std::shared_ptr<Transport> transport;

  GatewayConfig gateway_config() const { return load_gateway_config(gateway_path); }

  std::shared_ptr<Transport> get_transport() {
    if (!transport) {
      if (!profiles_path.empty()) sim.emplace(load_simulator(fs::path(profiles_path)));
      transport = sweep_transport(sim ? &*sim : nullptr);
    }
    return transport;
  }
};

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file(path, j.dump(2) + "\n");
}

std::vector<EvalOutcome> read_outcomes(const fs::path& path) {
  std::map<std::string, EvalOutcome> last;
  for (const auto& line : read_journal(path)) {
    auto o = outcome_from_json(line);
    last.insert_or_assign(outcome_key(o.item_id, o.variant), o);
  }
  std::vector<EvalOutcome> out;
  for (auto& [_, o] : last) out.push_back(std::move(o));
  return out;
}

/// A run directory holds outcomes-<variant>.jsonl; a file path is used as is.
fs::path outcomes_path(const fs::path& p, const char* variant) {
  if (fs::is_directory(p)) return p / (std::string("outcomes-") + variant + ".jsonl");
  return p;
}

std::pair<std::string, int> split_bind(const std::string& bind) {
  auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw Error(ErrorKind::Config, "--bind must be host:port");
  return {bind.substr(0, colon), std::stoi(bind.substr(colon + 1))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal benchmark contamination audit"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  Context ctx;
  app.add_option("--gateway", ctx.gateway_path, "Endpoint configuration file");
  app.add_option("--profiles", ctx.profiles_path, "Simulator profiles answering inproc:// endpoints");
  std::size_t workers = 8;
  auto* workers_opt =
      app.add_option("--workers", workers, "Concurrent requests per stage")->check(CLI::PositiveNumber);

  int exit_code = kExitClean;

  // ingest ------------------------------------------------------------------
  auto* ingest_cmd = app.add_subcommand("ingest", "Validate a dataset and write its manifest");
  std::string ingest_dataset, ingest_images, ingest_out;
  ingest_cmd->add_option("--dataset", ingest_dataset)->required();
  ingest_cmd->add_option("--images", ingest_images)->required();
  ingest_cmd->add_option("--out", ingest_out)->required();
  ingest_cmd->callback([&] {
    auto m = ingest(ingest_dataset, ingest_images, ingest_out);
    std::cout << m.name << ": " << m.item_count << " items, digest " << m.digest << "\n";
  });

  // edges -------------------------------------------------------------------
  auto* edges_cmd = app.add_subcommand("edges", "Compute a Canny edge map");
  std::string edges_in, edges_out;
  CannyParams canny_params;
  edges_cmd->add_option("--in", edges_in)->required();
  edges_cmd->add_option("--out", edges_out)->required();
  edges_cmd->add_option("--sigma", canny_params.sigma, "Gaussian sigma")->capture_default_str();
  edges_cmd->add_option("--radius", canny_params.kernel_radius, "Gaussian kernel radius")->capture_default_str();
  edges_cmd->add_option("--low", canny_params.low_threshold)->capture_default_str();
  edges_cmd->add_option("--high", canny_params.high_threshold)->capture_default_str();
  edges_cmd->callback([&] {
    auto e = canny(decode_image(read_file(edges_in)), canny_params);
    write_file(edges_out, encode_png(e));
    std::cout << e.width << "x" << e.height << ", " << e.edge_count() << " edge pixels\n";
  });

  // perturb -----------------------------------------------------------------
  auto* perturb_cmd = app.add_subcommand("perturb", "Generate perturbed images for a benchmark");
  std::string perturb_manifest, perturb_out, caption_endpoint = "captioner", gen_endpoint = "generator";
  std::uint64_t perturb_seed = 0;
  perturb_cmd->add_option("--manifest", perturb_manifest)->required();
  perturb_cmd->add_option("--out", perturb_out, "Run directory")->required();
  perturb_cmd->add_option("--seed", perturb_seed)->required();
  perturb_cmd->add_option("--caption-endpoint", caption_endpoint)->capture_default_str();
  perturb_cmd->add_option("--gen-endpoint", gen_endpoint)->capture_default_str();
  perturb_cmd->callback([&] {
    auto m = read_manifest(perturb_manifest);
    auto b = load_from_manifest(m);
    fs::create_directories(perturb_out);
    write_manifest(m, fs::path(perturb_out) / "manifest.json");
    auto config = ctx.gateway_config();
    auto transport = ctx.get_transport();
    Journal journal(fs::path(perturb_out) / "gateway.jsonl");
    ModelGateway gateway(config, transport, &journal);
    GenerationClient generator(config.find(gen_endpoint), transport);
    RecordStore store(fs::path(perturb_out) / "perturb.jsonl");
    PipelineDeps deps{&gateway, caption_endpoint, &generator, &store, m.image_root, perturb_out, CannyParams{},
                      perturb_seed};
    auto records = perturb_all(b, deps, workers);
    std::size_t failed = 0;
    for (const auto& r : records) failed += r.status == Status::Failed ? 1 : 0;
    std::cout << records.size() - failed << " generated, " << failed << " failed\n";
  });

  // filter ------------------------------------------------------------------
  auto* filter_cmd = app.add_subcommand("filter", "Auto-filter with a judge, serve manual review, or export");
  std::string filter_mode = "auto", filter_run, judge_endpoint = "judge", export_policy, bind = "127.0.0.1:8088",
              ui_dir;
  bool show_auto = false;
  filter_cmd->add_option("--mode", filter_mode)->check(CLI::IsMember({"auto", "serve-review", "export"}));
  filter_cmd->add_option("--run", filter_run, "Run directory written by perturb")->required();
  filter_cmd->add_option("--judge-endpoint", judge_endpoint)->capture_default_str();
  filter_cmd->add_option("--export", export_policy, "Write perturbed.jsonl under manual|auto|manual-else-auto");
  filter_cmd->add_option("--bind", bind)->capture_default_str();
  filter_cmd->add_option("--ui", ui_dir, "Static review UI directory");
  filter_cmd->add_flag("--show-auto", show_auto, "Show auto verdicts to reviewers");
  filter_cmd->callback([&] {
    const fs::path run = filter_run;
    auto m = read_manifest(run / "manifest.json");
    auto source = load_from_manifest(m);
    RecordStore store(run / "perturb.jsonl");
    if (filter_mode == "auto") {
      auto transport = ctx.get_transport();
      Journal journal(run / "gateway.jsonl");
      ModelGateway gateway(ctx.gateway_config(), transport, &journal);
      auto res = auto_filter(store, source, gateway, judge_endpoint, run, workers);
      std::size_t kept = 0;
      for (const auto& d : res.decisions) kept += d.verdict == Verdict::Keep ? 1 : 0;
      std::cout << res.decisions.size() << " judged (" << kept << " kept), " << res.unparseable.size()
                << " unparseable, " << res.errored.size() << " errored\n";
    } else if (filter_mode == "serve-review") {
      ReviewQueue queue(store, source, ReviewOptions{show_auto, std::chrono::seconds(600)});
      httplib::Server server;
      mount_review_api(server, queue, m.image_root, run, ui_dir);
      auto [host, port] = split_bind(bind);
      std::cout << "review server on http://" << host << ":" << port << "/review/\n" << std::flush;
      if (!server.listen(host, port)) throw Error(ErrorKind::Io, "cannot bind " + bind);
    }
    if (!export_policy.empty()) {
      auto exported = export_filtered(store, source, parse_policy(export_policy));
      save_benchmark(exported.perturbed, run / "perturbed.jsonl");
      write_manifest(make_manifest(exported.perturbed, fs::absolute(run / "perturbed.jsonl"), fs::absolute(run)),
                     run / "perturbed_manifest.json");
      std::cout << "exported " << exported.perturbed.size() << " items to " << (run / "perturbed.jsonl") << "\n";
    }
  });

  // eval --------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a model on a benchmark variant");
  std::string eval_benchmark, eval_images, eval_variant = "original", eval_endpoint, eval_out;
  std::uint64_t eval_seed = 0;
  eval_cmd->add_option("--benchmark", eval_benchmark, "Manifest (.json) or dataset (.jsonl)")->required();
  eval_cmd->add_option("--images", eval_images, "Image root when --benchmark is a dataset file");
  eval_cmd->add_option("--variant", eval_variant)
      ->check(CLI::IsMember({"original", "perturbed", "textonly", "circular", "confusion"}));
  eval_cmd->add_option("--endpoint", eval_endpoint)->required();
  eval_cmd->add_option("--out", eval_out, "Run directory")->required();
  eval_cmd->add_option("--seed", eval_seed, "Seed for choice-confusion donors");
  eval_cmd->callback([&] {
    auto [b, root] = load_benchmark_arg(eval_benchmark, eval_images);
    auto transport = ctx.get_transport();
    fs::create_directories(eval_out);
    ModelGateway gateway(ctx.gateway_config(), transport);
    EvalConfig cfg;
    cfg.endpoint = eval_endpoint;
    cfg.run_id = fs::path(eval_out).filename().string();
    cfg.image_root = root;
    if (workers_opt->count() > 0) cfg.workers = workers;
    cfg.journal = fs::path(eval_out) / ("outcomes-" + eval_variant + ".jsonl");
    nlohmann::json summary{{"benchmark", b.name}, {"variant", eval_variant}, {"endpoint", eval_endpoint}};
    if (eval_variant == "circular") {
      auto res = circular_eval(gateway, cfg, b);
      summary["standard_accuracy"] = res.standard_accuracy;
      summary["circular_accuracy"] = res.circular_accuracy;
    } else {
      Variant v = Variant::original();
      const Benchmark* target = &b;
      Benchmark confusion;
      if (eval_variant == "perturbed") v = Variant::perturbed();
      if (eval_variant == "textonly") v = Variant::text_only();
      if (eval_variant == "confusion") {
        v = Variant::confusion();
        confusion = build_choice_confusion(b, eval_seed);
        target = &confusion;
      }
      auto outcomes = run_eval(gateway, cfg, *target, v);
      summary["accuracy"] = accuracy_pct(outcomes);
      summary["n_items"] = outcomes.size();
    }
    write_json(fs::path(eval_out) / ("summary-" + eval_variant + ".json"), summary);
    std::cout << summary.dump() << "\n";
  });

  // detect ------------------------------------------------------------------
  auto* detect_cmd = app.add_subcommand("detect", "Compare original and perturbed outcomes");
  std::string detect_original, detect_perturbed, detect_out;
  detect_cmd->add_option("--original", detect_original, "Run directory or outcome journal")->required();
  detect_cmd->add_option("--perturbed", detect_perturbed, "Run directory or outcome journal")->required();
  detect_cmd->add_option("--out", detect_out, "Detection result (JSON)")->required();
  detect_cmd->callback([&] {
    auto orig = read_outcomes(outcomes_path(detect_original, "original"));
    auto pert = read_outcomes(outcomes_path(detect_perturbed, "perturbed"));
    // The perturbed set only holds kept items; compare on those.
    std::set<std::string> kept;
    for (const auto& o : pert) kept.insert(o.item_id);
    std::erase_if(orig, [&](const EvalOutcome& o) { return !kept.count(o.item_id); });
    auto model = orig.empty() ? std::string{} : orig.front().model_id;
    auto d = detect(model, orig, pert);
    nlohmann::json j{{"model_id", d.model_id}, {"acc_original", round2(d.acc_original)},
                     {"acc_perturbed", round2(d.acc_perturbed)}, {"delta", d.delta},
                     {"flagged", d.flagged},     {"failures", d.failures},
                     {"n_items", d.n_items}};
    write_json(detect_out, j);
    std::cout << d.model_id << ": " << accuracy_cells(d.acc_original, d.acc_perturbed, d.delta)
              << (d.flagged ? " (flagged)" : "") << "\n";
    if (d.flagged) exit_code = kExitFlagged;
  });

  // baseline ----------------------------------------------------------------
  auto* baseline_cmd = app.add_subcommand("baseline", "Run a likelihood-family baseline detector");
  std::string baseline_kind, baseline_benchmark, baseline_images, baseline_endpoint, baseline_judge, baseline_out;
  std::size_t baseline_m = kDefaultShuffles, baseline_n = kDefaultNgram;
  std::uint64_t baseline_seed = 0;
  baseline_cmd->add_option("kind", baseline_kind)->required()->check(CLI::IsMember({"sl", "ngram", "guided"}));
  baseline_cmd->add_option("--benchmark", baseline_benchmark)->required();
  baseline_cmd->add_option("--images", baseline_images);
  baseline_cmd->add_option("--endpoint", baseline_endpoint)->required();
  baseline_cmd->add_option("--judge", baseline_judge);
  baseline_cmd->add_option("--m", baseline_m)->capture_default_str();
  baseline_cmd->add_option("--n", baseline_n)->capture_default_str();
  baseline_cmd->add_option("--seed", baseline_seed);
  baseline_cmd->add_option("--out", baseline_out)->required();
  baseline_cmd->callback([&] {
    auto loaded = load_benchmark_arg(baseline_benchmark, baseline_images.empty() ? "." : baseline_images);
    const auto& b = loaded.benchmark;
    ModelGateway gateway(ctx.gateway_config(), ctx.get_transport());
    nlohmann::json j;
    if (baseline_kind == "sl") {
      j = to_json(shared_likelihood_test(gateway, baseline_endpoint, b, baseline_m, baseline_seed, workers));
    } else if (baseline_kind == "ngram") {
      j = to_json(ngram_accuracy(gateway, baseline_endpoint, b, baseline_n, baseline_seed, workers));
    } else {
      if (baseline_judge.empty()) throw Error(ErrorKind::Config, "guided prompting needs --judge");
      j = to_json(guided_prompting(gateway, baseline_endpoint, baseline_judge, b, workers));
    }
    write_json(fs::path(baseline_out) / (baseline_kind + ".json"), j);
    j.erase("per_item");
    std::cout << j.dump() << "\n";
  });

  // simulate ----------------------------------------------------------------
  auto* simulate_cmd = app.add_subcommand("simulate", "Serve simulated models over the chat contract");
  std::string sim_profiles, sim_bind = "127.0.0.1:8099";
  simulate_cmd->add_option("--profiles", sim_profiles)->required();
  simulate_cmd->add_option("--bind", sim_bind)->capture_default_str();
  simulate_cmd->callback([&] {
    auto sim = load_simulator(fs::path(sim_profiles));
    auto [host, port] = split_bind(sim_bind);
    std::cout << "simulator on http://" << host << ":" << port << "/v1/chat/completions\n" << std::flush;
    if (!serve_simulator(sim, host, port)) throw Error(ErrorKind::Io, "cannot bind " + sim_bind);
  });

  // report ------------------------------------------------------------------
  auto* report_cmd = app.add_subcommand("report", "Render a machine report");
  std::string report_in, report_format = "human", report_out;
  report_cmd->add_option("--in", report_in, "report.json")->required();
  report_cmd->add_option("--format", report_format)->check(CLI::IsMember({"human", "machine"}));
  report_cmd->add_option("--out", report_out, "Output file (default stdout)");
  report_cmd->callback([&] {
    auto r = report_from_json(nlohmann::json::parse(read_file(report_in)));
    auto text = report_format == "human" ? render_human(r) : to_json(r).dump(2) + "\n";
    if (report_out.empty())
      std::cout << text;
    else
      write_file(report_out, text);
    if (r.any_flagged()) exit_code = kExitFlagged;
  });

  // sweep -------------------------------------------------------------------
  auto* sweep_cmd = app.add_subcommand("sweep", "Run a whole sweep end to end");
  std::string sweep_config, sweep_out;
  sweep_cmd->add_option("--config", sweep_config)->required();
  sweep_cmd->add_option("--out", sweep_out)->required();
  sweep_cmd->callback([&] {
    auto cfg = load_sweep_config(sweep_config);
    if (workers_opt->count() > 0) cfg.workers = workers;
    std::optional<Simulator> sim;
    if (cfg.simulator_profiles) sim.emplace(load_simulator(*cfg.simulator_profiles));
    auto report = run_sweep(cfg, sweep_out, sweep_transport(sim ? &*sim : nullptr));
    std::cout << render_human(report);
    if (report.any_flagged()) exit_code = kExitFlagged;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitClean : kExitError;
  } catch (const Error& e) {
    std::cerr << "audit: " << e.what() << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "audit: " << e.what() << "\n";
    return kExitError;
  }
  return exit_code;
}
