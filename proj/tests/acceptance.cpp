// Acceptance run: one PASS/FAIL line per primary criterion.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "support/fixtures.hpp"
#include "support/naive_canny.hpp"
#include "vlmaudit/baselines.hpp"
#include "vlmaudit/edges.hpp"
#include "vlmaudit/evaluation.hpp"
#include "vlmaudit/filter.hpp"
#include "vlmaudit/pipeline.hpp"
#include "vlmaudit/report.hpp"
#include "vlmaudit/simulator.hpp"

#ifndef AUDIT_CLI
#error "AUDIT_CLI must name the audit executable"
#endif

using namespace vlmaudit;
using fixtures::TempDir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 2) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

double band3(double p, std::size_t n) { return 300.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(n)); }

int scene_of(const std::string& body) {
  static const std::regex kScene(R"(In scene (\d+) )");
  std::smatch m;
  return std::regex_search(body, m, kScene) ? std::stoi(m[1]) : -1;
}

std::string chat_reply(const std::string& text) {
  return nlohmann::json{{"choices", {{{"message", {{"content", text}}}}}}}.dump();
}

std::string generate_reply(const std::string& body) {
  auto j = nlohmann::json::parse(body);
  auto png = encode_png(fixtures::noise_image(j["width"], j["height"], j["seed"]));
  return nlohmann::json{{"image_png_b64", base64_encode(png)}}.dump();
}

EvalConfig eval_config(const std::string& endpoint, const fs::path& images) {
  EvalConfig c;
  c.endpoint = endpoint;
  c.run_id = endpoint;
  c.image_root = images;
  c.workers = 2;
  return c;
}

// ---------------------------------------------------------------------------

Outcome delta_fixture_arithmetic() {
  struct Row {
    const char* name;
    double acc, acc_p, delta;
    bool flagged;
  };
  const Row rows[] = {{"GPT-4o", 65.68, 69.93, 4.25, false},
                      {"Phi-3.5", 52.68, 68.86, 16.18, false},
                      {"pretrain-leak", 51.82, 50.00, -1.82, true},
                      {"clean", 52.05, 56.36, 4.31, false}};
  Outcome out{true, ""};
  for (const auto& r : rows) {
    auto d = detection_from_accuracies(r.name, r.acc, r.acc_p);
    bool ok = d.delta == r.delta && d.flagged == r.flagged;
    out.pass = out.pass && ok;
    out.detail += std::string(out.detail.empty() ? "" : ", ") + r.name + " " + format_delta(d.delta) +
                  (d.flagged ? " flagged" : "") + (ok ? "" : " MISMATCH");
  }
  return out;
}

Outcome requirement_sweep() {
  TempDir dir;
  auto bench = fixtures::synthetic_benchmark(440, 4, 11);
  fixtures::write_benchmark(bench, dir / "data", 8);
  auto perturbed = fixtures::perturbed_copy(bench, 12);
  auto memo = fixtures::share(bench);
  const double kappa = 0.5, s_o = 0.5, s_p = 0.6;
  const std::vector<std::string> strategies{"llm", "llm_mlp"};
  const int seeds = 20;

  std::size_t clean_runs = 0, clean_ok = 0, contaminated_runs = 0, flagged = 0, groups = 0, rho_one = 0;
  // pooled measured accuracy per (n, variant) across seeds and strategies
  std::map<std::pair<std::uint64_t, int>, std::pair<double, std::size_t>> pooled;
  for (int seed = 0; seed < seeds; ++seed) {
    Simulator sim;
    std::vector<std::string> names;
    for (const auto& s : strategies)
      for (std::uint64_t n = 0; n <= 3; ++n) {
        auto name = s + "-n" + std::to_string(n);
        auto ps = derive_seed(static_cast<std::uint64_t>(seed), {s, std::to_string(n)});
        sim.add(name, n == 0 ? fixtures::clean_profile(s_o, s_p, ps)
                             : fixtures::contaminated_profile(kappa, n, s_o, s_p, memo, ps));
        names.push_back(name);
      }
    auto gw = fixtures::sim_gateway(sim, names);
    std::vector<RunSignal> signals;
    for (const auto& s : strategies)
      for (std::uint64_t n = 0; n <= 3; ++n) {
        auto name = s + "-n" + std::to_string(n);
        auto cfg = eval_config(name, dir / "data");
        auto o = run_eval(*gw, cfg, bench, Variant::original());
        auto p = run_eval(*gw, cfg, perturbed, Variant::perturbed());
        auto d = detect(name, o, p);
        signals.push_back({s, n, d.delta, d.flagged});
        if (n == 0) {
          ++clean_runs;
          clean_ok += d.delta >= 0.0;
        } else {
          ++contaminated_runs;
          flagged += d.flagged;
        }
        auto& po = pooled[{n, 0}];
        po.first += d.acc_original;
        ++po.second;
        auto& pp = pooled[{n, 1}];
        pp.first += d.acc_perturbed;
        ++pp.second;
      }
    auto v = check_requirements(signals);
    for (const auto& c : v.consistency) {
      ++groups;
      rho_one += c.rho == 1.0;
    }
  }

  bool closed_ok = true;
  std::string closed;
  const std::map<std::uint64_t, std::pair<double, double>> published{{1, {75.0, 30.0}}, {2, {87.5, 15.0}}};
  for (const auto& [n, acc] : published) {
    auto p = fixtures::contaminated_profile(kappa, n, s_o, s_p, memo, 0);
    double eo = expected_accuracy(p, VariantKind::Original, 4), ep = expected_accuracy(p, VariantKind::Perturbed, 4);
    closed_ok = closed_ok && std::abs(100 * eo - acc.first) < 1e-9 && std::abs(100 * ep - acc.second) < 1e-9;
    for (int v = 0; v < 2; ++v) {
      const auto& [sum, count] = pooled[{n, v}];
      double target = v == 0 ? eo : ep, measured = sum / static_cast<double>(count);
      bool within = std::abs(measured - 100 * target) <= band3(target, 440 * count);
      closed_ok = closed_ok && within;
      closed += " n" + std::to_string(n) + (v ? "P" : "O") + "=" + fmt(measured) + "/" + fmt(100 * target) +
                (within ? "" : "!");
    }
  }

  bool pass = clean_ok >= 0.95 * clean_runs && flagged == contaminated_runs && rho_one >= 0.95 * groups &&
              groups == strategies.size() * seeds && closed_ok;
  return {pass, "clean delta>=0 " + std::to_string(clean_ok) + "/" + std::to_string(clean_runs) + ", flagged " +
                    std::to_string(flagged) + "/" + std::to_string(contaminated_runs) + ", rho=1 " +
                    std::to_string(rho_one) + "/" + std::to_string(groups) + ", accuracies" + closed};
}

Outcome canny_oracle() {
  auto oracle = [](const GrayImage& g, const CannyParams& p) {
    return naive::canny(g.data, g.width, g.height, p.sigma, p.kernel_radius, p.low_threshold, p.high_threshold);
  };
  auto monotone = [](const GrayImage& g) {
    CannyParams base;
    auto e0 = canny(g, base);
    for (double scale : {1.25, 1.5, 2.0}) {
      auto p = base;
      p.low_threshold *= scale;
      p.high_threshold *= scale;
      auto e1 = canny(g, p);
      for (std::size_t i = 0; i < e0.data.size(); ++i)
        if (e1.data[i] > e0.data[i]) return false;
    }
    return true;
  };
  std::vector<GrayImage> images;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    GrayImage g(16, 16);
    for (auto& v : g.data) v = static_cast<std::uint8_t>(rng() & 0xff);
    images.push_back(g);
  }
  GrayImage step(16, 16, 0);
  for (int y = 0; y < 16; ++y)
    for (int x = 8; x < 16; ++x) step.at(x, y) = 255;
  images.push_back(step);
  images.push_back(GrayImage(16, 16, 120));

  std::size_t equal = 0, mono = 0;
  for (const auto& g : images) {
    equal += canny(g, CannyParams{}).data == oracle(g, CannyParams{});
    mono += monotone(g);
  }
  bool step_ok = canny(step, CannyParams{}).edge_count() == 16;
  bool constant_ok = canny(images.back(), CannyParams{}).edge_count() == 0;
  return {equal == images.size() && mono == images.size() && step_ok && constant_ok,
          "oracle-equal " + std::to_string(equal) + "/" + std::to_string(images.size()) + ", monotone " +
              std::to_string(mono) + "/" + std::to_string(images.size()) + ", step " + (step_ok ? "ok" : "bad") +
              ", constant " + (constant_ok ? "ok" : "bad")};
}

Outcome circular_property() {
  std::mt19937_64 rng(23);
  std::size_t ok = 0;
  for (int cfg = 0; cfg < 50; ++cfg) {
    TempDir dir;
    auto b = fixtures::synthetic_benchmark(20, 2 + rng() % 4, rng());
    fixtures::write_benchmark(b, dir / "data", 8);
    double so = (rng() % 101) / 100.0, sp = (rng() % 101) / 100.0;
    Simulator sim;
    sim.add("m", rng() % 2 ? fixtures::clean_profile(so, sp, rng())
                           : fixtures::contaminated_profile((rng() % 101) / 100.0, rng() % 4, so, sp,
                                                            fixtures::share(b), rng()));
    auto gw = fixtures::sim_gateway(sim, {"m"});
    auto r = circular_eval(*gw, eval_config("m", dir / "data"), b);
    ok += r.circular_accuracy <= r.standard_accuracy;
  }

  TempDir dir;
  auto three = fixtures::synthetic_benchmark(30, 3, 4);
  fixtures::write_benchmark(three, dir / "data", 8);
  Simulator sim;
  auto constant = fixtures::clean_profile(0.0, 0.0, 1);
  constant.constant_letter = 'A';
  sim.add("const", constant);
  sim.add("memo", fixtures::contaminated_profile(1.0, 1, 0.0, 0.0, fixtures::share(three), 2));
  auto gw = fixtures::sim_gateway(sim, {"const", "memo"});
  double const_circ = circular_eval(*gw, eval_config("const", dir / "data"), three).circular_accuracy;
  double memo_circ = circular_eval(*gw, eval_config("memo", dir / "data"), three).circular_accuracy;
  return {ok == 50 && const_circ == 0.0 && memo_circ == 100.0,
          "circular<=standard " + std::to_string(ok) + "/50, constant-letter circular " + fmt(const_circ) +
              "%, memorizer circular " + fmt(memo_circ) + "%"};
}

Outcome choice_confusion() {
  auto b = fixtures::synthetic_benchmark(100, 4, 2);
  std::map<std::string, std::string> owner;
  for (const auto& item : b.items) owner[item.answer_text()] = item.id;
  std::size_t good = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    auto c = build_choice_confusion(b, seed);
    bool ok = c.size() == b.size();
    for (std::size_t i = 0; ok && i < b.size(); ++i) {
      const auto& src = b.items[i];
      const auto& out = c.items[i];
      ok = out.answer_letter == src.answer_letter && out.answer_text() == src.answer_text();
      std::set<std::string> texts;
      for (const auto& o : out.options) {
        ok = ok && texts.insert(lowercase(o.text)).second;
        if (o.letter == out.answer_letter) continue;
        auto it = owner.find(o.text);
        bool replaced = std::none_of(src.options.begin(), src.options.end(),
                                     [&](const Option& s) { return s.letter != src.answer_letter && s.text == o.text; });
        ok = ok && replaced && it != owner.end() && it->second != src.id;
      }
    }
    good += ok;
  }

  TempDir dir;
  auto big = fixtures::synthetic_benchmark(440, 4, 6);
  fixtures::write_benchmark(big, dir / "data", 8);
  auto conf = build_choice_confusion(big, 3);
  Simulator sim;
  sim.add("clean", fixtures::clean_profile(0.5, 0.5, 31));
  sim.add("memo", fixtures::contaminated_profile(1.0, 1, 0.5, 0.5, fixtures::share(big), 32));
  auto gw = fixtures::sim_gateway(sim, {"clean", "memo"});
  auto gain = [&](const std::string& name) {
    auto cfg = eval_config(name, dir / "data");
    return accuracy_pct(run_eval(*gw, cfg, conf, Variant::confusion())) -
           accuracy_pct(run_eval(*gw, cfg, big, Variant::original()));
  };
  auto expected_gain = [&](const std::string& name) {
    const auto& p = sim.profile(name);
    return 100 * (expected_accuracy(p, VariantKind::ChoiceConfusion, 4) - expected_accuracy(p, VariantKind::Original, 4));
  };
  double clean = gain("clean"), memo = gain("memo");
  double clean_e = expected_gain("clean"), memo_e = expected_gain("memo");
  return {good == 1000 && clean > 0 && clean_e > 0 && memo <= 0 && memo_e <= 0,
          "invariants " + std::to_string(good) + "/1000 builds, clean gain " + format_delta(round2(clean)) +
              " (expected " + format_delta(round2(clean_e)) + "), memorizer gain " + format_delta(round2(memo)) +
              " (expected " + format_delta(round2(memo_e)) + ")"};
}

Outcome shared_likelihood() {
  const int trials = 200;
  // 5 options: 24 distinct reorderings per item, so p lives on a 25-point grid
  auto null_bench = fixtures::synthetic_benchmark(10, 5, 1);
  std::vector<std::size_t> grid(25, 0);
  std::size_t not_significant = 0;
  for (int t = 0; t < trials; ++t) {
    Simulator sim;
    sim.add("m", fixtures::clean_profile(0.5, 0.5, 1000 + t));
    auto gw = fixtures::sim_gateway(sim, {"m"});
    auto r = shared_likelihood_test(*gw, "m", null_bench, kDefaultShuffles, t, 1);
    not_significant += r.global_p > 0.05;
    for (const auto& row : r.per_item) ++grid[static_cast<std::size_t>(std::lround(row.p * 25.0 - 1.0))];
  }
  // upper 0.01 quantile of chi-square with 24 degrees of freedom
  double expected = 0, stat = 0;
  for (auto c : grid) expected += c;
  expected /= 25.0;
  for (auto c : grid) stat += (c - expected) * (c - expected) / expected;
  const double chi2_24_01 = 42.980;

  auto boost_bench = fixtures::synthetic_benchmark(20, 5, 2);
  std::size_t detected = 0;
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Simulator sim;
    auto p = fixtures::contaminated_profile(1.0, 1, 0.5, 0.5, fixtures::share(boost_bench), 5000 + t);
    p.canonical_order_boost = 2.0;
    sim.add("memo", p);
    auto gw = fixtures::sim_gateway(sim, {"memo"});
    auto r = shared_likelihood_test(*gw, "memo", boost_bench, kDefaultShuffles, t, 1);
    detected += r.global_p < 1e-6;
    worst = std::max(worst, r.global_p);
  }
  std::ostringstream detail;
  detail << "grid chi2 " << fmt(stat) << " (< " << chi2_24_01 << "), null global p>0.05 in " << not_significant
         << "/" << trials << ", boosted p<1e-6 in " << detected << "/" << trials << " (max " << worst << ")";
  return {stat < chi2_24_01 && not_significant >= 0.95 * trials && detected == static_cast<std::size_t>(trials),
          detail.str()};
}

Outcome filter_accounting() {
  TempDir dir;
  auto bench = fixtures::synthetic_benchmark(765, 4, 3);
  fixtures::write_benchmark(bench, dir / "data", 12);
  auto transport = std::make_shared<FunctionTransport>(
      [](const EndpointConfig& ep, const std::string& path, const std::string& body, const Headers&) {
        if (path == "/generate") return HttpResult{200, generate_reply(body)};
        if (ep.name == "judge")
          return HttpResult{200, chat_reply(scene_of(body) < 294 ? "Answer: KEEP" : "Answer: REJECT")};
        return HttpResult{200, chat_reply("a plain scene")};
      });
  ModelGateway gateway(
      GatewayConfig{{make_endpoint("captioner", "inproc://", false), make_endpoint("judge", "inproc://", false)}},
      transport);
  GenerationClient generator(make_endpoint("generator"), transport);
  RecordStore store(dir / "run" / "perturb.jsonl");
  PipelineDeps deps;
  deps.gateway = &gateway;
  deps.caption_endpoint = "captioner";
  deps.generator = &generator;
  deps.store = &store;
  deps.image_root = dir / "data";
  deps.run_dir = dir / "run";
  deps.master_seed = 7;
  perturb_all(bench, deps, 2);
  auto_filter(store, bench, gateway, "judge", deps.run_dir, 2);
  auto exported = export_filtered(store, bench, FilterPolicy::AutoOnly);

  std::set<std::string> auto_kept(exported.kept_ids.begin(), exported.kept_ids.end()), manual_kept;
  for (std::size_t i = 0; i < bench.size(); ++i)
    if (i < 253 || (i >= 294 && i < 294 + 187)) manual_kept.insert(bench.items[i].id);
  auto stats = agreement(auto_kept, manual_kept);
  return {exported.perturbed.size() == 294 && stats.overlap == 253 && stats.manual_kept == 440,
          "exported " + std::to_string(exported.perturbed.size()) + " of 765, agreement(" +
              std::to_string(stats.auto_kept) + ", " + std::to_string(stats.manual_kept) + ") overlap " +
              std::to_string(stats.overlap)};
}

Outcome end_to_end_cli() {
  TempDir dir;
  auto bench = fixtures::synthetic_benchmark(60, 4, 8);
  fixtures::write_benchmark(bench, dir / "data", 12);

  httplib::Server server;
  server.Post("/v1/chat/completions", [](const httplib::Request& req, httplib::Response& res) {
    auto model = nlohmann::json::parse(req.body).value("model", std::string{});
    if (model == "judge")
      res.set_content(chat_reply(scene_of(req.body) % 4 == 0 ? "Answer: REJECT" : "Answer: KEEP"), "application/json");
    else
      res.set_content(chat_reply("objects arranged on a wooden table"), "application/json");
  });
  server.Post("/generate", [](const httplib::Request& req, httplib::Response& res) {
    res.set_content(generate_reply(req.body), "application/json");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  const std::string base = "http://127.0.0.1:" + std::to_string(port);

  nlohmann::json profiles{{"profiles", nlohmann::json::object()}};
  nlohmann::json endpoints = {{{"name", "captioner"}, {"base_url", base}},
                              {{"name", "judge"}, {"base_url", base}}};
  nlohmann::json runs = nlohmann::json::array();
  for (std::uint64_t n = 0; n <= 3; ++n) {
    auto name = "n" + std::to_string(n);
    profiles["profiles"][name] = n == 0 ? nlohmann::json{{"kind", "clean"}, {"s_o", 0.5}, {"s_p", 0.6}, {"seed", 1}}
                                        : nlohmann::json{{"kind", "contaminated"}, {"kappa", 0.5}, {"deg", n},
                                                         {"s_o", 0.5}, {"s_p", 0.6}, {"seed", 10 + n},
                                                         {"memorized_benchmark", "data/bench.jsonl"}};
    endpoints.push_back({{"name", name}, {"base_url", "inproc://"}, {"accepts_tags", true}});
    runs.push_back({{"label", name}, {"strategy", "llm"}, {"deg", n}, {"endpoint", name}});
  }
  nlohmann::json sweep{{"dataset", "data/bench.jsonl"},
                       {"image_root", "data"},
                       {"master_seed", 2024},
                       {"workers", 4},
                       {"simulator_profiles", "profiles.json"},
                       {"gateway", {{"endpoints", endpoints}}},
                       {"generator", {{"name", "generator"}, {"base_url", base}}},
                       {"caption_endpoint", "captioner"},
                       {"judge_endpoint", "judge"},
                       {"runs", runs}};
  write_file(dir / "profiles.json", profiles.dump(2));
  write_file(dir / "sweep.json", sweep.dump(2));

  auto run_cli = [&](const std::string& log) {
    std::string cmd = std::string("\"") + AUDIT_CLI + "\" sweep --config \"" + (dir / "sweep.json").string() +
                      "\" --out \"" + (dir / "out").string() + "\" > \"" + (dir / log).string() + "\" 2>&1";
    int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  };
  int first = run_cli("first.log");
  server.stop();
  th.join();
  auto bytes = fs::exists(dir / "out" / "report.json") ? read_file(dir / "out" / "report.json") : std::string{};
  // replay with every service gone: the journals must carry the whole run
  int replay = run_cli("replay.log");
  auto replay_bytes = fs::exists(dir / "out" / "report.json") ? read_file(dir / "out" / "report.json") : std::string{};

  std::string digest = "-";
  std::size_t kept = 0;
  bool flags_ok = false;
  if (!bytes.empty()) {
    auto r = report_from_json(nlohmann::json::parse(bytes));
    digest = report_digest(r).substr(0, 16);
    kept = r.perturbed_size;
    flags_ok = std::all_of(r.runs.begin(), r.runs.end(), [](const RunReport& x) { return x.flagged == (x.deg >= 1); });
  }
  bool pass = first == 2 && replay == 2 && !bytes.empty() && bytes == replay_bytes && flags_ok && kept == 45;
  if (!pass && first != 2) std::cerr << read_file(dir / "first.log");
  if (!pass && replay != 2) std::cerr << read_file(dir / "replay.log");
  return {pass, "exit " + std::to_string(first) + ", replay exit " + std::to_string(replay) + ", " +
                    std::to_string(kept) + " perturbed items kept, flags " + (flags_ok ? "ok" : "wrong") +
                    ", report bytes " + (bytes == replay_bytes ? "identical" : "differ") + ", digest " + digest};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
    double budget_seconds;  // 0 = none stated
  };
  const Criterion criteria[] = {
      {"delta fixture arithmetic", delta_fixture_arithmetic, 1.0},
      {"requirement sweep on simulator", requirement_sweep, 120.0},
      {"canny oracle", canny_oracle, 30.0},
      {"circular-eval property", circular_property, 0.0},
      {"choice-confusion invariants", choice_confusion, 0.0},
      {"shared-likelihood calibration", shared_likelihood, 120.0},
      {"filter accounting", filter_accounting, 0.0},
      {"end-to-end offline pipeline", end_to_end_cli, 0.0},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    bool in_time = c.budget_seconds == 0.0 || secs < c.budget_seconds;
    bool pass = o.pass && in_time;
    failed += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << "  " << c.name << "  [" << o.detail << "; " << fmt(secs) << " s"
              << (c.budget_seconds > 0 ? " of " + fmt(c.budget_seconds, 0) + " s" : std::string{})
              << (in_time ? "" : " OVER BUDGET") << "]\n"
              << std::flush;
  }
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << std::size(criteria) - failed << "/" << std::size(criteria)
            << "\n";
  return failed ? 1 : 0;
}
