#include <gtest/gtest.h>

#include <atomic>
#include <regex>
#include <thread>

#include "support/fixtures.hpp"
#include "vlmaudit/pipeline.hpp"
#include "vlmaudit/filter.hpp"
#include "vlmaudit/review_server.hpp"

using namespace vlmaudit;
using fixtures::TempDir;

namespace {

int scene_of(const std::string& body) {
  static const std::regex kScene(R"(In scene (\d+) )");
  std::smatch m;
  if (!std::regex_search(body, m, kScene)) return -1;
  return std::stoi(m[1]);
}

std::string png_b64(int w, int h, std::uint64_t seed) {
  return base64_encode(encode_png(fixtures::noise_image(w, h, seed)));
}

/// Mock services for one run directory: a caption endpoint, a judge endpoint
/// and the generation service. Behaviour is scripted per test.
struct Services {
  std::atomic<int> caption_calls{0}, judge_calls{0}, generate_calls{0};
  std::function<HttpResult(int scene)> caption = [](int) {
    return HttpResult{200, R"({"choices":[{"message":{"content":"a dense caption"}}]})"};
  };
  std::function<std::string(int scene)> judge = [](int) { return std::string("Answer: KEEP"); };
  std::function<std::pair<int, int>(int w, int h)> gen_size = [](int w, int h) { return std::pair{w, h}; };
  std::vector<nlohmann::json> generate_bodies;
  std::mutex mu;

  std::shared_ptr<Transport> transport() {
    return std::make_shared<FunctionTransport>(
        [this](const EndpointConfig& ep, const std::string& path, const std::string& body, const Headers&) {
          if (path == "/generate") {
            ++generate_calls;
            auto j = nlohmann::json::parse(body);
            {
              std::lock_guard lock(mu);
              generate_bodies.push_back(j);
            }
            auto [w, h] = gen_size(j["width"], j["height"]);
            return HttpResult{200, nlohmann::json{{"image_png_b64", png_b64(w, h, j["seed"])}}.dump()};
          }
          if (ep.name == "judge") {
            ++judge_calls;
            nlohmann::json r{{"choices", {{{"message", {{"content", judge(scene_of(body))}}}}}}};
            return HttpResult{200, r.dump()};
          }
          ++caption_calls;
          return caption(scene_of(body));
        });
  }
};

struct Harness {
  TempDir dir;
  Benchmark bench;
  Services services;
  std::shared_ptr<Transport> transport = services.transport();
  std::unique_ptr<Journal> gateway_journal;
  std::unique_ptr<ModelGateway> gateway;
  std::unique_ptr<GenerationClient> generator;
  std::unique_ptr<RecordStore> store;
  PipelineDeps deps;

  explicit Harness(std::size_t n, std::uint64_t seed = 42, int image_size = 12) {
    bench = fixtures::synthetic_benchmark(n, 4, 3);
    fixtures::write_benchmark(bench, dir / "data", image_size);
    gateway_journal = std::make_unique<Journal>(dir / "gateway.jsonl");
    gateway = std::make_unique<ModelGateway>(
        GatewayConfig{{make_endpoint("captioner", "inproc://", false), make_endpoint("judge", "inproc://", false)}},
        transport, gateway_journal.get());
    generator = std::make_unique<GenerationClient>(make_endpoint("generator"), transport);
    reopen();
    deps.gateway = gateway.get();
    deps.caption_endpoint = "captioner";
    deps.generator = generator.get();
    deps.image_root = dir / "data";
    deps.run_dir = dir / "run";
    deps.master_seed = seed;
  }

  void reopen() {
    store.reset();
    store = std::make_unique<RecordStore>(dir / "run" / "perturb.jsonl");
    deps.store = store.get();
  }
};

/// Drops a Generated record (plus its image) straight into the store.
PerturbationRecord seed_generated(RecordStore& store, const BenchmarkItem& item, const fs::path& run_dir) {
  PerturbationRecord r;
  r.item_id = item.id;
  r.original_answer = item.answer_letter;
  std::mt19937_64 rng(derive_seed(1, {item.id}));
  r.new_answer = resample_answer(item, rng);
  r.generated_image_ref = "generated/" + file_stem_for(item.id) + ".png";
  fixtures::write_png(run_dir / r.generated_image_ref, fixtures::noise_image(8, 8, 1));
  r.gen_params = {kGenerationSteps, 8, 8, 1};
  store.put(r, "started");
  return store.transition(r, Status::Generated, "generated");
}

std::string user_text(const ChatRequest& req) {
  for (const auto& m : req.messages)
    if (m.role == Role::User)
      for (const auto& p : m.parts)
        if (p.kind == PartKind::Text) return p.text;
  return {};
}

}  // namespace

// ---------------------------------------------------------------------------
// resample_answer
// ---------------------------------------------------------------------------

TEST(ResampleAnswer, ExcludesCurrentAnswer) {
  auto b = fixtures::synthetic_benchmark(1, 3, 0);
  auto item = b.items[0];
  item.answer_letter = 'B';
  for (std::uint64_t s = 0; s < 200; ++s) {
    std::mt19937_64 rng(s);
    char c = resample_answer(item, rng);
    EXPECT_TRUE(c == 'A' || c == 'C');
  }
  auto two = fixtures::synthetic_benchmark(1, 2, 0).items[0];
  two.answer_letter = 'A';
  std::mt19937_64 rng(9);
  EXPECT_EQ(resample_answer(two, rng), 'B');
}

TEST(ResampleAnswer, SingleOption) {
  auto item = fixtures::synthetic_benchmark(1, 2, 0).items[0];
  item.options.resize(1);
  item.answer_letter = 'A';
  std::mt19937_64 rng(0);
  try {
    resample_answer(item, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SingleOption);
  }
}

TEST(ResampleAnswer, UniformOverAlternatives) {
  auto item = fixtures::synthetic_benchmark(1, 4, 0).items[0];
  item.answer_letter = 'C';
  std::map<char, std::size_t> counts;
  for (std::uint64_t s = 0; s < 12000; ++s) {
    std::mt19937_64 rng(s);
    ++counts[resample_answer(item, rng)];
  }
  ASSERT_EQ(counts.size(), 3u);
  EXPECT_EQ(counts.count('C'), 0u);
  double stat = 0;
  for (auto [letter, c] : counts) stat += (c - 4000.0) * (c - 4000.0) / 4000.0;
  // upper 0.001 quantile of chi-square with 2 dof is -2 ln(0.001)
  EXPECT_LT(stat, -2.0 * std::log(0.001));
}

TEST(ResampleAnswer, DeterministicGivenSeed) {
  auto item = fixtures::synthetic_benchmark(1, 5, 0).items[0];
  for (std::uint64_t s = 0; s < 50; ++s) {
    std::mt19937_64 a(s), b(s);
    EXPECT_EQ(resample_answer(item, a), resample_answer(item, b));
  }
}

// ---------------------------------------------------------------------------
// Caption prompt and caption request
// ---------------------------------------------------------------------------

TEST(CaptionPrompt, CarriesAppendixInstructionAndNewAnswer) {
  auto item = fixtures::synthetic_benchmark(1, 4, 0).items[0];
  item.answer_letter = 'A';
  auto req = build_caption_prompt(item, 'C', encode_png(fixtures::noise_image(4, 4, 0)));
  EXPECT_NE(req.system_prompt.find("modify the image so that the correct answer changes"), std::string::npos);
  EXPECT_NE(req.system_prompt.find("write a detailed caption so that all necessary details are included"),
            std::string::npos);
  EXPECT_NE(req.user_text.find(item.question), std::string::npos);
  for (const auto& o : item.options) EXPECT_NE(req.user_text.find(o.text), std::string::npos);
  EXPECT_NE(req.user_text.find("New answer: C. " + item.options[2].text), std::string::npos);
  EXPECT_DOUBLE_EQ(req.temperature, 0.3);
  EXPECT_EQ(req.max_tokens, 800);

  auto chat = req.to_chat("captioner", "t");
  EXPECT_DOUBLE_EQ(chat.temperature, 0.3);
  EXPECT_EQ(chat.max_tokens, 800);
  ASSERT_EQ(chat.messages.size(), 2u);
  EXPECT_EQ(chat.messages[0].parts[0].text, kCaptionSystemPrompt);
  ASSERT_EQ(chat.messages[1].parts.size(), 2u);
  EXPECT_EQ(chat.messages[1].parts[1].kind, PartKind::Image);
  EXPECT_EQ(chat.messages[1].parts[1].data_url.rfind("data:image/png;base64,", 0), 0u);

  EXPECT_THROW(build_caption_prompt(item, 'A'), Error);
  EXPECT_THROW(build_caption_prompt(item, 'F'), Error);
}

TEST(RequestCaption, PassesThroughCannedCaption) {
  Harness h(1);
  auto req = build_caption_prompt(h.bench.items[0], h.bench.items[0].answer_letter == 'A' ? 'B' : 'A');
  EXPECT_EQ(request_caption(*h.gateway, "captioner", req), "a dense caption");
}

TEST(RequestCaption, EmptyCaptionFailsRecordAndSkipsGeneration) {
  Harness h(1);
  h.services.caption = [](int) { return HttpResult{200, R"({"choices":[{"message":{"content":"  \n"}}]})"}; };
  auto rec = perturb_item(h.bench.items[0], h.deps);
  EXPECT_EQ(rec.status, Status::Failed);
  EXPECT_EQ(rec.failure_reason, "caption");
  EXPECT_EQ(h.services.generate_calls.load(), 0);
  auto events = read_journal(h.store->journal_path());
  ASSERT_FALSE(events.empty());
  EXPECT_EQ(events.back()["event"], "failed");
  EXPECT_NE(events.back()["detail"]["error"].get<std::string>().find("EmptyCaption"), std::string::npos);
}

TEST(RequestCaption, RetriesAreJournaled) {
  Harness h(1);
  std::atomic<int> n{0};
  h.services.caption = [&](int) {
    if (n++ < 2) return HttpResult{429, "{}"};
    return HttpResult{200, R"({"choices":[{"message":{"content":"third time"}}]})"};
  };
  auto rec = perturb_item(h.bench.items[0], h.deps);
  EXPECT_EQ(rec.status, Status::Generated);
  EXPECT_EQ(rec.caption, "third time");
  auto lines = read_journal(h.dir / "gateway.jsonl");
  ASSERT_EQ(lines.size(), 1u);
  EXPECT_EQ(lines[0]["statuses"], nlohmann::json({429, 429, 200}));
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

TEST(RequestGeneration, WireContractAndResolution) {
  Harness h(1);
  EdgeMap edges(64, 48);
  auto params = request_generation(*h.generator, "cap", edges, 77, h.dir / "out.png");
  EXPECT_EQ(params.steps, 25);
  EXPECT_EQ(params.width, 64);
  EXPECT_EQ(params.height, 48);
  ASSERT_EQ(h.services.generate_bodies.size(), 1u);
  const auto& body = h.services.generate_bodies[0];
  EXPECT_EQ(body["steps"], 25);
  EXPECT_EQ(body["width"], 64);
  EXPECT_EQ(body["height"], 48);
  EXPECT_EQ(body["seed"], 77);
  EXPECT_EQ(body["caption"], "cap");
  auto control = decode_gray(base64_decode(body["control_png_b64"].get<std::string>()));
  EXPECT_EQ(control.width, 64);
  auto img = read_image(h.dir / "out.png");
  EXPECT_EQ(img.width, 64);
  EXPECT_EQ(img.height, 48);
}

TEST(RequestGeneration, WrongSizeIsDimensionMismatch) {
  Harness h(1);
  h.services.gen_size = [](int, int) { return std::pair{16, 16}; };
  try {
    request_generation(*h.generator, "cap", EdgeMap(20, 12), 1, h.dir / "out.png");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimensionMismatch);
  }
  EXPECT_FALSE(fs::exists(h.dir / "out.png"));
  auto rec = perturb_item(h.bench.items[0], h.deps);
  EXPECT_EQ(rec.status, Status::Failed);
  EXPECT_EQ(rec.failure_reason, "generation");
}

TEST(RequestGeneration, ServiceErrors) {
  auto t = std::make_shared<FunctionTransport>([](auto&, auto&, auto&, auto&) { return HttpResult{400, "bad"}; });
  GenerationClient bad(make_endpoint("g"), t);
  EXPECT_THROW(request_generation(bad, "c", EdgeMap(4, 4), 0, "/nonexistent/x.png"), Error);
  auto junk = std::make_shared<FunctionTransport>(
      [](auto&, auto&, auto&, auto&) { return HttpResult{200, R"({"image_png_b64":"bm90IGFuIGltYWdl"})"}; });
  GenerationClient garbage(make_endpoint("g"), junk);
  try {
    request_generation(garbage, "c", EdgeMap(4, 4), 0, "/nonexistent/x.png");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::GenerationError);
  }
}

// ---------------------------------------------------------------------------
// perturb_item / perturb_all
// ---------------------------------------------------------------------------

TEST(PerturbItem, HealthyServicesGiveGeneratedRecord) {
  Harness h(1, 42, 20);
  const auto& item = h.bench.items[0];
  auto rec = perturb_item(item, h.deps);
  ASSERT_EQ(rec.status, Status::Generated) << rec.failure_reason;
  EXPECT_NE(rec.new_answer, rec.original_answer);
  EXPECT_TRUE(letter_index(rec.new_answer, item.options.size()));
  EXPECT_EQ(rec.caption, "a dense caption");
  EXPECT_EQ(rec.gen_params.steps, 25);
  EXPECT_EQ(rec.gen_params.width, 20);
  EXPECT_EQ(rec.gen_params.height, 20);
  EXPECT_EQ(read_image(h.deps.run_dir / rec.generated_image_ref).width, 20);
  EXPECT_EQ(decode_gray(read_file(h.deps.run_dir / rec.edge_map_ref)).height, 20);
  EXPECT_NE(rec.caption_prompt.find("New answer: "), std::string::npos);

  std::vector<std::string> events;
  for (const auto& l : read_journal(h.store->journal_path())) events.push_back(l["event"]);
  EXPECT_EQ(events, (std::vector<std::string>{"started", "captioned", "edges", "generated"}));
}

TEST(PerturbItem, RerunIsNoOp) {
  Harness h(1);
  auto first = perturb_item(h.bench.items[0], h.deps);
  int calls = h.services.caption_calls + h.services.generate_calls;
  auto lines = read_journal(h.store->journal_path()).size();
  auto again = perturb_item(h.bench.items[0], h.deps);
  EXPECT_EQ(first, again);
  EXPECT_EQ(h.services.caption_calls + h.services.generate_calls, calls);
  EXPECT_EQ(read_journal(h.store->journal_path()).size(), lines);
}

TEST(PerturbItem, MissingImageFails) {
  Harness h(1);
  fs::remove(h.dir / "data" / "img" / "shared.png");
  auto rec = perturb_item(h.bench.items[0], h.deps);
  EXPECT_EQ(rec.status, Status::Failed);
  EXPECT_EQ(rec.failure_reason, "image");
  EXPECT_EQ(h.services.caption_calls.load(), 0);
}

TEST(PerturbItem, FailedAndInterruptedRecordsRestart) {
  Harness h(2);
  h.services.caption = [](int) { return HttpResult{401, "{}"}; };
  EXPECT_EQ(perturb_item(h.bench.items[0], h.deps).status, Status::Failed);
  // a crash right after "started" leaves a Pending record behind
  PerturbationRecord pending;
  pending.item_id = h.bench.items[1].id;
  pending.original_answer = h.bench.items[1].answer_letter;
  pending.new_answer = pending.original_answer == 'A' ? 'B' : 'A';
  h.store->put(pending, "started");

  h.services.caption = Services{}.caption;
  h.reopen();
  auto all = perturb_all(h.bench, h.deps, 2);
  for (const auto& r : all) EXPECT_EQ(r.status, Status::Generated);
}

TEST(PerturbAll, JournalReplayReconstructsState) {
  Harness h(24);
  h.services.caption = [](int scene) {
    if (scene % 5 == 0) return HttpResult{200, R"({"choices":[{"message":{"content":""}}]})"};
    return HttpResult{200, R"({"choices":[{"message":{"content":"cap"}}]})"};
  };
  auto out = perturb_all(h.bench, h.deps, 4);
  std::size_t failed = 0;
  for (const auto& r : out) {
    failed += r.status == Status::Failed;
    if (r.status == Status::Generated) {
      EXPECT_NE(r.new_answer, r.original_answer);
      EXPECT_EQ(r.gen_params.steps, 25);
      EXPECT_EQ(r.gen_params.width, 12);
    }
  }
  EXPECT_EQ(failed, 5u);  // scenes 0, 5, 10, 15, 20
  auto live = h.store->all();
  h.reopen();
  auto replayed = h.store->all();
  auto by_id = [](const auto& a, const auto& b) { return a.item_id < b.item_id; };
  std::sort(live.begin(), live.end(), by_id);
  std::sort(replayed.begin(), replayed.end(), by_id);
  EXPECT_EQ(live, replayed);
}

TEST(PerturbAll, SeedFixesAnswersAndGenerationSeeds) {
  auto key = [](std::uint64_t seed, std::size_t workers) {
    Harness h(30, seed);
    std::map<std::string, std::pair<char, std::uint64_t>> out;
    for (const auto& r : perturb_all(h.bench, h.deps, workers)) out[r.item_id] = {r.new_answer, r.gen_params.seed};
    return out;
  };
  auto a = key(7, 1), b = key(7, 4), c = key(8, 4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

// ---------------------------------------------------------------------------
// Record state machine and journal
// ---------------------------------------------------------------------------

TEST(StatusMachine, NoBackwardTransitions) {
  auto stage = [](Status s) {
    switch (s) {
      case Status::Pending: return 0;
      case Status::Generated: return 1;
      case Status::AutoKept:
      case Status::AutoRejected: return 2;
      case Status::ManualKept:
      case Status::ManualRejected: return 3;
      case Status::Failed: return 4;
    }
    return -1;
  };
  const Status all[] = {Status::Pending,    Status::Generated,      Status::AutoKept, Status::AutoRejected,
                        Status::ManualKept, Status::ManualRejected, Status::Failed};
  for (auto from : all)
    for (auto to : all) {
      if (!can_transition(from, to)) continue;
      EXPECT_GE(stage(to), stage(from)) << to_string(from) << "->" << to_string(to);
      if (stage(to) == stage(from)) EXPECT_EQ(stage(from), 3);  // only revising a manual call is sideways
      EXPECT_NE(from, Status::Failed);
    }
  EXPECT_FALSE(can_transition(Status::Pending, Status::AutoKept));
  EXPECT_FALSE(can_transition(Status::AutoKept, Status::Generated));
  EXPECT_TRUE(can_transition(Status::AutoRejected, Status::ManualKept));
}

TEST(StatusMachine, StoreRejectsIllegalTransition) {
  TempDir dir;
  RecordStore store(dir / "p.jsonl");
  PerturbationRecord r;
  r.item_id = "x";
  store.put(r, "started");
  try {
    store.transition(r, Status::ManualKept, "skip");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::WrongStatus);
  }
  EXPECT_EQ(store.get("x")->status, Status::Pending);
}

TEST(PerturbationRecordJson, RoundTrip) {
  PerturbationRecord r;
  r.item_id = "q1";
  r.original_answer = 'B';
  r.new_answer = 'D';
  r.caption = "cap \"quoted\"";
  r.gen_params = {25, 640, 480, 123456789012345ULL};
  r.status = Status::AutoRejected;
  r.auto_verdict = Verdict::Reject;
  r.auto_raw_response = "Answer: REJECT";
  r.created_at = 1;
  r.updated_at = 2;
  EXPECT_EQ(record_from_json(to_json(r)), r);
  auto j = to_json(r);
  j["status"] = "Bogus";
  EXPECT_THROW(record_from_json(j), Error);
}

TEST(RecordStore, TornTailLineIsIgnored) {
  TempDir dir;
  {
    RecordStore store(dir / "p.jsonl");
    PerturbationRecord r;
    r.item_id = "a";
    store.put(r, "started");
  }
  {
    std::ofstream out(dir / "p.jsonl", std::ios::app);
    out << R"({"item_id":"b","stat)";
  }
  RecordStore again(dir / "p.jsonl");
  EXPECT_EQ(again.size(), 1u);
  EXPECT_TRUE(again.get("a"));
}

// ---------------------------------------------------------------------------
// Judge prompt and verdict parsing
// ---------------------------------------------------------------------------

TEST(JudgePrompt, AppendixTextAndNewAnswer) {
  Harness h(1);
  const auto& item = h.bench.items[0];
  auto rec = seed_generated(*h.store, item, h.deps.run_dir);
  auto req = build_judge_prompt(item, rec, "judge", "img");
  const auto& sys = req.messages[0].parts[0].text;
  EXPECT_EQ(sys, kJudgeSystemPrompt);
  EXPECT_NE(sys.find("\"Answer: {ANSWER}\""), std::string::npos);
  EXPECT_NE(sys.find("do NOT take into consideration the quality of the image"), std::string::npos);
  auto text = user_text(req);
  EXPECT_NE(text.find("Correct answer: " + std::string(1, rec.new_answer)), std::string::npos);
  EXPECT_EQ(text.find("Correct answer: " + std::string(1, rec.original_answer)), std::string::npos);
  EXPECT_EQ(req.messages[1].parts.back().kind, PartKind::Image);

  auto pending = rec;
  pending.status = Status::Pending;
  try {
    build_judge_prompt(item, pending, "judge");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::WrongStatus);
  }
}

TEST(ParseJudge, Examples) {
  EXPECT_EQ(parse_judge_response("The options are clear... Answer: KEEP"), Verdict::Keep);
  EXPECT_EQ(parse_judge_response("Answer: reject"), Verdict::Reject);
  EXPECT_EQ(parse_judge_response("Answer: KEEP\nOn reflection it is ambiguous.\nAnswer: REJECT"), Verdict::Reject);
  EXPECT_EQ(parse_judge_response("**Answer:** \"Keep\""), Verdict::Keep);
  for (const char* bad : {"The image looks fine.", "Answer: maybe", ""}) {
    try {
      parse_judge_response(bad);
      FAIL() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::UnparseableVerdict);
    }
  }
}

// ---------------------------------------------------------------------------
// auto_filter, manual decisions, export
// ---------------------------------------------------------------------------

TEST(AutoFilter, CountsAtFullBenchmarkScale) {
  Harness h(765);
  for (const auto& item : h.bench.items) seed_generated(*h.store, item, h.deps.run_dir);
  h.services.judge = [](int scene) { return scene < 294 ? "Looks solvable.\nAnswer: KEEP" : "Answer: REJECT"; };
  auto result = auto_filter(*h.store, h.bench, *h.gateway, "judge", h.deps.run_dir, 8);
  EXPECT_EQ(result.decisions.size(), 765u);
  std::size_t kept = 0, rejected = 0;
  for (const auto& r : h.store->all()) {
    kept += r.status == Status::AutoKept;
    rejected += r.status == Status::AutoRejected;
  }
  EXPECT_EQ(kept, 294u);
  EXPECT_EQ(rejected, 471u);
  for (const auto& d : result.decisions) {
    EXPECT_EQ(d.mode, DecisionMode::Auto);
    EXPECT_EQ(d.reviewer, "judge");
    EXPECT_EQ(parse_judge_response(d.raw_response), d.verdict);
  }

  // a human keeps 440, of which 253 are among the auto keeps
  std::set<std::string> auto_kept, manual_kept;
  for (std::size_t i = 0; i < 765; ++i) {
    const auto& id = h.bench.items[i].id;
    if (i < 294) auto_kept.insert(id);
    bool keep = i < 253 || (i >= 294 && i < 294 + 187);
    manual_decide(*h.store, id, keep ? Verdict::Keep : Verdict::Reject, "reviewer-1");
    if (keep) manual_kept.insert(id);
  }
  auto stats = agreement(auto_kept, manual_kept);
  EXPECT_EQ(stats.auto_kept, 294u);
  EXPECT_EQ(stats.manual_kept, 440u);
  EXPECT_EQ(stats.overlap, 253u);
  EXPECT_NEAR(stats.jaccard, 253.0 / 481.0, 1e-12);
  EXPECT_NEAR(stats.jaccard, 0.526, 5e-4);

  auto manual = export_filtered(*h.store, h.bench, FilterPolicy::ManualOnly);
  EXPECT_EQ(manual.perturbed.size(), 440u);
  auto automatic = export_filtered(*h.store, h.bench, FilterPolicy::AutoOnly);
  EXPECT_EQ(automatic.perturbed.size(), 294u);
  for (const auto& p : manual.perturbed.items) {
    auto rec = h.store->get(p.id);
    EXPECT_EQ(p.answer_letter, rec->new_answer);
    EXPECT_NE(p.answer_letter, h.bench.find(p.id)->answer_letter);
    EXPECT_EQ(p.image_ref, rec->generated_image_ref);
    EXPECT_EQ(p.question, h.bench.find(p.id)->question);
  }
}

TEST(AutoFilter, UnparseableRepliesStayGenerated) {
  Harness h(6);
  for (const auto& item : h.bench.items) seed_generated(*h.store, item, h.deps.run_dir);
  h.services.judge = [](int) { return std::string("I cannot decide."); };
  auto result = auto_filter(*h.store, h.bench, *h.gateway, "judge", h.deps.run_dir);
  EXPECT_TRUE(result.decisions.empty());
  EXPECT_EQ(result.unparseable.size(), 6u);
  for (const auto& r : h.store->all()) EXPECT_EQ(r.status, Status::Generated);
  // they remain eligible for review
  ReviewQueue q(*h.store, h.bench);
  EXPECT_TRUE(q.next("r"));
}

TEST(AutoFilter, EndpointDownAbortsWithConsistentJournal) {
  Harness h(5);
  for (const auto& item : h.bench.items) seed_generated(*h.store, item, h.deps.run_dir);
  auto down = std::make_shared<FunctionTransport>([](auto&, auto&, auto&, auto&) { return HttpResult{503, ""}; });
  ModelGateway gw(GatewayConfig{{make_endpoint("judge")}}, down, nullptr, [](auto) {});
  try {
    auto_filter(*h.store, h.bench, gw, "judge", h.deps.run_dir, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EndpointExhausted);
  }
  auto live = h.store->all();
  h.reopen();
  EXPECT_EQ(h.store->all(), live);
  for (const auto& r : live) EXPECT_EQ(r.status, Status::Generated);
}

TEST(AutoFilter, AlreadyDecidedRecordsAreSkipped) {
  Harness h(4);
  for (const auto& item : h.bench.items) seed_generated(*h.store, item, h.deps.run_dir);
  auto_filter(*h.store, h.bench, *h.gateway, "judge", h.deps.run_dir);
  int calls = h.services.judge_calls;
  auto second = auto_filter(*h.store, h.bench, *h.gateway, "judge", h.deps.run_dir);
  EXPECT_TRUE(second.decisions.empty());
  EXPECT_EQ(h.services.judge_calls.load(), calls);
}

TEST(Agreement, SymmetricAndBounded) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::set<std::string> a, b;
    for (int i = 0; i < 40; ++i) {
      if (rng() % 3 == 0) a.insert(std::to_string(i));
      if (rng() % 2 == 0) b.insert(std::to_string(i));
    }
    auto ab = agreement(a, b), ba = agreement(b, a);
    EXPECT_EQ(ab.overlap, ba.overlap);
    EXPECT_EQ(ab.auto_kept, ba.manual_kept);
    EXPECT_DOUBLE_EQ(ab.jaccard, ba.jaccard);
    EXPECT_LE(ab.overlap, std::min(a.size(), b.size()));
    std::vector<std::string> inter;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
    EXPECT_EQ(ab.overlap, inter.size());
  }
  std::set<std::string> s{"x", "y"};
  EXPECT_DOUBLE_EQ(agreement(s, s).jaccard, 1.0);
}

TEST(ManualDecide, TransitionsAndErrors) {
  Harness h(3);
  auto a = seed_generated(*h.store, h.bench.items[0], h.deps.run_dir);
  auto b = seed_generated(*h.store, h.bench.items[1], h.deps.run_dir);
  h.store->transition(b, Status::AutoRejected, "auto_decision");
  PerturbationRecord failed;
  failed.item_id = h.bench.items[2].id;
  h.store->put(failed, "started");
  h.store->transition(failed, Status::Failed, "failed");

  EXPECT_EQ(manual_decide(*h.store, a.item_id, Verdict::Keep, "ann").status, Status::ManualKept);
  EXPECT_EQ(manual_decide(*h.store, b.item_id, Verdict::Keep, "ann").status, Status::ManualKept);
  auto lines = read_journal(h.store->journal_path()).size();
  manual_decide(*h.store, b.item_id, Verdict::Keep, "ann");
  EXPECT_EQ(read_journal(h.store->journal_path()).size(), lines);
  EXPECT_EQ(manual_decide(*h.store, b.item_id, Verdict::Reject, "bo").status, Status::ManualRejected);
  EXPECT_EQ(h.store->get(b.item_id)->manual_reviewer, "bo");

  try {
    manual_decide(*h.store, failed.item_id, Verdict::Keep, "ann");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::WrongStatus);
  }
  try {
    manual_decide(*h.store, "nope", Verdict::Keep, "ann");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::UnknownItem);
  }
  auto last = read_journal(h.store->journal_path()).back();
  EXPECT_EQ(last["detail"]["reviewer"], "bo");
}

TEST(ExportFiltered, PoliciesAndErrors) {
  Harness h(4);
  std::vector<PerturbationRecord> recs;
  for (std::size_t i = 0; i < 3; ++i) recs.push_back(seed_generated(*h.store, h.bench.items[i], h.deps.run_dir));
  PerturbationRecord failed;
  failed.item_id = h.bench.items[3].id;
  h.store->put(failed, "started");
  h.store->transition(failed, Status::Failed, "failed");

  try {
    export_filtered(*h.store, h.bench, FilterPolicy::AutoOnly);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::IncompleteRun);
  }
  for (auto& r : recs) {
    auto next = r;
    next.auto_verdict = Verdict::Reject;
    h.store->transition(next, Status::AutoRejected, "auto_decision");
  }
  try {
    export_filtered(*h.store, h.bench, FilterPolicy::AutoOnly);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyBenchmark);
  }
  manual_decide(*h.store, recs[1].item_id, Verdict::Keep, "ann");
  auto out = export_filtered(*h.store, h.bench, FilterPolicy::ManualElseAuto);
  EXPECT_EQ(out.kept_ids, (std::set<std::string>{recs[1].item_id}));
  EXPECT_EQ(out.perturbed.items[0].id, recs[1].item_id);
  EXPECT_EQ(out.kept_ids.count(failed.item_id), 0u);
  EXPECT_THROW(export_filtered(*h.store, h.bench, FilterPolicy::ManualOnly), Error);
  EXPECT_EQ(parse_policy("manual-else-auto"), FilterPolicy::ManualElseAuto);
  EXPECT_THROW(parse_policy("vote"), Error);
}

// ---------------------------------------------------------------------------
// Review queue and HTTP API
// ---------------------------------------------------------------------------

TEST(ReviewQueue, LeasesAreDisjointAndExpire) {
  Harness h(3);
  for (const auto& item : h.bench.items) seed_generated(*h.store, item, h.deps.run_dir);
  auto now = std::chrono::steady_clock::time_point{};
  ReviewQueue q(*h.store, h.bench, ReviewOptions{false, std::chrono::seconds(60)}, [&] { return now; });
  auto a = q.next("ann"), b = q.next("bo");
  ASSERT_TRUE(a && b);
  EXPECT_NE((*a)["item_id"], (*b)["item_id"]);
  EXPECT_EQ((*q.next("ann"))["item_id"], (*a)["item_id"]);
  EXPECT_FALSE(a->contains("auto_verdict"));
  auto c = q.next("cy");
  ASSERT_TRUE(c);
  EXPECT_FALSE(q.next("dee"));  // everything leased
  now += std::chrono::seconds(61);
  EXPECT_TRUE(q.next("dee"));

  ReviewQueue shown(*h.store, h.bench, ReviewOptions{true, std::chrono::seconds(60)});
  EXPECT_TRUE(shown.next("x")->contains("auto_verdict"));
}

namespace {

struct ReviewServer {
  httplib::Server server;
  int port = 0;
  std::jthread thread;

  ReviewServer(ReviewQueue& q, const fs::path& images, const fs::path& run) {
    mount_review_api(server, q, images, run);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::jthread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~ReviewServer() { server.stop(); }
  httplib::Client client() const { return httplib::Client("127.0.0.1", port); }
};

}  // namespace

TEST(ReviewApi, FullReviewLoopOverHttp) {
  Harness h(4);
  for (std::size_t i = 0; i < 3; ++i) seed_generated(*h.store, h.bench.items[i], h.deps.run_dir);
  PerturbationRecord failed;
  failed.item_id = h.bench.items[3].id;
  h.store->put(failed, "started");
  h.store->transition(failed, Status::Failed, "failed");

  ReviewQueue q(*h.store, h.bench);
  ReviewServer srv(q, h.deps.image_root, h.deps.run_dir);
  auto cli = srv.client();

  auto progress = nlohmann::json::parse(cli.Get("/api/review/progress")->body);
  EXPECT_EQ(progress, (nlohmann::json{{"total", 3}, {"decided", 0}, {"kept", 0}, {"rejected", 0}}));

  auto res = cli.Get("/api/review/next?reviewer=ann");
  ASSERT_EQ(res->status, 200);
  auto card = nlohmann::json::parse(res->body);
  for (const char* key : {"item_id", "question", "options", "original_answer", "new_answer", "original_image_url",
                          "perturbed_image_url", "remaining"})
    EXPECT_TRUE(card.contains(key)) << key;
  EXPECT_EQ(card["remaining"], 2);
  EXPECT_EQ(card["options"].size(), 4u);

  auto orig = cli.Get(card["original_image_url"].get<std::string>());
  ASSERT_EQ(orig->status, 200);
  EXPECT_EQ(orig->get_header_value("Content-Type"), "image/png");
  EXPECT_EQ(cli.Get(card["perturbed_image_url"].get<std::string>())->status, 200);
  EXPECT_EQ(cli.Get("/assets/original/../bench.jsonl")->status, 404);

  std::string id = card["item_id"];
  auto post = [&](const std::string& item, const std::string& body) {
    return cli.Post(("/api/review/" + item + "/decision").c_str(), body, "application/json");
  };
  EXPECT_EQ(post(id, R"({"verdict":"maybe","reviewer":"ann"})")->status, 400);
  EXPECT_EQ(post(id, "not json")->status, 400);
  EXPECT_EQ(post("nope", R"({"verdict":"keep","reviewer":"ann"})")->status, 404);
  EXPECT_EQ(post(failed.item_id, R"({"verdict":"keep","reviewer":"ann"})")->status, 409);
  auto ok = post(id, R"({"verdict":"keep","reviewer":"ann"})");
  ASSERT_EQ(ok->status, 200);
  EXPECT_EQ(nlohmann::json::parse(ok->body)["status"], "manual_kept");

  for (int i = 0; i < 2; ++i) {
    auto next = nlohmann::json::parse(cli.Get("/api/review/next?reviewer=ann")->body);
    EXPECT_EQ(post(next["item_id"], R"({"verdict":"reject","reviewer":"ann"})")->status, 200);
  }
  EXPECT_EQ(cli.Get("/api/review/next?reviewer=ann")->status, 204);
  progress = nlohmann::json::parse(cli.Get("/api/review/progress")->body);
  EXPECT_EQ(progress, (nlohmann::json{{"total", 3}, {"decided", 3}, {"kept", 1}, {"rejected", 2}}));
}

TEST(ReviewApi, ConcurrentReviewersLoseNoUpdates) {
  Harness h(40);
  for (const auto& item : h.bench.items) seed_generated(*h.store, item, h.deps.run_dir);
  ReviewQueue q(*h.store, h.bench);
  ReviewServer srv(q, h.deps.image_root, h.deps.run_dir);

  std::mutex mu;
  std::multiset<std::string> seen;
  {
    std::vector<std::jthread> reviewers;
    for (int r = 0; r < 4; ++r)
      reviewers.emplace_back([&, r] {
        auto cli = srv.client();
        std::string who = "rev" + std::to_string(r);
        for (;;) {
          auto res = cli.Get(("/api/review/next?reviewer=" + who).c_str());
          if (!res || res->status != 200) break;
          std::string id = nlohmann::json::parse(res->body)["item_id"];
          auto body = nlohmann::json{{"verdict", r % 2 ? "keep" : "reject"}, {"reviewer", who}}.dump();
          auto post = cli.Post(("/api/review/" + id + "/decision").c_str(), body, "application/json");
          ASSERT_EQ(post->status, 200);
          std::lock_guard lock(mu);
          seen.insert(id);
        }
      });
  }
  EXPECT_EQ(seen.size(), 40u);
  EXPECT_EQ(std::set<std::string>(seen.begin(), seen.end()).size(), 40u);  // no card reviewed twice
  h.reopen();
  for (const auto& r : h.store->all()) EXPECT_TRUE(r.manual_verdict) << r.item_id;
}
