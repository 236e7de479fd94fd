#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmaudit/benchmark_store.hpp"
#include "vlmaudit/core.hpp"
#include "vlmaudit/edges.hpp"
#include "vlmaudit/fileio.hpp"
#include "vlmaudit/gateway.hpp"
#include "vlmaudit/hashing.hpp"
#include "vlmaudit/image.hpp"
#include "vlmaudit/journal.hpp"
#include "vlmaudit/parallel.hpp"

namespace vlmaudit {

namespace fs = std::filesystem;

inline constexpr int kGenerationSteps = 25;
inline constexpr double kCaptionTemperature = 0.3;
inline constexpr int kCaptionMaxTokens = 800;

inline const std::string kCaptionSystemPrompt =
    "Your job is to generate a text-to-image prompt that can be used with a diffusion model. Based on the question "
    "and answer, write a detailed caption so that all necessary details are included and the question remains "
    "solvable.\n\n"
    "Additionally, modify the image so that the correct answer changes. For example, if the question asks “How "
    "many people are in the image?”, change the image to have more people.";

// ---------------------------------------------------------------------------
// Record state machine
// ---------------------------------------------------------------------------

enum class Status { Pending, Generated, AutoKept, AutoRejected, ManualKept, ManualRejected, Failed };

inline std::string to_string(Status s) {
  switch (s) {
    case Status::Pending: return "pending";
    case Status::Generated: return "generated";
    case Status::AutoKept: return "auto_kept";
    case Status::AutoRejected: return "auto_rejected";
    case Status::ManualKept: return "manual_kept";
    case Status::ManualRejected: return "manual_rejected";
    case Status::Failed: return "failed";
  }
  return "pending";
}

inline Status parse_status(const std::string& s) {
  for (auto st : {Status::Pending, Status::Generated, Status::AutoKept, Status::AutoRejected, Status::ManualKept,
                  Status::ManualRejected, Status::Failed})
    if (to_string(st) == s) return st;
  throw Error(ErrorKind::MalformedRecord, "unknown status '" + s + "'");
}

/// Forward-only transitions. Manual decisions may be revised (one reviewer
/// undoing their own call), which moves sideways, never back.
inline bool can_transition(Status from, Status to) {
  switch (from) {
    case Status::Pending: return to == Status::Generated || to == Status::Failed;
    case Status::Generated:
      return to == Status::AutoKept || to == Status::AutoRejected || to == Status::ManualKept ||
             to == Status::ManualRejected || to == Status::Failed;
    case Status::AutoKept:
    case Status::AutoRejected: return to == Status::ManualKept || to == Status::ManualRejected;
    case Status::ManualKept: return to == Status::ManualRejected;
    case Status::ManualRejected: return to == Status::ManualKept;
    case Status::Failed: return false;
  }
  return false;
}

enum class Verdict { Keep, Reject };

inline std::string to_string(Verdict v) { return v == Verdict::Keep ? "keep" : "reject"; }

inline Verdict parse_verdict_word(const std::string& s) {
  if (s == "keep") return Verdict::Keep;
  if (s == "reject") return Verdict::Reject;
  throw Error(ErrorKind::InvalidArgument, "verdict must be keep|reject");
}

struct GenParams {
  int steps = kGenerationSteps;
  int width = 0;
  int height = 0;
  std::uint64_t seed = 0;
  bool operator==(const GenParams&) const = default;
};

struct PerturbationRecord {
  std::string item_id;
  char original_answer = 'A';
  char new_answer = 'A';
  std::string caption_prompt;
  std::string caption;
  std::string edge_map_ref;
  std::string generated_image_ref;
  GenParams gen_params;
  CannyParams canny;
  Status status = Status::Pending;
  std::string failure_reason;
  std::optional<Verdict> auto_verdict;
  std::string auto_raw_response;
  std::string auto_reviewer;
  std::optional<Verdict> manual_verdict;
  std::string manual_reviewer;
  std::int64_t created_at = 0;
  std::int64_t updated_at = 0;

  bool operator==(const PerturbationRecord&) const = default;
};

inline std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

inline nlohmann::json to_json(const PerturbationRecord& r) {
  auto opt_verdict = [](const std::optional<Verdict>& v) {
    return v ? nlohmann::json(to_string(*v)) : nlohmann::json(nullptr);
  };
  return {{"item_id", r.item_id},
          {"original_answer", std::string(1, r.original_answer)},
          {"new_answer", std::string(1, r.new_answer)},
          {"caption_prompt", r.caption_prompt},
          {"caption", r.caption},
          {"edge_map_ref", r.edge_map_ref},
          {"generated_image_ref", r.generated_image_ref},
          {"gen_params",
           {{"steps", r.gen_params.steps},
            {"width", r.gen_params.width},
            {"height", r.gen_params.height},
            {"seed", r.gen_params.seed}}},
          {"canny",
           {{"sigma", r.canny.sigma},
            {"kernel_radius", r.canny.kernel_radius},
            {"low", r.canny.low_threshold},
            {"high", r.canny.high_threshold}}},
          {"status", to_string(r.status)},
          {"failure_reason", r.failure_reason},
          {"auto_verdict", opt_verdict(r.auto_verdict)},
          {"auto_raw_response", r.auto_raw_response},
          {"auto_reviewer", r.auto_reviewer},
          {"manual_verdict", opt_verdict(r.manual_verdict)},
          {"manual_reviewer", r.manual_reviewer},
          {"created_at", r.created_at},
          {"updated_at", r.updated_at}};
}

inline PerturbationRecord record_from_json(const nlohmann::json& j) {
  auto opt_verdict = [](const nlohmann::json& v) -> std::optional<Verdict> {
    if (v.is_null()) return std::nullopt;
    return parse_verdict_word(v.get<std::string>());
  };
  PerturbationRecord r;
  r.item_id = j.at("item_id").get<std::string>();
  r.original_answer = j.at("original_answer").get<std::string>().at(0);
  r.new_answer = j.at("new_answer").get<std::string>().at(0);
  r.caption_prompt = j.at("caption_prompt").get<std::string>();
  r.caption = j.at("caption").get<std::string>();
  r.edge_map_ref = j.at("edge_map_ref").get<std::string>();
  r.generated_image_ref = j.at("generated_image_ref").get<std::string>();
  const auto& g = j.at("gen_params");
  r.gen_params = {g.at("steps").get<int>(), g.at("width").get<int>(), g.at("height").get<int>(),
                  g.at("seed").get<std::uint64_t>()};
  const auto& c = j.at("canny");
  r.canny = {c.at("sigma").get<double>(), c.at("kernel_radius").get<int>(), c.at("low").get<double>(),
             c.at("high").get<double>()};
  r.status = parse_status(j.at("status").get<std::string>());
  r.failure_reason = j.at("failure_reason").get<std::string>();
  r.auto_verdict = opt_verdict(j.at("auto_verdict"));
  r.auto_raw_response = j.at("auto_raw_response").get<std::string>();
  r.auto_reviewer = j.at("auto_reviewer").get<std::string>();
  r.manual_verdict = opt_verdict(j.at("manual_verdict"));
  r.manual_reviewer = j.at("manual_reviewer").get<std::string>();
  r.created_at = j.at("created_at").get<std::int64_t>();
  r.updated_at = j.at("updated_at").get<std::int64_t>();
  return r;
}

/// In-memory view of a run's perturbation records, backed by an append-only
/// journal. Each journal line is a full record snapshot plus `event` and `ts`,
/// so replay is "last line per item wins".
class RecordStore {
 public:
  explicit RecordStore(const fs::path& journal_path) {
    for (const auto& line : read_journal(journal_path)) apply(record_from_json(line));
    journal_ = std::make_unique<Journal>(journal_path);
  }

  std::optional<PerturbationRecord> get(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = records_.find(id);
    if (it == records_.end()) return std::nullopt;
    return it->second;
  }

  /// Journals `record` under `event` and makes it the current state.
  PerturbationRecord put(PerturbationRecord record, const std::string& event, const nlohmann::json& extra = nullptr) {
    record.updated_at = now_ms();
    auto line = to_json(record);
    line["event"] = event;
    line["ts"] = record.updated_at;
    if (!extra.is_null()) line["detail"] = extra;
    std::lock_guard lock(mu_);
    journal_->append(line);
    apply(record);
    return record;
  }

  /// Applies a status change, enforcing the transition table.
  PerturbationRecord transition(PerturbationRecord record, Status to, const std::string& event,
                                const nlohmann::json& extra = nullptr) {
    if (!can_transition(record.status, to))
      throw Error(ErrorKind::WrongStatus, record.item_id + ": " + to_string(record.status) + " -> " + to_string(to));
    record.status = to;
    return put(std::move(record), event, extra);
  }

  std::vector<PerturbationRecord> all() const {
    std::lock_guard lock(mu_);
    std::vector<PerturbationRecord> out;
    out.reserve(order_.size());
    for (const auto& id : order_) out.push_back(records_.at(id));
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return records_.size();
  }

  const fs::path& journal_path() const { return journal_->path(); }

 private:
  void apply(PerturbationRecord r) {
    auto [it, inserted] = records_.insert_or_assign(r.item_id, std::move(r));
    if (inserted) order_.push_back(it->first);
  }

  mutable std::mutex mu_;
  std::map<std::string, PerturbationRecord> records_;
  std::vector<std::string> order_;
  std::unique_ptr<Journal> journal_;
};

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Uniform over the item's letters other than the current answer.
inline char resample_answer(const BenchmarkItem& item, std::mt19937_64& rng) {
  if (item.options.size() < 2) throw Error(ErrorKind::SingleOption, item.id);
  std::uniform_int_distribution<std::size_t> pick(0, item.options.size() - 2);
  std::size_t idx = pick(rng);
  if (idx >= item.answer_index()) ++idx;
  return letter_at(idx);
}

inline std::string format_options(const BenchmarkItem& item) {
  std::string out;
  for (const auto& o : item.options) {
    out += o.letter;
    out += ". ";
    out += o.text;
    out += "\n";
  }
  return out;
}

struct CaptionRequest {
  std::string system_prompt;
  std::string user_text;
  std::string image_bytes;
  std::string image_mime = "image/png";
  double temperature = kCaptionTemperature;
  int max_tokens = kCaptionMaxTokens;

  ChatRequest to_chat(const std::string& endpoint, const std::string& tag) const {
    ChatRequest req;
    req.endpoint = endpoint;
    req.temperature = temperature;
    req.max_tokens = max_tokens;
    req.request_tag = tag;
    req.messages.push_back({Role::System, {ContentPart::make_text(system_prompt)}});
    ChatMessage user{Role::User, {ContentPart::make_text(user_text)}};
    if (!image_bytes.empty()) user.parts.push_back(ContentPart::make_image(image_bytes, image_mime));
    req.messages.push_back(std::move(user));
    return req;
  }
};

inline CaptionRequest build_caption_prompt(const BenchmarkItem& item, char new_answer, std::string image_bytes = {}) {
  auto idx = letter_index(new_answer, item.options.size());
  if (!idx || new_answer == item.answer_letter)
    throw Error(ErrorKind::InvalidArgument, item.id + ": new answer must be a different option letter");
  CaptionRequest req;
  req.system_prompt = kCaptionSystemPrompt;
  req.user_text = "Question: " + item.question + "\nOptions:\n" + format_options(item) + "New answer: " +
                  std::string(1, new_answer) + ". " + item.options[*idx].text;
  if (!image_bytes.empty()) req.image_mime = image_mime(image_bytes);
  req.image_bytes = std::move(image_bytes);
  return req;
}

inline std::string request_caption(ModelGateway& gateway, const std::string& endpoint, const CaptionRequest& req,
                                   const std::string& tag = {}) {
  auto resp = gateway.chat_complete(req.to_chat(endpoint, tag));
  if (resp.text.find_first_not_of(" \t\r\n") == std::string::npos) throw Error(ErrorKind::EmptyCaption, tag);
  return resp.text;
}

struct GenerationRequest {
  std::string caption;
  std::string control_png;  // encoded edge map
  int width = 0;
  int height = 0;
  int steps = kGenerationSteps;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const GenerationRequest& r) {
  return {{"caption", r.caption},
          {"control_png_b64", base64_encode(r.control_png)},
          {"width", r.width},
          {"height", r.height},
          {"steps", r.steps},
          {"seed", r.seed}};
}

/// Client for the structure-conditioned generation service:
/// POST {base}/generate {caption, control_png_b64, width, height, steps, seed} -> {image_png_b64}.
class GenerationClient {
 public:
  GenerationClient(EndpointConfig endpoint, std::shared_ptr<Transport> transport)
      : endpoint_(std::move(endpoint)), transport_(std::move(transport)) {}

  /// Returns the encoded image bytes.
  std::string generate(const GenerationRequest& req) {
    std::string body = to_json(req).dump();
    HttpResult res;
    for (int attempt = 1; attempt <= endpoint_.retry.max_attempts; ++attempt) {
      res = transport_->post(endpoint_, "/generate", body, {{"Content-Type", "application/json"}});
      if (res.status == 200 || !endpoint_.retry.retryable_status(res.status)) break;
    }
    if (res.status != 200) throw Error(ErrorKind::GenerationError, "HTTP " + std::to_string(res.status));
    try {
      return base64_decode(nlohmann::json::parse(res.body).at("image_png_b64").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::GenerationError, std::string("malformed response: ") + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::GenerationError, e.what());
    }
  }

  const EndpointConfig& endpoint() const { return endpoint_; }

 private:
  EndpointConfig endpoint_;
  std::shared_ptr<Transport> transport_;
};

/// Requests an image at the edge map's resolution and writes it to `out_path`.
/// The returned image must come back at exactly that resolution.
inline GenParams request_generation(GenerationClient& client, const std::string& caption, const EdgeMap& edges,
                                    std::uint64_t seed, const fs::path& out_path) {
  GenerationRequest req{caption, encode_png(edges), edges.width, edges.height, kGenerationSteps, seed};
  std::string bytes = client.generate(req);
  RgbImage img;
  try {
    img = decode_image(bytes);
  } catch (const Error&) {
    throw Error(ErrorKind::GenerationError, "generated image is not decodable");
  }
  if (img.width != edges.width || img.height != edges.height)
    throw Error(ErrorKind::DimensionMismatch, std::to_string(img.width) + "x" + std::to_string(img.height) +
                                                  " != " + std::to_string(edges.width) + "x" +
                                                  std::to_string(edges.height));
  write_file(out_path, bytes);
  return {kGenerationSteps, edges.width, edges.height, seed};
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

struct PipelineDeps {
  ModelGateway* gateway = nullptr;
  std::string caption_endpoint;
  GenerationClient* generator = nullptr;
  RecordStore* store = nullptr;
  fs::path image_root;
  fs::path run_dir;
  CannyParams canny;
  std::uint64_t master_seed = 0;
};

inline std::string file_stem_for(const std::string& item_id) {
  return safe_stem(item_id) + "-" + sha256_hex(item_id).substr(0, 8);
}

/// Runs resample -> caption prompt -> caption -> edges -> generation for one
/// item, journaling after every stage. Records already at Generated or later
/// are returned untouched; Pending (interrupted) and Failed records restart.
inline PerturbationRecord perturb_item(const BenchmarkItem& item, const PipelineDeps& deps) {
  auto& store = *deps.store;
  if (auto existing = store.get(item.id);
      existing && existing->status != Status::Pending && existing->status != Status::Failed)
    return *existing;

  PerturbationRecord rec;
  rec.item_id = item.id;
  rec.original_answer = item.answer_letter;
  rec.canny = deps.canny;
  rec.created_at = now_ms();
  std::mt19937_64 answer_rng(derive_seed(deps.master_seed, {item.id, "answer"}));
  rec.new_answer = resample_answer(item, answer_rng);
  rec.gen_params.seed = derive_seed(deps.master_seed, {item.id, "generation"});
  store.put(rec, "started");

  auto fail = [&](const std::string& stage, const std::string& why) {
    rec.failure_reason = stage;
    return store.transition(rec, Status::Failed, "failed", {{"stage", stage}, {"error", why}});
  };

  std::string image_bytes;
  RgbImage original;
  try {
    image_bytes = read_file(deps.image_root / item.image_ref);
    original = decode_image(image_bytes);
  } catch (const Error& e) {
    return fail("image", e.what());
  }
  rec.gen_params.width = original.width;
  rec.gen_params.height = original.height;

  try {
    auto req = build_caption_prompt(item, rec.new_answer, image_bytes);
    rec.caption_prompt = req.user_text;
    rec.caption = request_caption(*deps.gateway, deps.caption_endpoint, req, item.id + "/caption");
  } catch (const Error& e) {
    return fail("caption", e.what());
  }
  store.put(rec, "captioned");

  EdgeMap edges;
  try {
    edges = canny(original, deps.canny);
    rec.edge_map_ref = "edges/" + file_stem_for(item.id) + ".png";
    write_file(deps.run_dir / rec.edge_map_ref, encode_png(edges));
  } catch (const Error& e) {
    return fail("edges", e.what());
  }
  store.put(rec, "edges");

  try {
    auto ref = "generated/" + file_stem_for(item.id) + ".png";
    rec.gen_params = request_generation(*deps.generator, rec.caption, edges, rec.gen_params.seed, deps.run_dir / ref);
    rec.generated_image_ref = ref;
  } catch (const Error& e) {
    return fail("generation", e.what());
  }
  return store.transition(rec, Status::Generated, "generated");
}

/// Perturbs every item on a bounded worker pool; per-item failures are
/// recorded on the records, not thrown.
inline std::vector<PerturbationRecord> perturb_all(const Benchmark& b, const PipelineDeps& deps, std::size_t workers) {
  std::vector<PerturbationRecord> out(b.size());
  parallel_for(b.size(), workers, [&](std::size_t i) { out[i] = perturb_item(b.items[i], deps); });
  return out;
}

}  // namespace vlmaudit
