#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmaudit/core.hpp"
#include "vlmaudit/hashing.hpp"
#include "vlmaudit/outcome.hpp"

namespace vlmaudit {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Dataset line format: one JSON object per line with fields
//   id, image, question, options (array of strings, letters implicit A..),
//   answer (single letter), source, split.
// ---------------------------------------------------------------------------

inline nlohmann::json item_to_json(const BenchmarkItem& item) {
  nlohmann::json j;
  j["id"] = item.id;
  j["image"] = item.image_ref;
  j["question"] = item.question;
  j["options"] = item.option_texts();
  j["answer"] = std::string(1, item.answer_letter);
  j["source"] = item.source;
  j["split"] = item.split;
  return j;
}

inline std::string item_to_line(const BenchmarkItem& item) { return item_to_json(item).dump(); }

inline BenchmarkItem item_from_json(const nlohmann::json& j) {
  BenchmarkItem item;
  item.id = j.at("id").get<std::string>();
  item.image_ref = j.at("image").get<std::string>();
  item.question = j.at("question").get<std::string>();
  item.options = make_options(j.at("options").get<std::vector<std::string>>());
  auto answer = j.at("answer").get<std::string>();
  if (answer.size() != 1) throw Error(ErrorKind::AnswerNotInOptions, item.id);
  item.answer_letter = answer[0];
  item.source = j.value("source", std::string{});
  item.split = j.value("split", std::string{});
  return item;
}

/// Parses one dataset line. Structural problems become MalformedRecord(line),
/// invariant violations keep their own kind.
inline BenchmarkItem parse_record(const std::string& line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
  }
  BenchmarkItem item;
  try {
    item = item_from_json(j);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
  }
  try {
    validate_item(item);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::InvalidItem)
      throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.detail());
    throw;
  }
  return item;
}

inline bool image_ref_is_contained(const std::string& ref) {
  fs::path p(ref);
  if (ref.empty() || p.is_absolute()) return false;
  auto norm = p.lexically_normal();
  return norm.empty() || *norm.begin() != "..";
}

/// Checks the collection-level invariants: non-empty, ids unique, items valid.
inline void validate_benchmark(const Benchmark& b) {
  if (b.items.empty()) throw Error(ErrorKind::EmptyBenchmark, b.name);
  std::unordered_set<std::string> seen;
  for (const auto& item : b.items) {
    validate_item(item);
    if (!seen.insert(item.id).second) throw Error(ErrorKind::DuplicateId, item.id);
  }
}

/// Reads a dataset file. When `image_root` is given every image_ref must
/// resolve to an existing file beneath it.
inline Benchmark load_benchmark(const fs::path& path, const std::optional<fs::path>& image_root = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  Benchmark b;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto item = parse_record(line, line_no);
    if (!seen.insert(item.id).second) throw Error(ErrorKind::DuplicateId, item.id);
    if (image_root) {
      if (!image_ref_is_contained(item.image_ref) || !fs::is_regular_file(*image_root / item.image_ref))
        throw Error(ErrorKind::MissingImage, item.id);
    }
    b.items.push_back(std::move(item));
  }
  if (b.items.empty()) throw Error(ErrorKind::EmptyBenchmark, path.string());
  b.name = b.items.front().source.empty() ? path.stem().string() : b.items.front().source;
  b.version = "1";
  return b;
}

inline std::string serialize_benchmark(const Benchmark& b) {
  std::string out;
  for (const auto& item : b.items) {
    out += item_to_line(item);
    out += '\n';
  }
  return out;
}

inline void save_benchmark(const Benchmark& b, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << serialize_benchmark(b);
}

/// SHA-256 over the canonical item records; sensitive to every item field.
inline std::string content_digest(const Benchmark& b) { return sha256_hex(serialize_benchmark(b)); }

struct BenchmarkManifest {
  fs::path dataset_path;
  fs::path image_root;
  std::size_t item_count = 0;
  std::string digest;
  std::string name;

  bool operator==(const BenchmarkManifest&) const = default;
};

inline BenchmarkManifest make_manifest(const Benchmark& b, const fs::path& dataset, const fs::path& images) {
  return {dataset, images, b.size(), content_digest(b), b.name};
}

inline void write_manifest(const BenchmarkManifest& m, const fs::path& path) {
  nlohmann::json j;
  j["dataset"] = m.dataset_path.string();
  j["images"] = m.image_root.string();
  j["item_count"] = m.item_count;
  j["digest"] = m.digest;
  j["name"] = m.name;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline BenchmarkManifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  try {
    auto j = nlohmann::json::parse(in);
    BenchmarkManifest m;
    m.dataset_path = j.at("dataset").get<std::string>();
    m.image_root = j.at("images").get<std::string>();
    m.item_count = j.at("item_count").get<std::size_t>();
    m.digest = j.at("digest").get<std::string>();
    m.name = j.value("name", std::string{});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Config, path.string() + ": " + e.what());
  }
}

/// Loads the dataset a manifest points at and checks count and digest.
inline Benchmark load_from_manifest(const BenchmarkManifest& m) {
  auto b = load_benchmark(m.dataset_path, m.image_root);
  if (!m.name.empty()) b.name = m.name;
  if (b.size() != m.item_count)
    throw Error(ErrorKind::Config, "manifest item count " + std::to_string(m.item_count) + " != " +
                                       std::to_string(b.size()));
  if (content_digest(b) != m.digest) throw Error(ErrorKind::Config, "manifest digest mismatch");
  return b;
}

/// Ingest: validate a dataset and write its manifest.
inline BenchmarkManifest ingest(const fs::path& dataset, const fs::path& images, const fs::path& manifest_out) {
  auto b = load_benchmark(dataset, images);
  auto m = make_manifest(b, fs::absolute(dataset), fs::absolute(images));
  write_manifest(m, manifest_out);
  return m;
}

/// Restricts to `ids`, preserving the original order and item fields.
inline Benchmark subset(const Benchmark& b, const std::set<std::string>& ids, const std::string& tag = "subset") {
  std::unordered_set<std::string> known;
  for (const auto& item : b.items) known.insert(item.id);
  for (const auto& id : ids)
    if (!known.count(id)) throw Error(ErrorKind::UnknownId, id);
  if (ids.empty()) throw Error(ErrorKind::EmptyBenchmark, b.name + "_" + tag);
  Benchmark out;
  out.name = b.name + "_" + tag;
  out.version = b.version;
  for (const auto& item : b.items)
    if (ids.count(item.id)) out.items.push_back(item);
  return out;
}

struct SubsetComparison {
  double full_accuracy = 0.0;
  double subset_accuracy = 0.0;
  double difference = 0.0;
  std::size_t full_size = 0;
  std::size_t subset_size = 0;
};

/// Arithmetic on already-rounded accuracies; difference is taken after
/// rounding both to 0.01 so it matches tabulated figures.
inline SubsetComparison make_subset_comparison(double full_acc, double subset_acc, std::size_t full_size,
                                               std::size_t subset_size) {
  if (subset_size > full_size) throw Error(ErrorKind::InvalidArgument, "subset larger than full set");
  SubsetComparison c;
  c.full_accuracy = round2(full_acc);
  c.subset_accuracy = round2(subset_acc);
  c.difference = round2(c.subset_accuracy - c.full_accuracy);
  c.full_size = full_size;
  c.subset_size = subset_size;
  return c;
}

inline SubsetComparison compare_subset_accuracy(const std::vector<EvalOutcome>& full,
                                                const std::set<std::string>& subset_ids) {
  std::unordered_map<std::string, bool> correct;
  for (const auto& o : full) correct[o.item_id] = o.correct;
  std::size_t sub_correct = 0;
  for (const auto& id : subset_ids) {
    auto it = correct.find(id);
    if (it == correct.end()) throw Error(ErrorKind::MissingOutcome, id);
    sub_correct += it->second ? 1 : 0;
  }
  return make_subset_comparison(accuracy_pct(full), accuracy_pct(sub_correct, subset_ids.size()), full.size(),
                                subset_ids.size());
}

}  // namespace vlmaudit
