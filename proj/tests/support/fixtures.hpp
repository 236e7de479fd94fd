#pragma once

#include <cstdlib>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "vlmaudit/benchmark_store.hpp"
#include "vlmaudit/gateway.hpp"
#include "vlmaudit/image.hpp"
#include "vlmaudit/simulator.hpp"

namespace fixtures {

namespace fs = std::filesystem;
using namespace vlmaudit;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "vlmaudit-XXXXXX").string();
    if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline RgbImage noise_image(int w, int h, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RgbImage img(w, h);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

inline void write_png(const fs::path& path, const RgbImage& img) { write_file(path, encode_png(img)); }

/// Synthetic k-option benchmark. Option texts are unique across the whole
/// benchmark and have at least four whitespace tokens, so donors never clash
/// and n-gram probes have room. All items share one image.
inline Benchmark synthetic_benchmark(std::size_t n, std::size_t k, std::uint64_t seed,
                                     const std::string& name = "synthbench") {
  static const char* kNouns[] = {"red kite",    "blue mug",      "green lamp", "stone bridge", "paper boat",
                                 "wooden cart", "silver spoon", "glass jar",  "tin whistle",  "wool scarf"};
  std::mt19937_64 rng(seed);
  Benchmark b;
  b.name = name;
  b.version = "1";
  for (std::size_t i = 0; i < n; ++i) {
    BenchmarkItem item;
    item.id = "q" + std::to_string(1000 + i);
    item.image_ref = "img/shared.png";
    item.question = "In scene " + std::to_string(i) + " which object stands closest to the left edge of the frame?";
    std::vector<std::string> texts;
    for (std::size_t j = 0; j < k; ++j)
      texts.push_back("the " + std::string(kNouns[(i + j) % 10]) + " number " + std::to_string(i * 10 + j));
    item.options = make_options(texts);
    item.answer_letter = letter_at(rng() % k);
    item.source = name;
    item.split = "test";
    b.items.push_back(std::move(item));
  }
  return b;
}

/// Writes dataset + image tree; returns the dataset path.
inline fs::path write_benchmark(const Benchmark& b, const fs::path& dir, int image_size = 16) {
  fs::create_directories(dir / "img");
  write_png(dir / "img" / "shared.png", noise_image(image_size, image_size, 7));
  save_benchmark(b, dir / "bench.jsonl");
  return dir / "bench.jsonl";
}

inline std::shared_ptr<const Benchmark> share(const Benchmark& b) { return std::make_shared<const Benchmark>(b); }

inline ModelProfile clean_profile(double s_o, double s_p, std::uint64_t seed) {
  ModelProfile p;
  p.kind = ProfileKind::Clean;
  p.s_o = s_o;
  p.s_p = s_p;
  p.seed = seed;
  return p;
}

inline ModelProfile contaminated_profile(double kappa, std::uint64_t n, double s_o, double s_p,
                                         std::shared_ptr<const Benchmark> memorized, std::uint64_t seed) {
  ModelProfile p;
  p.kind = ProfileKind::Contaminated;
  p.kappa = kappa;
  p.deg.n = n;
  p.s_o = s_o;
  p.s_p = s_p;
  p.memorized = std::move(memorized);
  p.seed = seed;
  return p;
}

/// Gateway with one tag-accepting inproc endpoint per simulator profile name.
inline std::unique_ptr<ModelGateway> sim_gateway(const Simulator& sim, const std::vector<std::string>& names,
                                                 int pool = 8) {
  GatewayConfig cfg;
  for (const auto& n : names) {
    auto e = make_endpoint(n);
    e.pool_size = pool;
    cfg.endpoints.push_back(e);
  }
  return std::make_unique<ModelGateway>(cfg, sim.transport());
}

/// Benchmark whose items all carry perturbed answers: same options, image
/// path unchanged, answer letter moved to a different option.
inline Benchmark perturbed_copy(const Benchmark& b, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Benchmark p = b;
  p.name = b.name + "_perturbed";
  for (auto& item : p.items) {
    auto k = item.options.size();
    auto shift = 1 + rng() % (k - 1);
    item.answer_letter = letter_at((item.answer_index() + shift) % k);
  }
  return p;
}

}  // namespace fixtures
