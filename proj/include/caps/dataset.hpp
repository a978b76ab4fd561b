#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caps/scenegen.hpp"

namespace caps {

constexpr int kDatasetFormatVersion = 1;

struct DatasetManifest {
  int version = kDatasetFormatVersion;
  double dt = 0.2;
  int t_past = 10;
  int t_future = 20;
  std::map<Family, long> counts;
  uint64_t seed = 0;

  long total() const {
    long n = 0;
    for (const auto& [_, c] : counts) n += c;
    return n;
  }

  nlohmann::json to_json() const {
    nlohmann::json jc = nlohmann::json::object();
    for (const auto& [f, c] : counts) jc[to_string(f)] = c;
    return {{"version", version}, {"dt", dt},       {"T_p", t_past},
            {"T_f", t_future},    {"counts", jc},   {"seed", seed}};
  }

  static DatasetManifest from_json(const nlohmann::json& j) {
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    if (m.version != kDatasetFormatVersion)
      throw ValidationError("dataset: unsupported format version " +
                            std::to_string(m.version));
    m.dt = j.at("dt").get<double>();
    m.t_past = j.at("T_p").get<int>();
    m.t_future = j.at("T_f").get<int>();
    m.seed = j.at("seed").get<uint64_t>();
    for (const auto& [k, v] : j.at("counts").items())
      m.counts[family_from_string(k)] = v.get<long>();
    return m;
  }
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Scene> scenes;
};

// Generates n scenes with exact largest-remainder family counts. Scene order
// is a seeded deterministic shuffle of the family sequence; per-scene RNG
// streams are split from (seed, scene index).
inline Dataset generate_dataset(const std::vector<std::pair<Family, double>>& mixture,
                                long n, uint64_t seed, const SceneGenParams& p = {}) {
  auto counts = mixture_counts(mixture, n);
  std::vector<Family> fams;
  fams.reserve(n);
  for (const auto& [f, c] : counts)
    for (long i = 0; i < c; ++i) fams.push_back(f);
  // Fisher-Yates with the dataset stream
  Rng shuffle_rng = Rng(seed).split(0xD5);
  for (long i = n - 1; i > 0; --i) {
    long j = static_cast<long>(shuffle_rng.uniform_index(static_cast<uint64_t>(i + 1)));
    std::swap(fams[i], fams[j]);
  }

  Dataset ds;
  ds.manifest.dt = p.dt;
  ds.manifest.t_past = p.t_past;
  ds.manifest.t_future = p.t_future;
  ds.manifest.counts = counts;
  ds.manifest.seed = seed;
  ds.scenes.reserve(n);
  for (long i = 0; i < n; ++i) {
    Rng scene_rng = Rng(seed).split(0x5C000000ull + static_cast<uint64_t>(i));
    ds.scenes.push_back(generate_scene(fams[i], scene_rng, p, i));
  }
  return ds;
}

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw RuntimeFailure("cannot write manifest in " + dir);
    mf << ds.manifest.to_json().dump(2) << "\n";
  }
  std::ofstream sf(fs::path(dir) / "scenes.jsonl");
  if (!sf) throw RuntimeFailure("cannot write scenes in " + dir);
  for (const auto& sc : ds.scenes) sf << scene_to_jsonl(sc) << "\n";
  if (!sf) throw RuntimeFailure("scene write failed in " + dir);
}

inline Dataset read_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  Dataset ds;
  {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw ValidationError("missing manifest.json in " + dir);
    nlohmann::json j;
    try {
      mf >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("malformed manifest.json: ") + e.what());
    }
    ds.manifest = DatasetManifest::from_json(j);
  }
  std::ifstream sf(fs::path(dir) / "scenes.jsonl");
  if (!sf) throw ValidationError("missing scenes.jsonl in " + dir);
  std::string line;
  long line_no = 0;
  while (std::getline(sf, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      ds.scenes.push_back(scene_from_jsonl(line));
    } catch (const ValidationError& e) {
      throw ValidationError("scenes.jsonl line " + std::to_string(line_no) + ": " +
                            e.what());
    }
  }
  if (static_cast<long>(ds.scenes.size()) != ds.manifest.total())
    throw ValidationError("dataset count mismatch: manifest says " +
                          std::to_string(ds.manifest.total()) + ", file has " +
                          std::to_string(ds.scenes.size()) + " scenes");
  std::map<Family, long> seen;
  for (const auto& sc : ds.scenes) seen[sc.family]++;
  if (seen != ds.manifest.counts)
    throw ValidationError("dataset per-family counts disagree with manifest");
  return ds;
}

}  // namespace caps
