#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "caps/checkpoint.hpp"
#include "caps/config.hpp"
#include "caps/dataset.hpp"
#include "caps/inspect.hpp"
#include "caps/simulator.hpp"
#include "caps/training.hpp"

namespace fs = std::filesystem;
using namespace caps;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw RuntimeFailure("cannot write " + path.string());
  f << text;
  if (!f) throw RuntimeFailure("write failed: " + path.string());
}

void echo_config(const RunConfig& cfg, const std::string& out_dir) {
  write_text(fs::path(out_dir) / "config.json", cfg.to_json().dump(2) + "\n");
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

RunConfig load_config(const std::string& path, uint64_t* seed_override,
                      int* threads_override) {
  RunConfig cfg = load_run_config(path);
  if (seed_override) cfg.seed = *seed_override;
  if (threads_override) cfg.threads = *threads_override;
  cfg.finalize();
  cfg.validate();
  return cfg;
}

TrainConfig config_from_checkpoint(const Checkpoint& ckpt,
                                   const std::string& path) {
  if (!ckpt.meta.contains("config"))
    throw ValidationError("checkpoint " + path + " has no config record");
  return TrainConfig::from_json(ckpt.meta.at("config"));
}

void print_train_log(const TrainResult& res) {
  for (const auto& line : res.log) std::cout << line << "\n";
}

void save_train_outputs(const TrainResult& res, const std::string& out_dir,
                        const std::string& ckpt_name) {
  fs::create_directories(out_dir);
  save_checkpoint(res.checkpoint, (fs::path(out_dir) / ckpt_name).string());
  std::string log;
  for (const auto& line : res.log) log += line + "\n";
  write_text(fs::path(out_dir) / "train_log.txt", log);
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                 uint64_t* seed, int* threads) {
  RunConfig cfg = load_config(config_path, seed, threads);
  Dataset ds = generate_dataset(cfg.mixture(), cfg.data.n_scenes, cfg.seed,
                                cfg.data.gen);
  write_dataset(ds, out_dir);
  echo_config(cfg, out_dir);
  std::cout << "dataset: " << out_dir << "\n"
            << "family       scenes\n";
  for (const auto& [fam, n] : ds.manifest.counts)
    std::cout << std::left << std::setw(13) << to_string(fam) << n << "\n";
  std::cout << "total        " << ds.scenes.size() << "\n";
  return 0;
}

int cmd_train_stage1(const std::string& config_path, const std::string& data_dir,
                     const std::string& out_dir, uint64_t* seed, int* threads) {
  RunConfig cfg = load_config(config_path, seed, threads);
  Dataset ds = read_dataset(data_dir);
  auto res = train_stage1(ds, cfg.stage1_train_config(), &std::cout);
  save_train_outputs(res, out_dir, "stage1.ckpt");
  echo_config(cfg, out_dir);
  if (res.aborted) {
    std::cerr << "training aborted on non-finite gradients; checkpoint holds "
                 "the last stable epoch\n";
    return 2;
  }
  std::cout << "checkpoint: " << (fs::path(out_dir) / "stage1.ckpt").string()
            << "\n";
  return 0;
}

int cmd_assign(const std::string& ckpt_path, const std::string& data_dir,
               const std::string& out_dir) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  TrainConfig tc = config_from_checkpoint(ckpt, ckpt_path);
  Dataset ds = read_dataset(data_dir);
  auto assignment = assign_clusters(ds, ckpt.params, tc.encoder);
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "assignments.json",
             assignment_to_json(assignment).dump(2) + "\n");

  std::map<int, long> counts;
  for (const auto& [_, k] : assignment.scene_to_code) counts[k]++;
  std::cout << "assignments: "
            << (fs::path(out_dir) / "assignments.json").string() << "\n"
            << "cluster  scenes\n";
  for (const auto& [k, n] : counts)
    std::cout << std::left << std::setw(9) << k << n << "\n";
  std::cout << "active clusters: " << counts.size() << " of " << assignment.K
            << "\n";
  return 0;
}

int cmd_weights(const std::string& assignments_path, const std::string& out_dir,
                double clamp_w_max) {
  auto assignment = assignment_from_json(read_json(assignments_path));
  auto table = compute_weights(assignment, clamp_w_max);
  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "weights.json",
             weights_file_json(table, assignment).dump(2) + "\n");

  std::cout << "weights: " << (fs::path(out_dir) / "weights.json").string()
            << "\n"
            << "cluster  weight    clamped\n";
  for (const auto& [k, w] : table.cluster_weight)
    std::cout << std::left << std::setw(9) << k << std::setw(10)
              << std::setprecision(6) << w << (table.clamped.count(k) ? "yes" : "")
              << "\n";
  return 0;
}

int cmd_train_stage2(const std::string& config_path, const std::string& data_dir,
                     const std::string& weights_path,
                     const std::string& ckpt_path, const std::string& out_dir,
                     bool uniform, uint64_t* seed, int* threads) {
  RunConfig cfg = load_config(config_path, seed, threads);
  Dataset ds = read_dataset(data_dir);
  std::vector<double> w;
  if (uniform) {
    w.assign(ds.scenes.size(), 1.0);
  } else {
    w = per_sample_weights_from_json(read_json(weights_path), ds);
  }
  Checkpoint stage1 = load_checkpoint(ckpt_path);
  auto res = train_stage2(ds, w, cfg.stage2_train_config(), &stage1, &std::cout);
  save_train_outputs(res, out_dir, "stage2.ckpt");
  echo_config(cfg, out_dir);
  if (res.aborted) {
    std::cerr << "training aborted on non-finite gradients; checkpoint holds "
                 "the last stable epoch\n";
    return 2;
  }
  std::cout << "checkpoint: " << (fs::path(out_dir) / "stage2.ckpt").string()
            << (uniform ? " (uniform baseline)" : "") << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& suite_dir,
             const std::string& out_dir, bool traces, int max_steps,
             int replan_interval, int threads) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  TrainConfig tc = config_from_checkpoint(ckpt, ckpt_path);
  Dataset ds = read_dataset(suite_dir);

  std::vector<ScenarioSpec> suite;
  suite.reserve(ds.scenes.size());
  for (const auto& sc : ds.scenes) {
    ScenarioSpec spec;
    spec.scene = sc;
    spec.max_steps = max_steps;
    spec.replan_interval = replan_interval;
    suite.push_back(std::move(spec));
  }

  PlannerFactory factory = [&](const ScenarioSpec&) {
    return std::make_unique<ModelPlanner>(ckpt.params, tc.encoder, tc.planner);
  };
  std::vector<EpisodeResult> episodes;
  auto report = evaluate(suite, factory, threads, tc.planner.dt, &episodes);

  fs::create_directories(out_dir);
  write_text(fs::path(out_dir) / "report.json", report.to_json().dump(2) + "\n");
  if (traces) {
    for (size_t i = 0; i < suite.size(); ++i) {
      std::ostringstream os;
      for (size_t t = 0; t < episodes[i].trace.size(); ++t) {
        const auto& st = episodes[i].trace[t];
        os << nlohmann::json{{"step", t},
                             {"x", st.ego.x},
                             {"y", st.ego.y},
                             {"heading", st.ego.heading},
                             {"speed", st.ego.speed},
                             {"chosen", st.chosen},
                             {"admissible", st.admissible}}
                  .dump()
           << "\n";
      }
      write_text(fs::path(out_dir) /
                     ("ep_" + std::to_string(suite[i].scene.scene_id) + ".jsonl"),
                 os.str());
    }
  }

  std::cout << "report: " << (fs::path(out_dir) / "report.json").string() << "\n"
            << "family       episodes  success%  mean DS\n";
  char line[96];
  for (const auto& [fam, st] : report.per_family) {
    std::snprintf(line, sizeof(line), "%-12s %-9ld %-9.1f %.3f\n",
                  to_string(fam).c_str(), st.episodes, st.success_rate(),
                  st.mean_driving_score());
    std::cout << line;
  }
  std::snprintf(line, sizeof(line), "%-12s %-9ld %-9.1f %.3f\n", "overall",
                report.episodes, report.success_rate, report.mean_driving_score);
  std::cout << line;
  return 0;
}

int cmd_inspect_clusters(const std::string& ckpt_path, const std::string& data_dir,
                         int cluster, int top, const std::string& out_dir) {
  Checkpoint ckpt = load_checkpoint(ckpt_path);
  TrainConfig tc = config_from_checkpoint(ckpt, ckpt_path);
  Dataset ds = read_dataset(data_dir);
  auto assignment = assign_clusters(ds, ckpt.params, tc.encoder);
  auto purity = cluster_purity(ds, assignment);

  std::map<int, std::vector<const Scene*>> members;
  for (const auto& sc : ds.scenes)
    members[assignment.scene_to_code.at(sc.scene_id)].push_back(&sc);

  std::vector<int> selected;
  if (cluster >= 0) {
    if (!members.count(cluster))
      throw ValidationError("cluster " + std::to_string(cluster) +
                            " has no assigned scenes");
    selected.push_back(cluster);
  } else {
    std::vector<std::pair<long, int>> by_size;
    for (const auto& [k, scenes] : members)
      by_size.push_back({-static_cast<long>(scenes.size()), k});
    std::sort(by_size.begin(), by_size.end());
    for (int i = 0; i < top && i < static_cast<int>(by_size.size()); ++i)
      selected.push_back(by_size[i].second);
  }

  fs::create_directories(out_dir);
  for (int k : selected)
    write_text(fs::path(out_dir) / ("cluster_" + std::to_string(k) + ".svg"),
               cluster_montage_svg(k, members.at(k)));
  std::string table = purity_table(purity);
  write_text(fs::path(out_dir) / "purity.txt", table);
  std::cout << table << "montages: " << selected.size() << " file(s) in "
            << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"caps: scene generation, two-stage planner training, and "
               "closed-loop evaluation"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, ckpt_path, weights_path,
      assignments_path, suite_dir;
  uint64_t seed = 0;
  int threads = 1;
  bool have_seed = false, have_threads = false;
  bool uniform = false, traces = false;
  double clamp_w_max = 10.0;
  int cluster = -1, top = 8;
  int max_steps = 60, replan_interval = 2;

  auto add_seed_threads = [&](CLI::App* c) {
    c->add_option("--seed", seed, "override the config seed")
        ->each([&](const std::string&) { have_seed = true; });
    c->add_option("--threads", threads, "cap worker threads")
        ->each([&](const std::string&) { have_threads = true; });
  };

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config_path)->required();
  gen->add_option("--out", out_dir)->required();
  add_seed_threads(gen);

  auto* s1 = app.add_subcommand("train-stage1", "joint planner + codebook training");
  s1->add_option("--config", config_path)->required();
  s1->add_option("--data", data_dir)->required();
  s1->add_option("--out", out_dir)->required();
  add_seed_threads(s1);

  auto* as = app.add_subcommand("assign", "assign every scene to a codebook entry");
  as->add_option("--ckpt", ckpt_path)->required();
  as->add_option("--data", data_dir)->required();
  as->add_option("--out", out_dir)->required();

  auto* ws = app.add_subcommand("weights", "cluster-frequency priority weights");
  ws->add_option("--assignments", assignments_path)->required();
  ws->add_option("--out", out_dir)->required();
  ws->add_option("--clamp-max", clamp_w_max, "weight clamp ceiling");

  auto* s2 = app.add_subcommand("train-stage2", "priority-sampled planner retraining");
  s2->add_option("--config", config_path)->required();
  s2->add_option("--data", data_dir)->required();
  s2->add_option("--weights", weights_path);
  s2->add_option("--ckpt", ckpt_path)->required();
  s2->add_option("--out", out_dir)->required();
  s2->add_flag("--uniform", uniform, "uniform-sampling baseline (ignores --weights)");
  add_seed_threads(s2);

  auto* ev = app.add_subcommand("eval", "closed-loop evaluation over a scenario suite");
  ev->add_option("--ckpt", ckpt_path)->required();
  ev->add_option("--suite", suite_dir)->required();
  ev->add_option("--out", out_dir)->required();
  ev->add_flag("--traces", traces, "write per-episode jsonl traces");
  ev->add_option("--max-steps", max_steps);
  ev->add_option("--replan-interval", replan_interval);
  ev->add_option("--threads", threads);

  auto* in = app.add_subcommand("inspect-clusters", "SVG montages + purity table");
  in->add_option("--ckpt", ckpt_path)->required();
  in->add_option("--data", data_dir)->required();
  in->add_option("--cluster", cluster, "render a single cluster id");
  in->add_option("--top", top, "render the n largest clusters");
  in->add_option("--out", out_dir)->required();

  CLI11_PARSE(app, argc, argv);

  uint64_t* seed_p = have_seed ? &seed : nullptr;
  int* threads_p = have_threads ? &threads : nullptr;

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir, seed_p, threads_p);
    if (s1->parsed())
      return cmd_train_stage1(config_path, data_dir, out_dir, seed_p, threads_p);
    if (as->parsed()) return cmd_assign(ckpt_path, data_dir, out_dir);
    if (ws->parsed()) return cmd_weights(assignments_path, out_dir, clamp_w_max);
    if (s2->parsed()) {
      if (!uniform && weights_path.empty())
        throw ValidationError("train-stage2 needs --weights (or --uniform)");
      return cmd_train_stage2(config_path, data_dir, weights_path, ckpt_path,
                              out_dir, uniform, seed_p, threads_p);
    }
    if (ev->parsed())
      return cmd_eval(ckpt_path, suite_dir, out_dir, traces, max_steps,
                      replan_interval, threads);
    if (in->parsed())
      return cmd_inspect_clusters(ckpt_path, data_dir, cluster, top, out_dir);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
