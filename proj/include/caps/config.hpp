#pragma once

#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "caps/scenegen.hpp"
#include "caps/training.hpp"

namespace caps {

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                       const std::string& section) {
  if (!j.is_object())
    throw ValidationError("config section '" + section + "' must be an object");
  for (const auto& [k, _] : j.items())
    if (!allowed.count(k))
      throw ValidationError("unknown key '" + k + "' in config section '" + section +
                            "'");
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

// Whole-pipeline configuration. Every default named by the individual modules
// is overridable here; unknown keys are rejected; the resolved config is
// echoed into every output directory.
struct RunConfig {
  struct DataCfg {
    long n_scenes = 64;
    double mix_lane_follow = 0.85;
    double mix_stop_behind = 0.10;
    double mix_cut_in = 0.05;
    SceneGenParams gen;
  } data;
  EncoderConfig encoder;
  VQConfig vq;
  PlannerConfig planner;
  struct StageCfg {
    int epochs;
    int batch_size = 32;
    double lr = 1e-3;
    explicit StageCfg(int e) : epochs(e) {}
  };
  StageCfg stage1{20};
  StageCfg stage2{30};
  double lambda_vq = 1.0;
  int dead_code_patience = 2;
  double clamp_w_max = 10.0;
  double aug_rot = 0.2;
  double aug_lat = 1.0;
  WeightMode weight_mode = WeightMode::Resample;
  Stage2Init stage2_init = Stage2Init::Fresh;
  struct SimCfg {
    int max_steps = 60;
    int replan_interval = 2;
    long n_scenarios = 50;
  } simulator;
  uint64_t seed = 0;
  int threads = 1;

  // derived fields are pinned after parsing; callers relying on the struct
  // directly should call this too
  void finalize() {
    vq.d_e = encoder.d_e;
    planner.d_e = encoder.d_e;
    planner.t_future = data.gen.t_future;
    planner.dt = data.gen.dt;
  }

  void validate() const {
    data.gen.validate();
    if (data.n_scenes < 1) throw ValidationError("config: data.n_scenes >= 1");
    double mix = data.mix_lane_follow + data.mix_stop_behind + data.mix_cut_in;
    if (std::abs(mix - 1.0) > 1e-9)
      throw ValidationError("config: family mixture must sum to 1");
    stage1_train_config().validate();
    stage2_train_config().validate();
    if (simulator.max_steps < 1 || simulator.replan_interval < 1 ||
        simulator.n_scenarios < 1)
      throw ValidationError("config: simulator values must be positive");
  }

  std::vector<std::pair<Family, double>> mixture() const {
    return {{Family::LaneFollow, data.mix_lane_follow},
            {Family::StopBehind, data.mix_stop_behind},
            {Family::CutIn, data.mix_cut_in}};
  }

  TrainConfig stage1_train_config() const {
    TrainConfig c;
    c.epochs = stage1.epochs;
    c.batch_size = stage1.batch_size;
    c.lr = stage1.lr;
    c.lambda_vq = lambda_vq;
    c.dead_code_patience = dead_code_patience;
    c.clamp_w_max = clamp_w_max;
    c.aug_rot = aug_rot;
    c.aug_lat = aug_lat;
    c.weight_mode = weight_mode;
    c.stage2_init = stage2_init;
    c.seed = seed;
    c.threads = threads;
    c.encoder = encoder;
    c.vq = vq;
    c.planner = planner;
    return c;
  }

  TrainConfig stage2_train_config() const {
    TrainConfig c = stage1_train_config();
    c.epochs = stage2.epochs;
    c.batch_size = stage2.batch_size;
    c.lr = stage2.lr;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"data",
             {{"n_scenes", data.n_scenes},
              {"mix_lane_follow", data.mix_lane_follow},
              {"mix_stop_behind", data.mix_stop_behind},
              {"mix_cut_in", data.mix_cut_in},
              {"t_past", data.gen.t_past},
              {"t_future", data.gen.t_future},
              {"dt", data.gen.dt}}},
            {"encoder",
             {{"d_e", encoder.d_e},
              {"n_heads", encoder.n_heads},
              {"n_layers", encoder.n_layers},
              {"max_entities", encoder.max_entities},
              {"max_map_tokens", encoder.max_map_tokens},
              {"map_resample_points", encoder.map_resample_points}}},
            {"vq", {{"K", vq.K}, {"beta", vq.beta}}},
            {"planner",
             {{"grid_n", planner.grid_n},
              {"lon_min", planner.lon_min},
              {"lon_max", planner.lon_max},
              {"lat_min", planner.lat_min},
              {"lat_max", planner.lat_max},
              {"target_hidden", planner.target_hidden},
              {"traj_hidden", planner.traj_hidden},
              {"score_hidden", planner.score_hidden},
              {"tau", planner.tau},
              {"lambda1", planner.lambda1},
              {"lambda2", planner.lambda2},
              {"lambda3", planner.lambda3}}},
            {"stage1",
             {{"epochs", stage1.epochs},
              {"batch_size", stage1.batch_size},
              {"lr", stage1.lr},
              {"lambda_vq", lambda_vq},
              {"dead_code_patience", dead_code_patience}}},
            {"stage2",
             {{"epochs", stage2.epochs},
              {"batch_size", stage2.batch_size},
              {"lr", stage2.lr},
              {"clamp_w_max", clamp_w_max},
              {"aug_rot", aug_rot},
              {"aug_lat", aug_lat},
              {"weight_mode", to_string(weight_mode)},
              {"stage2_init", to_string(stage2_init)}}},
            {"simulator",
             {{"max_steps", simulator.max_steps},
              {"replan_interval", simulator.replan_interval},
              {"n_scenarios", simulator.n_scenarios}}},
            {"seeds", {{"master", seed}}}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    detail::check_keys(j, {"data", "encoder", "vq", "planner", "stage1", "stage2",
                           "simulator", "seeds"},
                       "<root>");
    RunConfig c;
    if (j.contains("data")) {
      const auto& d = j.at("data");
      detail::check_keys(d, {"n_scenes", "mix_lane_follow", "mix_stop_behind",
                             "mix_cut_in", "t_past", "t_future", "dt"},
                         "data");
      detail::read_key(d, "n_scenes", c.data.n_scenes);
      detail::read_key(d, "mix_lane_follow", c.data.mix_lane_follow);
      detail::read_key(d, "mix_stop_behind", c.data.mix_stop_behind);
      detail::read_key(d, "mix_cut_in", c.data.mix_cut_in);
      detail::read_key(d, "t_past", c.data.gen.t_past);
      detail::read_key(d, "t_future", c.data.gen.t_future);
      detail::read_key(d, "dt", c.data.gen.dt);
    }
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      detail::check_keys(e, {"d_e", "n_heads", "n_layers", "max_entities",
                             "max_map_tokens", "map_resample_points"},
                         "encoder");
      detail::read_key(e, "d_e", c.encoder.d_e);
      detail::read_key(e, "n_heads", c.encoder.n_heads);
      detail::read_key(e, "n_layers", c.encoder.n_layers);
      detail::read_key(e, "max_entities", c.encoder.max_entities);
      detail::read_key(e, "max_map_tokens", c.encoder.max_map_tokens);
      detail::read_key(e, "map_resample_points", c.encoder.map_resample_points);
    }
    if (j.contains("vq")) {
      const auto& v = j.at("vq");
      detail::check_keys(v, {"K", "beta"}, "vq");
      detail::read_key(v, "K", c.vq.K);
      detail::read_key(v, "beta", c.vq.beta);
    }
    if (j.contains("planner")) {
      const auto& p = j.at("planner");
      detail::check_keys(p, {"grid_n", "lon_min", "lon_max", "lat_min", "lat_max",
                             "target_hidden", "traj_hidden", "score_hidden", "tau",
                             "lambda1", "lambda2", "lambda3"},
                         "planner");
      detail::read_key(p, "grid_n", c.planner.grid_n);
      detail::read_key(p, "lon_min", c.planner.lon_min);
      detail::read_key(p, "lon_max", c.planner.lon_max);
      detail::read_key(p, "lat_min", c.planner.lat_min);
      detail::read_key(p, "lat_max", c.planner.lat_max);
      detail::read_key(p, "target_hidden", c.planner.target_hidden);
      detail::read_key(p, "traj_hidden", c.planner.traj_hidden);
      detail::read_key(p, "score_hidden", c.planner.score_hidden);
      detail::read_key(p, "tau", c.planner.tau);
      detail::read_key(p, "lambda1", c.planner.lambda1);
      detail::read_key(p, "lambda2", c.planner.lambda2);
      detail::read_key(p, "lambda3", c.planner.lambda3);
    }
    if (j.contains("stage1")) {
      const auto& s = j.at("stage1");
      detail::check_keys(s, {"epochs", "batch_size", "lr", "lambda_vq",
                             "dead_code_patience"},
                         "stage1");
      detail::read_key(s, "epochs", c.stage1.epochs);
      detail::read_key(s, "batch_size", c.stage1.batch_size);
      detail::read_key(s, "lr", c.stage1.lr);
      detail::read_key(s, "lambda_vq", c.lambda_vq);
      detail::read_key(s, "dead_code_patience", c.dead_code_patience);
    }
    if (j.contains("stage2")) {
      const auto& s = j.at("stage2");
      detail::check_keys(s, {"epochs", "batch_size", "lr", "clamp_w_max",
                             "aug_rot", "aug_lat", "weight_mode", "stage2_init"},
                         "stage2");
      detail::read_key(s, "epochs", c.stage2.epochs);
      detail::read_key(s, "batch_size", c.stage2.batch_size);
      detail::read_key(s, "lr", c.stage2.lr);
      detail::read_key(s, "clamp_w_max", c.clamp_w_max);
      detail::read_key(s, "aug_rot", c.aug_rot);
      detail::read_key(s, "aug_lat", c.aug_lat);
      if (s.contains("weight_mode")) {
        std::string m = s.at("weight_mode").get<std::string>();
        if (m == "resample")
          c.weight_mode = WeightMode::Resample;
        else if (m == "loss_scale")
          c.weight_mode = WeightMode::LossScale;
        else
          throw ValidationError("config: unknown weight_mode '" + m + "'");
      }
      if (s.contains("stage2_init")) {
        std::string m = s.at("stage2_init").get<std::string>();
        if (m == "fresh")
          c.stage2_init = Stage2Init::Fresh;
        else if (m == "finetune")
          c.stage2_init = Stage2Init::Finetune;
        else
          throw ValidationError("config: unknown stage2_init '" + m + "'");
      }
    }
    if (j.contains("simulator")) {
      const auto& s = j.at("simulator");
      detail::check_keys(s, {"max_steps", "replan_interval", "n_scenarios"},
                         "simulator");
      detail::read_key(s, "max_steps", c.simulator.max_steps);
      detail::read_key(s, "replan_interval", c.simulator.replan_interval);
      detail::read_key(s, "n_scenarios", c.simulator.n_scenarios);
    }
    if (j.contains("seeds")) {
      const auto& s = j.at("seeds");
      detail::check_keys(s, {"master"}, "seeds");
      detail::read_key(s, "master", c.seed);
    }
    c.finalize();
    c.validate();
    return c;
  }
};

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ValidationError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("malformed config file " + path + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

}  // namespace caps
