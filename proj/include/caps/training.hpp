#pragma once

#include <atomic>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "caps/adam.hpp"
#include "caps/checkpoint.hpp"
#include "caps/dataset.hpp"
#include "caps/encoder.hpp"
#include "caps/planner.hpp"
#include "caps/vq.hpp"

namespace caps {

enum class WeightMode { Resample, LossScale };
enum class Stage2Init { Fresh, Finetune };

inline std::string to_string(WeightMode m) {
  return m == WeightMode::Resample ? "resample" : "loss_scale";
}
inline std::string to_string(Stage2Init s) {
  return s == Stage2Init::Fresh ? "fresh" : "finetune";
}

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;
  double lr = 1e-3;
  double lambda_vq = 1.0;
  double clamp_w_max = 10.0;
  // stage-2 frame perturbation: without it the policy only ever sees the route
  // dead ahead and falls apart as soon as closed-loop drift rotates the view
  double aug_rot = 0.2;  // max |yaw| offset of the observation frame, radians
  double aug_lat = 1.0;  // max |lateral| offset of the world, metres
  WeightMode weight_mode = WeightMode::Resample;
  Stage2Init stage2_init = Stage2Init::Fresh;
  uint64_t seed = 0;
  int threads = 1;
  int dead_code_patience = 2;
  EncoderConfig encoder;
  VQConfig vq;
  PlannerConfig planner;

  void validate() const {
    if (epochs < 1) throw ValidationError("train: epochs >= 1 required");
    if (batch_size < 1) throw ValidationError("train: batch_size >= 1 required");
    if (lr <= 0) throw ValidationError("train: lr > 0 required");
    if (lambda_vq < 0) throw ValidationError("train: lambda_vq >= 0 required");
    if (clamp_w_max < 1) throw ValidationError("train: clamp_w_max >= 1 required");
    if (aug_rot < 0 || aug_lat < 0)
      throw ValidationError("train: augmentation ranges must be >= 0");
    if (threads < 1) throw ValidationError("train: threads >= 1 required");
    encoder.validate();
    vq.validate();
    if (encoder.d_e != planner.d_e || encoder.d_e != vq.d_e)
      throw ValidationError("train: encoder, planner and vq must share d_e");
  }

  // full echo: a checkpoint holding this JSON is self-describing
  nlohmann::json to_json() const {
    return {{"epochs", epochs},
            {"batch_size", batch_size},
            {"lr", lr},
            {"lambda_vq", lambda_vq},
            {"beta", vq.beta},
            {"K", vq.K},
            {"clamp_w_max", clamp_w_max},
            {"aug_rot", aug_rot},
            {"aug_lat", aug_lat},
            {"weight_mode", to_string(weight_mode)},
            {"stage2_init", to_string(stage2_init)},
            {"seed", seed},
            {"dead_code_patience", dead_code_patience},
            {"encoder",
             {{"d_e", encoder.d_e},
              {"n_heads", encoder.n_heads},
              {"n_layers", encoder.n_layers},
              {"max_entities", encoder.max_entities},
              {"max_map_tokens", encoder.max_map_tokens},
              {"map_resample_points", encoder.map_resample_points}}},
            {"planner",
             {{"grid_n", planner.grid_n},
              {"lon_min", planner.lon_min},
              {"lon_max", planner.lon_max},
              {"lat_min", planner.lat_min},
              {"lat_max", planner.lat_max},
              {"t_future", planner.t_future},
              {"dt", planner.dt},
              {"d_e", planner.d_e},
              {"target_hidden", planner.target_hidden},
              {"traj_hidden", planner.traj_hidden},
              {"score_hidden", planner.score_hidden},
              {"tau", planner.tau},
              {"lambda1", planner.lambda1},
              {"lambda2", planner.lambda2},
              {"lambda3", planner.lambda3}}}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.epochs = j.at("epochs").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.lr = j.at("lr").get<double>();
    c.lambda_vq = j.at("lambda_vq").get<double>();
    c.clamp_w_max = j.at("clamp_w_max").get<double>();
    if (j.contains("aug_rot")) c.aug_rot = j.at("aug_rot").get<double>();
    if (j.contains("aug_lat")) c.aug_lat = j.at("aug_lat").get<double>();
    c.weight_mode = j.at("weight_mode").get<std::string>() == "resample"
                        ? WeightMode::Resample
                        : WeightMode::LossScale;
    c.stage2_init = j.at("stage2_init").get<std::string>() == "fresh"
                        ? Stage2Init::Fresh
                        : Stage2Init::Finetune;
    c.seed = j.at("seed").get<uint64_t>();
    c.dead_code_patience = j.at("dead_code_patience").get<int>();
    const auto& e = j.at("encoder");
    c.encoder.d_e = e.at("d_e").get<int>();
    c.encoder.n_heads = e.at("n_heads").get<int>();
    c.encoder.n_layers = e.at("n_layers").get<int>();
    c.encoder.max_entities = e.at("max_entities").get<int>();
    c.encoder.max_map_tokens = e.at("max_map_tokens").get<int>();
    c.encoder.map_resample_points = e.at("map_resample_points").get<int>();
    const auto& p = j.at("planner");
    c.planner.grid_n = p.at("grid_n").get<int>();
    c.planner.lon_min = p.at("lon_min").get<double>();
    c.planner.lon_max = p.at("lon_max").get<double>();
    c.planner.lat_min = p.at("lat_min").get<double>();
    c.planner.lat_max = p.at("lat_max").get<double>();
    c.planner.t_future = p.at("t_future").get<int>();
    c.planner.dt = p.at("dt").get<double>();
    c.planner.d_e = p.at("d_e").get<int>();
    c.planner.target_hidden = p.at("target_hidden").get<int>();
    c.planner.traj_hidden = p.at("traj_hidden").get<int>();
    c.planner.score_hidden = p.at("score_hidden").get<int>();
    c.planner.tau = p.at("tau").get<double>();
    c.planner.lambda1 = p.at("lambda1").get<double>();
    c.planner.lambda2 = p.at("lambda2").get<double>();
    c.planner.lambda3 = p.at("lambda3").get<double>();
    c.vq.K = j.at("K").get<int>();
    c.vq.beta = j.at("beta").get<double>();
    c.vq.d_e = c.encoder.d_e;
    return c;
  }
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<std::string> log;
  bool aborted = false;
};

namespace detail {

// Gradient accumulation uses a fixed chunk partition so results are bitwise
// independent of the worker count: per-sample gradients are summed in sample
// order within a chunk, chunk sums are reduced in chunk order.
constexpr int kGradChunks = 4;

struct SampleOutcome {
  double loss = 0;
  double imitation = 0;
  double vq = 0;
  int code_index = -1;
  std::vector<float> ego;
};

// `build` signature: SampleOutcome(Tape<float>&, ParameterStore&, const Scene&,
// double weight). It must run backward() and flush gradients itself.
template <typename BuildFn>
std::vector<SampleOutcome> accumulate_batch(ParameterStore& store,
                                            const std::vector<const Scene*>& batch,
                                            const std::vector<double>& mult, int threads,
                                            BuildFn&& build) {
  struct Chunk {
    int lo, hi;
    ParameterStore local;
    std::vector<SampleOutcome> out;
  };
  int n = static_cast<int>(batch.size());
  std::vector<Chunk> chunks;
  for (int c = 0; c < kGradChunks; ++c) {
    int lo = n * c / kGradChunks, hi = n * (c + 1) / kGradChunks;
    if (lo < hi) chunks.push_back({lo, hi, {}, {}});
  }

  auto work = [&](Chunk& ch) {
    ch.local = store;
    ch.local.zero_grads();
    for (int i = ch.lo; i < ch.hi; ++i) {
      Tape<float> tape;
      ch.out.push_back(build(tape, ch.local, *batch[i],
                             mult.empty() ? 1.0 : mult[i]));
    }
  };

  int n_workers = std::min<int>(threads, static_cast<int>(chunks.size()));
  if (n_workers <= 1) {
    for (auto& ch : chunks) work(ch);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> workers;
    for (int w = 0; w < n_workers; ++w)
      workers.emplace_back([&]() {
        for (;;) {
          size_t c = next.fetch_add(1);
          if (c >= chunks.size()) return;
          work(chunks[c]);
        }
      });
    for (auto& t : workers) t.join();
  }

  store.zero_grads();
  std::vector<SampleOutcome> all;
  all.reserve(n);
  for (auto& ch : chunks) {
    for (const auto& name : store.names()) {
      auto& dst = store.grad(name).data;
      const auto& src = ch.local.grad(name).data;
      for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    for (auto& o : ch.out) all.push_back(std::move(o));
  }
  return all;
}

inline std::vector<size_t> shuffled_indices(size_t n, Rng rng) {
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  for (size_t i = n; i > 1; --i) {
    size_t j = rng.uniform_index(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

inline double perplexity_from_counts(const std::vector<long>& counts) {
  long n = 0;
  for (long c : counts) n += c;
  if (n == 0) return 0.0;
  double entropy = 0;
  for (long c : counts) {
    if (c == 0) continue;
    double p = static_cast<double>(c) / n;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

inline void copy_params_renamed(ParameterStore& dst, const ParameterStore& src,
                                const std::string& src_prefix,
                                const std::string& dst_prefix) {
  for (const auto& name : src.names_with_prefix(src_prefix)) {
    std::string target = dst_prefix + name.substr(src_prefix.size());
    const auto& sv = src.entry(name).value;
    auto& dv = dst.value(target);
    if (dv.rows != sv.rows || dv.cols != sv.cols)
      throw ValidationError("parameter shape mismatch copying " + name + " -> " + target);
    dv = sv;
  }
}

inline void merge_params(ParameterStore& dst, const ParameterStore& src,
                         const std::string& prefix) {
  Rng dummy(0);
  for (const auto& name : src.names_with_prefix(prefix)) {
    const auto& sv = src.entry(name).value;
    if (!dst.has(name)) dst.create(name, sv.rows, sv.cols, InitRule::Zeros, dummy);
    dst.value(name) = sv;
  }
}

}  // namespace detail

// ---- Stage 1: joint planner + VQ training on the full-horizon encoder ----

inline TrainResult train_stage1(const Dataset& ds, const TrainConfig& cfg,
                                std::ostream* log_stream = nullptr) {
  cfg.validate();
  if (ds.scenes.empty()) throw ValidationError("train_stage1: empty dataset");

  auto specs = encoder_param_specs<float>("encoder.cluster", cfg.encoder);
  for (auto& s : planner_param_specs<float>(cfg.planner)) specs.push_back(s);
  for (auto& s : vq_param_specs<float>(cfg.vq)) specs.push_back(s);
  auto params = init_parameters(specs, Rng(cfg.seed).split(0x51));
  reset_layernorm_gains(params);

  Adam opt(cfg.lr);
  CodebookState cb_state;
  cb_state.ensure(cfg.vq.K);
  TrainResult res;
  ParameterStore last_good = params;
  size_t n = ds.scenes.size();

  auto build = [&](Tape<float>& tape, ParameterStore& ps, const Scene& sc,
                   double w) -> detail::SampleOutcome {
    SceneTokenization tok;
    auto emb = encode_scene_graph(tape, ps, "encoder.cluster", sc, cfg.encoder,
                                  EncoderMode::FullHorizon, tok);
    auto ego = ego_feature_graph(tape, emb);
    auto ig = imitation_loss_graph(tape, ps, ego, sc, cfg.planner);
    detail::SampleOutcome out;
    out.imitation = tape.scalar_value(ig.total);
    out.ego = tape.value(ego);
    auto loss = ig.total;
    if (cfg.lambda_vq > 0) {
      auto vg = vq_loss_graph(tape, ps, ego, cfg.vq);
      out.code_index = vg.code_index;
      out.vq = tape.scalar_value(vg.loss_total);
      loss = tape.add(loss, tape.scale(vg.loss_total,
                                       static_cast<float>(cfg.lambda_vq)));
    } else {
      out.code_index = nearest_code(tape.value(ego), ps.value("vq.codebook"));
    }
    if (w != 1.0) loss = tape.scale(loss, static_cast<float>(w));
    out.loss = tape.scalar_value(loss);
    tape.backward(loss);
    tape.flush_param_grads(1.0f / static_cast<float>(
                               std::min<size_t>(cfg.batch_size, n)));
    return out;
  };

  for (int epoch = 0; epoch < cfg.epochs && !res.aborted; ++epoch) {
    auto order = detail::shuffled_indices(
        n, Rng(cfg.seed).split(0xE100 + static_cast<uint64_t>(epoch)));
    std::vector<long> epoch_counts(cfg.vq.K, 0);
    std::vector<std::vector<float>> last_batch_egos;
    double epoch_loss = 0, epoch_imit = 0, epoch_vq = 0;
    long seen = 0;

    try {
      for (size_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
        size_t b1 = std::min(n, b0 + cfg.batch_size);
        std::vector<const Scene*> batch;
        for (size_t i = b0; i < b1; ++i) batch.push_back(&ds.scenes[order[i]]);
        auto outcomes =
            detail::accumulate_batch(params, batch, {}, cfg.threads, build);
        last_batch_egos.clear();
        for (const auto& o : outcomes) {
          epoch_loss += o.loss;
          epoch_imit += o.imitation;
          epoch_vq += o.vq;
          epoch_counts[o.code_index]++;
          last_batch_egos.push_back(o.ego);
          ++seen;
          if (!std::isfinite(o.loss))
            throw RuntimeFailure("non-finite training loss");
        }
        opt.step(params);
      }
    } catch (const RuntimeFailure& e) {
      params = last_good;
      res.aborted = true;
      res.log.push_back(std::string("abort epoch=") + std::to_string(epoch + 1) +
                        " reason=" + e.what());
      if (log_stream) *log_stream << res.log.back() << "\n";
      break;
    }

    double perplexity = detail::perplexity_from_counts(epoch_counts);
    if (cfg.lambda_vq > 0) {
      cb_state.usage_counts = epoch_counts;
      TensorF egos(static_cast<int>(last_batch_egos.size()), cfg.vq.d_e);
      for (size_t i = 0; i < last_batch_egos.size(); ++i)
        for (int j = 0; j < cfg.vq.d_e; ++j)
          egos.at(static_cast<int>(i), j) = last_batch_egos[i][j];
      Rng reinit_rng = Rng(cfg.seed).split(0xDE00 + static_cast<uint64_t>(epoch));
      reinit_dead_codes(params.value("vq.codebook"), cb_state, egos, reinit_rng,
                        cfg.dead_code_patience);
    }

    std::ostringstream line;
    line << "epoch=" << (epoch + 1) << " loss=" << epoch_loss / seen
         << " imitation=" << epoch_imit / seen << " vq=" << epoch_vq / seen
         << " perplexity=" << perplexity;
    res.log.push_back(line.str());
    if (log_stream) *log_stream << line.str() << "\n";
    last_good = params;
  }

  res.checkpoint.params = params;
  res.checkpoint.meta = {{"stage", "stage1"},
                         {"config", cfg.to_json()},
                         {"seed", cfg.seed},
                         {"aborted", res.aborted},
                         {"log", res.log}};
  return res;
}

// ---- clustering and weights ----

struct ClusterAssignment {
  std::map<long, int> scene_to_code;  // scene_id -> k
  int K = 0;
};

inline ClusterAssignment assign_clusters(const Dataset& ds, const ParameterStore& params,
                                         const EncoderConfig& ecfg) {
  const auto& cb = params.entry("vq.codebook").value;
  if (cb.cols != ecfg.d_e)
    throw ValidationError("assign_clusters: codebook dim " + std::to_string(cb.cols) +
                          " does not match encoder d_e " + std::to_string(ecfg.d_e));
  ClusterAssignment out;
  out.K = cb.rows;
  ParameterStore ps = params;  // value-level encoding wants a mutable store
  for (const auto& sc : ds.scenes) {
    auto emb = encode_scene(sc, ps, "encoder.cluster", ecfg, EncoderMode::FullHorizon);
    int k = quantize(emb.ego_feature(), cb).code_index;
    out.scene_to_code[sc.scene_id] = k;
  }
  return out;
}

inline nlohmann::json assignment_to_json(const ClusterAssignment& a) {
  nlohmann::json scenes = nlohmann::json::object();
  for (const auto& [id, k] : a.scene_to_code) scenes[std::to_string(id)] = k;
  return {{"K", a.K}, {"assignments", scenes}};
}

inline ClusterAssignment assignment_from_json(const nlohmann::json& j) {
  ClusterAssignment a;
  a.K = j.at("K").get<int>();
  for (const auto& [id, k] : j.at("assignments").items())
    a.scene_to_code[std::stol(id)] = k.get<int>();
  return a;
}

struct WeightTable {
  std::map<int, double> cluster_weight;  // non-empty clusters only
  long N = 0;
  int C_active = 0;
  std::set<int> clamped;

  double weight_for(int k) const {
    auto it = cluster_weight.find(k);
    if (it == cluster_weight.end())
      throw ValidationError("weight table has no entry for cluster " +
                            std::to_string(k));
    return it->second;
  }
};

// w(c) = min(N / (C_active * n_c), clamp_w_max); empty clusters get no entry.
inline WeightTable compute_weights(const ClusterAssignment& a, double clamp_w_max) {
  if (a.scene_to_code.empty())
    throw ValidationError("compute_weights: empty assignment");
  if (clamp_w_max < 1) throw ValidationError("compute_weights: clamp_w_max >= 1");
  std::map<int, long> counts;
  for (const auto& [_, k] : a.scene_to_code) counts[k]++;
  WeightTable w;
  w.N = static_cast<long>(a.scene_to_code.size());
  w.C_active = static_cast<int>(counts.size());
  for (const auto& [k, n_c] : counts) {
    double raw = static_cast<double>(w.N) / (static_cast<double>(w.C_active) * n_c);
    if (raw > clamp_w_max) {
      w.cluster_weight[k] = clamp_w_max;
      w.clamped.insert(k);
    } else {
      w.cluster_weight[k] = raw;
    }
  }
  return w;
}

inline nlohmann::json weights_to_json(const WeightTable& w) {
  nlohmann::json clusters = nlohmann::json::object();
  for (const auto& [k, v] : w.cluster_weight) clusters[std::to_string(k)] = v;
  nlohmann::json clamped = nlohmann::json::array();
  for (int k : w.clamped) clamped.push_back(k);
  return {{"weights", clusters}, {"N", w.N}, {"C_active", w.C_active},
          {"clamped", clamped}};
}

inline WeightTable weights_from_json(const nlohmann::json& j) {
  WeightTable w;
  w.N = j.at("N").get<long>();
  w.C_active = j.at("C_active").get<int>();
  for (const auto& [k, v] : j.at("weights").items())
    w.cluster_weight[std::stoi(k)] = v.get<double>();
  for (const auto& k : j.at("clamped")) w.clamped.insert(k.get<int>());
  return w;
}

// Per-scene weights in dataset order; every scene must be assigned.
inline std::vector<double> per_sample_weights(const Dataset& ds,
                                              const ClusterAssignment& a,
                                              const WeightTable& w) {
  std::vector<double> out;
  out.reserve(ds.scenes.size());
  for (const auto& sc : ds.scenes) {
    auto it = a.scene_to_code.find(sc.scene_id);
    if (it == a.scene_to_code.end())
      throw ValidationError("scene " + std::to_string(sc.scene_id) +
                            " has no cluster assignment");
    out.push_back(w.weight_for(it->second));
  }
  return out;
}

// weights.json payload: cluster weights, metadata, and the resolved
// per-scene weights so downstream commands need no assignment lookup.
inline nlohmann::json weights_file_json(const WeightTable& w,
                                        const ClusterAssignment& a) {
  auto j = weights_to_json(w);
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [id, k] : a.scene_to_code)
    per[std::to_string(id)] = w.weight_for(k);
  j["per_scene"] = per;
  return j;
}

inline std::vector<double> per_sample_weights_from_json(const nlohmann::json& j,
                                                        const Dataset& ds) {
  const auto& per = j.at("per_scene");
  std::vector<double> out;
  out.reserve(ds.scenes.size());
  for (const auto& sc : ds.scenes) {
    auto key = std::to_string(sc.scene_id);
    if (!per.contains(key))
      throw ValidationError("weights file has no entry for scene " + key);
    out.push_back(per.at(key).get<double>());
  }
  return out;
}

// Inverse-CDF sampling with replacement over the weight prefix sums.
inline std::vector<size_t> priority_sampler(const std::vector<double>& weights,
                                            size_t n_draws, Rng& rng) {
  if (n_draws < 1) throw ValidationError("priority_sampler: n_draws >= 1");
  std::vector<double> prefix(weights.size());
  double total = 0;
  for (size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] < 0) throw ValidationError("priority_sampler: negative weight");
    total += weights[i];
    prefix[i] = total;
  }
  if (total <= 0) throw ValidationError("priority_sampler: all weights zero");
  std::vector<size_t> draws(n_draws);
  for (size_t d = 0; d < n_draws; ++d) {
    double u = rng.uniform() * total;
    size_t idx = std::upper_bound(prefix.begin(), prefix.end(), u) - prefix.begin();
    draws[d] = std::min(idx, weights.size() - 1);
  }
  return draws;
}

namespace detail {

// Re-express a scene in a slightly wrong observation frame: the world is
// shifted `lat` metres sideways and the whole view is yawed by `rot`, while
// the ego future eases over to the shifted route so the label still ends on
// it. This is what the planner actually sees once closed-loop drift has
// rotated its frame off the route, so train on it.
inline Scene perturb_scene(const Scene& src, double rot, double lat) {
  Scene sc = src;
  for (auto& pl : sc.map)
    for (auto& p : pl.points) p[1] += lat;
  for (auto& obj : sc.objects)
    for (auto* seq : {&obj.past, &obj.future})
      for (auto& st : *seq) st.y += lat;
  sc.goal_y += lat;
  size_t t_f = sc.ego.future.size();
  for (size_t t = 0; t < t_f; ++t) {
    double u = static_cast<double>(t + 1) / static_cast<double>(t_f);
    sc.ego.future[t].y += lat * u * u * (3 - 2 * u);
  }
  double c = std::cos(rot), s = std::sin(rot);
  auto spin = [&](double& x, double& y) {
    double nx = c * x + s * y, ny = -s * x + c * y;
    x = nx;
    y = ny;
  };
  auto spin_track = [&](AgentTrack& tr) {
    for (auto* seq : {&tr.past, &tr.future})
      for (auto& st : *seq) {
        spin(st.x, st.y);
        st.heading -= rot;
      }
  };
  spin_track(sc.ego);
  for (auto& obj : sc.objects) spin_track(obj);
  for (auto& pl : sc.map)
    for (auto& p : pl.points) spin(p[0], p[1]);
  spin(sc.goal_x, sc.goal_y);
  return sc;
}

}  // namespace detail

// ---- Stage 2: weighted causal planner training ----

// `sample_weights` must cover the dataset (one weight per scene, in order).
// Pass all-ones for the uniform baseline: both arms share this exact code
// path, so seed-matched uniform runs are bitwise comparable.
inline TrainResult train_stage2(const Dataset& ds,
                                const std::vector<double>& sample_weights,
                                const TrainConfig& cfg,
                                const Checkpoint* stage1 = nullptr,
                                std::ostream* log_stream = nullptr) {
  cfg.validate();
  if (ds.scenes.empty()) throw ValidationError("train_stage2: empty dataset");
  if (sample_weights.size() != ds.scenes.size())
    throw ValidationError("train_stage2: weights do not cover the dataset (" +
                          std::to_string(sample_weights.size()) + " weights for " +
                          std::to_string(ds.scenes.size()) + " scenes)");

  auto specs = encoder_param_specs<float>("encoder.causal", cfg.encoder);
  for (auto& s : planner_param_specs<float>(cfg.planner)) specs.push_back(s);
  auto params = init_parameters(specs, Rng(cfg.seed).split(0x52));
  reset_layernorm_gains(params);
  if (cfg.stage2_init == Stage2Init::Finetune) {
    if (!stage1)
      throw ValidationError("train_stage2: finetune requires a stage-1 checkpoint");
    detail::copy_params_renamed(params, stage1->params, "planner.", "planner.");
    detail::copy_params_renamed(params, stage1->params, "encoder.cluster.",
                                "encoder.causal.");
  }

  Adam opt(cfg.lr);
  TrainResult res;
  ParameterStore last_good = params;
  size_t n = ds.scenes.size();

  auto build = [&](Tape<float>& tape, ParameterStore& ps, const Scene& sc,
                   double w) -> detail::SampleOutcome {
    SceneTokenization tok;
    auto emb = encode_scene_graph(tape, ps, "encoder.causal", sc, cfg.encoder,
                                  EncoderMode::Causal, tok);
    auto ego = ego_feature_graph(tape, emb);
    auto ig = imitation_loss_graph(tape, ps, ego, sc, cfg.planner);
    detail::SampleOutcome out;
    out.imitation = tape.scalar_value(ig.total);
    auto loss = ig.total;
    if (w != 1.0) loss = tape.scale(loss, static_cast<float>(w));
    out.loss = tape.scalar_value(loss);
    tape.backward(loss);
    tape.flush_param_grads(1.0f / static_cast<float>(
                               std::min<size_t>(cfg.batch_size, n)));
    return out;
  };

  for (int epoch = 0; epoch < cfg.epochs && !res.aborted; ++epoch) {
    Rng epoch_rng = Rng(cfg.seed).split(0xE200 + static_cast<uint64_t>(epoch));
    std::vector<size_t> order;
    if (cfg.weight_mode == WeightMode::Resample)
      order = priority_sampler(sample_weights, n, epoch_rng);
    else
      order = detail::shuffled_indices(n, epoch_rng);

    // frame perturbations are drawn per slot, not per scene, so seed-matched
    // runs with different sampling weights still share the same stream
    bool augment = cfg.aug_rot > 0 || cfg.aug_lat > 0;
    Rng aug_rng = Rng(cfg.seed).split(0xA600 + static_cast<uint64_t>(epoch));
    std::vector<std::array<double, 2>> aug(augment ? n : 0);
    for (auto& a : aug) {
      a[0] = (2 * aug_rng.uniform() - 1) * cfg.aug_rot;
      a[1] = (2 * aug_rng.uniform() - 1) * cfg.aug_lat;
    }

    double epoch_loss = 0, epoch_imit = 0;
    long seen = 0;
    try {
      for (size_t b0 = 0; b0 < n; b0 += cfg.batch_size) {
        size_t b1 = std::min(n, b0 + cfg.batch_size);
        std::vector<const Scene*> batch;
        std::vector<double> mult;
        std::vector<Scene> views;
        if (augment) {
          views.reserve(b1 - b0);
          for (size_t i = b0; i < b1; ++i)
            views.push_back(
                detail::perturb_scene(ds.scenes[order[i]], aug[i][0], aug[i][1]));
          for (const auto& v : views) batch.push_back(&v);
        } else {
          for (size_t i = b0; i < b1; ++i) batch.push_back(&ds.scenes[order[i]]);
        }
        if (cfg.weight_mode == WeightMode::LossScale) {
          double sum = 0;
          for (size_t i = b0; i < b1; ++i) sum += sample_weights[order[i]];
          for (size_t i = b0; i < b1; ++i)
            mult.push_back(sample_weights[order[i]] *
                           static_cast<double>(b1 - b0) / sum);
        }
        auto outcomes =
            detail::accumulate_batch(params, batch, mult, cfg.threads, build);
        for (const auto& o : outcomes) {
          epoch_loss += o.loss;
          epoch_imit += o.imitation;
          ++seen;
          if (!std::isfinite(o.loss))
            throw RuntimeFailure("non-finite training loss");
        }
        opt.step(params);
      }
    } catch (const RuntimeFailure& e) {
      params = last_good;
      res.aborted = true;
      res.log.push_back(std::string("abort epoch=") + std::to_string(epoch + 1) +
                        " reason=" + e.what());
      if (log_stream) *log_stream << res.log.back() << "\n";
      break;
    }

    std::ostringstream line;
    line << "epoch=" << (epoch + 1) << " loss=" << epoch_loss / seen
         << " imitation=" << epoch_imit / seen;
    res.log.push_back(line.str());
    if (log_stream) *log_stream << line.str() << "\n";
    last_good = params;
  }

  // carry the frozen clustering artifacts along so one checkpoint drives
  // evaluation and re-assignment
  if (stage1) {
    detail::merge_params(params, stage1->params, "vq.");
    detail::merge_params(params, stage1->params, "encoder.cluster.");
  }
  res.checkpoint.params = params;
  res.checkpoint.meta = {{"stage", "stage2"},
                         {"config", cfg.to_json()},
                         {"seed", cfg.seed},
                         {"aborted", res.aborted},
                         {"log", res.log}};
  return res;
}

}  // namespace caps
