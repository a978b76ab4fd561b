#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "caps/nn.hpp"
#include "caps/scene.hpp"

namespace caps {

struct KinematicLimits {
  double max_curvature = 0.3;  // 1/m
  double max_accel = 4.0;      // m/s^2
  double max_speed = 18.0;     // m/s
  double max_lateral_offset = 3.5;  // from route centerline
  // estimator baselines: sampled trajectories carry sub-resolution jitter, so
  // acceleration is measured over accel_window steps and heading over at
  // least min_heading_arc meters of arc instead of single-step differences
  int accel_window = 2;
  double min_heading_arc = 1.0;

  void validate() const {
    if (max_curvature <= 0 || max_accel <= 0 || max_speed <= 0)
      throw ValidationError("kinematic limits must be positive");
  }
};

struct PlannerConfig {
  int grid_n = 8;  // anchors form a grid_n x grid_n grid -> M = grid_n^2
  double lon_min = 0.0, lon_max = 40.0;
  double lat_min = -8.0, lat_max = 8.0;
  int t_future = 20;
  double dt = 0.2;
  int d_e = 64;
  int target_hidden = 64;
  int traj_hidden = 128;
  int score_hidden = 64;
  double tau = 1.0;  // teacher temperature, meters
  double lambda1 = 1.0, lambda2 = 1.0, lambda3 = 1.0;

  int num_candidates() const { return grid_n * grid_n; }
  int traj_dim() const { return 2 * t_future; }
};

struct TargetCandidate {
  double anchor_x, anchor_y;
  double offset_x, offset_y;
  double logit;
  double x() const { return anchor_x + offset_x; }
  double y() const { return anchor_y + offset_y; }
};

using TrajectoryPoints = std::vector<std::array<double, 2>>;  // T_f x (x, y)

struct TrajectoryBundle {
  std::vector<TrajectoryPoints> candidates;
  std::vector<TargetCandidate> targets;
  std::vector<double> scores;
  std::vector<uint8_t> mask;  // 1 = admissible
};

// Fixed anchor grid, row-major over (longitudinal, lateral) linspace.
inline std::vector<std::array<double, 2>> anchor_grid(const PlannerConfig& cfg) {
  std::vector<std::array<double, 2>> anchors;
  anchors.reserve(cfg.num_candidates());
  for (int i = 0; i < cfg.grid_n; ++i) {
    double x = cfg.lon_min + (cfg.lon_max - cfg.lon_min) * i / (cfg.grid_n - 1);
    for (int j = 0; j < cfg.grid_n; ++j) {
      double y = cfg.lat_min + (cfg.lat_max - cfg.lat_min) * j / (cfg.grid_n - 1);
      anchors.push_back({x, y});
    }
  }
  return anchors;
}

template <typename T>
std::vector<ParamSpec<T>> planner_param_specs(const PlannerConfig& cfg) {
  std::vector<ParamSpec<T>> specs;
  add_mlp_specs(specs, std::string("planner.target"), cfg.d_e + 2, cfg.target_hidden, 3);
  add_mlp_specs(specs, std::string("planner.traj"), cfg.d_e + 3, cfg.traj_hidden,
                cfg.traj_dim());
  add_mlp_specs(specs, std::string("planner.score"), cfg.d_e + cfg.traj_dim(),
                cfg.score_hidden, 1);
  return specs;
}

namespace detail {

// M x d broadcast of a 1 x d row.
template <typename T>
typename Tape<T>::Ref repeat_rows(Tape<T>& tape, typename Tape<T>::Ref row, int m) {
  Tensor<T> ones(m, 1);
  for (auto& v : ones.data) v = T(1);
  return tape.matmul(tape.leaf(ones), row);
}

// Prefix-sum matrix turning per-step displacements (flattened x0,y0,x1,y1,...)
// into absolute points: out[2t+c] = sum_{s<=t} disp[2s+c].
template <typename T>
Tensor<T> cumsum_matrix(int t_future) {
  Tensor<T> u(2 * t_future, 2 * t_future);
  for (int s = 0; s < t_future; ++s)
    for (int t = s; t < t_future; ++t)
      for (int c = 0; c < 2; ++c) u.at(2 * s + c, 2 * t + c) = T(1);
  return u;
}

// Maps a target (x, y) row onto the straight constant-speed path toward it:
// point_t = target * (t+1) / T_f.
template <typename T>
Tensor<T> linear_ramp_matrix(int t_future) {
  Tensor<T> u(2, 2 * t_future);
  for (int t = 0; t < t_future; ++t)
    for (int c = 0; c < 2; ++c)
      u.at(c, 2 * t + c) = static_cast<T>(t + 1) / static_cast<T>(t_future);
  return u;
}

}  // namespace detail

template <typename T>
struct TargetProposalGraph {
  typename Tape<T>::Ref logits;   // 1 x M
  typename Tape<T>::Ref offsets;  // M x 2
};

// Per-anchor shared head on (ego_feat, anchor) -> (logit, dx, dy).
template <typename T>
TargetProposalGraph<T> propose_targets_graph(Tape<T>& tape, ParameterStoreT<T>& ps,
                                             typename Tape<T>::Ref ego_feat,
                                             const PlannerConfig& cfg) {
  auto anchors = anchor_grid(cfg);
  int m = cfg.num_candidates();
  Tensor<T> anchor_mat(m, 2);
  for (int i = 0; i < m; ++i) {
    anchor_mat.at(i, 0) = static_cast<T>(anchors[i][0]);
    anchor_mat.at(i, 1) = static_cast<T>(anchors[i][1]);
  }
  auto input = tape.concat_cols(detail::repeat_rows(tape, ego_feat, m),
                                tape.leaf(anchor_mat));
  auto out = mlp(tape, ps, std::string("planner.target"), input);  // M x 3
  TargetProposalGraph<T> g;
  g.logits = tape.transpose(tape.slice_cols(out, 0, 1));
  g.offsets = tape.slice_cols(out, 1, 2);
  return g;
}

// Trajectory head on a batch of targets: each row of `targets` (M x 2)
// conditions one trajectory. Returns flattened absolute points (M x 2*T_f),
// built as a prefix sum of predicted per-step displacements. The current
// speed is fed in directly: the first-step kinematic bound depends on it
// and the pooled scene embedding carries it too weakly.
template <typename T>
typename Tape<T>::Ref generate_trajectories_graph(Tape<T>& tape, ParameterStoreT<T>& ps,
                                                  typename Tape<T>::Ref ego_feat,
                                                  typename Tape<T>::Ref targets,
                                                  T ego_speed,
                                                  const PlannerConfig& cfg) {
  Tensor<T> speed_col(targets.rows, 1);
  for (auto& v : speed_col.data) v = ego_speed;
  auto input = tape.concat_cols(
      tape.concat_cols(detail::repeat_rows(tape, ego_feat, targets.rows),
                       tape.leaf(speed_col)),
      targets);
  auto disp = mlp(tape, ps, std::string("planner.traj"), input);
  // straight constant-speed path to the target plus accumulated learned
  // residual displacements; a zero-initialized head starts on the straight
  // path, which keeps early candidates kinematically smooth
  auto base = tape.matmul(targets, tape.leaf(detail::linear_ramp_matrix<T>(cfg.t_future)));
  return tape.add(base, tape.matmul(disp, tape.leaf(detail::cumsum_matrix<T>(cfg.t_future))));
}

// Score head: logits (1 x M) on (ego_feat, flattened trajectory).
template <typename T>
typename Tape<T>::Ref score_graph(Tape<T>& tape, ParameterStoreT<T>& ps,
                                  typename Tape<T>::Ref ego_feat,
                                  typename Tape<T>::Ref traj_flat_rows) {
  auto input = tape.concat_cols(
      detail::repeat_rows(tape, ego_feat, traj_flat_rows.rows), traj_flat_rows);
  auto s = mlp(tape, ps, std::string("planner.score"), input);  // M x 1
  return tape.transpose(s);
}

// ---- geometry: contingency mask ----

// Per-step positions of other agents over the planning horizon, obj x T_f.
using ObjectForecast = std::vector<std::vector<std::array<double, 2>>>;

struct ForecastAgent {
  ObjectForecast positions;
  std::vector<double> radii;
};

// Scripted object futures from a scene (simulation / training use).
inline ForecastAgent scripted_forecast(const Scene& scene, int t_future) {
  ForecastAgent f;
  for (const auto& obj : scene.objects) {
    std::vector<std::array<double, 2>> traj;
    for (int t = 0; t < t_future; ++t) {
      if (t < static_cast<int>(obj.future.size()))
        traj.push_back({obj.future[t].x, obj.future[t].y});
      else if (!obj.future.empty())
        traj.push_back({obj.future.back().x, obj.future.back().y});
      else
        traj.push_back({obj.past.back().x, obj.past.back().y});
    }
    f.positions.push_back(std::move(traj));
    f.radii.push_back(obj.radius);
  }
  return f;
}

// Constant-velocity extrapolation of observed motion (causal deployment).
inline ForecastAgent constant_velocity_forecast(const Scene& scene, int t_future,
                                                double dt) {
  ForecastAgent f;
  for (const auto& obj : scene.objects) {
    const auto& cur = obj.past.back();
    double vx = 0, vy = 0;
    if (obj.past.size() >= 2) {
      const auto& prev = obj.past[obj.past.size() - 2];
      vx = (cur.x - prev.x) / dt;
      vy = (cur.y - prev.y) / dt;
    }
    std::vector<std::array<double, 2>> traj;
    for (int t = 0; t < t_future; ++t)
      traj.push_back({cur.x + vx * dt * (t + 1), cur.y + vy * dt * (t + 1)});
    f.positions.push_back(std::move(traj));
    f.radii.push_back(obj.radius);
  }
  return f;
}

// Admissibility of one candidate. ego_speed is the current speed (used for
// the first-step acceleration bound).
inline bool trajectory_admissible(const TrajectoryPoints& traj, double ego_radius,
                                  double ego_speed, const ForecastAgent& forecast,
                                  const MapPolyline* route, const KinematicLimits& lim,
                                  double dt) {
  lim.validate();
  int t_f = static_cast<int>(traj.size());
  // (a) disc overlap with any forecast agent at any shared timestep
  for (size_t o = 0; o < forecast.positions.size(); ++o) {
    const auto& op = forecast.positions[o];
    double clearance = ego_radius + forecast.radii[o];
    for (int t = 0; t < t_f && t < static_cast<int>(op.size()); ++t)
      if (dist2(traj[t][0], traj[t][1], op[t][0], op[t][1]) <= clearance * clearance)
        return false;
  }
  // speeds from segment lengths (origin -> p0 -> p1 -> ...)
  std::vector<double> seg(t_f);
  double px = 0, py = 0;
  for (int t = 0; t < t_f; ++t) {
    seg[t] = std::sqrt(dist2(traj[t][0], traj[t][1], px, py));
    px = traj[t][0];
    py = traj[t][1];
  }
  // (c) speed cap per step; acceleration from window-averaged speeds
  for (int t = 0; t < t_f; ++t)
    if (seg[t] / dt > lim.max_speed) return false;
  {
    int w = std::max(1, lim.accel_window);
    std::vector<double> u;      // mean speed per window
    std::vector<double> t_mid;  // window midpoint time
    for (int start = 0; start < t_f; start += w) {
      int end = std::min(start + w, t_f);
      double arc = 0;
      for (int t = start; t < end; ++t) arc += seg[t];
      u.push_back(arc / ((end - start) * dt));
      t_mid.push_back((start + end) * dt / 2);
    }
    // from the current speed (time 0) into the first window
    if (std::abs(u[0] - ego_speed) / t_mid[0] > lim.max_accel + 1e-9) return false;
    for (size_t k = 0; k + 1 < u.size(); ++k)
      if (std::abs(u[k + 1] - u[k]) / (t_mid[k + 1] - t_mid[k]) >
          lim.max_accel + 1e-9)
        return false;
  }
  // (b) discrete curvature: heading change per arclength, with headings taken
  // between points at least min_heading_arc apart so near-stationary jitter
  // does not read as turning
  {
    double prev_heading = 0.0;  // ego frame: current heading is +x
    double ax = 0, ay = 0;      // last heading anchor
    double arc = 0;
    px = 0, py = 0;
    for (int t = 0; t < t_f; ++t) {
      arc += seg[t];
      if (arc >= lim.min_heading_arc) {
        double heading = std::atan2(traj[t][1] - ay, traj[t][0] - ax);
        double dh = std::remainder(heading - prev_heading, 2 * kPi);
        if (std::abs(dh) / arc > lim.max_curvature + 1e-9) return false;
        prev_heading = heading;
        ax = traj[t][0];
        ay = traj[t][1];
        arc = 0;
      }
      px = traj[t][0];
      py = traj[t][1];
    }
  }
  // (d) lateral bound wrt the route centerline
  if (route) {
    for (const auto& p : traj)
      if (point_polyline_distance(p[0], p[1], *route) > lim.max_lateral_offset)
        return false;
  }
  return true;
}

inline std::vector<uint8_t> contingency_mask(const std::vector<TrajectoryPoints>& cands,
                                             double ego_radius, double ego_speed,
                                             const ForecastAgent& forecast,
                                             const MapPolyline* route,
                                             const KinematicLimits& lim, double dt) {
  std::vector<uint8_t> mask(cands.size(), 0);
  for (size_t i = 0; i < cands.size(); ++i)
    mask[i] = trajectory_admissible(cands[i], ego_radius, ego_speed, forecast, route,
                                    lim, dt)
                  ? 1
                  : 0;
  return mask;
}

// Straight-line maximum-deceleration stop along the current heading (+x in
// the ego frame). Always available as a last resort.
inline TrajectoryPoints fallback_stop_trajectory(double ego_speed, int t_future,
                                                 double dt, double max_decel = 4.0) {
  TrajectoryPoints traj;
  double v = ego_speed, x = 0;
  for (int t = 0; t < t_future; ++t) {
    x += v * dt;
    v = std::max(0.0, v - max_decel * dt);
    traj.push_back({x, 0.0});
  }
  return traj;
}

// Straight low-speed crawl along the current heading. Offered to the
// admissibility test when every proposed candidate is rejected, so a blocked
// mask at rest cannot hold the ego in place for the rest of the episode.
inline TrajectoryPoints creep_trajectory(double ego_speed, int t_future, double dt,
                                         double cruise = 1.5, double accel = 1.0) {
  TrajectoryPoints traj;
  double v = ego_speed, x = 0;
  for (int t = 0; t < t_future; ++t) {
    if (v < cruise)
      v = std::min(cruise, v + accel * dt);
    else
      v = std::max(cruise, v - accel * dt);
    x += v * dt;
    traj.push_back({x, 0.0});
  }
  return traj;
}

struct Selection {
  int index = -1;        // -1 = fallback
  TrajectoryPoints trajectory;
  bool used_fallback = false;
};

// Argmax score over admissible candidates, ties to the lowest index.
inline Selection select_trajectory(const TrajectoryBundle& bundle, double ego_speed,
                                   int t_future, double dt) {
  Selection sel;
  double best = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < bundle.candidates.size(); ++i) {
    if (!bundle.mask[i]) continue;
    if (bundle.scores[i] > best) {
      best = bundle.scores[i];
      sel.index = static_cast<int>(i);
    }
  }
  if (sel.index < 0) {
    sel.used_fallback = true;
    sel.trajectory = fallback_stop_trajectory(ego_speed, t_future, dt);
  } else {
    sel.trajectory = bundle.candidates[sel.index];
  }
  return sel;
}

// ---- imitation loss ----

struct PlannerLossTerms {
  double target_cls = 0, target_offset = 0, traj_reg = 0, score = 0;
  double total = 0;
};

template <typename T>
struct ImitationGraph {
  typename Tape<T>::Ref target_cls, target_offset, traj_reg, score, total;
  int label_anchor = -1;
  bool endpoint_clamped = false;
};

// TNT-style imitation objective against the scene's ground-truth ego future.
//   target_cls:    cross-entropy over anchors, label = anchor nearest the GT
//                  endpoint (clamped into the anchor hull if outside)
//   target_offset: smooth-L1 on the labeled anchor's regressed offset
//   traj_reg:      smooth-L1 of the GT-endpoint-conditioned trajectory
//   score:         cross-entropy against teacher softmax(-d_m / tau), where
//                  d_m is each candidate endpoint's distance to the GT endpoint
template <typename T>
ImitationGraph<T> imitation_loss_graph(Tape<T>& tape, ParameterStoreT<T>& ps,
                                       typename Tape<T>::Ref ego_feat,
                                       const Scene& scene, const PlannerConfig& cfg) {
  if (scene.ego.future.empty())
    throw ValidationError("imitation loss: scene has no ground-truth ego future");
  ImitationGraph<T> g;
  auto anchors = anchor_grid(cfg);
  int m = cfg.num_candidates();

  double gx = scene.ego.future.back().x;
  double gy = scene.ego.future.back().y;
  double cx = std::clamp(gx, cfg.lon_min, cfg.lon_max);
  double cy = std::clamp(gy, cfg.lat_min, cfg.lat_max);
  g.endpoint_clamped = (cx != gx || cy != gy);
  int label = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < m; ++i) {
    double d = dist2(cx, cy, anchors[i][0], anchors[i][1]);
    if (d < best) {
      best = d;
      label = i;
    }
  }
  g.label_anchor = label;

  auto prop = propose_targets_graph(tape, ps, ego_feat, cfg);
  g.target_cls = tape.cross_entropy_with_index(prop.logits, label);

  auto off_label = tape.slice_row(prop.offsets, label);
  Tensor<T> gt_off(1, 2);
  gt_off.at(0, 0) = static_cast<T>(cx - anchors[label][0]);
  gt_off.at(0, 1) = static_cast<T>(cy - anchors[label][1]);
  g.target_offset = tape.smooth_l1_mean(tape.sub(off_label, tape.leaf(gt_off)));

  // trajectory conditioned on the GT endpoint
  Tensor<T> gt_target(1, 2);
  gt_target.at(0, 0) = static_cast<T>(gx);
  gt_target.at(0, 1) = static_cast<T>(gy);
  T v0 = static_cast<T>(scene.ego.past.back().speed);
  auto traj_gt = generate_trajectories_graph(tape, ps, ego_feat,
                                             tape.leaf(gt_target), v0, cfg);  // 1 x 2T_f
  Tensor<T> gt_future(1, cfg.traj_dim());
  for (int t = 0; t < cfg.t_future; ++t) {
    gt_future.at(0, 2 * t) = static_cast<T>(scene.ego.future[t].x);
    gt_future.at(0, 2 * t + 1) = static_cast<T>(scene.ego.future[t].y);
  }
  g.traj_reg = tape.smooth_l1_mean(tape.sub(traj_gt, tape.leaf(gt_future)));

  // candidate trajectories from current target proposals (values detached:
  // the scoring path supervises the score head, not the proposal heads)
  Tensor<T> cand_targets(m, 2);
  {
    const auto& off_val = tape.value(prop.offsets);
    for (int i = 0; i < m; ++i) {
      cand_targets.at(i, 0) = static_cast<T>(anchors[i][0]) + off_val[2 * i];
      cand_targets.at(i, 1) = static_cast<T>(anchors[i][1]) + off_val[2 * i + 1];
    }
  }
  auto cand_traj = generate_trajectories_graph(tape, ps, ego_feat,
                                               tape.leaf(cand_targets), v0, cfg);
  auto score_logits = score_graph(tape, ps, ego_feat, tape.stopgrad(cand_traj));

  // teacher over candidate endpoints
  std::vector<T> teacher(m);
  {
    const auto& tv = tape.value(cand_traj);
    T mx = -std::numeric_limits<T>::infinity();
    std::vector<T> neg_d(m);
    for (int i = 0; i < m; ++i) {
      double ex = tv[static_cast<size_t>(i) * cfg.traj_dim() + 2 * (cfg.t_future - 1)];
      double ey = tv[static_cast<size_t>(i) * cfg.traj_dim() + 2 * (cfg.t_future - 1) + 1];
      neg_d[i] = static_cast<T>(-std::sqrt(dist2(ex, ey, gx, gy)) / cfg.tau);
      mx = std::max(mx, neg_d[i]);
    }
    T z = 0;
    for (int i = 0; i < m; ++i) z += std::exp(neg_d[i] - mx);
    for (int i = 0; i < m; ++i) teacher[i] = std::exp(neg_d[i] - mx) / z;
  }
  // KL(teacher || score softmax): cross-entropy minus the (constant) teacher
  // entropy, so a perfectly matching scorer contributes exactly 0
  T teacher_entropy = 0;
  for (T q : teacher)
    if (q > 0) teacher_entropy -= q * std::log(q);
  g.score = tape.sub(tape.cross_entropy_with_dist(score_logits, teacher),
                     tape.scalar(teacher_entropy));

  g.total = tape.add(
      tape.add(g.target_cls, tape.scale(g.target_offset, static_cast<T>(cfg.lambda1))),
      tape.add(tape.scale(g.traj_reg, static_cast<T>(cfg.lambda2)),
               tape.scale(g.score, static_cast<T>(cfg.lambda3))));
  return g;
}

template <typename T>
PlannerLossTerms imitation_loss_terms(const Tape<T>& tape, const ImitationGraph<T>& g) {
  PlannerLossTerms t;
  t.target_cls = tape.scalar_value(g.target_cls);
  t.target_offset = tape.scalar_value(g.target_offset);
  t.traj_reg = tape.scalar_value(g.traj_reg);
  t.score = tape.scalar_value(g.score);
  t.total = tape.scalar_value(g.total);
  return t;
}

// ---- value-level planning (closed-loop inference) ----

struct PlanInput {
  std::vector<float> ego_feat;
  double ego_speed = 0;
  double ego_radius = 1.0;
  ForecastAgent forecast;
  const MapPolyline* route = nullptr;
};

inline TrajectoryBundle plan_candidates(ParameterStore& ps, const PlanInput& in,
                                        const PlannerConfig& cfg,
                                        const KinematicLimits& lim) {
  Tape<float> tape;
  auto ego = tape.leaf_row(in.ego_feat);
  auto prop = propose_targets_graph(tape, ps, ego, cfg);
  auto anchors = anchor_grid(cfg);
  int m = cfg.num_candidates();

  TrajectoryBundle bundle;
  const auto& logit_val = tape.value(prop.logits);
  const auto& off_val = tape.value(prop.offsets);
  Tensor<float> cand_targets(m, 2);
  for (int i = 0; i < m; ++i) {
    TargetCandidate tc;
    tc.anchor_x = anchors[i][0];
    tc.anchor_y = anchors[i][1];
    tc.offset_x = off_val[2 * i];
    tc.offset_y = off_val[2 * i + 1];
    tc.logit = logit_val[i];
    bundle.targets.push_back(tc);
    cand_targets.at(i, 0) = static_cast<float>(tc.x());
    cand_targets.at(i, 1) = static_cast<float>(tc.y());
  }
  auto traj = generate_trajectories_graph(tape, ps, ego, tape.leaf(cand_targets),
                                          static_cast<float>(in.ego_speed), cfg);
  const auto& tv = tape.value(traj);
  for (int i = 0; i < m; ++i) {
    TrajectoryPoints pts(cfg.t_future);
    for (int t = 0; t < cfg.t_future; ++t) {
      pts[t][0] = tv[static_cast<size_t>(i) * cfg.traj_dim() + 2 * t];
      pts[t][1] = tv[static_cast<size_t>(i) * cfg.traj_dim() + 2 * t + 1];
    }
    bundle.candidates.push_back(std::move(pts));
  }
  auto scores = score_graph(tape, ps, ego, traj);
  const auto& sv = tape.value(scores);
  bundle.scores.assign(sv.begin(), sv.end());
  bundle.mask = contingency_mask(bundle.candidates, in.ego_radius, in.ego_speed,
                                 in.forecast, in.route, lim, cfg.dt);
  return bundle;
}

}  // namespace caps
