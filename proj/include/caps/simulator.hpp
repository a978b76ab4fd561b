#pragma once

#include <atomic>
#include <deque>
#include <functional>
#include <memory>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "caps/encoder.hpp"
#include "caps/planner.hpp"
#include "caps/scenegen.hpp"

namespace caps {

struct ScenarioSpec {
  Scene scene;  // ego past + scripted object futures + map + goal
  int max_steps = 60;
  int replan_interval = 2;

  void validate() const {
    if (max_steps < 1) throw ValidationError("scenario: max_steps >= 1");
    if (replan_interval < 1) throw ValidationError("scenario: replan_interval >= 1");
    if (scene.ego.past.empty()) throw ValidationError("scenario: empty ego history");
  }
};

struct StepTrace {
  AgentState ego;
  int chosen = -1;      // candidate index, -1 = fallback or fixture
  int admissible = -1;  // mask count at the last replan
};

struct EpisodeResult {
  double route_completion = 0;
  int collisions = 0;
  bool off_route = false;
  bool timeout = false;
  bool min_speed_infraction = false;
  bool goal_reached = false;
  bool planner_failure = false;
  double driving_score = 0;
  bool success = false;
  std::vector<StepTrace> trace;
};

struct PlanOutcome {
  TrajectoryPoints trajectory;  // current ego frame
  int chosen = -1;
  int admissible = -1;
};

// Planner under closed-loop test. The observation is a causal scene in the
// current ego frame (objects carry observed history only, no futures).
class PlannerInterface {
 public:
  virtual ~PlannerInterface() = default;
  virtual PlanOutcome plan(const Scene& observation, double ego_speed) = 0;
};

namespace detail {

struct Pose {
  double x = 0, y = 0, heading = 0;
};

inline AgentState to_frame(const AgentState& s, const Pose& p) {
  double c = std::cos(p.heading), sn = std::sin(p.heading);
  double dx = s.x - p.x, dy = s.y - p.y;
  AgentState out;
  out.x = c * dx + sn * dy;
  out.y = -sn * dx + c * dy;
  out.heading = std::remainder(s.heading - p.heading, 2 * kPi);
  out.speed = s.speed;
  return out;
}

inline std::array<double, 2> from_frame(double xe, double ye, const Pose& p) {
  double c = std::cos(p.heading), sn = std::sin(p.heading);
  return {p.x + c * xe - sn * ye, p.y + sn * xe + c * ye};
}

// World-frame object timeline covering history plus max_steps of scripted
// future, extrapolated at constant velocity past the scripted horizon.
inline std::vector<AgentState> object_timeline(const AgentTrack& obj, int max_steps,
                                               double dt) {
  std::vector<AgentState> tl = obj.past;
  tl.insert(tl.end(), obj.future.begin(), obj.future.end());
  while (static_cast<int>(tl.size()) < static_cast<int>(obj.past.size()) + max_steps) {
    AgentState next = tl.back();
    if (tl.size() >= 2) {
      const auto& prev = tl[tl.size() - 2];
      next.x += tl.back().x - prev.x;
      next.y += tl.back().y - prev.y;
    }
    tl.push_back(next);
  }
  return tl;
}

inline double polyline_arclength_at(double px, double py, const MapPolyline& pl) {
  double best = std::numeric_limits<double>::infinity();
  double best_s = 0, s = 0;
  for (size_t i = 0; i + 1 < pl.points.size(); ++i) {
    double ax = pl.points[i][0], ay = pl.points[i][1];
    double bx = pl.points[i + 1][0], by = pl.points[i + 1][1];
    double vx = bx - ax, vy = by - ay;
    double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    double d = dist2(px, py, ax + t * vx, ay + t * vy);
    if (d < best) {
      best = d;
      best_s = s + t * std::sqrt(len2);
    }
    s += std::sqrt(len2);
  }
  return best_s;
}

}  // namespace detail

struct InfractionFlags {
  bool collision = false;
  bool off_route = false;
  bool clear_ahead = true;  // no object within 15 m in front of the ego
};

inline InfractionFlags infraction_check(
    const AgentState& ego, double ego_radius,
    const std::vector<std::pair<std::array<double, 2>, double>>& objects,
    const MapPolyline* route) {
  InfractionFlags f;
  double c = std::cos(ego.heading), sn = std::sin(ego.heading);
  for (const auto& [pos, radius] : objects) {
    double d2 = dist2(ego.x, ego.y, pos[0], pos[1]);
    double clearance = ego_radius + radius;
    if (d2 < clearance * clearance) f.collision = true;
    double ahead = c * (pos[0] - ego.x) + sn * (pos[1] - ego.y);
    if (ahead > 0 && d2 <= 15.0 * 15.0) f.clear_ahead = false;
  }
  if (route && point_polyline_distance(ego.x, ego.y, *route) > 3.5) f.off_route = true;
  return f;
}

inline EpisodeResult run_episode(const ScenarioSpec& spec, PlannerInterface& planner,
                                 double dt = 0.2) {
  spec.validate();
  const Scene& sc = spec.scene;
  const MapPolyline* route = nullptr;
  for (const auto& pl : sc.map)
    if (pl.role == PolylineRole::RouteCenterline) {
      route = &pl;
      break;
    }

  int t_p = static_cast<int>(sc.ego.past.size());
  std::vector<std::vector<AgentState>> obj_tl;
  for (const auto& o : sc.objects)
    obj_tl.push_back(detail::object_timeline(o, spec.max_steps, dt));

  std::deque<AgentState> ego_hist(sc.ego.past.begin(), sc.ego.past.end());
  EpisodeResult res;
  double s_start = route ? detail::polyline_arclength_at(0, 0, *route) : 0;
  double s_goal =
      route ? detail::polyline_arclength_at(sc.goal_x, sc.goal_y, *route) : 1;
  int collision_grace = -1;
  int low_speed_run = 0;
  TrajectoryPoints plan_world;  // pending waypoints in world frame
  size_t plan_cursor = 0;
  // heading anchor: the tangent is estimated over at least this much travel,
  // so centimetre-scale jitter near a stop cannot spin the ego frame
  const double heading_arc = 0.3;
  double anchor_x = ego_hist.back().x, anchor_y = ego_hist.back().y;
  int last_chosen = -1, last_admissible = -1;

  for (int step = 0; step < spec.max_steps; ++step) {
    const AgentState& cur = ego_hist.back();
    detail::Pose pose{cur.x, cur.y, cur.heading};

    if (step % spec.replan_interval == 0 || plan_cursor >= plan_world.size()) {
      // causal observation in the current ego frame
      Scene obs;
      obs.scene_id = sc.scene_id;
      obs.family = sc.family;
      obs.goal_x = 0;
      obs.goal_y = 0;
      {
        auto g = detail::to_frame(AgentState{sc.goal_x, sc.goal_y, 0, 0}, pose);
        obs.goal_x = g.x;
        obs.goal_y = g.y;
      }
      obs.ego.kind = AgentKind::Ego;
      obs.ego.radius = sc.ego.radius;
      for (const auto& st : ego_hist) obs.ego.past.push_back(detail::to_frame(st, pose));
      for (size_t o = 0; o < sc.objects.size(); ++o) {
        AgentTrack tr;
        tr.id = sc.objects[o].id;
        tr.kind = sc.objects[o].kind;
        tr.radius = sc.objects[o].radius;
        // observed history: timeline entries up to the current step
        int hi = t_p + step;
        int lo = std::max(0, hi - t_p);
        for (int i = lo; i < hi; ++i)
          tr.past.push_back(detail::to_frame(obj_tl[o][i], pose));
        obs.objects.push_back(std::move(tr));
      }
      for (const auto& pl : sc.map) {
        MapPolyline tp;
        tp.role = pl.role;
        for (const auto& p : pl.points) {
          auto q = detail::to_frame(AgentState{p[0], p[1], 0, 0}, pose);
          tp.points.push_back({q.x, q.y});
        }
        obs.map.push_back(std::move(tp));
      }

      PlanOutcome out = planner.plan(obs, cur.speed);
      last_chosen = out.chosen;
      last_admissible = out.admissible;
      bool finite = !out.trajectory.empty();
      for (const auto& p : out.trajectory)
        if (!std::isfinite(p[0]) || !std::isfinite(p[1])) finite = false;
      if (!finite) {
        res.planner_failure = true;
        res.driving_score = 0;
        return res;
      }
      plan_world.clear();
      for (const auto& p : out.trajectory)
        plan_world.push_back(detail::from_frame(p[0], p[1], pose));
      plan_cursor = 0;
    }

    // execute one waypoint
    AgentState next;
    next.x = plan_world[plan_cursor][0];
    next.y = plan_world[plan_cursor][1];
    ++plan_cursor;
    double dx = next.x - cur.x, dy = next.y - cur.y;
    double dist = std::sqrt(dx * dx + dy * dy);
    next.speed = dist / dt;
    double ax = next.x - anchor_x, ay = next.y - anchor_y;
    if (std::sqrt(ax * ax + ay * ay) >= heading_arc) {
      next.heading = std::atan2(ay, ax);
      anchor_x = next.x;
      anchor_y = next.y;
    } else {
      next.heading = cur.heading;
    }
    ego_hist.push_back(next);
    while (static_cast<int>(ego_hist.size()) > t_p) ego_hist.pop_front();

    // advance scripted objects and check infractions
    std::vector<std::pair<std::array<double, 2>, double>> obj_now;
    for (size_t o = 0; o < sc.objects.size(); ++o) {
      const auto& st = obj_tl[o][t_p + step];
      obj_now.push_back({{st.x, st.y}, sc.objects[o].radius});
    }
    auto flags = infraction_check(next, sc.ego.radius, obj_now, route);
    res.trace.push_back({next, last_chosen, last_admissible});

    if (flags.collision && collision_grace < 0) {
      res.collisions++;
      collision_grace = 3;
    }
    if (flags.off_route) res.off_route = true;
    if (next.speed < 1.0 && flags.clear_ahead)
      ++low_speed_run;
    else
      low_speed_run = 0;
    if (low_speed_run > 20) res.min_speed_infraction = true;

    if (route) {
      double s = detail::polyline_arclength_at(next.x, next.y, *route);
      double denom = s_goal - s_start;
      double rc = denom > 1e-9 ? (s - s_start) / denom : 1.0;
      res.route_completion = std::max(res.route_completion, std::clamp(rc, 0.0, 1.0));
    }

    if (dist2(next.x, next.y, sc.goal_x, sc.goal_y) <= 4.0) {
      res.goal_reached = true;
      res.route_completion = 1.0;
      break;
    }
    if (flags.off_route) break;
    if (collision_grace >= 0 && collision_grace-- == 0) break;
    if (step == spec.max_steps - 1) res.timeout = true;
  }

  res.driving_score = res.route_completion * std::pow(0.5, res.collisions) *
                      (res.off_route ? 0.7 : 1.0);
  res.success =
      res.goal_reached && res.collisions == 0 && !res.off_route && !res.timeout;
  return res;
}

// ---- planner implementations ----

// Trained causal model: encode, propose, mask, score, select.
class ModelPlanner : public PlannerInterface {
 public:
  ModelPlanner(ParameterStore params, EncoderConfig ecfg, PlannerConfig pcfg,
               KinematicLimits lim = {})
      : params_(std::move(params)), ecfg_(std::move(ecfg)), pcfg_(std::move(pcfg)),
        lim_(lim) {}

  PlanOutcome plan(const Scene& obs, double ego_speed) override {
    auto emb = encode_scene(obs, params_, "encoder.causal", ecfg_, EncoderMode::Causal);
    PlanInput in;
    in.ego_feat = emb.ego_feature();
    in.ego_speed = ego_speed;
    in.ego_radius = obs.ego.radius;
    in.forecast = constant_velocity_forecast(obs, pcfg_.t_future, pcfg_.dt);
    for (const auto& pl : obs.map)
      if (pl.role == PolylineRole::RouteCenterline) {
        route_ = pl;
        in.route = &route_;
        break;
      }
    auto bundle = plan_candidates(params_, in, pcfg_, lim_);
    auto sel = select_trajectory(bundle, ego_speed, pcfg_.t_future, pcfg_.dt);
    if (sel.used_fallback) {
      auto creep = creep_trajectory(ego_speed, pcfg_.t_future, pcfg_.dt);
      if (trajectory_admissible(creep, in.ego_radius, ego_speed, in.forecast,
                                in.route, lim_, pcfg_.dt))
        sel.trajectory = std::move(creep);
    }
    PlanOutcome out;
    out.trajectory = std::move(sel.trajectory);
    out.chosen = sel.index;
    out.admissible = 0;
    for (uint8_t m : bundle.mask) out.admissible += m;
    return out;
  }

 private:
  ParameterStore params_;
  EncoderConfig ecfg_;
  PlannerConfig pcfg_;
  KinematicLimits lim_;
  MapPolyline route_;
};

// Replays the scenario's ground-truth ego future (test oracle). The simulator
// moves the ego exactly onto the returned waypoints, so the world pose after
// n executed steps is the n-th ground-truth state, with headings mirroring
// the simulator's displacement rule.
class OraclePlanner : public PlannerInterface {
 public:
  OraclePlanner(const Scene& scene, int replan_interval = 2)
      : gt_(scene.ego.future), replan_(replan_interval) {}

  PlanOutcome plan(const Scene&, double) override {
    detail::Pose pose = pose_after(executed_);
    PlanOutcome out;
    for (size_t i = executed_; i < gt_.size(); ++i) {
      auto s = detail::to_frame(AgentState{gt_[i].x, gt_[i].y, 0, 0}, pose);
      out.trajectory.push_back({s.x, s.y});
    }
    if (out.trajectory.empty()) out.trajectory.push_back({0.0, 0.0});  // hold
    executed_ += replan_;
    return out;
  }

 private:
  detail::Pose pose_after(size_t n) const {
    double px = 0, py = 0, heading = 0;
    for (size_t i = 0; i < n && i < gt_.size(); ++i) {
      double dx = gt_[i].x - px, dy = gt_[i].y - py;
      if (std::sqrt(dx * dx + dy * dy) > 1e-6) heading = std::atan2(dy, dx);
      px = gt_[i].x;
      py = gt_[i].y;
    }
    return {px, py, heading};
  }

  std::vector<AgentState> gt_;
  int replan_;
  size_t executed_ = 0;
};

// Immediate maximum-deceleration stop.
class BrakeOnlyPlanner : public PlannerInterface {
 public:
  explicit BrakeOnlyPlanner(int t_future = 20, double dt = 0.2)
      : t_future_(t_future), dt_(dt) {}
  PlanOutcome plan(const Scene&, double ego_speed) override {
    return {fallback_stop_trajectory(ego_speed, t_future_, dt_), -1, 0};
  }

 private:
  int t_future_;
  double dt_;
};

// Constant-speed straight line along the current heading.
class StraightPlanner : public PlannerInterface {
 public:
  explicit StraightPlanner(double speed, int t_future = 20, double dt = 0.2)
      : speed_(speed), t_future_(t_future), dt_(dt) {}
  PlanOutcome plan(const Scene&, double) override {
    TrajectoryPoints traj;
    for (int t = 0; t < t_future_; ++t) traj.push_back({speed_ * dt_ * (t + 1), 0.0});
    return {std::move(traj), -1, 0};
  }

 private:
  double speed_;
  int t_future_;
  double dt_;
};

// ---- suite evaluation ----

struct FamilyStats {
  long episodes = 0;
  long successes = 0;
  double ds_sum = 0;

  double success_rate() const {
    return episodes ? 100.0 * successes / episodes : 0.0;
  }
  double mean_driving_score() const { return episodes ? ds_sum / episodes : 0.0; }
};

struct MetricsReport {
  long episodes = 0;
  double mean_driving_score = 0;
  double success_rate = 0;  // percent
  std::map<Family, FamilyStats> per_family;

  nlohmann::json to_json() const {
    nlohmann::json fams = nlohmann::json::object();
    for (const auto& [f, st] : per_family)
      fams[to_string(f)] = {{"episodes", st.episodes},
                            {"successes", st.successes},
                            {"success_rate", st.success_rate()},
                            {"mean_driving_score", st.mean_driving_score()}};
    return {{"episodes", episodes},
            {"mean_driving_score", mean_driving_score},
            {"success_rate", success_rate},
            {"per_family", fams}};
  }
};

using PlannerFactory =
    std::function<std::unique_ptr<PlannerInterface>(const ScenarioSpec&)>;

inline MetricsReport evaluate(const std::vector<ScenarioSpec>& suite,
                              const PlannerFactory& make_planner, int threads = 1,
                              double dt = 0.2,
                              std::vector<EpisodeResult>* episode_results = nullptr) {
  if (suite.empty()) throw ValidationError("evaluate: empty suite");
  std::vector<EpisodeResult> results(suite.size());
  auto run_one = [&](size_t i) {
    auto planner = make_planner(suite[i]);
    results[i] = run_episode(suite[i], *planner, dt);
  };
  if (threads <= 1) {
    for (size_t i = 0; i < suite.size(); ++i) run_one(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> workers;
    for (int w = 0; w < threads; ++w)
      workers.emplace_back([&]() {
        for (;;) {
          size_t i = next.fetch_add(1);
          if (i >= suite.size()) return;
          run_one(i);
        }
      });
    for (auto& t : workers) t.join();
  }

  MetricsReport rep;
  rep.episodes = static_cast<long>(suite.size());
  for (size_t i = 0; i < suite.size(); ++i) {
    const auto& r = results[i];
    rep.mean_driving_score += r.driving_score;
    rep.success_rate += r.success ? 1 : 0;
    auto& fs = rep.per_family[suite[i].scene.family];
    fs.episodes++;
    fs.successes += r.success ? 1 : 0;
    fs.ds_sum += r.driving_score;
  }
  rep.mean_driving_score /= rep.episodes;
  rep.success_rate = 100.0 * rep.success_rate / rep.episodes;
  if (episode_results) *episode_results = std::move(results);
  return rep;
}

}  // namespace caps
