#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "caps/rng.hpp"
#include "caps/scene.hpp"

namespace caps {

struct SceneGenParams {
  int t_past = 10;    // 2 s of history at dt
  int t_future = 20;  // 4 s of future
  double dt = 0.2;
  double ego_speed_min = 2.0;
  double ego_speed_max = 5.0;
  double cut_in_gap_min = 5.0;
  double cut_in_gap_max = 20.0;
  double radius_ego = 1.0;
  double radius_vehicle = 1.0;
  double a_max = 4.0;
  double lane_half_width = 3.5;

  void validate() const {
    if (t_past < 1 || t_future < 1 || dt <= 0)
      throw ValidationError("scenegen: horizons/dt out of range");
    if (ego_speed_min < 0 || ego_speed_max > 15 || ego_speed_min > ego_speed_max)
      throw ValidationError("scenegen: ego speed range must lie in [0, 15]");
    if (cut_in_gap_min < 5 || cut_in_gap_max > 20 || cut_in_gap_min > cut_in_gap_max)
      throw ValidationError("scenegen: cut-in gap range must lie in [5, 20]");
    if (radius_ego <= 0 || radius_vehicle <= 0 || a_max <= 0)
      throw ValidationError("scenegen: radii and a_max must be positive");
  }
};

namespace detail {

// Straight-line track along +x at y=y0 following a per-step speed profile.
// profile[i] is the speed at step i; there are t_past + t_future + 1 entries
// (index t_past-1 = current state at x0).
inline AgentTrack straight_track(int id, AgentKind kind, double radius, double x0,
                                 double y0, const std::vector<double>& profile,
                                 int t_past, double dt) {
  AgentTrack tr;
  tr.id = id;
  tr.kind = kind;
  tr.radius = radius;
  // integrate forward from the oldest state
  int total = static_cast<int>(profile.size());
  std::vector<double> xs(total);
  // current state is at index t_past - 1; integrate backwards for the past
  xs[t_past - 1] = x0;
  for (int i = t_past - 1; i > 0; --i) xs[i - 1] = xs[i] - profile[i - 1] * dt;
  for (int i = t_past - 1; i + 1 < total; ++i) xs[i + 1] = xs[i] + profile[i] * dt;
  for (int i = 0; i < total; ++i) {
    AgentState s{xs[i], y0, 0.0, profile[i]};
    if (i < t_past)
      tr.past.push_back(s);
    else
      tr.future.push_back(s);
  }
  return tr;
}

inline std::vector<MapPolyline> straight_road(double half_width) {
  std::vector<MapPolyline> map;
  MapPolyline center;
  center.role = PolylineRole::RouteCenterline;
  for (double x = -30; x <= 70 + 1e-9; x += 10) center.points.push_back({x, 0.0});
  map.push_back(center);
  for (double side : {-half_width, half_width}) {
    MapPolyline b;
    b.role = PolylineRole::LaneBoundary;
    for (double x = -30; x <= 70 + 1e-9; x += 10) b.points.push_back({x, side});
    map.push_back(b);
  }
  return map;
}

// Positions-first track: states derived from given (x, y) waypoints;
// speed[i] = ||p_{i+1} - p_i|| / dt (last repeats), heading along motion.
inline AgentTrack track_from_points(int id, AgentKind kind, double radius,
                                    const std::vector<std::array<double, 2>>& pts,
                                    int t_past, double dt) {
  AgentTrack tr;
  tr.id = id;
  tr.kind = kind;
  tr.radius = radius;
  int total = static_cast<int>(pts.size());
  double last_heading = 0.0;
  for (int i = 0; i < total; ++i) {
    double dx, dy;
    if (i + 1 < total) {
      dx = pts[i + 1][0] - pts[i][0];
      dy = pts[i + 1][1] - pts[i][1];
    } else {
      dx = pts[i][0] - pts[i - 1][0];
      dy = pts[i][1] - pts[i - 1][1];
    }
    double step = std::sqrt(dx * dx + dy * dy);
    double heading = step > 1e-9 ? std::atan2(dy, dx) : last_heading;
    last_heading = heading;
    double speed = (i + 1 < total) ? step / dt : 0.0;
    AgentState s{pts[i][0], pts[i][1], heading, speed};
    if (i < t_past)
      tr.past.push_back(s);
    else
      tr.future.push_back(s);
  }
  // final speed: carry the last segment speed for moving agents
  if (total >= 2) {
    double step = std::sqrt(dist2(pts[total - 1][0], pts[total - 1][1],
                                  pts[total - 2][0], pts[total - 2][1]));
    tr.future.back().speed = step / dt;
  }
  return tr;
}

}  // namespace detail

// Deterministic synthetic scene for one family. Same (family, rng state,
// params) always yields the identical scene.
inline Scene generate_scene(Family family, Rng rng, const SceneGenParams& p = {},
                            long scene_id = 0) {
  p.validate();
  Scene sc;
  sc.scene_id = scene_id;
  sc.family = family;
  sc.seed = rng.stream_id();
  sc.map = detail::straight_road(p.lane_half_width);

  int total = p.t_past + p.t_future;  // states including current
  double v0 = rng.uniform(p.ego_speed_min, p.ego_speed_max);
  int next_id = 1;

  auto constant_profile = [&](double v) { return std::vector<double>(total, v); };

  switch (family) {
    case Family::LaneFollow: {
      double v_lead = std::min(p.ego_speed_max, v0 + rng.uniform(-0.3, 1.0));
      double gap = rng.uniform(15.0, 30.0);
      sc.ego = detail::straight_track(0, AgentKind::Ego, p.radius_ego, 0.0, 0.0,
                                      constant_profile(v0), p.t_past, p.dt);
      sc.objects.push_back(detail::straight_track(next_id++, AgentKind::Vehicle,
                                                  p.radius_vehicle, gap, 0.0,
                                                  constant_profile(v_lead), p.t_past, p.dt));
      break;
    }
    case Family::StopBehind: {
      // cruise then brake at a fixed decel; lead placed behind the stop point
      double a_b = 2.0;
      double brake_time = v0 / a_b;
      double t_max = p.t_future * p.dt;
      double t_cruise = rng.uniform(0.4, std::max(0.5, t_max - brake_time - 0.4));
      std::vector<double> prof(total, v0);
      int n_c = static_cast<int>(t_cruise / p.dt);
      for (int i = p.t_past - 1 + n_c; i < total; ++i) {
        int k = i - (p.t_past - 1 + n_c);
        prof[i] = std::max(0.0, v0 - a_b * p.dt * k);
      }
      // force a full stop by the final state
      prof[total - 1] = 0.0;
      if (prof[total - 2] > a_b * p.dt * 2) prof[total - 2] = a_b * p.dt * 2;
      sc.ego = detail::straight_track(0, AgentKind::Ego, p.radius_ego, 0.0, 0.0, prof,
                                      p.t_past, p.dt);
      double x_stop = sc.ego.future.back().x;
      double bumper_gap = rng.uniform(2.2, 4.0);
      double x_lead = x_stop + p.radius_ego + p.radius_vehicle + bumper_gap;
      AgentKind lead_kind = rng.uniform() < 0.5 ? AgentKind::Vehicle : AgentKind::Obstacle;
      sc.objects.push_back(detail::straight_track(next_id++, lead_kind, p.radius_vehicle,
                                                  x_lead, 0.0, constant_profile(0.0),
                                                  p.t_past, p.dt));
      break;
    }
    case Family::CutIn: {
      // parked vehicle ahead on the shoulder merges into the ego lane while
      // the ego brakes to follow it
      double gap = rng.uniform(p.cut_in_gap_min, p.cut_in_gap_max);
      double side = rng.uniform() < 0.5 ? -2.6 : 2.6;
      double v_merge = rng.uniform(1.5, 3.0);
      double merge_duration = rng.uniform(1.6, 2.4);

      // object waypoints: hold, then accelerate forward while sliding to y=0
      std::vector<std::array<double, 2>> opts(total);
      double ox = gap, oy = side, ov = 0.0;
      int merge_start = p.t_past - 1;  // merge begins at the current timestep
      for (int i = 0; i < total; ++i) {
        opts[i] = {ox, oy};
        if (i >= merge_start) {
          ov = std::min(v_merge, ov + 1.5 * p.dt);
          double frac = std::min(1.0, (i - merge_start) * p.dt / merge_duration);
          double blend = 0.5 - 0.5 * std::cos(frac * kPi);
          ox += ov * p.dt;
          oy = side * (1.0 - blend);
        }
      }
      sc.objects.push_back(detail::track_from_points(next_id++, AgentKind::Vehicle,
                                                     p.radius_vehicle, opts, p.t_past,
                                                     p.dt));

      // ego: brake from v0 toward a following speed below the merger's
      double v_follow = std::max(0.5, v_merge - 0.8);
      double ego_v0 = std::min(v0, 4.0);
      std::vector<double> prof(total, ego_v0);
      for (int i = p.t_past - 1; i < total; ++i) {
        int k = i - (p.t_past - 1);
        prof[i] = std::max(v_follow, ego_v0 - 3.0 * p.dt * k);
      }
      sc.ego = detail::straight_track(0, AgentKind::Ego, p.radius_ego, 0.0, 0.0, prof,
                                      p.t_past, p.dt);

      // safety margin check; brake harder if the scripted pair is too close
      for (int tries = 0; tries < 8; ++tries) {
        double min_d = std::numeric_limits<double>::infinity();
        for (int t = 0; t < p.t_future; ++t)
          min_d = std::min(min_d,
                           std::sqrt(dist2(sc.ego.future[t].x, sc.ego.future[t].y,
                                           sc.objects[0].future[t].x,
                                           sc.objects[0].future[t].y)));
        if (min_d > p.radius_ego + p.radius_vehicle + 0.3) break;
        for (int i = p.t_past - 1; i < total; ++i) {
          int k = i - (p.t_past - 1);
          prof[i] = std::max(0.0, ego_v0 - 4.0 * p.dt * k - 0.3 * tries);
        }
        sc.ego = detail::straight_track(0, AgentKind::Ego, p.radius_ego, 0.0, 0.0, prof,
                                        p.t_past, p.dt);
      }
      break;
    }
  }

  // background parked clutter well clear of the action
  int n_clutter = static_cast<int>(rng.uniform_index(3));
  for (int i = 0; i < n_clutter; ++i) {
    double cx = rng.uniform(45.0, 65.0);
    double cy = rng.uniform() < 0.5 ? -2.8 : 2.8;
    sc.objects.push_back(detail::straight_track(
        next_id++, AgentKind::Vehicle, p.radius_vehicle, cx, cy,
        std::vector<double>(total, 0.0), p.t_past, p.dt));
  }

  sc.goal_x = sc.ego.future.back().x;
  sc.goal_y = sc.ego.future.back().y;
  snap_scene(sc);
  validate_scene(sc, SceneLimits{p.dt, p.a_max});
  return sc;
}

// Exact per-family counts: floor(fraction * n) plus largest-remainder
// distribution of what is left, ties broken by family order.
inline std::map<Family, long> mixture_counts(const std::vector<std::pair<Family, double>>& mixture,
                                             long n) {
  if (mixture.empty()) throw ValidationError("mixture is empty");
  double sum = 0;
  for (const auto& [f, frac] : mixture) {
    if (frac < 0) throw ValidationError("mixture fraction < 0");
    sum += frac;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("mixture fractions must sum to 1");
  if (n < 1) throw ValidationError("dataset size must be >= 1");

  std::vector<long> counts(mixture.size());
  std::vector<std::pair<double, size_t>> rema(mixture.size());
  long assigned = 0;
  for (size_t i = 0; i < mixture.size(); ++i) {
    double exact = mixture[i].second * static_cast<double>(n);
    counts[i] = static_cast<long>(std::floor(exact + 1e-9));
    rema[i] = {exact - counts[i], i};
    assigned += counts[i];
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (long r = 0; r < n - assigned; ++r) counts[rema[r % rema.size()].second]++;

  std::map<Family, long> out;
  for (size_t i = 0; i < mixture.size(); ++i)
    if (counts[i] > 0) out[mixture[i].first] += counts[i];
  return out;
}

}  // namespace caps
