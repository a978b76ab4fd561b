#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "caps/common.hpp"

namespace caps {

struct AgentState {
  double x = 0, y = 0, heading = 0, speed = 0;
};

enum class AgentKind { Ego, Vehicle, Obstacle };
enum class Family { LaneFollow, StopBehind, CutIn };
enum class PolylineRole { RouteCenterline, LaneBoundary };

inline std::string to_string(AgentKind k) {
  switch (k) {
    case AgentKind::Ego: return "ego";
    case AgentKind::Vehicle: return "vehicle";
    case AgentKind::Obstacle: return "obstacle";
  }
  return "?";
}
inline std::string to_string(Family f) {
  switch (f) {
    case Family::LaneFollow: return "lane_follow";
    case Family::StopBehind: return "stop_behind";
    case Family::CutIn: return "cut_in";
  }
  return "?";
}
inline std::string to_string(PolylineRole r) {
  return r == PolylineRole::RouteCenterline ? "route_centerline" : "lane_boundary";
}

inline Family family_from_string(const std::string& s) {
  if (s == "lane_follow") return Family::LaneFollow;
  if (s == "stop_behind") return Family::StopBehind;
  if (s == "cut_in") return Family::CutIn;
  throw ValidationError("unknown family: " + s);
}
inline AgentKind kind_from_string(const std::string& s) {
  if (s == "ego") return AgentKind::Ego;
  if (s == "vehicle") return AgentKind::Vehicle;
  if (s == "obstacle") return AgentKind::Obstacle;
  throw ValidationError("unknown agent kind: " + s);
}
inline PolylineRole role_from_string(const std::string& s) {
  if (s == "route_centerline") return PolylineRole::RouteCenterline;
  if (s == "lane_boundary") return PolylineRole::LaneBoundary;
  throw ValidationError("unknown polyline role: " + s);
}

struct AgentTrack {
  int id = 0;
  AgentKind kind = AgentKind::Vehicle;
  std::vector<AgentState> past;    // oldest first, last entry = current state
  std::vector<AgentState> future;  // next states after current
  double radius = 1.0;
};

struct MapPolyline {
  std::vector<std::array<double, 2>> points;
  PolylineRole role = PolylineRole::RouteCenterline;
};

// All coordinates in the ego frame at the last observed timestep: ego at
// origin, heading along +x.
struct Scene {
  long scene_id = 0;
  Family family = Family::LaneFollow;
  uint64_t seed = 0;
  AgentTrack ego;
  std::vector<AgentTrack> objects;
  std::vector<MapPolyline> map;
  double goal_x = 0, goal_y = 0;
};

// ---- geometry helpers ----

inline double dist2(double ax, double ay, double bx, double by) {
  double dx = ax - bx, dy = ay - by;
  return dx * dx + dy * dy;
}

// Distance from point to a polyline (segments).
inline double point_polyline_distance(double px, double py, const MapPolyline& pl) {
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i + 1 < pl.points.size(); ++i) {
    double ax = pl.points[i][0], ay = pl.points[i][1];
    double bx = pl.points[i + 1][0], by = pl.points[i + 1][1];
    double vx = bx - ax, vy = by - ay;
    double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    best = std::min(best, dist2(px, py, ax + t * vx, ay + t * vy));
  }
  return std::sqrt(best);
}

// ---- validation ----

struct SceneLimits {
  double dt = 0.2;
  double a_max = 4.0;
};

// Kinematic consistency of one track's concatenated past+future sequence.
inline void validate_track_kinematics(const AgentTrack& tr, const SceneLimits& lim,
                                      const std::string& label) {
  std::vector<AgentState> seq = tr.past;
  seq.insert(seq.end(), tr.future.begin(), tr.future.end());
  for (size_t t = 0; t + 1 < seq.size(); ++t) {
    double step = std::sqrt(dist2(seq[t].x, seq[t].y, seq[t + 1].x, seq[t + 1].y));
    double bound = (seq[t].speed + lim.a_max * lim.dt) * lim.dt + 1e-6;
    if (step > bound)
      throw ValidationError(label + ": kinematic inconsistency at step " +
                            std::to_string(t));
  }
}

// Ego ground-truth future must clear every object disc at shared timesteps.
inline void validate_scene(const Scene& sc, const SceneLimits& lim = {}) {
  if (sc.ego.kind != AgentKind::Ego)
    throw ValidationError("scene: ego track must have kind ego");
  validate_track_kinematics(sc.ego, lim, "ego");
  for (const auto& obj : sc.objects)
    validate_track_kinematics(obj, lim, "object " + std::to_string(obj.id));
  for (const auto& pl : sc.map) {
    if (pl.points.size() < 2) throw ValidationError("scene: polyline with < 2 points");
    for (size_t i = 0; i + 1 < pl.points.size(); ++i)
      if (pl.points[i] == pl.points[i + 1])
        throw ValidationError("scene: repeated polyline point");
  }
  for (size_t t = 0; t < sc.ego.future.size(); ++t) {
    for (const auto& obj : sc.objects) {
      if (t >= obj.future.size()) continue;
      double d = std::sqrt(dist2(sc.ego.future[t].x, sc.ego.future[t].y,
                                 obj.future[t].x, obj.future[t].y));
      if (d <= sc.ego.radius + obj.radius)
        throw ValidationError("scene: ego ground truth intersects object " +
                              std::to_string(obj.id) + " at step " + std::to_string(t));
    }
  }
}

// ---- serialization ----
// One JSON object per line; floats printed with 9 significant digits so the
// byte output is a deterministic function of the values.

namespace detail {
inline void append_num(std::string& out, double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  out += buf;
}
inline void append_state_array(std::string& out, const std::vector<AgentState>& states) {
  out += '[';
  for (size_t i = 0; i < states.size(); ++i) {
    if (i) out += ',';
    out += '[';
    append_num(out, states[i].x);
    out += ',';
    append_num(out, states[i].y);
    out += ',';
    append_num(out, states[i].heading);
    out += ',';
    append_num(out, states[i].speed);
    out += ']';
  }
  out += ']';
}
inline void append_track(std::string& out, const AgentTrack& tr) {
  out += "{\"id\":" + std::to_string(tr.id);
  out += ",\"kind\":\"" + to_string(tr.kind) + "\"";
  out += ",\"radius\":";
  append_num(out, tr.radius);
  out += ",\"past\":";
  append_state_array(out, tr.past);
  out += ",\"future\":";
  append_state_array(out, tr.future);
  out += '}';
}

// Round every float field to its 9-significant-digit representation, so a
// freshly generated scene serializes and reloads value-identically.
inline double snap9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return std::strtod(buf, nullptr);
}
}  // namespace detail

inline std::string scene_to_jsonl(const Scene& sc) {
  std::string out;
  out.reserve(4096);
  out += "{\"scene_id\":" + std::to_string(sc.scene_id);
  out += ",\"family\":\"" + to_string(sc.family) + "\"";
  out += ",\"seed\":" + std::to_string(sc.seed);
  out += ",\"goal\":[";
  detail::append_num(out, sc.goal_x);
  out += ',';
  detail::append_num(out, sc.goal_y);
  out += "],\"ego\":";
  detail::append_track(out, sc.ego);
  out += ",\"objects\":[";
  for (size_t i = 0; i < sc.objects.size(); ++i) {
    if (i) out += ',';
    detail::append_track(out, sc.objects[i]);
  }
  out += "],\"map\":[";
  for (size_t i = 0; i < sc.map.size(); ++i) {
    if (i) out += ',';
    out += "{\"role\":\"" + to_string(sc.map[i].role) + "\",\"points\":[";
    for (size_t j = 0; j < sc.map[i].points.size(); ++j) {
      if (j) out += ',';
      out += '[';
      detail::append_num(out, sc.map[i].points[j][0]);
      out += ',';
      detail::append_num(out, sc.map[i].points[j][1]);
      out += ']';
    }
    out += "]}";
  }
  out += "]}";
  return out;
}

inline std::vector<AgentState> states_from_json(const nlohmann::json& j) {
  std::vector<AgentState> out;
  for (const auto& s : j) {
    if (!s.is_array() || s.size() != 4)
      throw ValidationError("state entry must be [x,y,heading,speed]");
    out.push_back({s[0].get<double>(), s[1].get<double>(), s[2].get<double>(),
                   s[3].get<double>()});
  }
  return out;
}

inline AgentTrack track_from_json(const nlohmann::json& j) {
  AgentTrack tr;
  tr.id = j.at("id").get<int>();
  tr.kind = kind_from_string(j.at("kind").get<std::string>());
  tr.radius = j.at("radius").get<double>();
  tr.past = states_from_json(j.at("past"));
  tr.future = states_from_json(j.at("future"));
  return tr;
}

inline Scene scene_from_jsonl(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed scene line: ") + e.what());
  }
  Scene sc;
  sc.scene_id = j.at("scene_id").get<long>();
  sc.family = family_from_string(j.at("family").get<std::string>());
  sc.seed = j.at("seed").get<uint64_t>();
  sc.goal_x = j.at("goal")[0].get<double>();
  sc.goal_y = j.at("goal")[1].get<double>();
  sc.ego = track_from_json(j.at("ego"));
  for (const auto& o : j.at("objects")) sc.objects.push_back(track_from_json(o));
  for (const auto& m : j.at("map")) {
    MapPolyline pl;
    pl.role = role_from_string(m.at("role").get<std::string>());
    for (const auto& p : m.at("points"))
      pl.points.push_back({p[0].get<double>(), p[1].get<double>()});
    sc.map.push_back(std::move(pl));
  }
  return sc;
}

// Snap all float fields to their serialized precision.
inline void snap_scene(Scene& sc) {
  auto snap_track = [](AgentTrack& tr) {
    for (auto* vec : {&tr.past, &tr.future})
      for (auto& s : *vec) {
        s.x = detail::snap9(s.x);
        s.y = detail::snap9(s.y);
        s.heading = detail::snap9(s.heading);
        s.speed = detail::snap9(s.speed);
      }
    tr.radius = detail::snap9(tr.radius);
  };
  snap_track(sc.ego);
  for (auto& o : sc.objects) snap_track(o);
  for (auto& pl : sc.map)
    for (auto& p : pl.points) {
      p[0] = detail::snap9(p[0]);
      p[1] = detail::snap9(p[1]);
    }
  sc.goal_x = detail::snap9(sc.goal_x);
  sc.goal_y = detail::snap9(sc.goal_y);
}

inline bool operator==(const AgentState& a, const AgentState& b) {
  return a.x == b.x && a.y == b.y && a.heading == b.heading && a.speed == b.speed;
}
inline bool operator==(const AgentTrack& a, const AgentTrack& b) {
  return a.id == b.id && a.kind == b.kind && a.radius == b.radius && a.past == b.past &&
         a.future == b.future;
}
inline bool operator==(const MapPolyline& a, const MapPolyline& b) {
  return a.role == b.role && a.points == b.points;
}
inline bool operator==(const Scene& a, const Scene& b) {
  return a.scene_id == b.scene_id && a.family == b.family && a.seed == b.seed &&
         a.goal_x == b.goal_x && a.goal_y == b.goal_y && a.ego == b.ego &&
         a.objects == b.objects && a.map == b.map;
}

}  // namespace caps
