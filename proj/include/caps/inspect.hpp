#pragma once

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "caps/dataset.hpp"
#include "caps/training.hpp"

namespace caps {

namespace detail {

inline std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

struct SvgView {
  double min_x, max_x, min_y, max_y;
  double w, h;

  double px(double x) const { return (x - min_x) / (max_x - min_x) * w; }
  // y grows upward in world coordinates, downward in SVG
  double py(double y) const { return h - (y - min_y) / (max_y - min_y) * h; }
};

inline std::string svg_polyline(const SvgView& v,
                                const std::vector<std::array<double, 2>>& pts,
                                const std::string& style) {
  std::ostringstream os;
  os << "<polyline fill=\"none\" " << style << " points=\"";
  for (const auto& p : pts)
    os << svg_num(v.px(p[0])) << "," << svg_num(v.py(p[1])) << " ";
  os << "\"/>\n";
  return os.str();
}

inline std::vector<std::array<double, 2>> track_points(
    const std::vector<AgentState>& states) {
  std::vector<std::array<double, 2>> pts;
  pts.reserve(states.size());
  for (const auto& s : states) pts.push_back({s.x, s.y});
  return pts;
}

}  // namespace detail

// Top-down drawing of one scene as an SVG group: route centerline, lane
// boundaries, object discs, ego past and future strokes, goal marker.
inline std::string scene_svg(const Scene& scene, double width = 320,
                             double height = 160) {
  double min_x = -12, max_x = 12, min_y = -10, max_y = 10;
  auto grow = [&](double x, double y) {
    min_x = std::min(min_x, x - 2);
    max_x = std::max(max_x, x + 2);
    min_y = std::min(min_y, y - 2);
    max_y = std::max(max_y, y + 2);
  };
  for (const auto& pl : scene.map)
    for (const auto& p : pl.points) grow(p[0], p[1]);
  for (const auto& st : scene.ego.past) grow(st.x, st.y);
  for (const auto& st : scene.ego.future) grow(st.x, st.y);
  for (const auto& obj : scene.objects)
    for (const auto& st : obj.past) grow(st.x, st.y);
  grow(scene.goal_x, scene.goal_y);

  detail::SvgView v{min_x, max_x, min_y, max_y, width, height};
  std::ostringstream os;
  os << "<rect width=\"" << width << "\" height=\"" << height
     << "\" fill=\"#fafafa\" stroke=\"#ccc\"/>\n";
  for (const auto& pl : scene.map) {
    bool route = pl.role == PolylineRole::RouteCenterline;
    os << detail::svg_polyline(
        v, pl.points,
        route ? "stroke=\"#b8b8b8\" stroke-width=\"2\" stroke-dasharray=\"6,4\""
              : "stroke=\"#d9d9d9\" stroke-width=\"1\"");
  }
  for (const auto& obj : scene.objects) {
    const auto& cur = obj.past.back();
    double r = obj.radius / (max_x - min_x) * width;
    os << "<circle cx=\"" << detail::svg_num(v.px(cur.x)) << "\" cy=\""
       << detail::svg_num(v.py(cur.y)) << "\" r=\"" << detail::svg_num(r)
       << "\" fill=\"#e07050\" fill-opacity=\"0.8\"/>\n";
  }
  os << detail::svg_polyline(v, detail::track_points(scene.ego.past),
                             "stroke=\"#4070c0\" stroke-width=\"2\"");
  os << detail::svg_polyline(
      v, detail::track_points(scene.ego.future),
      "stroke=\"#40a060\" stroke-width=\"2\" stroke-dasharray=\"3,3\"");
  os << "<circle cx=\"" << detail::svg_num(v.px(scene.goal_x)) << "\" cy=\""
     << detail::svg_num(v.py(scene.goal_y))
     << "\" r=\"4\" fill=\"none\" stroke=\"#40a060\" stroke-width=\"1.5\"/>\n";
  return os.str();
}

// One row per montage: the cluster id in the left margin, then up to
// `per_row` scenes side by side.
inline std::string cluster_montage_svg(int cluster,
                                       const std::vector<const Scene*>& scenes,
                                       int per_row = 6) {
  const double cell_w = 320, cell_h = 160, margin = 48, pad = 8;
  int n = std::min<int>(per_row, static_cast<int>(scenes.size()));
  double total_w = margin + n * (cell_w + pad);
  double total_h = cell_h + 2 * pad;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << total_w
     << "\" height=\"" << total_h << "\">\n";
  os << "<text x=\"8\" y=\"" << total_h / 2
     << "\" font-family=\"monospace\" font-size=\"14\">c" << cluster
     << "</text>\n";
  for (int i = 0; i < n; ++i) {
    os << "<g transform=\"translate(" << margin + i * (cell_w + pad) << ","
       << pad << ")\">\n"
       << scene_svg(*scenes[i], cell_w, cell_h) << "<text x=\"4\" y=\"14\" "
       << "font-family=\"monospace\" font-size=\"10\">#" << scenes[i]->scene_id
       << " " << to_string(scenes[i]->family) << "</text>\n</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

struct ClusterPurityRow {
  int cluster = 0;
  long count = 0;
  Family majority_family = Family::LaneFollow;
  double purity = 0.0;  // majority fraction within the cluster
};

struct PurityReport {
  std::vector<ClusterPurityRow> rows;  // active clusters, ascending id
  long total = 0;
  double overall_purity = 0.0;  // sum of majority counts / total
};

inline PurityReport cluster_purity(const Dataset& ds,
                                   const ClusterAssignment& assignment) {
  std::map<int, std::map<Family, long>> counts;
  long total = 0;
  for (const auto& scene : ds.scenes) {
    auto it = assignment.scene_to_code.find(scene.scene_id);
    if (it == assignment.scene_to_code.end())
      throw ValidationError("purity: scene " + std::to_string(scene.scene_id) +
                            " missing from assignment");
    counts[it->second][scene.family] += 1;
    total += 1;
  }
  if (total == 0) throw ValidationError("purity: empty dataset");

  PurityReport rep;
  rep.total = total;
  long majority_sum = 0;
  for (const auto& [cluster, fams] : counts) {
    ClusterPurityRow row;
    row.cluster = cluster;
    for (const auto& [fam, n] : fams) row.count += n;
    long best = 0;
    for (const auto& [fam, n] : fams)
      if (n > best) {
        best = n;
        row.majority_family = fam;
      }
    row.purity = static_cast<double>(best) / row.count;
    majority_sum += best;
    rep.rows.push_back(row);
  }
  rep.overall_purity = static_cast<double>(majority_sum) / total;
  return rep;
}

inline std::string purity_table(const PurityReport& rep) {
  std::ostringstream os;
  os << "cluster  count  majority      purity\n";
  for (const auto& r : rep.rows) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-8d %-6ld %-13s %.3f\n", r.cluster,
                  r.count, to_string(r.majority_family).c_str(), r.purity);
    os << line;
  }
  char tail[64];
  std::snprintf(tail, sizeof(tail), "overall  %-6ld %-13s %.3f\n", rep.total, "",
                rep.overall_purity);
  os << tail;
  return os.str();
}

}  // namespace caps
