#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "caps/nn.hpp"
#include "caps/scene.hpp"

namespace caps {

enum class EncoderMode { FullHorizon, Causal };
enum class TokenKind { Ego, Object, Map };

struct EncoderConfig {
  int d_e = 64;
  int n_heads = 4;
  int n_layers = 2;
  int max_entities = 8;   // ego + objects
  int max_map_tokens = 8;
  int map_resample_points = 10;

  void validate() const {
    if (d_e % n_heads != 0) throw ValidationError("encoder: d_e must divide by n_heads");
    if (n_layers < 1) throw ValidationError("encoder: n_layers >= 1");
  }

  int max_tokens() const { return max_entities + max_map_tokens; }
};

struct Embedding {
  Tensor<float> tokens;  // n_tok x d_e; row 0 = ego; padded rows all-zero
  std::vector<TokenKind> token_kinds;
  std::vector<uint8_t> valid_mask;
  std::vector<std::string> warnings;

  std::vector<float> ego_feature() const {
    return std::vector<float>(tokens.data.begin(), tokens.data.begin() + tokens.cols);
  }
};

// entity feature layout per timestep: x, y, heading, speed, dx, dy, onehot(kind)
constexpr int kEntityFeatureDim = 9;

namespace detail {

template <typename T>
Tensor<T> track_feature_matrix(const AgentTrack& tr, EncoderMode mode, TokenKind kind) {
  std::vector<AgentState> seq = tr.past;
  if (mode == EncoderMode::FullHorizon)
    seq.insert(seq.end(), tr.future.begin(), tr.future.end());
  Tensor<T> m(static_cast<int>(seq.size()), kEntityFeatureDim);
  for (size_t i = 0; i < seq.size(); ++i) {
    const auto& s = seq[i];
    if (!std::isfinite(s.x) || !std::isfinite(s.y) || !std::isfinite(s.heading) ||
        !std::isfinite(s.speed))
      throw ValidationError("encoder: NaN/inf in input track state");
    double dx = i + 1 < seq.size() ? seq[i + 1].x - s.x : 0.0;
    double dy = i + 1 < seq.size() ? seq[i + 1].y - s.y : 0.0;
    T* row = &m.data[i * kEntityFeatureDim];
    row[0] = static_cast<T>(s.x);
    row[1] = static_cast<T>(s.y);
    row[2] = static_cast<T>(s.heading);
    row[3] = static_cast<T>(s.speed);
    row[4] = static_cast<T>(dx);
    row[5] = static_cast<T>(dy);
    row[6 + static_cast<int>(kind)] = T(1);
  }
  return m;
}

// Resample a polyline to a fixed number of points by arclength.
inline std::vector<std::array<double, 2>> resample_polyline(const MapPolyline& pl,
                                                            int n_points) {
  std::vector<double> cum{0.0};
  for (size_t i = 0; i + 1 < pl.points.size(); ++i)
    cum.push_back(cum.back() + std::sqrt(dist2(pl.points[i][0], pl.points[i][1],
                                               pl.points[i + 1][0], pl.points[i + 1][1])));
  double total = cum.back();
  std::vector<std::array<double, 2>> out;
  out.reserve(n_points);
  size_t seg = 0;
  for (int i = 0; i < n_points; ++i) {
    double target = total * i / (n_points - 1);
    while (seg + 2 < cum.size() && cum[seg + 1] < target) ++seg;
    double seg_len = cum[seg + 1] - cum[seg];
    double t = seg_len > 0 ? (target - cum[seg]) / seg_len : 0.0;
    out.push_back({pl.points[seg][0] + t * (pl.points[seg + 1][0] - pl.points[seg][0]),
                   pl.points[seg][1] + t * (pl.points[seg + 1][1] - pl.points[seg][1])});
  }
  return out;
}

template <typename T>
Tensor<T> polyline_feature_matrix(const MapPolyline& pl, int n_points) {
  auto pts = resample_polyline(pl, n_points);
  Tensor<T> m(n_points, kEntityFeatureDim);
  for (int i = 0; i < n_points; ++i) {
    double dx = i + 1 < n_points ? pts[i + 1][0] - pts[i][0] : 0.0;
    double dy = i + 1 < n_points ? pts[i + 1][1] - pts[i][1] : 0.0;
    double heading = (dx != 0 || dy != 0) ? std::atan2(dy, dx) : 0.0;
    T* row = &m.data[static_cast<size_t>(i) * kEntityFeatureDim];
    row[0] = static_cast<T>(pts[i][0]);
    row[1] = static_cast<T>(pts[i][1]);
    row[2] = static_cast<T>(heading);
    row[3] = T(0);
    row[4] = static_cast<T>(dx);
    row[5] = static_cast<T>(dy);
    row[6 + static_cast<int>(TokenKind::Map)] = T(1);
  }
  return m;
}

}  // namespace detail

template <typename T>
std::vector<ParamSpec<T>> encoder_param_specs(const std::string& prefix,
                                              const EncoderConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec<T>> specs;
  add_mlp_specs(specs, prefix + ".embed", kEntityFeatureDim, cfg.d_e, cfg.d_e);
  for (int l = 0; l < cfg.n_layers; ++l)
    add_block_specs(specs, prefix + ".block" + std::to_string(l), cfg.d_e, 2 * cfg.d_e);
  return specs;
}

// One entity (track or resampled polyline) -> d_e token. Row-wise MLP over
// the timestep features, max-pooled over timesteps.
template <typename T>
typename Tape<T>::Ref embed_entity_graph(Tape<T>& tape, ParameterStoreT<T>& ps,
                                         const std::string& prefix,
                                         const Tensor<T>& features) {
  auto x = tape.leaf(features);
  auto h = mlp(tape, ps, prefix + ".embed", x);
  return tape.maxpool_rows(h);
}

struct SceneTokenization {
  std::vector<TokenKind> kinds;
  std::vector<uint8_t> valid_mask;
  std::vector<std::string> warnings;
};

// Full scene -> (n_tok x d_e) token matrix ref. Row 0 is the ego token.
// `pad_to` >= actual token count appends masked all-zero tokens (used by the
// padding-invariance tests); 0 means no padding.
template <typename T>
typename Tape<T>::Ref encode_scene_graph(Tape<T>& tape, ParameterStoreT<T>& ps,
                                         const std::string& prefix, const Scene& scene,
                                         const EncoderConfig& cfg, EncoderMode mode,
                                         SceneTokenization& tok, int pad_to = 0) {
  cfg.validate();

  // entity selection: ego always, then objects; if over budget keep the
  // nearest by current distance to the ego (stable order otherwise)
  std::vector<const AgentTrack*> objects;
  for (const auto& o : scene.objects) objects.push_back(&o);
  if (static_cast<int>(objects.size()) > cfg.max_entities - 1) {
    std::vector<std::pair<double, const AgentTrack*>> by_dist;
    for (const auto* o : objects) {
      const auto& cur = o->past.back();
      by_dist.push_back({dist2(cur.x, cur.y, 0, 0), o});
    }
    std::stable_sort(by_dist.begin(), by_dist.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    objects.clear();
    for (int i = 0; i < cfg.max_entities - 1; ++i) objects.push_back(by_dist[i].second);
    // restore scene order among the kept objects
    std::stable_sort(objects.begin(), objects.end(),
                     [](const AgentTrack* a, const AgentTrack* b) { return a->id < b->id; });
    tok.warnings.push_back("encoder: truncated objects to " +
                           std::to_string(cfg.max_entities - 1) + " nearest");
  }

  std::vector<typename Tape<T>::Ref> tokens;
  tok.kinds.clear();
  tok.valid_mask.clear();

  tokens.push_back(embed_entity_graph(
      tape, ps, prefix,
      detail::track_feature_matrix<T>(scene.ego, mode, TokenKind::Ego)));
  tok.kinds.push_back(TokenKind::Ego);
  tok.valid_mask.push_back(1);

  for (const auto* o : objects) {
    tokens.push_back(embed_entity_graph(
        tape, ps, prefix, detail::track_feature_matrix<T>(*o, mode, TokenKind::Object)));
    tok.kinds.push_back(TokenKind::Object);
    tok.valid_mask.push_back(1);
  }

  int n_map = std::min<int>(static_cast<int>(scene.map.size()), cfg.max_map_tokens);
  if (static_cast<int>(scene.map.size()) > cfg.max_map_tokens)
    tok.warnings.push_back("encoder: truncated map polylines to " +
                           std::to_string(cfg.max_map_tokens));
  for (int i = 0; i < n_map; ++i) {
    tokens.push_back(embed_entity_graph(
        tape, ps, prefix,
        detail::polyline_feature_matrix<T>(scene.map[i], cfg.map_resample_points)));
    tok.kinds.push_back(TokenKind::Map);
    tok.valid_mask.push_back(1);
  }

  for (int i = static_cast<int>(tokens.size()); i < pad_to; ++i) {
    tokens.push_back(tape.leaf(Tensor<T>(1, cfg.d_e)));
    tok.kinds.push_back(TokenKind::Object);
    tok.valid_mask.push_back(0);
  }

  auto x = tape.concat_rows(tokens);
  for (int l = 0; l < cfg.n_layers; ++l)
    x = transformer_block(tape, ps, prefix + ".block" + std::to_string(l), x,
                          cfg.n_heads, tok.valid_mask);

  // padded rows are defined to be all-zero in the output
  bool any_pad = false;
  for (uint8_t v : tok.valid_mask)
    if (!v) any_pad = true;
  if (any_pad) {
    Tensor<T> mask_mat(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i)
      if (tok.valid_mask[i])
        for (int j = 0; j < x.cols; ++j) mask_mat.at(i, j) = T(1);
    x = tape.mul(x, tape.leaf(mask_mat));
  }
  return x;
}

template <typename T>
typename Tape<T>::Ref ego_feature_graph(Tape<T>& tape, typename Tape<T>::Ref emb) {
  return tape.slice_row(emb, 0);
}

// Value-level convenience API over a throwaway tape.
inline Embedding encode_scene(const Scene& scene, ParameterStore& ps,
                              const std::string& prefix, const EncoderConfig& cfg,
                              EncoderMode mode, int pad_to = 0) {
  Tape<float> tape;
  SceneTokenization tok;
  auto emb = encode_scene_graph(tape, ps, prefix, scene, cfg, mode, tok, pad_to);
  Embedding out;
  out.tokens = tape.value_tensor(emb);
  out.token_kinds = tok.kinds;
  out.valid_mask = tok.valid_mask;
  out.warnings = tok.warnings;
  return out;
}

inline std::vector<float> ego_feature(const Embedding& emb) { return emb.ego_feature(); }

}  // namespace caps
