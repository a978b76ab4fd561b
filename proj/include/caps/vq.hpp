#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "caps/nn.hpp"
#include "caps/rng.hpp"

namespace caps {

// Learnable codebook. The vectors live in the parameter store under
// `vq.codebook` (K x d_e); usage statistics are training-side state and are
// not persisted.
struct CodebookState {
  std::vector<long> usage_counts;        // running, reset per epoch by caller
  std::vector<int> epochs_unused;        // consecutive epochs with zero usage

  void ensure(int K) {
    if (static_cast<int>(usage_counts.size()) != K) {
      usage_counts.assign(K, 0);
      epochs_unused.assign(K, 0);
    }
  }
};

struct QuantizationResult {
  int code_index = -1;
  std::vector<float> quantized;  // exact copy of codebook row k
  double distance_sq = 0.0;
};

// Nearest code by L2, ties to the lowest index. Works on raw values.
template <typename T>
int nearest_code(const std::vector<T>& z, const Tensor<T>& codebook) {
  if (static_cast<int>(z.size()) != codebook.cols)
    throw ValidationError("quantize: dimension mismatch");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < codebook.rows; ++k) {
    double d = 0;
    for (int j = 0; j < codebook.cols; ++j) {
      double diff = static_cast<double>(z[j]) - static_cast<double>(codebook.at(k, j));
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

inline QuantizationResult quantize(const std::vector<float>& z, const TensorF& codebook,
                                   CodebookState* training_state = nullptr) {
  for (float v : z)
    if (!std::isfinite(v)) throw ValidationError("quantize: non-finite input");
  int k = nearest_code(z, codebook);
  QuantizationResult res;
  res.code_index = k;
  res.quantized.assign(codebook.data.begin() + static_cast<size_t>(k) * codebook.cols,
                       codebook.data.begin() + static_cast<size_t>(k + 1) * codebook.cols);
  double d = 0;
  for (int j = 0; j < codebook.cols; ++j) {
    double diff = z[j] - res.quantized[j];
    d += diff * diff;
  }
  res.distance_sq = d;
  if (training_state) {
    training_state->ensure(codebook.rows);
    training_state->usage_counts[k]++;
  }
  return res;
}

struct VQConfig {
  int K = 64;
  int d_e = 64;
  double beta = 0.25;

  void validate() const {
    if (K < 2) throw ValidationError("vq: K >= 2 required");
    if (beta < 0) throw ValidationError("vq: beta >= 0 required");
  }
};

template <typename T>
std::vector<ParamSpec<T>> vq_param_specs(const VQConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec<T>> specs;
  specs.push_back({"vq.codebook", cfg.K, cfg.d_e, InitRule::Normal, 0.5});
  // decoder hidden is 2*d_e so an exact identity fixture is representable
  add_mlp_specs(specs, std::string("vq.decoder"), cfg.d_e, 2 * cfg.d_e, cfg.d_e);
  return specs;
}

// Test fixture: make the VQ decoder compute the identity via
// relu(x) - relu(-x).
template <typename T>
void set_identity_decoder(ParameterStoreT<T>& ps) {
  auto& w0 = ps.value("vq.decoder.l0.w");  // d_e x 2d_e
  auto& w1 = ps.value("vq.decoder.l1.w");  // 2d_e x d_e
  int d = w0.rows;
  w0.data.assign(w0.size(), T(0));
  w1.data.assign(w1.size(), T(0));
  for (int i = 0; i < d; ++i) {
    w0.at(i, i) = T(1);
    w0.at(i, d + i) = T(-1);
    w1.at(i, i) = T(1);
    w1.at(d + i, i) = T(-1);
  }
  for (auto& v : ps.value("vq.decoder.l0.b").data) v = T(0);
  for (auto& v : ps.value("vq.decoder.l1.b").data) v = T(0);
}

struct VQLossTerms {
  double reconstruction = 0;
  double codebook = 0;
  double commitment = 0;
  double beta = 0;
  double total = 0;
};

template <typename T>
struct VQGraph {
  int code_index = -1;
  typename Tape<T>::Ref z_q;             // straight-through quantized vector
  typename Tape<T>::Ref reconstruction;  // decoder output
  typename Tape<T>::Ref loss_recon, loss_codebook, loss_commit, loss_total;
};

// Builds the full VQ forward + loss graph for one ego feature vector.
// Gradient routing:
//   reconstruction -> decoder (and encoder through the straight-through copy)
//   codebook term  -> selected code only
//   commitment     -> encoder only
// `forced_k` pins the code selection (used by finite-difference probes).
template <typename T>
VQGraph<T> vq_loss_graph(Tape<T>& tape, ParameterStoreT<T>& ps,
                         typename Tape<T>::Ref z_e_ego, const VQConfig& cfg,
                         CodebookState* training_state = nullptr, int forced_k = -1) {
  cfg.validate();
  const auto& cb_val = ps.value("vq.codebook");
  VQGraph<T> g;
  g.code_index = forced_k >= 0 ? forced_k : nearest_code(tape.value(z_e_ego), cb_val);
  if (training_state) {
    training_state->ensure(cb_val.rows);
    training_state->usage_counts[g.code_index]++;
  }

  auto cb = use_param(tape, ps, "vq.codebook");
  auto e_k = tape.slice_row(cb, g.code_index);

  // straight-through: forward value e_k, backward identity into z_e
  g.z_q = tape.add(z_e_ego, tape.stopgrad(tape.sub(e_k, z_e_ego)));
  g.reconstruction = mlp(tape, ps, std::string("vq.decoder"), g.z_q);

  auto target = tape.stopgrad(z_e_ego);  // detached reconstruction target
  g.loss_recon = tape.scale(tape.sum_sq(tape.sub(g.reconstruction, target)),
                            T(1) / static_cast<T>(cfg.d_e));
  g.loss_codebook = tape.sum_sq(tape.sub(tape.stopgrad(z_e_ego), e_k));
  g.loss_commit = tape.sum_sq(tape.sub(z_e_ego, tape.stopgrad(e_k)));
  g.loss_total = tape.add(tape.add(g.loss_recon, g.loss_codebook),
                          tape.scale(g.loss_commit, static_cast<T>(cfg.beta)));
  return g;
}

template <typename T>
VQLossTerms vq_loss_terms(const Tape<T>& tape, const VQGraph<T>& g, double beta) {
  VQLossTerms t;
  t.reconstruction = tape.scalar_value(g.loss_recon);
  t.codebook = tape.scalar_value(g.loss_codebook);
  t.commitment = tape.scalar_value(g.loss_commit);
  t.beta = beta;
  t.total = tape.scalar_value(g.loss_total);
  return t;
}

// Value-level loss evaluation for a raw ego feature vector.
inline VQLossTerms vq_loss(const std::vector<float>& z, ParameterStore& ps,
                           const VQConfig& cfg) {
  Tape<float> tape;
  auto zr = tape.leaf_row(z);
  auto g = vq_loss_graph(tape, ps, zr, cfg);
  return vq_loss_terms(tape, g, cfg.beta);
}

struct CodebookMetrics {
  double perplexity = 0;
  std::vector<long> histogram;
  int n_dead = 0;
};

inline CodebookMetrics codebook_metrics(const std::vector<int>& assignments, int K) {
  if (assignments.empty())
    throw ValidationError("codebook_metrics: empty assignment list");
  CodebookMetrics m;
  m.histogram.assign(K, 0);
  for (int k : assignments) {
    if (k < 0 || k >= K) throw ValidationError("codebook_metrics: index out of range");
    m.histogram[k]++;
  }
  double n = static_cast<double>(assignments.size());
  double entropy = 0;
  for (long c : m.histogram) {
    if (c == 0) {
      m.n_dead++;
      continue;
    }
    double p = c / n;
    entropy -= p * std::log(p);
  }
  m.perplexity = std::exp(entropy);
  return m;
}

// End-of-epoch maintenance: codes unused for >= patience consecutive epochs
// are reset to a random batch embedding plus sigma=0.01 noise.
// `batch_embeddings` holds one embedding per row.
inline void reinit_dead_codes(TensorF& codebook, CodebookState& state,
                              const TensorF& batch_embeddings, Rng& rng, int patience,
                              std::vector<std::string>* warnings = nullptr) {
  if (patience < 1) throw ValidationError("reinit_dead_codes: patience >= 1");
  state.ensure(codebook.rows);
  for (int k = 0; k < codebook.rows; ++k) {
    if (state.usage_counts[k] == 0)
      state.epochs_unused[k]++;
    else
      state.epochs_unused[k] = 0;
    state.usage_counts[k] = 0;
  }
  for (int k = 0; k < codebook.rows; ++k) {
    if (state.epochs_unused[k] < patience) continue;
    if (batch_embeddings.rows == 0) {
      if (warnings) warnings->push_back("reinit_dead_codes: empty batch, skipping");
      return;
    }
    int src = static_cast<int>(rng.uniform_index(batch_embeddings.rows));
    for (int j = 0; j < codebook.cols; ++j)
      codebook.at(k, j) = batch_embeddings.at(src, j) +
                          static_cast<float>(rng.normal() * 0.01);
    state.epochs_unused[k] = 0;
  }
}

}  // namespace caps
