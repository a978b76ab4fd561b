#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "caps/params.hpp"
#include "caps/tape.hpp"

namespace caps {

// Small builders shared by the encoder, VQ decoder, and planner heads.
// Naming convention for a linear layer `prefix`: weights `prefix.w`
// (in x out) and bias `prefix.b` (1 x out).

template <typename T>
typename Tape<T>::Ref use_param(Tape<T>& tape, ParameterStoreT<T>& ps,
                                const std::string& name) {
  auto& e = ps.entry(name);
  return tape.param(e.value, &e.grad);
}

template <typename T>
void add_linear_specs(std::vector<ParamSpec<T>>& specs, const std::string& prefix,
                      int in, int out, InitRule w_rule = InitRule::UniformFanIn) {
  specs.push_back({prefix + ".w", in, out, w_rule});
  specs.push_back({prefix + ".b", 1, out, InitRule::Zeros});
}

template <typename T>
typename Tape<T>::Ref linear(Tape<T>& tape, ParameterStoreT<T>& ps,
                             const std::string& prefix, typename Tape<T>::Ref x) {
  auto w = use_param(tape, ps, prefix + ".w");
  auto b = use_param(tape, ps, prefix + ".b");
  return tape.add_rowvec(tape.matmul(x, w), b);
}

// Two-layer perceptron with ReLU.
template <typename T>
void add_mlp_specs(std::vector<ParamSpec<T>>& specs, const std::string& prefix, int in,
                   int hidden, int out) {
  add_linear_specs(specs, prefix + ".l0", in, hidden);
  add_linear_specs(specs, prefix + ".l1", hidden, out);
}

template <typename T>
typename Tape<T>::Ref mlp(Tape<T>& tape, ParameterStoreT<T>& ps,
                          const std::string& prefix, typename Tape<T>::Ref x) {
  auto h = tape.relu(linear(tape, ps, prefix + ".l0", x));
  return linear(tape, ps, prefix + ".l1", h);
}

// Multi-head self-attention over a token matrix (n_tok x d). valid_mask
// excludes padding tokens from the attention weights; masked tokens also
// produce zero output rows by construction of their (masked) softmax rows.
template <typename T>
void add_attention_specs(std::vector<ParamSpec<T>>& specs, const std::string& prefix,
                         int d) {
  for (const char* h : {"q", "k", "v", "o"})
    add_linear_specs(specs, prefix + std::string(".") + h, d, d);
}

template <typename T>
typename Tape<T>::Ref multi_head_attention(Tape<T>& tape, ParameterStoreT<T>& ps,
                                           const std::string& prefix,
                                           typename Tape<T>::Ref x, int n_heads,
                                           const std::vector<uint8_t>& valid_mask) {
  int d = x.cols;
  int hd = d / n_heads;
  auto q = linear(tape, ps, prefix + ".q", x);
  auto k = linear(tape, ps, prefix + ".k", x);
  auto v = linear(tape, ps, prefix + ".v", x);
  std::vector<typename Tape<T>::Ref> heads;
  T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  for (int h = 0; h < n_heads; ++h) {
    auto qh = tape.slice_cols(q, h * hd, hd);
    auto kh = tape.slice_cols(k, h * hd, hd);
    auto vh = tape.slice_cols(v, h * hd, hd);
    auto scores = tape.scale(tape.matmul_nt(qh, kh), inv_sqrt);
    auto attn = tape.softmax_rows(scores, valid_mask);
    heads.push_back(tape.matmul(attn, vh));
  }
  typename Tape<T>::Ref cat = heads[0];
  for (size_t h = 1; h < heads.size(); ++h) cat = tape.concat_cols(cat, heads[h]);
  return linear(tape, ps, prefix + ".o", cat);
}

// Pre-norm transformer block: x + MHA(LN(x)), then x + FFN(LN(x)).
template <typename T>
void add_block_specs(std::vector<ParamSpec<T>>& specs, const std::string& prefix, int d,
                     int ffn_hidden) {
  add_attention_specs(specs, prefix + ".attn", d);
  specs.push_back({prefix + ".ln1.g", 1, d, InitRule::Zeros});  // filled with ones below
  specs.push_back({prefix + ".ln1.b", 1, d, InitRule::Zeros});
  specs.push_back({prefix + ".ln2.g", 1, d, InitRule::Zeros});
  specs.push_back({prefix + ".ln2.b", 1, d, InitRule::Zeros});
  add_mlp_specs(specs, prefix + ".ffn", d, ffn_hidden, d);
}

// Layernorm gains start at 1 (created as zeros by the generic spec path).
template <typename T>
void reset_layernorm_gains(ParameterStoreT<T>& ps) {
  for (const auto& name : ps.names())
    if (name.find(".ln") != std::string::npos && name.size() > 2 &&
        name.substr(name.size() - 2) == ".g") {
      for (auto& v : ps.value(name).data) v = T(1);
    }
}

template <typename T>
typename Tape<T>::Ref transformer_block(Tape<T>& tape, ParameterStoreT<T>& ps,
                                        const std::string& prefix,
                                        typename Tape<T>::Ref x, int n_heads,
                                        const std::vector<uint8_t>& valid_mask) {
  auto ln1 = tape.layernorm(x, use_param(tape, ps, prefix + ".ln1.g"),
                            use_param(tape, ps, prefix + ".ln1.b"));
  auto a = multi_head_attention(tape, ps, prefix + ".attn", ln1, n_heads, valid_mask);
  auto x1 = tape.add(x, a);
  auto ln2 = tape.layernorm(x1, use_param(tape, ps, prefix + ".ln2.g"),
                            use_param(tape, ps, prefix + ".ln2.b"));
  auto f = mlp(tape, ps, prefix + ".ffn", ln2);
  return tape.add(x1, f);
}

}  // namespace caps
