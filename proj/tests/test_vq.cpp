#include <catch2/catch_amalgamated.hpp>

#include "caps/gradcheck.hpp"
#include "caps/vq.hpp"

using namespace caps;

namespace {

// Independent oracle: plain linear scan in double precision.
int brute_force_nearest(const std::vector<float>& z, const TensorF& cb) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < cb.rows; ++k) {
    double d = 0;
    for (int j = 0; j < cb.cols; ++j) {
      double diff = static_cast<double>(z[j]) - static_cast<double>(cb.at(k, j));
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("quantize: exact code hit") {
  TensorF cb(5, 3);
  Rng rng(1);
  for (auto& v : cb.data) v = static_cast<float>(rng.normal());
  std::vector<float> z(cb.data.begin() + 3 * 3, cb.data.begin() + 4 * 3);
  auto res = quantize(z, cb);
  REQUIRE(res.code_index == 3);
  REQUIRE(res.distance_sq == 0.0);
  REQUIRE(res.quantized == z);
}

TEST_CASE("quantize: hand-computed distances") {
  TensorF cb(2, 2, {0, 0, 1, 1});
  auto res = quantize({0.2f, 0.1f}, cb);
  REQUIRE(res.code_index == 0);
  REQUIRE(res.quantized == std::vector<float>{0, 0});
  REQUIRE(std::abs(res.distance_sq - 0.05) < 1e-7);
}

TEST_CASE("quantize: equidistant tie goes to the lowest index") {
  TensorF cb(3, 2, {1, 0, -1, 0, 3, 3});
  auto res = quantize({0.0f, 0.5f}, cb);
  REQUIRE(res.code_index == 0);
}

TEST_CASE("quantize agrees with the brute-force oracle incl. ties") {
  Rng rng(42);
  for (int trial = 0; trial < 500; ++trial) {
    int K = 2 + static_cast<int>(rng.uniform_index(63));
    int d = 2 + static_cast<int>(rng.uniform_index(15));
    TensorF cb(K, d);
    for (auto& v : cb.data) v = static_cast<float>(rng.normal());
    std::vector<float> z(d);
    for (auto& v : z) v = static_cast<float>(rng.normal());
    REQUIRE(quantize(z, cb).code_index == brute_force_nearest(z, cb));

    // constructed symmetric tie: two mirrored codes, z on the axis
    TensorF tie_cb(2, 2, {1, 2, -1, 2});
    std::vector<float> tz = {0.0f, static_cast<float>(rng.uniform(-1, 1))};
    REQUIRE(quantize(tz, tie_cb).code_index == 0);
  }
}

TEST_CASE("quantize input validation") {
  TensorF cb(2, 2, {0, 0, 1, 1});
  REQUIRE_THROWS_AS(quantize({1.0f}, cb), ValidationError);
  REQUIRE_THROWS_AS(quantize({std::numeric_limits<float>::quiet_NaN(), 0.0f}, cb),
                    ValidationError);
}

TEST_CASE("argmin invariance under positive scaling") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    TensorF cb(6, 4);
    for (auto& v : cb.data) v = static_cast<float>(rng.normal());
    std::vector<float> z(4);
    for (auto& v : z) v = static_cast<float>(rng.normal());
    int k0 = quantize(z, cb).code_index;
    float c = static_cast<float>(rng.uniform(0.1, 4.0));
    TensorF cb2 = cb;
    for (auto& v : cb2.data) v *= c;
    std::vector<float> z2 = z;
    for (auto& v : z2) v *= c;
    REQUIRE(quantize(z2, cb2).code_index == k0);
  }
}

TEST_CASE("training-mode quantize updates usage counts") {
  TensorF cb(4, 2, {0, 0, 1, 0, 0, 1, 1, 1});
  CodebookState state;
  quantize({0.9f, 0.05f}, cb, &state);
  quantize({0.95f, -0.05f}, cb, &state);
  quantize({0.0f, 0.9f}, cb, &state);
  REQUIRE(state.usage_counts == std::vector<long>{0, 2, 1, 0});
}

TEST_CASE("Eq-style loss decomposition on the hand fixture, 64-bit") {
  VQConfig cfg;
  cfg.K = 3;
  cfg.d_e = 2;
  cfg.beta = 0.25;
  auto store = init_parameters(vq_param_specs<double>(cfg), Rng(5));
  set_identity_decoder(store);
  // nearest code must be [0,0]: put it at row 1, others far away
  auto& cb = store.value("vq.codebook");
  cb.data = {5, 5, 0, 0, -5, 5};

  Tape<double> tape;
  auto z = tape.leaf_row(std::vector<double>{1, 0});
  auto g = vq_loss_graph(tape, store, z, cfg);
  REQUIRE(g.code_index == 1);
  auto terms = vq_loss_terms(tape, g, cfg.beta);
  REQUIRE(std::abs(terms.reconstruction - 0.5) < 1e-12);
  REQUIRE(std::abs(terms.codebook - 1.0) < 1e-12);
  REQUIRE(std::abs(terms.commitment - 1.0) < 1e-12);
  REQUIRE(std::abs(terms.total - 1.75) < 1e-12);
  REQUIRE(std::abs(terms.total -
                   (terms.reconstruction + terms.codebook + cfg.beta * terms.commitment)) <
          1e-12);
}

TEST_CASE("fixed point: z on a code with a reproducing decoder gives all zeros") {
  VQConfig cfg;
  cfg.K = 2;
  cfg.d_e = 3;
  auto store = init_parameters(vq_param_specs<double>(cfg), Rng(6));
  set_identity_decoder(store);
  store.value("vq.codebook").data = {0.5, -0.25, 1.0, 9, 9, 9};
  Tape<double> tape;
  auto z = tape.leaf_row(std::vector<double>{0.5, -0.25, 1.0});
  auto g = vq_loss_graph(tape, store, z, cfg);
  auto terms = vq_loss_terms(tape, g, cfg.beta);
  REQUIRE(terms.reconstruction == 0.0);
  REQUIRE(terms.codebook == 0.0);
  REQUIRE(terms.commitment == 0.0);
  REQUIRE(terms.total == 0.0);
}

TEST_CASE("straight-through: gradient copies from z_q to z_e unchanged") {
  VQConfig cfg;
  cfg.K = 3;
  cfg.d_e = 4;
  auto store = init_parameters(vq_param_specs<double>(cfg), Rng(8));
  ParameterStoreT<double> zstore;
  Rng zr(9);
  zstore.create("z", 1, 4, InitRule::UniformFanIn, zr);

  Tape<double> tape;
  auto z = use_param(tape, zstore, "z");
  auto g = vq_loss_graph(tape, store, z, cfg);
  // arbitrary scalar of z_q with known gradient wrt z_q
  std::vector<double> w = {1.5, -2.0, 0.25, 3.0};
  auto loss = tape.sum_all(tape.mul(g.z_q, tape.leaf_row(w)));
  tape.backward(loss);
  tape.flush_param_grads();
  for (int j = 0; j < 4; ++j) REQUIRE(zstore.grad("z").data[j] == w[j]);
}

TEST_CASE("commitment gradient wrt z is 2*beta*(z - e_k)") {
  VQConfig cfg;
  cfg.K = 2;
  cfg.d_e = 2;
  cfg.beta = 0.25;
  auto store = init_parameters(vq_param_specs<double>(cfg), Rng(10));
  store.value("vq.codebook").data = {0, 0, 5, 5};
  ParameterStoreT<double> zstore;
  Rng zr(11);
  zstore.create("z", 1, 2, InitRule::Zeros, zr);
  zstore.value("z").data = {1, 0};

  Tape<double> tape;
  auto z = use_param(tape, zstore, "z");
  auto g = vq_loss_graph(tape, store, z, cfg);
  auto loss = tape.scale(g.loss_commit, cfg.beta);
  tape.backward(loss);
  tape.flush_param_grads();
  REQUIRE(std::abs(zstore.grad("z").data[0] - 0.5) < 1e-12);
  REQUIRE(std::abs(zstore.grad("z").data[1] - 0.0) < 1e-12);
}

TEST_CASE("decoder gradient check through the quantized path") {
  // Only the decoder admits a finite-difference check of the full loss: the
  // straight-through copy and the stop-gradients reroute the analytic
  // gradients for z and the codebook away from the value-level derivative,
  // and those routes are verified by hand-derived formulas elsewhere.
  VQConfig cfg;
  cfg.K = 3;
  cfg.d_e = 4;
  auto store = init_parameters(vq_param_specs<double>(cfg), Rng(12));
  Rng zr(13);
  std::vector<double> zv(4);
  for (auto& v : zv) v = zr.normal();
  int k = nearest_code(zv, store.value("vq.codebook"));
  std::vector<double> ek(store.value("vq.codebook").data.begin() + k * 4,
                         store.value("vq.codebook").data.begin() + (k + 1) * 4);
  store.entries_.erase("vq.codebook");
  auto rep = grad_check(
      [&](Tape<double>& t, ParameterStoreT<double>& ps) {
        auto z_q = t.leaf_row(ek);  // quantized value, constant under decoder probes
        auto recon = mlp(t, ps, std::string("vq.decoder"), z_q);
        auto target = t.leaf_row(zv);
        return t.scale(t.sum_sq(t.sub(recon, target)), 1.0 / cfg.d_e);
      },
      store, 1e-5);
  INFO("worst " << rep.worst_param << " rel " << rep.max_rel_err);
  REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("gradient routing across the three loss terms") {
  VQConfig cfg;
  cfg.K = 3;
  cfg.d_e = 3;
  auto store = init_parameters(vq_param_specs<double>(cfg), Rng(14));
  set_identity_decoder(store);
  store.value("vq.codebook").data = {0.2, 0.1, -0.3, 7, 7, 7, -7, -7, 7};
  std::vector<double> zv = {0.3, 0.0, -0.2};  // nearest = code 0

  // finite-difference: perturbing a non-selected code changes no loss term
  auto eval_terms = [&](ParameterStoreT<double>& ps) {
    Tape<double> t;
    auto z = t.leaf_row(zv);
    auto g = vq_loss_graph(t, ps, z, cfg);
    REQUIRE(g.code_index == 0);
    return vq_loss_terms(t, g, cfg.beta);
  };
  auto base = eval_terms(store);
  for (int row : {1, 2})
    for (int j = 0; j < 3; ++j) {
      auto perturbed = store;
      perturbed.value("vq.codebook").at(row, j) += 1e-3;
      auto p = eval_terms(perturbed);
      REQUIRE(p.reconstruction == base.reconstruction);
      REQUIRE(p.codebook == base.codebook);
      REQUIRE(p.commitment == base.commitment);
    }

  // analytic routing: per-term gradients wrt the codebook
  auto term_grad = [&](int which) {
    store.zero_grads();
    Tape<double> t;
    auto z = t.leaf_row(zv);
    auto g = vq_loss_graph(t, store, z, cfg);
    t.backward(which == 0 ? g.loss_recon : which == 1 ? g.loss_codebook : g.loss_commit);
    t.flush_param_grads();
    return store.grad("vq.codebook").data;
  };
  // reconstruction: straight-through bypasses the codebook entirely
  for (double v : term_grad(0)) REQUIRE(v == 0.0);
  // commitment: stop-gradient blocks the codebook
  for (double v : term_grad(2)) REQUIRE(v == 0.0);
  // codebook term: gradient 2(e_k - z) on the selected row only
  auto gcb = term_grad(1);
  for (int j = 0; j < 3; ++j) {
    double expect = 2 * (store.value("vq.codebook").at(0, j) - zv[j]);
    REQUIRE(std::abs(gcb[j] - expect) < 1e-12);
  }
  for (size_t i = 3; i < gcb.size(); ++i) REQUIRE(gcb[i] == 0.0);
}

TEST_CASE("codebook metrics") {
  auto uniform = codebook_metrics({0, 1, 2, 3}, 4);
  REQUIRE(std::abs(uniform.perplexity - 4.0) < 1e-12);
  REQUIRE(uniform.n_dead == 0);

  auto collapsed = codebook_metrics({2, 2, 2, 2, 2}, 6);
  REQUIRE(std::abs(collapsed.perplexity - 1.0) < 1e-12);
  REQUIRE(collapsed.n_dead == 5);

  auto half = codebook_metrics({0, 0, 1, 1}, 4);
  REQUIRE(std::abs(half.perplexity - 2.0) < 1e-12);
  REQUIRE(half.n_dead == 2);

  REQUIRE_THROWS_AS(codebook_metrics({}, 4), ValidationError);
  REQUIRE_THROWS_AS(codebook_metrics({4}, 4), ValidationError);
}

TEST_CASE("reinit_dead_codes behavior") {
  Rng rng(20);

  SECTION("no dead codes: bitwise unchanged") {
    TensorF cb(3, 2, {1, 2, 3, 4, 5, 6});
    auto before = cb.data;
    CodebookState st;
    st.ensure(3);
    st.usage_counts = {5, 1, 2};
    TensorF batch(2, 2, {0, 0, 1, 1});
    reinit_dead_codes(cb, st, batch, rng, 2);
    REQUIRE(cb.data == before);
  }

  SECTION("patience not reached: unchanged") {
    TensorF cb(2, 2, {1, 2, 3, 4});
    auto before = cb.data;
    CodebookState st;
    st.ensure(2);
    st.usage_counts = {3, 0};  // first unused epoch
    TensorF batch(1, 2, {9, 9});
    reinit_dead_codes(cb, st, batch, rng, 2);
    REQUIRE(cb.data == before);
    REQUIRE(st.epochs_unused[1] == 1);
  }

  SECTION("dead code resets near a batch embedding (4-sigma bound, 1000 trials)") {
    int violations = 0;
    for (int trial = 0; trial < 1000; ++trial) {
      TensorF cb(2, 2, {1, 2, 50, 50});
      CodebookState st;
      st.ensure(2);
      st.epochs_unused = {0, 2};  // already at patience
      st.usage_counts = {1, 0};
      TensorF batch(1, 2, {-3.0f, 4.0f});
      Rng r(1000 + trial);
      reinit_dead_codes(cb, st, batch, r, 2);
      if (std::abs(cb.at(1, 0) + 3.0f) > 0.05 || std::abs(cb.at(1, 1) - 4.0f) > 0.05)
        ++violations;
    }
    // P(|N(0,0.01)| > 0.05) per coordinate is ~5.7e-7; zero violations expected
    REQUIRE(violations == 0);
  }

  SECTION("empty batch: warning, no change") {
    TensorF cb(2, 2, {1, 2, 3, 4});
    auto before = cb.data;
    CodebookState st;
    st.ensure(2);
    st.epochs_unused = {0, 5};
    TensorF batch(0, 2);
    std::vector<std::string> warnings;
    reinit_dead_codes(cb, st, batch, rng, 2, &warnings);
    REQUIRE(cb.data == before);
    REQUIRE_FALSE(warnings.empty());
  }
}
