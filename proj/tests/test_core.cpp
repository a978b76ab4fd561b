#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "caps/adam.hpp"
#include "caps/checkpoint.hpp"
#include "caps/gradcheck.hpp"
#include "caps/params.hpp"
#include "caps/rng.hpp"
#include "caps/tape.hpp"

using namespace caps;

TEST_CASE("rng reproducibility and splitting") {
  Rng a(42, 7), b(42, 7);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());

  Rng s1 = Rng(42).split(1);
  Rng s2 = Rng(42).split(2);
  int same = 0;
  for (int i = 0; i < 64; ++i)
    if (s1.next_u64() == s2.next_u64()) ++same;
  REQUIRE(same == 0);

  Rng u(123);
  double mean = 0;
  for (int i = 0; i < 10000; ++i) mean += u.uniform();
  mean /= 10000;
  REQUIRE(std::abs(mean - 0.5) < 0.02);
}

TEST_CASE("init_parameters rules") {
  std::vector<ParamSpec<float>> spec = {
      {"b", 1, 3, InitRule::Zeros},
      {"w", 4, 8, InitRule::UniformFanIn},
  };
  auto store = init_parameters(spec, Rng(7));
  for (float v : store.value("b").data) REQUIRE(v == 0.0f);
  // fan_in = 4 -> bound 0.5
  for (float v : store.value("w").data) {
    REQUIRE(v >= -0.5f);
    REQUIRE(v <= 0.5f);
  }
  auto store2 = init_parameters(spec, Rng(7));
  REQUIRE(store == store2);

  std::vector<ParamSpec<float>> dup = {{"x", 1, 1, InitRule::Zeros},
                                       {"x", 1, 1, InitRule::Zeros}};
  REQUIRE_THROWS_AS(init_parameters(dup, Rng(0)), ValidationError);
}

TEST_CASE("adam zero gradient is identity") {
  std::vector<ParamSpec<float>> spec = {{"w", 2, 3, InitRule::UniformFanIn}};
  auto store = init_parameters(spec, Rng(1));
  auto before = store.value("w").data;
  Adam opt(1e-3);
  opt.step(store);
  REQUIRE(store.value("w").data == before);
  REQUIRE(opt.step_count() == 1);
}

TEST_CASE("adam first step matches the hand-evaluated recurrence") {
  ParameterStore store;
  Rng rng(0);
  store.create("p", 1, 1, InitRule::Zeros, rng);
  store.value("p").data[0] = 1.0f;
  store.grad("p").data[0] = 1.0f;
  Adam opt(0.1, 0.9, 0.999, 1e-8);
  opt.step(store);
  // m-hat = 1, v-hat = 1 after bias correction; update = lr / (1 + eps)
  double expected = 1.0 - 0.1 / (1.0 + 1e-8);
  REQUIRE(std::abs(store.value("p").data[0] - expected) < 1e-7);
  // gradients were consumed
  REQUIRE(store.grad("p").data[0] == 0.0f);
}

TEST_CASE("adam moments decay: second update smaller when g=0") {
  ParameterStore store;
  Rng rng(0);
  store.create("p", 1, 1, InitRule::Zeros, rng);
  store.value("p").data[0] = 1.0f;
  store.grad("p").data[0] = 1.0f;
  Adam opt(0.1);
  opt.step(store);
  float after1 = store.value("p").data[0];
  float d1 = std::abs(after1 - 1.0f);
  store.grad("p").data[0] = 0.0f;
  opt.step(store);
  float d2 = std::abs(store.value("p").data[0] - after1);
  REQUIRE(d2 < d1);
  REQUIRE(d2 > 0.0f);
}

TEST_CASE("adam aborts on non-finite gradient, naming the parameter") {
  ParameterStore store;
  Rng rng(0);
  store.create("enc.w", 1, 1, InitRule::Zeros, rng);
  store.grad("enc.w").data[0] = std::numeric_limits<float>::quiet_NaN();
  Adam opt;
  try {
    opt.step(store);
    FAIL("expected RuntimeFailure");
  } catch (const RuntimeFailure& e) {
    REQUIRE(std::string(e.what()).find("enc.w") != std::string::npos);
  }
}

TEST_CASE("grad_check: quadratic is exact") {
  ParameterStoreT<double> store;
  Rng rng(3);
  store.create("p", 1, 5, InitRule::UniformFanIn, rng);
  auto rep = grad_check(
      [](Tape<double>& t, ParameterStoreT<double>& ps) {
        auto p = t.param(ps.value("p"), &ps.grad("p"));
        return t.scale(t.sum_sq(p), 0.5);
      },
      store, 1e-5);
  REQUIRE(rep.max_rel_err < 1e-9);
}

TEST_CASE("grad_check: commitment term beta*||z - sg[e]||^2 wrt z") {
  ParameterStoreT<double> store;
  Rng rng(4);
  store.create("z", 1, 4, InitRule::UniformFanIn, rng);
  std::vector<double> e = {0.3, -0.2, 0.1, 0.5};
  double beta = 0.25;
  auto build = [&](Tape<double>& t, ParameterStoreT<double>& ps) {
    auto z = t.param(ps.value("z"), &ps.grad("z"));
    auto ev = t.leaf_row(e);
    return t.scale(t.sum_sq(t.sub(z, t.stopgrad(ev))), beta);
  };
  auto rep = grad_check(build, store, 1e-5);
  REQUIRE(rep.max_rel_err < 1e-6);
  // analytic form 2*beta*(z - e)
  store.zero_grads();
  Tape<double> t;
  auto loss = build(t, store);
  t.backward(loss);
  t.flush_param_grads();
  for (int i = 0; i < 4; ++i) {
    double expect = 2 * beta * (store.value("z").data[i] - e[i]);
    REQUIRE(std::abs(store.grad("z").data[i] - expect) < 1e-12);
  }
}

TEST_CASE("grad_check: codebook term ||sg[z] - e||^2 has zero grad wrt z") {
  ParameterStoreT<double> store;
  Rng rng(5);
  store.create("z", 1, 4, InitRule::UniformFanIn, rng);
  std::vector<double> e = {0.3, -0.2, 0.1, 0.5};
  store.zero_grads();
  Tape<double> t;
  auto z = t.param(store.value("z"), &store.grad("z"));
  auto ev = t.leaf_row(e);
  auto loss = t.sum_sq(t.sub(t.stopgrad(z), ev));
  t.backward(loss);
  t.flush_param_grads();
  for (double g : store.grad("z").data) REQUIRE(g == 0.0);
}

TEST_CASE("grad_check rejects non-deterministic functions") {
  ParameterStoreT<double> store;
  Rng rng(5);
  store.create("z", 1, 2, InitRule::UniformFanIn, rng);
  int calls = 0;
  REQUIRE_THROWS_AS(
      grad_check(
          [&calls](Tape<double>& t, ParameterStoreT<double>& ps) {
            auto z = t.param(ps.value("z"), &ps.grad("z"));
            return t.scale(t.sum_sq(z), 1.0 + 0.1 * (calls++));
          },
          store, 1e-5),
      ValidationError);
}

TEST_CASE("grad_check covers every tape primitive") {
  ParameterStoreT<double> store;
  Rng rng(11);
  store.create("a", 3, 4, InitRule::UniformFanIn, rng);
  store.create("b", 4, 3, InitRule::UniformFanIn, rng);
  store.create("v", 1, 3, InitRule::UniformFanIn, rng);
  store.create("g", 1, 3, InitRule::UniformFanIn, rng);
  store.create("bias", 1, 3, InitRule::Normal, rng, 0.1);

  auto build = [](Tape<double>& t, ParameterStoreT<double>& ps) {
    auto a = t.param(ps.value("a"), &ps.grad("a"));
    auto b = t.param(ps.value("b"), &ps.grad("b"));
    auto v = t.param(ps.value("v"), &ps.grad("v"));
    auto g = t.param(ps.value("g"), &ps.grad("g"));
    auto bias = t.param(ps.value("bias"), &ps.grad("bias"));
    auto m = t.matmul(a, b);                      // 3x3
    auto m2 = t.add_rowvec(m, v);
    auto ln = t.layernorm(m2, g, bias);
    auto sm = t.softmax_rows(ln);
    auto re = t.relu(t.sub(m2, sm));
    auto nt = t.matmul_nt(re, re);                // 3x3
    auto cat = t.concat_cols(nt, t.mul(re, re));  // 3x6
    auto pool = t.maxpool_rows(cat);              // 1x6
    auto row = t.slice_row(cat, 1);
    auto sl = t.slice_cols(cat, 2, 3);
    auto stack = t.concat_rows({pool, row});      // 2x6
    auto h = t.smooth_l1_mean(t.scale(stack, 3.0));
    auto ce = t.cross_entropy_with_dist(t.slice_row(sl, 0), {0.2, 0.5, 0.3});
    auto ce2 = t.cross_entropy_with_index(t.slice_row(sl, 2), 1);
    return t.add(t.add(h, ce), t.add(ce2, t.scale(t.sum_all(sl), 0.1)));
  };
  auto rep = grad_check(build, store, 1e-5);
  INFO("worst " << rep.worst_param << "[" << rep.worst_index << "] rel "
                << rep.max_rel_err);
  REQUIRE(rep.max_rel_err < 1e-6);
}

TEST_CASE("checkpoint round-trip is value-identical with stable CRC") {
  std::vector<ParamSpec<float>> spec = {
      {"encoder.cluster.w0", 9, 16, InitRule::UniformFanIn},
      {"vq.codebook", 8, 16, InitRule::Normal, 0.5},
      {"planner.score.b", 1, 1, InitRule::Zeros},
  };
  Checkpoint ckpt;
  ckpt.params = init_parameters(spec, Rng(99));
  ckpt.meta = {{"note", "test"}, {"seed", 99}};

  std::string bytes = serialize_checkpoint(ckpt);
  REQUIRE(bytes.substr(0, 8) == "CAPSCKPT");
  Checkpoint back = deserialize_checkpoint(bytes);
  REQUIRE(back.params == ckpt.params);
  REQUIRE(back.meta.at("note") == "test");

  // reserialize: identical bytes and CRC
  std::string bytes2 = serialize_checkpoint(back);
  REQUIRE(bytes2 == bytes);

  // corruption is detected
  std::string bad = bytes;
  bad[bad.size() - 10] ^= 0x01;
  REQUIRE_THROWS_AS(deserialize_checkpoint(bad), ValidationError);

  // file round trip
  auto path = std::filesystem::temp_directory_path() / "caps_test_ckpt.bin";
  save_checkpoint(ckpt, path.string());
  Checkpoint fromfile = load_checkpoint(path.string());
  REQUIRE(fromfile.params == ckpt.params);
  std::filesystem::remove(path);
}
