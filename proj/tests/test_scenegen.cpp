#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "caps/dataset.hpp"
#include "caps/scenegen.hpp"

using namespace caps;

TEST_CASE("stop_behind: ego comes to a full stop with clearance") {
  for (uint64_t s = 0; s < 30; ++s) {
    Scene sc = generate_scene(Family::StopBehind, Rng(1000 + s));
    REQUIRE(sc.ego.future.back().speed == 0.0);
    // lead is the first object; final bumper gap >= 2 m
    const auto& lead = sc.objects.front();
    double gap = std::sqrt(dist2(sc.ego.future.back().x, sc.ego.future.back().y,
                                 lead.future.back().x, lead.future.back().y)) -
                 sc.ego.radius - lead.radius;
    REQUIRE(gap >= 2.0);
  }
}

TEST_CASE("lane_follow: ego holds its speed") {
  for (uint64_t s = 0; s < 20; ++s) {
    Scene sc = generate_scene(Family::LaneFollow, Rng(2000 + s));
    double v0 = sc.ego.past.back().speed;
    for (const auto& st : sc.ego.future) REQUIRE(std::abs(st.speed - v0) <= 1.0);
  }
}

TEST_CASE("cut_in: merger ends in the ego lane ahead of the ego") {
  for (uint64_t s = 0; s < 30; ++s) {
    Scene sc = generate_scene(Family::CutIn, Rng(3000 + s));
    const auto& merger = sc.objects.front();
    REQUIRE(std::abs(merger.past.back().y) > 2.0);     // starts on the shoulder
    REQUIRE(std::abs(merger.future.back().y) < 0.3);   // ends in lane
    REQUIRE(merger.future.back().x > sc.ego.future.back().x);
  }
}

TEST_CASE("same family and seed give byte-identical serialization") {
  Scene a = generate_scene(Family::CutIn, Rng(77), {}, 5);
  Scene b = generate_scene(Family::CutIn, Rng(77), {}, 5);
  REQUIRE(scene_to_jsonl(a) == scene_to_jsonl(b));
}

TEST_CASE("generated scenes satisfy all invariants across families and seeds") {
  // validate_scene throws on kinematic or collision violations
  for (auto fam : {Family::LaneFollow, Family::StopBehind, Family::CutIn})
    for (uint64_t s = 0; s < 50; ++s)
      REQUIRE_NOTHROW(generate_scene(fam, Rng(s).split(static_cast<int>(fam))));
}

TEST_CASE("ego future first step stays within 1 m of origin") {
  for (auto fam : {Family::LaneFollow, Family::StopBehind, Family::CutIn})
    for (uint64_t s = 0; s < 20; ++s) {
      Scene sc = generate_scene(fam, Rng(500 + s * 3 + static_cast<int>(fam)));
      double d = std::sqrt(dist2(sc.ego.future[0].x, sc.ego.future[0].y, 0, 0));
      REQUIRE(d <= 1.0 + 1e-9);
    }
}

TEST_CASE("parameter validation") {
  SceneGenParams p;
  p.ego_speed_max = 20.0;
  REQUIRE_THROWS_AS(generate_scene(Family::LaneFollow, Rng(0), p), ValidationError);
  SceneGenParams q;
  q.cut_in_gap_min = 2.0;
  REQUIRE_THROWS_AS(generate_scene(Family::CutIn, Rng(0), q), ValidationError);
}

TEST_CASE("mixture counts: largest remainder arithmetic") {
  auto c1 = mixture_counts({{Family::LaneFollow, 1.0}}, 10);
  REQUIRE(c1[Family::LaneFollow] == 10);

  auto c2 = mixture_counts({{Family::LaneFollow, 0.85},
                            {Family::StopBehind, 0.10},
                            {Family::CutIn, 0.05}},
                           2000);
  REQUIRE(c2[Family::LaneFollow] == 1700);
  REQUIRE(c2[Family::StopBehind] == 200);
  REQUIRE(c2[Family::CutIn] == 100);

  auto c3 = mixture_counts({{Family::LaneFollow, 1.0 / 3},
                            {Family::StopBehind, 1.0 / 3},
                            {Family::CutIn, 1.0 / 3}},
                           3);
  REQUIRE(c3[Family::LaneFollow] == 1);
  REQUIRE(c3[Family::StopBehind] == 1);
  REQUIRE(c3[Family::CutIn] == 1);

  REQUIRE_THROWS_AS(mixture_counts({}, 5), ValidationError);
  REQUIRE_THROWS_AS(mixture_counts({{Family::LaneFollow, 0.5}}, 5), ValidationError);
}

TEST_CASE("dataset write/read round trip") {
  auto dir = std::filesystem::temp_directory_path() / "caps_test_ds";
  std::filesystem::remove_all(dir);
  Dataset ds = generate_dataset({{Family::LaneFollow, 0.5}, {Family::StopBehind, 0.5}},
                                12, 42);
  write_dataset(ds, dir.string());
  Dataset back = read_dataset(dir.string());
  REQUIRE(back.scenes.size() == ds.scenes.size());
  for (size_t i = 0; i < ds.scenes.size(); ++i) REQUIRE(back.scenes[i] == ds.scenes[i]);
  REQUIRE(back.manifest.counts == ds.manifest.counts);
  std::filesystem::remove_all(dir);
}

TEST_CASE("dataset load errors name the offending line") {
  auto dir = std::filesystem::temp_directory_path() / "caps_test_ds_bad";
  std::filesystem::remove_all(dir);
  Dataset ds = generate_dataset({{Family::LaneFollow, 1.0}}, 3, 7);
  write_dataset(ds, dir.string());

  // truncate the last line
  auto scenes_path = dir / "scenes.jsonl";
  std::string content;
  {
    std::ifstream f(scenes_path);
    content.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  {
    std::ofstream f(scenes_path);
    f << content.substr(0, content.size() - 30);
  }
  try {
    read_dataset(dir.string());
    FAIL("expected error");
  } catch (const ValidationError& e) {
    REQUIRE(std::string(e.what()).find("line 3") != std::string::npos);
  }

  // count mismatch: restore file but drop one full line
  {
    std::ofstream f(scenes_path);
    size_t first_nl = content.find('\n');
    size_t second_nl = content.find('\n', first_nl + 1);
    f << content.substr(0, second_nl + 1);
  }
  try {
    read_dataset(dir.string());
    FAIL("expected error");
  } catch (const ValidationError& e) {
    REQUIRE(std::string(e.what()).find("mismatch") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}
