#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "v2xvlm/scenario.hpp"

using namespace v2x;

namespace {

double heading_of(Waypoint a, Waypoint b) { return std::atan2(b.y - a.y, b.x - a.x); }

std::size_t count_words(const ScenePrompt& p) {
  std::size_t n = 0;
  for (const auto* t : {&p.brief, &p.detailed, &p.task}) n += Vocabulary::split(*t).size();
  return n;
}

}  // namespace

TEST(Generate, Deterministic) {
  const auto a = generate_scene(Maneuver::straight, 0);
  const auto b = generate_scene(Maneuver::straight, 0);
  EXPECT_EQ(a.scene, b.scene);
  EXPECT_EQ(a.vehicle, b.vehicle);
  EXPECT_EQ(a.infra, b.infra);
  EXPECT_EQ(a.prompt, b.prompt);
  EXPECT_EQ(a.truth, b.truth);
  EXPECT_NE(generate_scene(Maneuver::straight, 1).scene, a.scene);
}

TEST(Generate, ViewShapes) {
  const auto s = generate_scene(Maneuver::right_turn, 4);
  EXPECT_EQ(s.vehicle.height, kViewHeight);
  EXPECT_EQ(s.vehicle.width, kViewWidth);
  EXPECT_EQ(s.infra.height, kViewHeight);
  EXPECT_EQ(s.infra.width, kViewWidth);
  EXPECT_EQ(s.truth.size(), kHorizon);
}

TEST(GroundTruth, StraightStaysInLane) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = generate_scene(Maneuver::straight, seed);
    for (const auto& w : s.truth) EXPECT_LT(std::abs(w.x - s.scene.ego.position.x), 0.5);
  }
}

TEST(GroundTruth, TurnsRotateByAQuarter) {
  constexpr double deg = 180.0 / std::numbers::pi;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto l = generate_scene(Maneuver::left_turn, seed);
    const double hl = heading_of(l.truth[kHorizon - 2], l.truth[kHorizon - 1]) - l.scene.ego.heading;
    EXPECT_NEAR(hl * deg, 90.0, 10.0);
    const auto r = generate_scene(Maneuver::right_turn, seed);
    const double hr = heading_of(r.truth[kHorizon - 2], r.truth[kHorizon - 1]) - r.scene.ego.heading;
    EXPECT_NEAR(hr * deg, -90.0, 10.0);
  }
}

TEST(GroundTruth, WaypointsInsideQuantizationRange) {
  const ModelConfig c;
  const auto ds = generate_dataset(300, 5);
  for (const auto& s : ds) EXPECT_NO_THROW(tokenize_trajectory(s.truth, c));
}

TEST(Prompt, EgoPositionAndTemplates) {
  Scene s;
  s.ego.position = {2.0, -1.0};
  s.ego.speed = 4.0;
  const auto p = build_prompt(s);
  EXPECT_EQ(p.ego_position, "(2.0, -1.0)");
  EXPECT_NE(p.brief.find("(2.0, -1.0)"), std::string::npos);
  EXPECT_NE(p.detailed.find("there are no visible agents ."), std::string::npos);
  EXPECT_EQ(p.task.rfind("plan the future trajectory", 0), 0u);
  for (const auto* part : {&p.brief, &p.detailed, &p.ego_position, &p.task}) EXPECT_FALSE(part->empty());
}

TEST(Prompt, AgentCountChangesPrompt) {
  Scene s;
  s.ego.position = {2.0, -6.0};
  s.ego.speed = 3.0;
  Agent a;
  a.position = {2.0, 6.0};
  s.agents.push_back(a);
  const auto one = build_prompt(s);
  a.position = {0.0, 12.0};
  s.agents.push_back(a);
  const auto two = build_prompt(s);
  EXPECT_NE(one.detailed, two.detailed);
  EXPECT_NE(one.detailed.find("there is 1 visible agent"), std::string::npos);
  EXPECT_NE(two.detailed.find("there are 2 visible agents"), std::string::npos);
}

TEST(Prompt, ClosedVocabulary) {
  const auto& v = Vocabulary::instance();
  EXPECT_LE(v.size(), 256u);
  for (const auto& s : generate_dataset(200, 2))
    for (auto id : v.tokenize(s.prompt.full_text()).ids) ASSERT_NE(id, Vocabulary::oov());
}

TEST(Generate, HiddenAgentsInManyScenes) {
  const auto ds = generate_dataset(300, 0);
  std::size_t with_hidden = 0;
  for (const auto& s : ds) with_hidden += hidden_agent_count(s.scene) > 0 ? 1 : 0;
  EXPECT_GE(static_cast<double>(with_hidden) / ds.size(), 0.30);
}

TEST(PerturbImage, IdentityMeanAndRange) {
  const auto s = generate_scene(Maneuver::straight, 3);
  EXPECT_EQ(perturb_image(s.infra, 0.0, 1), s.infra);
  const Image gray(64, 64, 3, 128);
  const Image n = perturb_image(gray, 10.0, 9);
  double mean = 0;
  for (auto px : n.data) mean += px;
  mean /= static_cast<double>(n.data.size());
  EXPECT_LT(std::abs(mean - 128.0), 1.0);
  EXPECT_NE(n, gray);
  EXPECT_EQ(perturb_image(gray, 10.0, 9), n);
  const Image white(8, 8, 3, 255);
  EXPECT_NO_THROW(perturb_image(white, 200.0, 2));
  EXPECT_THROW(perturb_image(white, -1.0, 2), Error);
}

TEST(PerturbText, IdentityAtZero) {
  const auto s = generate_scene(Maneuver::left_turn, 8);
  EXPECT_EQ(perturb_text(s.prompt, 0.0, 1), s.prompt);
}

TEST(PerturbText, ReplacesEveryEligibleWordAtOne) {
  const auto s = generate_scene(Maneuver::left_turn, 8);
  const auto r = perturb_text_counted(s.prompt, 1.0, 1);
  EXPECT_EQ(r.replaced, r.eligible);
  EXPECT_EQ(r.eligible + Vocabulary::split(s.prompt.ego_position).size(), count_words(s.prompt));
  EXPECT_NE(r.prompt.brief.find(s.prompt.ego_position), std::string::npos);
  const auto a = Vocabulary::split(s.prompt.task);
  const auto b = Vocabulary::split(r.prompt.task);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NE(a[i], b[i]);
}

TEST(PerturbText, BinomialCount) {
  std::size_t eligible = 0, replaced = 0;
  std::uint64_t seed = 0;
  const auto ds = generate_dataset(200, 3);
  for (std::size_t i = 0; eligible < 1000; ++i) {
    const auto r = perturb_text_counted(ds[i % ds.size()].prompt, 0.1, seed++);
    eligible += r.eligible;
    replaced += r.replaced;
  }
  const double expected = 0.1 * static_cast<double>(eligible);
  EXPECT_NEAR(static_cast<double>(replaced), expected, 30.0 * static_cast<double>(eligible) / 1000.0);
}

TEST(PerturbText, RejectsBadProbability) {
  const auto s = generate_scene(Maneuver::straight, 1);
  EXPECT_THROW(perturb_text(s.prompt, 1.5, 0), Error);
}

TEST(Dataset, SaveLoadRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "v2xvlm_ds_roundtrip";
  std::filesystem::remove_all(dir);
  const auto ds = generate_dataset(12, 4);
  save_dataset(dir, ds);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back[i].scene, ds[i].scene);
    EXPECT_EQ(back[i].vehicle, ds[i].vehicle);
    EXPECT_EQ(back[i].infra, ds[i].infra);
    EXPECT_EQ(back[i].prompt, ds[i].prompt);
    EXPECT_EQ(back[i].truth, ds[i].truth);
  }
  std::filesystem::remove_all(dir);
}

TEST(Dataset, HeldOutIsDisjoint) {
  const auto train = generate_dataset(50, 0);
  const auto test = generate_dataset(50, 0, kHeldOutOffset);
  std::set<std::uint64_t> seeds;
  for (const auto& s : train) seeds.insert(s.scene.seed);
  for (const auto& s : test) EXPECT_EQ(seeds.count(s.scene.seed), 0u);
}

TEST(Dataset, MissingManifestIsIoError) {
  try {
    load_dataset(std::filesystem::temp_directory_path() / "v2xvlm_no_such_dir");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::io_error);
  }
}
