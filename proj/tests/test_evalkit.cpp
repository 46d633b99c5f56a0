#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "v2xvlm/evalkit.hpp"

using namespace v2x;

namespace {

Trajectory line(double vx, double vy, std::size_t n = kHorizon) {
  Trajectory t;
  for (std::size_t k = 1; k <= n; ++k) t.push_back({vx * 0.5 * k, vy * 0.5 * k});
  return t;
}

Errc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::usage_error;
}

double dist(Waypoint a, Waypoint b) { return std::hypot(a.x - b.x, a.y - b.y); }

}  // namespace

TEST(L2, Examples) {
  const auto t = line(1.0, 5.0);
  const auto z = l2_error(t, t);
  EXPECT_EQ(z.avg, 0.0);
  auto shifted = t;
  for (auto& w : shifted) w.x += 1.0;
  const auto s = l2_error(shifted, t);
  for (double v : s.at) EXPECT_DOUBLE_EQ(v, 1.0);
  EXPECT_DOUBLE_EQ(s.avg, 1.0);
}

TEST(L2, BruteForceAndMetricProperties) {
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    Trajectory a(kHorizon), b(kHorizon);
    for (auto& w : a) w = {rng.uniform(-20, 20), rng.uniform(-20, 20)};
    for (auto& w : b) w = {rng.uniform(-20, 20), rng.uniform(-20, 20)};
    const auto m = l2_error(a, b);
    const double want[3] = {dist(a[4], b[4]), dist(a[6], b[6]), dist(a[8], b[8])};
    for (int h = 0; h < 3; ++h) EXPECT_NEAR(m.at[h], want[h], 1e-12);
    EXPECT_NEAR(m.avg, (want[0] + want[1] + want[2]) / 3, 1e-12);
    EXPECT_EQ(l2_error(b, a).avg, m.avg);
    EXPECT_GE(m.avg, 0.0);
  }
}

TEST(L2, LengthMismatch) {
  EXPECT_EQ(code_of([] { l2_error(line(1, 1, 9), line(1, 1, 8)); }), Errc::length_mismatch);
  EXPECT_EQ(code_of([] { l2_error(line(1, 1, 4), line(1, 1, 4)); }), Errc::length_mismatch);
}

TEST(Collision, Cases) {
  Scene empty;
  EXPECT_EQ(collision_rate(line(0, 4), empty).avg, 0.0);

  Scene s;
  Agent a;
  a.position = line(0, 4)[4];  // on the 2.5 s waypoint
  a.radius = 1.0;
  s.agents.push_back(a);
  const auto hit = collision_rate(line(0, 4), s);
  EXPECT_EQ(hit.at[0], 100.0);
  EXPECT_EQ(hit.at[1], 0.0);

  Scene edge;
  a.position = {line(0, 4)[4].x + 2.0, line(0, 4)[4].y};  // exactly r_ego + r_agent away
  edge.agents = {a};
  EXPECT_EQ(collision_rate(line(0, 4), edge).at[0], 0.0);
  EXPECT_EQ(collision_rate(line(0, 4), edge, {}, 1.0 + 1e-9).at[0], 100.0);
}

TEST(Collision, MovingAgentUsesTimestamp) {
  Scene s;
  Agent a;
  a.position = {-2.5, 20.0};  // the 2.5 s waypoint is (0, 20)
  a.velocity = {1.0, 0.0};  // reaches x = 0 at t = 2.5 s
  s.agents.push_back(a);
  const auto f = collision_flags(line(0, 8), s);
  EXPECT_TRUE(f[0]);
  EXPECT_FALSE(f[2]);
}

TEST(Collision, MonotoneUnderRadiusInflation) {
  const auto ds = generate_dataset(60, 3);
  std::vector<Trajectory> preds;
  std::vector<Scene> scenes;
  for (const auto& s : ds) {
    preds.push_back(constant_velocity(s.scene));
    scenes.push_back(s.scene);
  }
  double prev = -1;
  for (double r : {0.0, 0.5, 1.0, 2.0, 4.0, 8.0}) {
    const double c = collision_rate(preds, scenes, {}, r).avg;
    EXPECT_GE(c, prev);
    prev = c;
  }
  EXPECT_GT(prev, 0.0);
}

TEST(Refine, TooShort) { EXPECT_EQ(code_of([] { refine_trajectory(line(1, 1, 2)); }), Errc::too_short); }

TEST(Refine, SpikeRemoved) {
  auto t = line(0, 8);
  t[4] = {30.0, t[4].y};
  EXPECT_GT(max_step_speed(t), kMaxSpeed);
  const auto r = refine_trajectory(t);
  EXPECT_LE(max_step_speed(r), kMaxSpeed + 1e-9);
  EXPECT_LT(std::abs(r[4].x), 1e-9);
  EXPECT_EQ(r.front(), t.front());
}

TEST(Refine, SmoothInputMovesByAtMostTheAverageBound) {
  const auto s = generate_scene(Maneuver::left_turn, 2).truth;
  const auto r = refine_trajectory(s);
  EXPECT_EQ(r.front(), s.front());
  EXPECT_EQ(r.back(), s.back());
  for (std::size_t i = 1; i + 1 < s.size(); ++i) {
    const double bound =
        std::hypot(s[i - 1].x - 2 * s[i].x + s[i + 1].x, s[i - 1].y - 2 * s[i].y + s[i + 1].y) / 3.0;
    EXPECT_LE(dist(r[i], s[i]), bound + 1e-12);
  }
  const auto straight = line(3, 4);
  const auto rs = refine_trajectory(straight);
  for (std::size_t i = 0; i < straight.size(); ++i) EXPECT_LT(dist(rs[i], straight[i]), 1e-12);
}

TEST(Refine, NeverIncreasesMaxSpeed) {
  Rng rng(7);
  for (int k = 0; k < 500; ++k) {
    Trajectory t(3 + rng.below(10));
    for (auto& w : t) w = {rng.uniform(-30, 30), rng.uniform(-30, 30)};
    const auto r = refine_trajectory(t);
    ASSERT_LE(max_step_speed(r), std::min(max_step_speed(t), kMaxSpeed) + 1e-9);
  }
}

TEST(Latency, TableProportions) {
  const auto r = make_latency(269.01, 72.72, 9.02, 2.61, 4);
  EXPECT_NEAR(r.total_ms, 353.36, 1e-9);
  const auto p = latency_proportions(r);
  EXPECT_NEAR(p[0], 76.1, 0.05);
  EXPECT_NEAR(p[1], 20.6, 0.05);
  EXPECT_NEAR(p[2], 2.6, 0.05);
  EXPECT_NEAR(p[3], 0.7, 0.05);
  EXPECT_NEAR(p[0] + p[1] + p[2] + p[3], 100.0, 0.1);
}

TEST(Latency, StubPhases) {
  const auto r = latency_breakdown(nullptr, [] { std::this_thread::sleep_for(std::chrono::milliseconds(20)); },
                                   nullptr, nullptr);
  const auto p = latency_proportions(r);
  EXPECT_GT(p[1], 95.0);
  EXPECT_NEAR(r.total_ms, r.preprocessing_ms + r.inference_ms + r.postprocessing_ms + r.residual_ms, 0.5);
}

TEST(Latency, Spread) {
  const auto s = spread({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(s.mean_ms, 2.0);
  EXPECT_NEAR(s.stddev_ms, std::sqrt(2.0 / 3.0), 1e-12);
  EXPECT_EQ(s.min_ms, 1.0);
  EXPECT_EQ(s.max_ms, 3.0);
  EXPECT_THROW(spread({}), Error);
}

TEST(Fps, Examples) {
  EXPECT_NEAR(fps(353.36, 4), 11.32, 0.01);
  EXPECT_NEAR(fps(263.97, 4), 15.15, 0.01);
  EXPECT_DOUBLE_EQ(fps(1000.0, 1), 1.0);
  EXPECT_THROW(fps(0.0, 1), Error);
}

TEST(Baseline, ConstantVelocityExactOnStraightCruise) {
  Scene s;
  s.ego.position = {2.0, -6.0};
  s.ego.speed = 4.0;
  const auto sample = render_sample(s);
  const auto cv = constant_velocity(s);
  EXPECT_LT(l2_error(cv, sample.truth).avg, 1e-6);
}

class Studies : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    ds_ = new Dataset(generate_dataset(6, 9, kHeldOutOffset));
    model_ = new Model(ModelConfig::student(), 1);
  }
  static void TearDownTestSuite() {
    delete ds_;
    delete model_;
  }
  static Dataset* ds_;
  static Model* model_;
};

Dataset* Studies::ds_ = nullptr;
Model* Studies::model_ = nullptr;

TEST_F(Studies, SweepBpsColumn) {
  const auto rows = sweep_bandwidth(*model_, *ds_, {1, 0.5, 0.2, 0.1});
  ASSERT_EQ(rows.size(), 4u);
  const std::uint64_t want[] = {12441600, 3110400, 497664, 124416};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(rows[i].bps, want[i]);
  const auto table = format_table(rows);
  for (const char* s : {"1.24e7", "3.11e6", "4.98e5", "1.24e5"}) EXPECT_NE(table.find(s), std::string::npos);
  EXPECT_NE(format_csv(rows).find(",12441600,"), std::string::npos);
  EXPECT_EQ(code_of([&] { sweep_bandwidth(*model_, *ds_, {1.5}); }), Errc::invalid_config);
  EXPECT_EQ(code_of([&] { sweep_bandwidth(*model_, *ds_, {0.0}); }), Errc::invalid_config);
}

TEST_F(Studies, EvaluateMatchesCooperativePath) {
  const auto e = evaluate(*model_, *ds_);
  for (std::size_t i = 0; i < ds_->size(); ++i) {
    const auto& s = (*ds_)[i];
    const auto r = cooperative_infer(*model_, vehicle_endpoint(s), roadside_endpoint(s));
    EXPECT_EQ(e.plans[i], r.plan.refined);
  }
}

TEST_F(Studies, RobustnessRows) {
  const auto rows = robustness_suite(*model_, *ds_, 0);
  ASSERT_EQ(rows.size(), 5u);
  EXPECT_EQ(rows[0].name, "clean");
  EXPECT_EQ(rows.back().name, "combined");
  const auto plain = evaluate(*model_, *ds_);
  EXPECT_EQ(rows[0].l2.avg, plain.l2.avg);
  EXPECT_EQ(rows[0].l2.at, plain.l2.at);
  for (const auto& r : rows) EXPECT_TRUE(std::isfinite(r.l2.avg));
  const auto p = default_perturbations().back().spec;
  EXPECT_GT(p.image_noise_std, 0.0);
  EXPECT_GT(p.text_flip_prob, 0.0);
}

TEST_F(Studies, NoFusionRowReportsZeroBps) {
  AblationVariant v;
  v.name = "no-fusion";
  v.blank_infra = true;
  const auto row = evaluate_variant(*model_, *ds_, v);
  EXPECT_EQ(row.bps, 0u);
  EXPECT_NE(format_table({row}).find(" 0 "), std::string::npos);
}

TEST(Ablation, VariantConfigs) {
  const auto vs = ablation_variants();
  ASSERT_EQ(vs.size(), 5u);
  TrainConfig base;
  for (const auto& v : vs) {
    const auto c = variant_config(base, v);
    if (v.name == "no-distillation") EXPECT_EQ(c.weights.lambda2, 0.0);
    else EXPECT_EQ(c.weights.lambda2, base.weights.lambda2);
    if (v.name == "no-alignment") EXPECT_EQ(c.weights.lambda1, 0.0);
    else EXPECT_EQ(c.weights.lambda1, base.weights.lambda1);
  }
  EXPECT_TRUE(vs[1].blank_infra);
  EXPECT_EQ(vs[3].prompt_mode, PromptMode::task_only);
}
