#include <gtest/gtest.h>

#include <sstream>

#include "v2xvlm/trainer.hpp"

using namespace v2x;

namespace {

ModelConfig fast_student() {
  ModelConfig c;
  c.d = 32;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_layers = 1;
  c.d_prime = 32;
  return c;
}

ModelConfig fast_teacher() {
  ModelConfig c = fast_student();
  c.d = 48;
  c.enc_layers = 2;
  return c;
}

TrainConfig quick(std::size_t epochs = 2) {
  TrainConfig c;
  c.epochs = epochs;
  c.lr = 1e-3;
  return c;
}

const Dataset& corpus() {
  static const Dataset ds = generate_dataset(16, 0);
  return ds;
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

}  // namespace

TEST(LrSchedule, LinearDecay) {
  EXPECT_EQ(lr_at(0, 100, 3e-4), 3e-4);
  EXPECT_EQ(lr_at(100, 100, 3e-4), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(50, 100, 3e-4), 1.5e-4);
  EXPECT_EQ(code_of([] { lr_at(101, 100, 1.0); }), Errc::step_out_of_range);
}

TEST(TrainConfig, Defaults) {
  const TrainConfig c;
  EXPECT_EQ(c.epochs, 10u);
  EXPECT_EQ(c.batch, 4u);
  EXPECT_TRUE(c.freeze_vision);
  EXPECT_DOUBLE_EQ(c.weights.lambda1, 0.1);
  EXPECT_DOUBLE_EQ(c.weights.lambda2, 0.5);
  EXPECT_DOUBLE_EQ(c.distill.temp, 2.0);
  EXPECT_DOUBLE_EQ(TrainConfig::kReferenceLr, 1e-6);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::invalid_config);
  c = TrainConfig{};
  c.batch = 1;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::invalid_config);
  c = TrainConfig{};
  c.weights.lambda1 = -1;
  EXPECT_EQ(code_of([&] { c.validate(); }), Errc::invalid_config);
}

TEST(Training, EmptyDataset) {
  EXPECT_EQ(code_of([] { train_teacher({}, quick(), fast_teacher()); }), Errc::empty_dataset);
  EXPECT_EQ(code_of([] { train_student({}, nullptr, quick(), fast_student()); }), Errc::empty_dataset);
}

TEST(Optimizer, FirstAdamStepMovesByLr) {
  nn::ParamStore ps;
  ps.add("w", 1, 3);
  ps[0].value = {1.0, -2.0, 0.5};
  nn::Grads g(ps);
  g[0] = {0.3, -4.0, 0.0};
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  AdamW opt(ps, cfg);
  opt.step(ps, g, {true}, 0.01);
  EXPECT_NEAR(ps[0].value[0], 1.0 - 0.01, 1e-6);
  EXPECT_NEAR(ps[0].value[1], -2.0 + 0.01, 1e-6);
  EXPECT_EQ(ps[0].value[2], 0.5);
}

TEST(Optimizer, DecoupledDecayAndMask) {
  nn::ParamStore ps;
  ps.add("a", 1, 1);
  ps.add("b", 1, 1);
  ps[0].value = {2.0};
  ps[1].value = {2.0};
  nn::Grads g(ps);
  TrainConfig cfg;
  AdamW opt(ps, cfg);
  opt.step(ps, g, {true, false}, 0.1);
  EXPECT_DOUBLE_EQ(ps[0].value[0], 2.0 - 0.1 * 0.01 * 2.0);
  EXPECT_EQ(ps[1].value[0], 2.0);
}

TEST(Optimizer, ClipGradNorm) {
  nn::ParamStore ps;
  ps.add("a", 1, 2);
  nn::Grads g(ps);
  g[0] = {3.0, 4.0};
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, {true}, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-12);
  EXPECT_NEAR(g[0][1], 0.8, 1e-12);
  g[0] = {0.3, 0.4};
  clip_grad_norm(g, {true}, 1.0);
  EXPECT_EQ(g[0][0], 0.3);
}

TEST(Batching, EpochOrderIsADeterministicPermutation) {
  const auto a = epoch_order(50, 7, 3);
  EXPECT_EQ(a, epoch_order(50, 7, 3));
  EXPECT_NE(a, epoch_order(50, 7, 4));
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Training, FrozenVisionBlocksAreBitIdentical) {
  const TrainConfig cfg = quick(1);
  const ModelConfig mc = fast_student();
  const Model init(mc, model_seed(cfg.seed, 0x73747564ULL));
  const auto r = train_student(corpus(), nullptr, cfg, mc);
  const auto& before = init.params();
  const auto& after = r.model.params();
  bool others_moved = false;
  for (std::size_t b = 0; b < before.count(); ++b) {
    if (Model::is_vision_encoder_param(before[b].name))
      EXPECT_EQ(before[b].value, after[b].value) << before[b].name;
    else if (before[b].value != after[b].value)
      others_moved = true;
  }
  EXPECT_TRUE(others_moved);
}

TEST(Training, DeterministicGivenSeed) {
  const TrainConfig cfg = quick(1);
  const auto a = train_student(corpus(), nullptr, cfg, fast_student());
  const auto b = train_student(corpus(), nullptr, cfg, fast_student());
  EXPECT_TRUE(a.model.params() == b.model.params());
  EXPECT_EQ(a.report.epochs[0].total, b.report.epochs[0].total);
}

TEST(Training, ZeroWeightsReduceToCrossEntropy) {
  TrainConfig cfg = quick(2);
  cfg.weights = {0.0, 0.0};
  const auto teacher = train_teacher(corpus(), quick(1), fast_teacher());
  const auto with_teacher = train_student(corpus(), &teacher.model, cfg, fast_student());
  const auto plain = train_student(corpus(), nullptr, cfg, fast_student());
  ASSERT_EQ(with_teacher.report.epochs.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(with_teacher.report.epochs[e].total, with_teacher.report.epochs[e].traj);
    EXPECT_EQ(with_teacher.report.epochs[e].traj, plain.report.epochs[e].traj);
  }
  EXPECT_TRUE(with_teacher.model.params() == plain.model.params());
}

TEST(Training, TeacherUntouchedAndKnowledgeTransferred) {
  const auto teacher = train_teacher(corpus(), quick(3), fast_teacher());
  const auto hash = teacher.model.params().hash();
  TrainConfig cfg = quick(4);
  cfg.weights.lambda2 = 1.0;
  const Dataset held_out = generate_dataset(8, 0, kHeldOutOffset);
  const Model init(fast_student(), model_seed(cfg.seed, 0x73747564ULL));
  const double before = mean_kd_loss(init, teacher.model, held_out, cfg.distill);
  const auto student = train_student(corpus(), &teacher.model, cfg, fast_student());
  EXPECT_EQ(teacher.model.params().hash(), hash);
  EXPECT_LT(mean_kd_loss(student.model, teacher.model, held_out, cfg.distill), before);
}

TEST(Training, TeacherOnlyUsesTrajAndAlignment) {
  const auto r = train_teacher(corpus(), quick(1), fast_teacher());
  ASSERT_EQ(r.report.epochs.size(), 1u);
  const auto& e = r.report.epochs[0];
  EXPECT_EQ(e.kd, 0.0);
  EXPECT_NEAR(e.total, e.traj + 0.1 * e.align, 1e-9);
  EXPECT_GT(e.update_norm, 0.0);
}

TEST(Training, ShapeMismatchBetweenTeacherAndStudent) {
  ModelConfig other = fast_teacher();
  other.coord_bins = 64;
  other.bin_size = 1.0;
  const Model teacher(other, 1);
  EXPECT_EQ(code_of([&] { train_student(corpus(), &teacher, quick(1), fast_student()); }), Errc::shape_mismatch);
}

TEST(Training, NonFiniteLossIsDivergence) {
  Model m(fast_student(), 3);
  for (auto& b : m.params().blocks())
    if (b.name.rfind("dec.out", 0) == 0) b.value[0] = std::numeric_limits<double>::quiet_NaN();
  const auto ex = make_examples(corpus(), m.config());
  EXPECT_EQ(code_of([&] { fit(m, ex, nullptr, quick(1)); }), Errc::divergence_detected);
}

TEST(Report, JsonLinesPerEpoch) {
  const auto r = train_student(corpus(), nullptr, quick(2), fast_student());
  const std::string text = r.report.to_jsonl();
  std::istringstream is(text);
  std::size_t n = 0;
  for (std::string line; std::getline(is, line); ++n) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"epoch", "L_traj", "L_align", "L_KD", "L_total", "wall_ms", "update_norm"})
      EXPECT_TRUE(j.contains(k)) << k;
    EXPECT_EQ(j["epoch"].get<std::size_t>(), n);
    EXPECT_TRUE(std::isfinite(j["L_total"].get<double>()));
  }
  EXPECT_EQ(n, 2u);
}
