#pragma once

// Planning metrics, latency accounting and the evaluation studies.

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "v2xvlm/planner.hpp"
#include "v2xvlm/scenario.hpp"
#include "v2xvlm/trainer.hpp"
#include "v2xvlm/v2xlink.hpp"

namespace v2x {

// 1-based waypoint indices; waypoint k sits at t = k * 0.5 s.
struct HorizonSpec {
  std::array<std::size_t, 3> indices{5, 7, 9};

  double time_of(std::size_t h) const { return static_cast<double>(indices[h]) * kWaypointDt; }
  std::size_t max_index() const { return *std::max_element(indices.begin(), indices.end()); }
};

struct HorizonMetric {
  std::array<double, 3> at{};
  double avg = 0.0;

  void finish() { avg = (at[0] + at[1] + at[2]) / 3.0; }
};

inline HorizonMetric l2_error(const Trajectory& pred, const Trajectory& truth, const HorizonSpec& spec = {}) {
  if (pred.size() != truth.size()) fail(Errc::length_mismatch, "trajectories differ in length");
  if (pred.size() < spec.max_index()) fail(Errc::length_mismatch, "trajectory shorter than the horizon");
  HorizonMetric m;
  for (std::size_t h = 0; h < 3; ++h) {
    const auto& p = pred[spec.indices[h] - 1];
    const auto& q = truth[spec.indices[h] - 1];
    m.at[h] = std::hypot(p.x - q.x, p.y - q.y);
  }
  m.finish();
  return m;
}

inline constexpr double kEgoRadius = 1.0;

// Disc test against every agent at the waypoint's timestamp; contact is not a
// collision.
inline std::array<bool, 3> collision_flags(const Trajectory& pred, const Scene& scene, const HorizonSpec& spec = {},
                                           double ego_radius = kEgoRadius) {
  if (pred.size() < spec.max_index()) fail(Errc::length_mismatch, "trajectory shorter than the horizon");
  std::array<bool, 3> hit{};
  for (std::size_t h = 0; h < 3; ++h) {
    const Waypoint w = pred[spec.indices[h] - 1];
    const double t = spec.time_of(h);
    for (const auto& a : scene.agents) {
      const Waypoint p = a.at(t);
      if (std::hypot(w.x - p.x, w.y - p.y) < ego_radius + a.radius) hit[h] = true;
    }
  }
  return hit;
}

// Percentage of colliding (trajectory, scene) pairs per horizon.
inline HorizonMetric collision_rate(const std::vector<Trajectory>& preds, const std::vector<Scene>& scenes,
                                    const HorizonSpec& spec = {}, double ego_radius = kEgoRadius) {
  if (preds.size() != scenes.size()) fail(Errc::length_mismatch, "prediction and scene counts differ");
  HorizonMetric m;
  if (preds.empty()) return m;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto f = collision_flags(preds[i], scenes[i], spec, ego_radius);
    for (std::size_t h = 0; h < 3; ++h) m.at[h] += f[h] ? 1.0 : 0.0;
  }
  for (auto& v : m.at) v = 100.0 * v / static_cast<double>(preds.size());
  m.finish();
  return m;
}

inline HorizonMetric collision_rate(const Trajectory& pred, const Scene& scene, const HorizonSpec& spec = {},
                                    double ego_radius = kEgoRadius) {
  return collision_rate(std::vector<Trajectory>{pred}, std::vector<Scene>{scene}, spec, ego_radius);
}

// ---------------------------------------------------------------------------
// Latency

struct LatencyRecord {
  double preprocessing_ms = 0.0;  // tokenization, rasters to patches
  double inference_ms = 0.0;      // forward pass
  double postprocessing_ms = 0.0; // detokenize, refine
  double residual_ms = 0.0;       // everything else (link, resampling)
  double total_ms = 0.0;
  std::size_t batch = 1;

  std::array<double, 4> parts() const { return {preprocessing_ms, inference_ms, postprocessing_ms, residual_ms}; }
};

inline LatencyRecord make_latency(double pre, double inf, double post, double residual, std::size_t batch = 1) {
  if (pre < 0 || inf < 0 || post < 0 || residual < 0) fail(Errc::invalid_config, "latency parts must be >= 0");
  return {pre, inf, post, residual, pre + inf + post + residual, batch};
}

// Percent share of each phase; all zeros when nothing was timed.
inline std::array<double, 4> latency_proportions(const LatencyRecord& r) {
  const auto p = r.parts();
  const double sum = p[0] + p[1] + p[2] + p[3];
  std::array<double, 4> out{};
  if (sum <= 0.0) return out;
  for (std::size_t i = 0; i < 4; ++i) out[i] = 100.0 * p[i] / sum;
  return out;
}

inline double fps(double total_ms, std::size_t batch) {
  if (!(total_ms > 0.0)) fail(Errc::invalid_config, "total latency must be positive");
  return static_cast<double>(batch) / (total_ms / 1000.0);
}

inline double fps(const LatencyRecord& r) { return fps(r.total_ms, r.batch); }

struct LatencySpread {
  double mean_ms = 0.0;
  double stddev_ms = 0.0;
  double min_ms = 0.0;
  double max_ms = 0.0;
};

inline LatencySpread spread(const std::vector<double>& xs) {
  if (xs.empty()) fail(Errc::empty_sequence, "no measurements");
  LatencySpread s;
  s.min_ms = *std::min_element(xs.begin(), xs.end());
  s.max_ms = *std::max_element(xs.begin(), xs.end());
  for (double x : xs) s.mean_ms += x;
  s.mean_ms /= static_cast<double>(xs.size());
  for (double x : xs) s.stddev_ms += (x - s.mean_ms) * (x - s.mean_ms);
  s.stddev_ms = std::sqrt(s.stddev_ms / static_cast<double>(xs.size()));
  return s;
}

// Times the four phases of a run. Each phase is a callable; stubs may be empty.
inline LatencyRecord latency_breakdown(const std::function<void()>& pre, const std::function<void()>& inf,
                                       const std::function<void()>& post, const std::function<void()>& residual,
                                       std::size_t batch = 1) {
  auto time = [](const std::function<void()>& f) {
    const auto t0 = std::chrono::steady_clock::now();
    if (f) f();
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  };
  const double a = time(pre), b = time(inf), c = time(post), d = time(residual);
  return make_latency(a, b, c, d, batch);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalOptions {
  double scale = 1.0;
  PerturbSpec perturb;
  std::uint64_t seed = 0;
  PromptMode prompt_mode = PromptMode::full;
  bool blank_infra = false;
  HorizonSpec horizons;
};

struct EvalSummary {
  HorizonMetric l2;
  HorizonMetric collision;
  LatencyRecord latency;  // mean per scene, batch 1
  std::uint64_t bps = 0;  // full-resolution link rate for this setting
  std::vector<Trajectory> plans;
};

inline LinkConfig reference_link(double scale) {
  LinkConfig c;
  c.scale = scale;
  return c;
}

inline EvalSummary evaluate(const Model& model, const Dataset& ds, const EvalOptions& o = {}) {
  if (ds.empty()) fail(Errc::empty_dataset, "evaluation set is empty");
  o.perturb.validate();
  using clock = std::chrono::steady_clock;
  auto ms = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double, std::milli>(b - a).count(); };

  EvalSummary out;
  out.bps = o.blank_infra ? 0 : bps(reference_link(o.scale));
  std::vector<Scene> scenes;
  double pre = 0, inf = 0, post = 0, res = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds[i];
    const Rng scene_rng = Rng(o.seed).derive(i);
    const auto t0 = clock::now();
    Image infra;
    if (o.blank_infra) {
      infra = blank_like(s.infra);
    } else {
      Image sent = o.perturb.image_noise_std > 0.0
                       ? perturb_image(s.infra, o.perturb.image_noise_std, scene_rng.derive(1).next_u64())
                       : s.infra;
      sent = downsample(sent, o.scale);
      infra = upsample(sent, s.infra.height, s.infra.width);
    }
    ScenePrompt prompt = s.prompt;
    if (o.perturb.text_flip_prob > 0.0)
      prompt = perturb_text(prompt, o.perturb.text_flip_prob, scene_rng.derive(2).next_u64());
    const auto t1 = clock::now();
    const PromptTokens tokens = prompt_tokens(prompt, o.prompt_mode);
    const PatchGrid grid = extract_patches(concat_views(s.vehicle, infra), model.config());
    const auto t2 = clock::now();
    const Matrix logits = model.forward_grid(grid, tokens).logits;
    const auto t3 = clock::now();
    Plan p = plan_from_logits(logits, model.config());
    const auto t4 = clock::now();

    res += ms(t0, t1);
    pre += ms(t1, t2);
    inf += ms(t2, t3);
    post += ms(t3, t4);

    const auto l2 = l2_error(p.refined, s.truth, o.horizons);
    for (std::size_t h = 0; h < 3; ++h) out.l2.at[h] += l2.at[h];
    out.plans.push_back(std::move(p.refined));
    scenes.push_back(s.scene);
  }
  const double n = static_cast<double>(ds.size());
  for (auto& v : out.l2.at) v /= n;
  out.l2.finish();
  out.collision = collision_rate(out.plans, scenes, o.horizons);
  out.latency = make_latency(pre / n, inf / n, post / n, res / n, 1);
  return out;
}

// Keeps the current speed and heading.
inline Trajectory constant_velocity(const Scene& s) {
  Trajectory t;
  for (std::size_t k = 1; k <= kHorizon; ++k) {
    const double dt = static_cast<double>(k) * kWaypointDt;
    t.push_back({s.ego.position.x + s.ego.speed * std::cos(s.ego.heading) * dt,
                 s.ego.position.y + s.ego.speed * std::sin(s.ego.heading) * dt});
  }
  return t;
}

inline HorizonMetric baseline_l2(const Dataset& ds, const HorizonSpec& spec = {}) {
  if (ds.empty()) fail(Errc::empty_dataset, "evaluation set is empty");
  HorizonMetric m;
  for (const auto& s : ds) {
    const auto e = l2_error(constant_velocity(s.scene), s.truth, spec);
    for (std::size_t h = 0; h < 3; ++h) m.at[h] += e.at[h];
  }
  for (auto& v : m.at) v /= static_cast<double>(ds.size());
  m.finish();
  return m;
}

// ---------------------------------------------------------------------------
// Studies

struct StudyRow {
  std::string name;
  double scale = 1.0;
  std::uint64_t bps = 0;
  HorizonMetric l2;
  HorizonMetric collision;
  LatencyRecord latency;
  double fps = 0.0;
};

inline StudyRow make_row(std::string name, double scale, const EvalSummary& e) {
  StudyRow r;
  r.name = std::move(name);
  r.scale = scale;
  r.bps = e.bps;
  r.l2 = e.l2;
  r.collision = e.collision;
  r.latency = e.latency;
  r.fps = e.latency.total_ms > 0.0 ? fps(e.latency) : 0.0;
  return r;
}

inline std::vector<StudyRow> sweep_bandwidth(const Model& model, const Dataset& ds, const std::vector<double>& scales,
                                             std::uint64_t seed = 0) {
  std::vector<StudyRow> rows;
  for (double s : scales) {
    if (!(s > 0.0 && s <= 1.0)) fail(Errc::invalid_config, "scale must lie in (0, 1]");
    EvalOptions o;
    o.scale = s;
    o.seed = seed;
    char name[32];
    std::snprintf(name, sizeof name, "s=%g", s);
    rows.push_back(make_row(name, s, evaluate(model, ds, o)));
  }
  return rows;
}

struct NamedPerturb {
  std::string name;
  PerturbSpec spec;
};

inline std::vector<NamedPerturb> default_perturbations() {
  return {{"clean", {0.0, 0.0}},
          {"image-noise-5", {5.0, 0.0}},
          {"image-noise-10", {10.0, 0.0}},
          {"text-p0.1", {0.0, 0.1}},
          {"combined", {10.0, 0.1}}};
}

inline std::vector<StudyRow> robustness_suite(const Model& model, const Dataset& ds, std::uint64_t seed = 0,
                                              const std::vector<NamedPerturb>& perturbs = default_perturbations()) {
  std::vector<StudyRow> rows;
  for (const auto& p : perturbs) {
    EvalOptions o;
    o.perturb = p.spec;
    o.seed = seed;
    rows.push_back(make_row(p.name, 1.0, evaluate(model, ds, o)));
  }
  return rows;
}

struct AblationVariant {
  std::string name;
  bool blank_infra = false;
  PromptMode prompt_mode = PromptMode::full;
  bool distill = true;
  bool align = true;
};

inline std::vector<AblationVariant> ablation_variants() {
  return {{"full", false, PromptMode::full, true, true},
          {"no-fusion", true, PromptMode::full, true, true},
          {"no-distillation", false, PromptMode::full, false, true},
          {"no-scene-prompting", false, PromptMode::task_only, true, true},
          {"no-alignment", false, PromptMode::full, true, false}};
}

// Dataset with every infrastructure view blacked out.
inline Dataset without_infra(const Dataset& ds) {
  Dataset out = ds;
  for (auto& s : out) s.infra = blank_like(s.infra);
  return out;
}

inline TrainConfig variant_config(const TrainConfig& base, const AblationVariant& v) {
  TrainConfig c = base;
  if (!v.distill) c.weights.lambda2 = 0.0;
  if (!v.align) c.weights.lambda1 = 0.0;
  return c;
}

// Trains the student for one ablation variant. The teacher is shared and
// always sees the same inputs as the student.
inline TrainResult train_variant(const Dataset& train, const Model& teacher, const TrainConfig& base,
                                 const AblationVariant& v, const ModelConfig& mc = ModelConfig::student()) {
  const Dataset& data = v.blank_infra ? without_infra(train) : train;
  return train_student(data, &teacher, variant_config(base, v), mc, v.prompt_mode);
}

inline StudyRow evaluate_variant(const Model& student, const Dataset& test, const AblationVariant& v,
                                 std::uint64_t seed = 0) {
  EvalOptions o;
  o.blank_infra = v.blank_infra;
  o.prompt_mode = v.prompt_mode;
  o.seed = seed;
  return make_row(v.name, 1.0, evaluate(student, test, o));
}

inline std::vector<StudyRow> ablation_suite(const Dataset& train, const Dataset& test, const Model& teacher,
                                            const TrainConfig& cfg, const ModelConfig& mc = ModelConfig::student()) {
  std::vector<StudyRow> rows;
  for (const auto& v : ablation_variants()) {
    const auto trained = train_variant(train, teacher, cfg, v, mc);
    rows.push_back(evaluate_variant(trained.model, test, v, cfg.seed));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Table output

inline std::string format_table(const std::vector<StudyRow>& rows) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %6s %10s %7s %7s %7s %7s %7s %7s %7s %7s %9s %7s\n", "row", "s", "BPS", "L2@2.5",
                "L2@3.5", "L2@4.5", "L2avg", "CR@2.5", "CR@3.5", "CR@4.5", "CRavg", "lat_ms", "FPS");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-20s %6.2f %10s %7.3f %7.3f %7.3f %7.3f %7.2f %7.2f %7.2f %7.2f %9.3f %7.2f\n",
                  r.name.c_str(), r.scale, r.bps == 0 ? "0" : sci3(static_cast<double>(r.bps)).c_str(), r.l2.at[0],
                  r.l2.at[1], r.l2.at[2], r.l2.avg, r.collision.at[0], r.collision.at[1], r.collision.at[2],
                  r.collision.avg, r.latency.total_ms, r.fps);
    out += buf;
  }
  return out;
}

inline std::string format_csv(const std::vector<StudyRow>& rows) {
  std::string out = "row,scale,bps,l2_2.5,l2_3.5,l2_4.5,l2_avg,cr_2.5,cr_3.5,cr_4.5,cr_avg,pre_ms,inf_ms,post_ms,residual_ms,total_ms,fps\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%g,%llu,%.6f,%.6f,%.6f,%.6f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n",
                  r.name.c_str(), r.scale, static_cast<unsigned long long>(r.bps), r.l2.at[0], r.l2.at[1], r.l2.at[2],
                  r.l2.avg, r.collision.at[0], r.collision.at[1], r.collision.at[2], r.collision.avg,
                  r.latency.preprocessing_ms, r.latency.inference_ms, r.latency.postprocessing_ms,
                  r.latency.residual_ms, r.latency.total_ms, r.fps);
    out += buf;
  }
  return out;
}

}  // namespace v2x
