#pragma once

// From model inputs to a refined trajectory: the shared tail of cooperative
// inference and offline evaluation.

#include <cmath>
#include <string>

#include "v2xvlm/model.hpp"
#include "v2xvlm/scenario.hpp"

namespace v2x {

inline constexpr double kMaxSpeed = 20.0;  // m/s

inline double max_step_speed(const Trajectory& t, double dt = kWaypointDt) {
  double m = 0.0;
  for (std::size_t i = 1; i < t.size(); ++i) m = std::max(m, std::hypot(t[i].x - t[i - 1].x, t[i].y - t[i - 1].y) / dt);
  return m;
}

// Post-hoc cleanup of a decoded trajectory:
//  1. an interior waypoint reached and left faster than v_max is replaced by
//     the midpoint of its neighbours (repeated until none remain);
//  2. interior points get a 3-point moving average, endpoints untouched;
//  3. any step still faster than v_max is shortened along its direction,
//     walking forward from the first waypoint.
// Each stage is a convex recombination or a shortening of steps, so the
// maximum step speed never increases.
inline Trajectory refine_trajectory(const Trajectory& raw, double v_max = kMaxSpeed, double dt = kWaypointDt) {
  if (raw.size() < 3) fail(Errc::too_short, "refinement needs at least three waypoints");
  const double max_step = v_max * dt;
  auto step = [](Waypoint a, Waypoint b) { return std::hypot(b.x - a.x, b.y - a.y); };

  Trajectory t = raw;
  for (std::size_t pass = 0; pass < t.size(); ++pass) {
    bool changed = false;
    for (std::size_t i = 1; i + 1 < t.size(); ++i) {
      if (step(t[i - 1], t[i]) > max_step && step(t[i], t[i + 1]) > max_step) {
        t[i] = {0.5 * (t[i - 1].x + t[i + 1].x), 0.5 * (t[i - 1].y + t[i + 1].y)};
        changed = true;
      }
    }
    if (!changed) break;
  }

  Trajectory s = t;
  for (std::size_t i = 1; i + 1 < t.size(); ++i)
    s[i] = {(t[i - 1].x + t[i].x + t[i + 1].x) / 3.0, (t[i - 1].y + t[i].y + t[i + 1].y) / 3.0};

  for (std::size_t i = 1; i < s.size(); ++i) {
    const double len = step(s[i - 1], s[i]);
    if (len > max_step) {
      const double k = max_step / len;
      s[i] = {s[i - 1].x + (s[i].x - s[i - 1].x) * k, s[i - 1].y + (s[i].y - s[i - 1].y) * k};
    }
  }
  return s;
}

enum class PromptMode { full, task_only };

inline PromptTokens prompt_tokens(const ScenePrompt& p, PromptMode mode = PromptMode::full) {
  return Vocabulary::instance().tokenize(mode == PromptMode::full ? p.full_text() : p.task_only());
}

struct Plan {
  TrajectoryTokens tokens;
  Trajectory raw;
  Trajectory refined;
};

inline Plan plan_from_logits(const Matrix& logits, const ModelConfig& cfg) {
  Plan p;
  p.tokens = greedy_decode(logits, cfg);
  p.raw = detokenize_trajectory(p.tokens, cfg);
  p.refined = refine_trajectory(p.raw);
  return p;
}

inline Plan plan(const Model& model, const Image& vehicle, const Image& infra, const PromptTokens& prompt) {
  return plan_from_logits(model.forward(vehicle, infra, prompt).logits, model.config());
}

// Infrastructure view replaced by a black raster of the same size.
inline Image blank_like(const Image& img) { return Image(img.height, img.width, img.channels, 0); }

}  // namespace v2x
