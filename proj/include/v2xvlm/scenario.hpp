#pragma once

// Synthetic cooperative driving scenes.
//
// The ego approaches a four-way intersection from the south, heading north.
// A roadside camera sees the intersection top-down; the ego camera sees a
// forward perspective strip in which a parked truck may hide agents. When a
// hazard agent stands in the intersection the ego yields (slows down), so the
// infrastructure view carries information the ego camera sometimes lacks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "v2xvlm/model.hpp"
#include "v2xvlm/numerics.hpp"
#include "v2xvlm/types.hpp"

namespace v2x {

inline constexpr double kWaypointDt = 0.5;     // seconds between waypoints
inline constexpr std::size_t kHorizon = 9;     // waypoints per trajectory
inline constexpr std::size_t kViewHeight = 64;
inline constexpr std::size_t kViewWidth = 96;
inline constexpr double kWorldMin = -32.0;
inline constexpr double kWorldMax = 32.0;

enum class Maneuver { straight, left_turn, right_turn };
enum class AgentKind { car, pedestrian };

inline std::string maneuver_name(Maneuver m) {
  switch (m) {
    case Maneuver::straight: return "straight";
    case Maneuver::left_turn: return "left-turn";
    case Maneuver::right_turn: return "right-turn";
  }
  return "straight";
}

inline Maneuver parse_maneuver(const std::string& s) {
  if (s == "straight") return Maneuver::straight;
  if (s == "left-turn") return Maneuver::left_turn;
  if (s == "right-turn") return Maneuver::right_turn;
  fail(Errc::invalid_config, "unknown maneuver '" + s + "'");
}

struct Agent {
  AgentKind kind = AgentKind::car;
  Waypoint position;
  Waypoint velocity;
  double radius = 1.0;

  Waypoint at(double t) const { return {position.x + velocity.x * t, position.y + velocity.y * t}; }

  friend bool operator==(const Agent&, const Agent&) = default;
};

struct Ego {
  Waypoint position;
  double heading = std::numbers::pi / 2;  // radians, counter-clockwise from +x
  double speed = 0.0;

  friend bool operator==(const Ego&, const Ego&) = default;
};

struct Occluder {
  bool present = false;
  Waypoint position;
  double radius = 1.5;

  friend bool operator==(const Occluder&, const Occluder&) = default;
};

struct Scene {
  std::vector<Agent> agents;
  Ego ego;
  Maneuver maneuver = Maneuver::straight;
  std::uint64_t seed = 0;
  bool yielding = false;  // ego slows for a hazard in the intersection
  Occluder occluder;

  friend bool operator==(const Scene&, const Scene&) = default;
};

struct ScenePrompt {
  std::string brief;
  std::string detailed;
  std::string ego_position;
  std::string task;

  std::string full_text() const { return brief + " " + detailed + " " + task; }
  std::string task_only() const { return task; }

  friend bool operator==(const ScenePrompt&, const ScenePrompt&) = default;
};

struct PerturbSpec {
  double image_noise_std = 0.0;
  double text_flip_prob = 0.0;

  void validate() const {
    if (!(image_noise_std >= 0.0)) fail(Errc::invalid_config, "noise std must be >= 0");
    if (!(text_flip_prob >= 0.0 && text_flip_prob <= 1.0)) fail(Errc::invalid_config, "flip prob must be in [0,1]");
  }
};

struct SceneSample {
  Scene scene;
  Image vehicle;
  Image infra;
  ScenePrompt prompt;
  Trajectory truth;
};

// ---------------------------------------------------------------------------
// Text

inline std::string format_coord(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  std::string s(buf);
  if (s == "-0.0") s = "0.0";
  return s;
}

// Closed vocabulary of the prompt templates. Id 0 is the out-of-vocabulary
// token.
class Vocabulary {
 public:
  static const Vocabulary& instance() {
    static const Vocabulary v;
    return v;
  }

  std::size_t size() const { return words_.size(); }
  const std::string& word(std::size_t id) const { return words_.at(id); }
  static constexpr std::size_t oov() { return 0; }

  std::size_t id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? oov() : it->second;
  }

  // Lowercase, strip "(),", split on whitespace.
  static std::vector<std::string> split(const std::string& text) {
    std::string t;
    t.reserve(text.size());
    for (char c : text) {
      if (c == '(' || c == ')' || c == ',') t.push_back(' ');
      else t.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    std::istringstream is(t);
    std::vector<std::string> out;
    for (std::string w; is >> w;) out.push_back(w);
    return out;
  }

  PromptTokens tokenize(const std::string& text) const {
    PromptTokens p;
    for (const auto& w : split(text)) p.ids.push_back(id(w));
    return p;
  }

 private:
  Vocabulary() {
    words_ = {"<oov>", ".",     "urban",   "intersection", "ego",     "at",      "heading",    "north",
              "speed", "m/s",   "there",   "are",          "is",      "no",      "visible",    "agents",
              "agent", "car",   "pedestrian", "ahead",     "left",    "right",   "center",     "near",
              "mid",   "far",   "truck",   "blocks",       "view",    "plan",    "the",        "future",
              "trajectory", "to", "go",    "straight",     "through", "turn"};
    for (int i = 1; i <= 9; ++i) words_.push_back(std::to_string(i));
    for (int i = 0; i < 128; ++i) words_.push_back(format_coord(kWorldMin + 0.5 * i));
    for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = i;
  }

  std::vector<std::string> words_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Geometry shared by the renderers and the prompt builder

struct ForwardObservation {
  double forward = 0.0;  // metres along the ego heading
  double lateral = 0.0;  // metres to the right
};

inline ForwardObservation observe(const Ego& ego, Waypoint p) {
  const double dx = p.x - ego.position.x;
  const double dy = p.y - ego.position.y;
  const double ch = std::cos(ego.heading);
  const double sh = std::sin(ego.heading);
  return {dx * ch + dy * sh, dx * sh - dy * ch};
}

inline bool in_camera_fov(const ForwardObservation& o) {
  return o.forward > 1.0 && o.forward < 40.0 && std::abs(o.lateral) < o.forward;
}

inline bool visible_from_vehicle(const Scene& s, const Agent& a) {
  const auto o = observe(s.ego, a.position);
  if (!in_camera_fov(o)) return false;
  if (s.occluder.present) {
    const auto oc = observe(s.ego, s.occluder.position);
    if (in_camera_fov(oc) && oc.forward < o.forward) {
      const double half = std::atan2(s.occluder.radius, oc.forward);
      if (std::abs(std::atan2(o.lateral, o.forward) - std::atan2(oc.lateral, oc.forward)) < half) return false;
    }
  }
  return true;
}

inline bool in_infra_bounds(Waypoint p) { return p.x >= -24.0 && p.x < 24.0 && p.y >= -16.0 && p.y < 16.0; }

// Agents inside the roadside camera's footprint that the ego camera misses.
inline std::size_t hidden_agent_count(const Scene& s) {
  std::size_t n = 0;
  for (const auto& a : s.agents)
    if (in_infra_bounds(a.position) && !visible_from_vehicle(s, a)) ++n;
  return n;
}

// ---------------------------------------------------------------------------
// Ground truth

inline double yaw_rate(Maneuver m) {
  const double w = (std::numbers::pi / 2) / (kWaypointDt * static_cast<double>(kHorizon));
  switch (m) {
    case Maneuver::straight: return 0.0;
    case Maneuver::left_turn: return w;
    case Maneuver::right_turn: return -w;
  }
  return 0.0;
}

// Speed at time t: constant, or a linear slowdown to 40% over 3 s when yielding.
inline double speed_at(const Scene& s, double t) {
  if (!s.yielding) return s.ego.speed;
  return s.ego.speed * (1.0 - 0.6 * std::min(t, 3.0) / 3.0);
}

// Heading turns at a constant rate so the turn completes a quarter circle at
// the end of the horizon; position integrates speed along the heading.
inline Trajectory ground_truth(const Scene& s) {
  constexpr int kSub = 100;
  const double w = yaw_rate(s.maneuver);
  const double h = kWaypointDt / kSub;
  Trajectory out;
  double x = s.ego.position.x;
  double y = s.ego.position.y;
  double t = 0.0;
  for (std::size_t k = 0; k < kHorizon; ++k) {
    for (int i = 0; i < kSub; ++i) {
      const double tm = t + 0.5 * h;
      const double th = s.ego.heading + w * tm;
      const double v = speed_at(s, tm);
      x += v * std::cos(th) * h;
      y += v * std::sin(th) * h;
      t += h;
    }
    out.push_back({x, y});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rendering

struct Rgb {
  std::uint8_t r, g, b;
};

inline Rgb agent_color(AgentKind k) { return k == AgentKind::car ? Rgb{200, 40, 40} : Rgb{240, 200, 40}; }
inline constexpr Rgb kOccluderColor{40, 40, 140};

inline void fill_rect(Image& img, long r0, long r1, long c0, long c1, Rgb col) {
  r0 = std::max(r0, 0L);
  c0 = std::max(c0, 0L);
  r1 = std::min(r1, static_cast<long>(img.height));
  c1 = std::min(c1, static_cast<long>(img.width));
  for (long r = r0; r < r1; ++r)
    for (long c = c0; c < c1; ++c) {
      img.at(r, c, 0) = col.r;
      img.at(r, c, 1) = col.g;
      img.at(r, c, 2) = col.b;
    }
}

// Forward perspective strip: horizon at row 24, +-45 degree field of view.
// Far objects first so nearer ones paint over them.
inline Image render_vehicle_view(const Scene& s) {
  Image img(kViewHeight, kViewWidth, 3);
  fill_rect(img, 0, 24, 0, kViewWidth, {150, 190, 230});
  fill_rect(img, 24, kViewHeight, 0, kViewWidth, {80, 80, 80});

  struct Item {
    ForwardObservation o;
    double radius, height;
    Rgb color;
  };
  std::vector<Item> items;
  for (const auto& a : s.agents) {
    const auto o = observe(s.ego, a.position);
    if (in_camera_fov(o)) items.push_back({o, a.radius, a.kind == AgentKind::car ? 1.5 : 1.8, agent_color(a.kind)});
  }
  if (s.occluder.present) {
    const auto o = observe(s.ego, s.occluder.position);
    if (in_camera_fov(o)) items.push_back({o, s.occluder.radius, 3.5, kOccluderColor});
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.o.forward > b.o.forward; });
  for (const auto& it : items) {
    const double f = it.o.forward;
    const double u = 48.0 + 48.0 * it.o.lateral / f;
    const double bottom = std::min(64.0, 24.0 + 80.0 / f);
    const double hp = std::max(2.0, 60.0 * it.height / f);
    const double wp = std::max(2.0, 48.0 * 2.0 * it.radius / f);
    fill_rect(img, std::lround(bottom - hp), std::lround(bottom), std::lround(u - wp / 2), std::lround(u + wp / 2),
              it.color);
  }
  return img;
}

// Top-down roadside view, 0.5 m per pixel over x in [-24, 24), y in [-16, 16).
inline Image render_infra_view(const Scene& s) {
  constexpr double res = 0.5;
  Image img(kViewHeight, kViewWidth, 3);
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t c = 0; c < img.width; ++c) {
      const double x = -24.0 + (static_cast<double>(c) + 0.5) * res;
      const double y = 16.0 - (static_cast<double>(r) + 0.5) * res;
      const bool road = std::abs(x) < 4.0 || std::abs(y) < 4.0;
      const Rgb col = road ? Rgb{110, 110, 110} : Rgb{50, 110, 50};
      img.at(r, c, 0) = col.r;
      img.at(r, c, 1) = col.g;
      img.at(r, c, 2) = col.b;
    }
  auto to_col = [](double x) { return (x + 24.0) / res; };
  auto to_row = [](double y) { return (16.0 - y) / res; };
  auto disc = [&](Waypoint p, double radius, Rgb col) {
    for (std::size_t r = 0; r < img.height; ++r)
      for (std::size_t c = 0; c < img.width; ++c) {
        const double x = -24.0 + (static_cast<double>(c) + 0.5) * res;
        const double y = 16.0 - (static_cast<double>(r) + 0.5) * res;
        if (std::hypot(x - p.x, y - p.y) <= radius) {
          img.at(r, c, 0) = col.r;
          img.at(r, c, 1) = col.g;
          img.at(r, c, 2) = col.b;
        }
      }
  };
  if (s.occluder.present) {
    const auto& o = s.occluder;
    fill_rect(img, std::lround(to_row(o.position.y + o.radius)), std::lround(to_row(o.position.y - o.radius)),
              std::lround(to_col(o.position.x - o.radius)), std::lround(to_col(o.position.x + o.radius)),
              kOccluderColor);
  }
  for (const auto& a : s.agents) disc(a.position, std::max(a.radius, 0.5), agent_color(a.kind));
  const auto& e = s.ego.position;
  fill_rect(img, std::lround(to_row(e.y + 2.0)), std::lround(to_row(e.y - 2.0)), std::lround(to_col(e.x - 1.0)),
            std::lround(to_col(e.x + 1.0)), {250, 250, 250});
  return img;
}

// ---------------------------------------------------------------------------
// Prompts

inline std::string task_sentence(Maneuver m) {
  switch (m) {
    case Maneuver::straight: return "plan the future trajectory to go straight through the intersection .";
    case Maneuver::left_turn: return "plan the future trajectory to turn left at the intersection .";
    case Maneuver::right_turn: return "plan the future trajectory to turn right at the intersection .";
  }
  return {};
}

// Describes what the ego camera sees; agents hidden from it are not mentioned.
inline ScenePrompt build_prompt(const Scene& s) {
  ScenePrompt p;
  p.ego_position = "(" + format_coord(s.ego.position.x) + ", " + format_coord(s.ego.position.y) + ")";
  p.brief = "urban intersection . ego at " + p.ego_position + " heading north speed " + format_coord(s.ego.speed) +
            " m/s .";

  std::vector<std::pair<double, std::string>> seen;
  for (const auto& a : s.agents) {
    if (!visible_from_vehicle(s, a)) continue;
    const auto o = observe(s.ego, a.position);
    const double bearing = o.lateral / o.forward;
    const std::string side = bearing < -0.18 ? "left" : bearing > 0.18 ? "right" : "center";
    const std::string dist = o.forward < 10.0 ? "near" : o.forward < 20.0 ? "mid" : "far";
    seen.emplace_back(o.forward, (a.kind == AgentKind::car ? "car" : "pedestrian") + std::string(" ahead ") + side +
                                     " " + dist + " .");
  }
  std::stable_sort(seen.begin(), seen.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  if (seen.empty()) p.detailed = "there are no visible agents .";
  else if (seen.size() == 1) p.detailed = "there is 1 visible agent .";
  else p.detailed = "there are " + std::to_string(std::min<std::size_t>(seen.size(), 9)) + " visible agents .";
  for (const auto& [f, text] : seen) p.detailed += " " + text;
  if (s.occluder.present && in_camera_fov(observe(s.ego, s.occluder.position))) p.detailed += " truck blocks view .";
  p.task = task_sentence(s.maneuver);
  return p;
}

// ---------------------------------------------------------------------------
// Generation

inline Scene sample_scene(Maneuver maneuver, std::uint64_t seed) {
  Rng rng = Rng(seed).derive(0x7363656e65ULL);
  Scene s;
  s.seed = seed;
  s.maneuver = maneuver;
  s.ego.position = {2.0, -8.0 + 0.5 * static_cast<double>(rng.below(9))};
  s.ego.heading = std::numbers::pi / 2;
  s.ego.speed = 2.0 + 0.5 * static_cast<double>(rng.below(9));

  s.yielding = rng.bernoulli(0.5);
  if (s.yielding) {
    Agent hz;
    hz.kind = rng.bernoulli(0.5) ? AgentKind::pedestrian : AgentKind::car;
    hz.radius = hz.kind == AgentKind::car ? 1.0 : 0.5;
    hz.position = {rng.uniform(-3.0, 3.0), rng.uniform(1.0, 5.0)};
    if (hz.kind == AgentKind::pedestrian) hz.velocity = {rng.bernoulli(0.5) ? 0.5 : -0.5, 0.0};
    s.agents.push_back(hz);
    if (rng.bernoulli(0.7)) {
      s.occluder.present = true;
      s.occluder.position = {s.ego.position.x + 0.4 * (hz.position.x - s.ego.position.x),
                             s.ego.position.y + 0.4 * (hz.position.y - s.ego.position.y)};
    }
  } else if (rng.bernoulli(0.3)) {
    s.occluder.present = true;
    s.occluder.position = {s.ego.position.x + rng.uniform(-2.0, 2.0), s.ego.position.y + rng.uniform(3.0, 6.0)};
  }

  const auto extra = rng.below(4);
  for (std::uint64_t i = 0; i < extra; ++i) {
    Agent a;
    a.kind = rng.bernoulli(0.5) ? AgentKind::car : AgentKind::pedestrian;
    a.radius = a.kind == AgentKind::car ? 1.0 : 0.5;
    do {
      a.position = {rng.uniform(-22.0, 22.0), rng.uniform(-14.0, 14.0)};
    } while (std::hypot(a.position.x - s.ego.position.x, a.position.y - s.ego.position.y) < 4.0 ||
             (std::abs(a.position.x) < 6.0 && std::abs(a.position.y) < 6.0));
    s.agents.push_back(a);
  }
  return s;
}

inline SceneSample render_sample(const Scene& s) {
  return {s, render_vehicle_view(s), render_infra_view(s), build_prompt(s), ground_truth(s)};
}

inline SceneSample generate_scene(Maneuver maneuver, std::uint64_t seed) {
  return render_sample(sample_scene(maneuver, seed));
}

using Dataset = std::vector<SceneSample>;

// Scene i uses seed mix(seed, first_index + i); maneuvers cycle through the
// three classes.
inline Dataset generate_dataset(std::size_t n, std::uint64_t seed, std::uint64_t first_index = 0) {
  Dataset ds;
  ds.reserve(n);
  const Rng base(seed);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t idx = first_index + i;
    const auto m = static_cast<Maneuver>(idx % 3);
    ds.push_back(generate_scene(m, base.derive(idx).next_u64()));
  }
  return ds;
}

inline constexpr std::uint64_t kHeldOutOffset = 1'000'000;

// ---------------------------------------------------------------------------
// Perturbations

inline Image perturb_image(const Image& img, double stddev, std::uint64_t seed) {
  if (!(stddev >= 0.0)) fail(Errc::invalid_config, "noise std must be >= 0");
  if (stddev == 0.0) return img;
  Rng rng = Rng(seed).derive(0x6e6f697365ULL);
  Image out = img;
  for (auto& px : out.data) {
    const double v = std::round(static_cast<double>(px) + rng.normal(0.0, stddev));
    px = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return out;
}

struct TextPerturbResult {
  ScenePrompt prompt;
  std::size_t eligible = 0;
  std::size_t replaced = 0;
};

// Each word outside the ego-position span is swapped, with probability p, for
// a different vocabulary word.
inline TextPerturbResult perturb_text_counted(const ScenePrompt& prompt, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) fail(Errc::invalid_config, "flip probability must be in [0,1]");
  TextPerturbResult res;
  res.prompt = prompt;
  if (p == 0.0) return res;
  const auto& vocab = Vocabulary::instance();
  Rng rng = Rng(seed).derive(0x74657874ULL);

  auto perturb = [&](const std::string& text, bool has_position) {
    std::vector<std::string> words;
    std::istringstream is(text);
    for (std::string w; is >> w;) words.push_back(w);
    std::size_t skip_from = words.size(), skip_to = words.size();
    if (has_position) {
      const auto pos_words = [&] {
        std::vector<std::string> v;
        std::istringstream ps(prompt.ego_position);
        for (std::string w; ps >> w;) v.push_back(w);
        return v;
      }();
      for (std::size_t i = 0; i + pos_words.size() <= words.size(); ++i)
        if (std::equal(pos_words.begin(), pos_words.end(), words.begin() + static_cast<std::ptrdiff_t>(i))) {
          skip_from = i;
          skip_to = i + pos_words.size();
          break;
        }
    }
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
      std::string w = words[i];
      if (i < skip_from || i >= skip_to) {
        ++res.eligible;
        if (rng.bernoulli(p)) {
          const auto parts = Vocabulary::split(w);
          const std::size_t orig = parts.empty() ? Vocabulary::oov() : vocab.id(parts[0]);
          std::size_t pick;
          do {
            pick = 1 + rng.below(vocab.size() - 1);
          } while (pick == orig);
          w = vocab.word(pick);
          ++res.replaced;
        }
      }
      if (!out.empty()) out.push_back(' ');
      out += w;
    }
    return out;
  };
  res.prompt.brief = perturb(prompt.brief, true);
  res.prompt.detailed = perturb(prompt.detailed, false);
  res.prompt.task = perturb(prompt.task, false);
  return res;
}

inline ScenePrompt perturb_text(const ScenePrompt& prompt, double p, std::uint64_t seed) {
  return perturb_text_counted(prompt, p, seed).prompt;
}

// ---------------------------------------------------------------------------
// Dataset directory
//
//   <dir>/manifest.txt        "v2x-dataset 1" / "count N" / one record name per line
//   <dir>/<record>/vehicle.raw, infra.raw
//        "V2XI" | u32 height | u32 width | u32 channels | height*width*channels bytes (LE)
//   <dir>/<record>/prompt.txt  brief / detailed / ego_position / task, one per line
//   <dir>/<record>/trajectory.txt  one "x y" pair per line, %.17g
//   <dir>/<record>/scene.txt   scene description, see write_scene

namespace io_detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) fail(Errc::io_error, "truncated raster header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace io_detail

inline void write_raster(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::io_error, "cannot write " + path.string());
  os.write("V2XI", 4);
  io_detail::write_u32(os, static_cast<std::uint32_t>(img.height));
  io_detail::write_u32(os, static_cast<std::uint32_t>(img.width));
  io_detail::write_u32(os, static_cast<std::uint32_t>(img.channels));
  os.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
}

inline Image read_raster(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Errc::io_error, "cannot read " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "V2XI") fail(Errc::bad_magic, path.string());
  const auto h = io_detail::read_u32(is);
  const auto w = io_detail::read_u32(is);
  const auto c = io_detail::read_u32(is);
  Image img(h, w, c);
  if (!is.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size())))
    fail(Errc::io_error, "truncated raster " + path.string());
  return img;
}

inline std::string write_scene(const Scene& s) {
  using io_detail::fmt17;
  std::ostringstream os;
  os << "seed " << s.seed << "\n";
  os << "maneuver " << maneuver_name(s.maneuver) << "\n";
  os << "ego " << fmt17(s.ego.position.x) << " " << fmt17(s.ego.position.y) << " " << fmt17(s.ego.heading) << " "
     << fmt17(s.ego.speed) << "\n";
  os << "yielding " << (s.yielding ? 1 : 0) << "\n";
  os << "occluder " << (s.occluder.present ? 1 : 0) << " " << fmt17(s.occluder.position.x) << " "
     << fmt17(s.occluder.position.y) << " " << fmt17(s.occluder.radius) << "\n";
  os << "agents " << s.agents.size() << "\n";
  for (const auto& a : s.agents)
    os << "agent " << (a.kind == AgentKind::car ? "car" : "pedestrian") << " " << fmt17(a.position.x) << " "
       << fmt17(a.position.y) << " " << fmt17(a.velocity.x) << " " << fmt17(a.velocity.y) << " " << fmt17(a.radius)
       << "\n";
  return os.str();
}

inline Scene read_scene(const std::string& text) {
  std::istringstream is(text);
  Scene s;
  std::string key;
  std::size_t n_agents = 0;
  auto need = [&](bool ok) {
    if (!ok) fail(Errc::io_error, "malformed scene record");
  };
  while (is >> key) {
    if (key == "seed") need(static_cast<bool>(is >> s.seed));
    else if (key == "maneuver") {
      std::string m;
      need(static_cast<bool>(is >> m));
      s.maneuver = parse_maneuver(m);
    } else if (key == "ego")
      need(static_cast<bool>(is >> s.ego.position.x >> s.ego.position.y >> s.ego.heading >> s.ego.speed));
    else if (key == "yielding") {
      int y = 0;
      need(static_cast<bool>(is >> y));
      s.yielding = y != 0;
    } else if (key == "occluder") {
      int p = 0;
      need(static_cast<bool>(is >> p >> s.occluder.position.x >> s.occluder.position.y >> s.occluder.radius));
      s.occluder.present = p != 0;
    } else if (key == "agents") need(static_cast<bool>(is >> n_agents));
    else if (key == "agent") {
      Agent a;
      std::string kind;
      need(static_cast<bool>(is >> kind >> a.position.x >> a.position.y >> a.velocity.x >> a.velocity.y >> a.radius));
      a.kind = kind == "car" ? AgentKind::car : AgentKind::pedestrian;
      s.agents.push_back(a);
    } else
      fail(Errc::io_error, "unknown scene key '" + key + "'");
  }
  need(s.agents.size() == n_agents);
  return s;
}

inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) fail(Errc::io_error, "cannot write manifest in " + dir.string());
  manifest << "v2x-dataset 1\ncount " << ds.size() << "\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05zu", i);
    manifest << name << "\n";
    const fs::path rec = dir / name;
    fs::create_directories(rec);
    const auto& s = ds[i];
    write_raster(rec / "vehicle.raw", s.vehicle);
    write_raster(rec / "infra.raw", s.infra);
    std::ofstream(rec / "prompt.txt") << s.prompt.brief << "\n"
                                      << s.prompt.detailed << "\n"
                                      << s.prompt.ego_position << "\n"
                                      << s.prompt.task << "\n";
    std::ofstream traj(rec / "trajectory.txt");
    for (const auto& w : s.truth) traj << io_detail::fmt17(w.x) << " " << io_detail::fmt17(w.y) << "\n";
    std::ofstream(rec / "scene.txt") << write_scene(s.scene);
  }
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) fail(Errc::io_error, "no manifest in " + dir.string());
  std::string header, version, count_key;
  std::size_t count = 0;
  manifest >> header >> version >> count_key >> count;
  if (header != "v2x-dataset" || version != "1" || count_key != "count") fail(Errc::io_error, "bad manifest header");
  Dataset ds;
  for (std::size_t i = 0; i < count; ++i) {
    std::string name;
    if (!(manifest >> name)) fail(Errc::io_error, "manifest lists fewer records than declared");
    const fs::path rec = dir / name;
    SceneSample s;
    s.vehicle = read_raster(rec / "vehicle.raw");
    s.infra = read_raster(rec / "infra.raw");
    std::ifstream pf(rec / "prompt.txt");
    if (!pf) fail(Errc::io_error, "missing prompt in " + rec.string());
    std::getline(pf, s.prompt.brief);
    std::getline(pf, s.prompt.detailed);
    std::getline(pf, s.prompt.ego_position);
    std::getline(pf, s.prompt.task);
    std::ifstream tf(rec / "trajectory.txt");
    for (double x, y; tf >> x >> y;) s.truth.push_back({x, y});
    std::ifstream sf(rec / "scene.txt");
    std::stringstream buf;
    buf << sf.rdbuf();
    s.scene = read_scene(buf.str());
    ds.push_back(std::move(s));
  }
  return ds;
}

}  // namespace v2x
