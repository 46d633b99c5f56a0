#pragma once

// Teacher pretraining and student distillation.

#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "v2xvlm/losses.hpp"
#include "v2xvlm/model.hpp"
#include "v2xvlm/nn.hpp"
#include "v2xvlm/planner.hpp"
#include "v2xvlm/scenario.hpp"

#include <json.hpp>

namespace v2x {

struct TrainConfig {
  static constexpr double kReferenceLr = 1e-6;

  std::size_t epochs = 10;
  std::size_t batch = 4;
  double lr = 3e-4;
  LossWeights weights;
  DistillConfig distill;
  AlignConfig align;
  std::uint64_t seed = 0;
  bool freeze_vision = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;

  void validate() const {
    if (epochs < 1) fail(Errc::invalid_config, "epochs must be >= 1");
    if (batch < 2) fail(Errc::invalid_config, "batch must be >= 2 (alignment needs negatives)");
    if (!(lr >= 0.0) || !std::isfinite(lr)) fail(Errc::invalid_config, "learning rate must be finite and >= 0");
    if (!std::isfinite(weights.lambda1) || !std::isfinite(weights.lambda2) || weights.lambda1 < 0.0 ||
        weights.lambda2 < 0.0)
      fail(Errc::invalid_config, "loss weights must be finite and >= 0");
    distill.validate();
    align.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double traj = 0.0;
  double align = 0.0;
  double kd = 0.0;
  double total = 0.0;
  double wall_ms = 0.0;
  double update_norm = 0.0;  // ||theta_end - theta_start|| over the epoch
};

struct TrainReport {
  std::vector<EpochRecord> epochs;

  // One JSON object per line.
  std::string to_jsonl() const {
    std::string out;
    for (const auto& e : epochs) {
      nlohmann::json j = {{"epoch", e.epoch},       {"L_traj", e.traj},   {"L_align", e.align},
                          {"L_KD", e.kd},           {"L_total", e.total}, {"wall_ms", e.wall_ms},
                          {"update_norm", e.update_norm}};
      out += j.dump() + "\n";
    }
    return out;
  }
};

struct TrainResult {
  Model model;
  TrainReport report;
};

inline double lr_at(std::size_t step, std::size_t total_steps, double base_lr) {
  if (step > total_steps) fail(Errc::step_out_of_range, "step beyond schedule");
  if (total_steps == 0) return base_lr;
  return base_lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

// Adam with decoupled weight decay over the trainable blocks.
class AdamW {
 public:
  AdamW(const nn::ParamStore& ps, const TrainConfig& cfg) : cfg_(cfg), m_(ps), v_(ps) {}

  void step(nn::ParamStore& ps, const nn::Grads& g, const std::vector<bool>& trainable, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t b = 0; b < ps.count(); ++b) {
      if (!trainable[b]) continue;
      auto& w = ps[b].value;
      auto& m = m_[b];
      auto& v = v_[b];
      const auto& gb = g[b];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gb[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gb[i] * gb[i];
        const double mh = m[i] / bc1;
        const double vh = v[i] / bc2;
        w[i] -= lr * (mh / (std::sqrt(vh) + cfg_.adam_eps) + cfg_.weight_decay * w[i]);
      }
    }
  }

 private:
  TrainConfig cfg_;
  nn::Grads m_, v_;
  std::size_t t_ = 0;
};

// Scales gradients so their global norm over trainable blocks is <= max_norm.
inline double clip_grad_norm(nn::Grads& g, const std::vector<bool>& trainable, double max_norm) {
  double sq = 0.0;
  for (std::size_t b = 0; b < g.count(); ++b)
    if (trainable[b])
      for (double v : g[b]) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double k = max_norm / norm;
    for (std::size_t b = 0; b < g.count(); ++b)
      if (trainable[b])
        for (double& v : g[b]) v *= k;
  }
  return norm;
}

// A scene prepared for the model: patch grid, prompt ids and coordinate targets.
struct Example {
  PatchGrid grid;
  PromptTokens prompt;
  std::vector<std::size_t> targets;
};

inline Example make_example(const SceneSample& s, const ModelConfig& cfg, PromptMode mode = PromptMode::full) {
  Example e;
  e.grid = extract_patches(concat_views(s.vehicle, s.infra), cfg);
  e.prompt = prompt_tokens(s.prompt, mode);
  e.targets = coordinate_targets(tokenize_trajectory(s.truth, cfg));
  return e;
}

inline std::vector<Example> make_examples(const Dataset& ds, const ModelConfig& cfg,
                                          PromptMode mode = PromptMode::full) {
  std::vector<Example> out;
  out.reserve(ds.size());
  for (const auto& s : ds) out.push_back(make_example(s, cfg, mode));
  return out;
}

// Deterministic permutation keyed on (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = Rng(seed).derive(0x65706f6368ULL + epoch);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

inline std::vector<Matrix> teacher_logits(const Model& teacher, const std::vector<Example>& examples) {
  std::vector<Matrix> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(teacher.forward_grid(e.grid, e.prompt).logits);
  return out;
}

struct BatchLosses {
  double traj = 0.0, align = 0.0, kd = 0.0, total = 0.0;
};

// Loss and gradient of one mini-batch. `teacher` holds precomputed logits per
// example (empty when distillation is off). `vision_cache`, when given,
// supplies frozen vision-encoder outputs per example.
inline BatchLosses batch_loss_and_grad(const Model& model, const std::vector<Example>& examples,
                                       std::span<const std::size_t> batch, const std::vector<Matrix>* teacher,
                                       const TrainConfig& cfg, const std::vector<Matrix>* vision_cache,
                                       nn::Grads& grads) {
  const std::size_t K = batch.size();
  const ModelConfig& mc = model.config();
  std::vector<Model::Trace> traces(K);
  std::vector<ForwardOutput> outs(K);
  for (std::size_t i = 0; i < K; ++i) {
    const Example& ex = examples[batch[i]];
    auto& tr = traces[i];
    Matrix vis;
    if (vision_cache) {
      vis = (*vision_cache)[batch[i]];
      tr.vision.tokens = vis;
    } else {
      vis = model.vision_tokens(ex.grid, &tr.vision);
    }
    Matrix txt = model.text_tokens(ex.prompt, &tr.text);
    outs[i] = model.head(vis, txt, &tr.head);
  }

  BatchLosses L;
  const double invK = 1.0 / static_cast<double>(K);
  std::vector<Matrix> dlogits(K);
  for (std::size_t i = 0; i < K; ++i) {
    const auto& targets = examples[batch[i]].targets;
    L.traj += traj_loss(outs[i].logits, targets) * invK;
    dlogits[i] = traj_grad(outs[i].logits, targets);
    for (double& v : dlogits[i].data()) v *= invK;
    if (teacher && !teacher->empty()) {
      const Matrix& tl = (*teacher)[batch[i]];
      if (tl.cols() != outs[i].logits.cols())
        fail(Errc::shape_mismatch, "teacher and student coordinate vocabularies differ");
      L.kd += kd_loss(outs[i].logits, tl, cfg.distill) * invK;
      if (cfg.weights.lambda2 != 0.0) {
        const Matrix g = kd_grad(outs[i].logits, tl, cfg.distill);
        const double k = cfg.weights.lambda2 * invK;
        for (std::size_t j = 0; j < g.size(); ++j) dlogits[i].data()[j] += k * g.data()[j];
      }
    }
  }

  Matrix dZ, dH;
  if (K >= 2) {
    Matrix Z(K, mc.d_prime), H(K, mc.d_prime);
    for (std::size_t i = 0; i < K; ++i) {
      std::copy(outs[i].z.begin(), outs[i].z.end(), Z.row(i).begin());
      std::copy(outs[i].h.begin(), outs[i].h.end(), H.row(i).begin());
    }
    auto ag = alignment_backward(Z, H, cfg.align.kappa);
    L.align = ag.loss;
    if (cfg.weights.lambda1 != 0.0) {
      dZ = std::move(ag.dZ);
      dH = std::move(ag.dH);
      for (double& v : dZ.data()) v *= cfg.weights.lambda1;
      for (double& v : dH.data()) v *= cfg.weights.lambda1;
    }
  }
  if (!std::isfinite(L.traj) || !std::isfinite(L.align) || !std::isfinite(L.kd))
    fail(Errc::divergence_detected, "non-finite loss term");
  L.total = total_loss(L.traj, L.align, L.kd, cfg.weights);

  const bool through_vision = vision_cache == nullptr && !cfg.freeze_vision;
  for (std::size_t i = 0; i < K; ++i) {
    std::span<const double> dz, dh;
    if (!dZ.empty()) {
      dz = dZ.row(i);
      dh = dH.row(i);
    }
    auto hg = model.head_backward(traces[i].head, traces[i].vision.tokens.rows(), dlogits[i], dz, dh, grads);
    model.text_backward(traces[i].text, hg.dtxt, grads);
    if (through_vision) model.vision_backward(traces[i].vision, hg.dvis, grads);
  }
  return L;
}

inline std::vector<bool> trainable_mask(const Model& model, bool freeze_vision) {
  std::vector<bool> mask;
  for (const auto& b : model.params().blocks())
    mask.push_back(!(freeze_vision && Model::is_vision_encoder_param(b.name)));
  return mask;
}

// Shared loop. `teacher` may be null (no distillation term).
inline TrainReport fit(Model& model, const std::vector<Example>& examples, const Model* teacher,
                       const TrainConfig& cfg) {
  cfg.validate();
  if (examples.empty()) fail(Errc::empty_dataset, "training set is empty");
  const auto trainable = trainable_mask(model, cfg.freeze_vision);

  std::vector<Matrix> tlogits;
  if (teacher) {
    if (teacher->config().vocab_coord() != model.config().vocab_coord() ||
        teacher->config().slots() != model.config().slots())
      fail(Errc::shape_mismatch, "teacher and student output shapes differ");
    tlogits = teacher_logits(*teacher, examples);
  }
  std::vector<Matrix> vision_cache;
  if (cfg.freeze_vision) {
    vision_cache.reserve(examples.size());
    for (const auto& e : examples) vision_cache.push_back(model.vision_tokens(e.grid));
  }

  const std::size_t steps_per_epoch = (examples.size() + cfg.batch - 1) / cfg.batch;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  AdamW opt(model.params(), cfg);
  nn::Grads grads(model.params());
  TrainReport report;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const nn::ParamStore before = model.params();
    const auto order = epoch_order(examples.size(), cfg.seed, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      std::span<const std::size_t> batch(order.data() + start, end - start);
      grads.zero();
      const auto L = batch_loss_and_grad(model, examples, batch, teacher ? &tlogits : nullptr, cfg,
                                         cfg.freeze_vision ? &vision_cache : nullptr, grads);
      clip_grad_norm(grads, trainable, cfg.clip_norm);
      opt.step(model.params(), grads, trainable, lr_at(step, total_steps, cfg.lr));
      ++step;
      rec.traj += L.traj;
      rec.align += L.align;
      rec.kd += L.kd;
      rec.total += L.total;
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    rec.traj /= nb;
    rec.align /= nb;
    rec.kd /= nb;
    rec.total /= nb;
    double sq = 0.0;
    for (std::size_t b = 0; b < before.count(); ++b)
      for (std::size_t i = 0; i < before[b].size(); ++i) {
        const double dv = model.params()[b].value[i] - before[b].value[i];
        sq += dv * dv;
      }
    rec.update_norm = std::sqrt(sq);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(rec.total)) fail(Errc::divergence_detected, "non-finite epoch loss");
    report.epochs.push_back(rec);
  }
  return report;
}

inline std::uint64_t model_seed(std::uint64_t seed, std::uint64_t role) { return Rng(seed).derive(role).next_u64(); }

// Teacher: full model trained on L_traj + lambda1 * L_align (no distillation).
inline TrainResult train_teacher(const Dataset& ds, TrainConfig cfg, const ModelConfig& mc = ModelConfig::teacher(),
                                 PromptMode mode = PromptMode::full) {
  cfg.validate();
  if (ds.empty()) fail(Errc::empty_dataset, "training set is empty");
  cfg.freeze_vision = false;
  cfg.weights.lambda2 = 0.0;
  Model model(mc, model_seed(cfg.seed, 0x7465616368ULL));
  const auto examples = make_examples(ds, mc, mode);
  auto report = fit(model, examples, nullptr, cfg);
  return {std::move(model), std::move(report)};
}

// Student: smaller model fine-tuned with the three-term objective; the vision
// encoder stays at its initial weights when cfg.freeze_vision is set.
inline TrainResult train_student(const Dataset& ds, const Model* teacher, const TrainConfig& cfg,
                                 const ModelConfig& mc = ModelConfig::student(),
                                 PromptMode mode = PromptMode::full) {
  cfg.validate();
  if (ds.empty()) fail(Errc::empty_dataset, "training set is empty");
  Model model(mc, model_seed(cfg.seed, 0x73747564ULL));
  const auto examples = make_examples(ds, mc, mode);
  const bool use_teacher = teacher != nullptr && cfg.weights.lambda2 != 0.0;
  auto report = fit(model, examples, use_teacher ? teacher : nullptr, cfg);
  return {std::move(model), std::move(report)};
}

// Mean trajectory cross-entropy of a model over a dataset.
inline double mean_traj_loss(const Model& model, const Dataset& ds, PromptMode mode = PromptMode::full) {
  if (ds.empty()) fail(Errc::empty_dataset, "evaluation set is empty");
  double s = 0.0;
  for (const auto& smp : ds) {
    const auto ex = make_example(smp, model.config(), mode);
    s += traj_loss(model.forward_grid(ex.grid, ex.prompt).logits, ex.targets);
  }
  return s / static_cast<double>(ds.size());
}

// Mean distillation loss between a student and a teacher over a dataset.
inline double mean_kd_loss(const Model& student, const Model& teacher, const Dataset& ds, const DistillConfig& dc,
                           PromptMode mode = PromptMode::full) {
  if (ds.empty()) fail(Errc::empty_dataset, "evaluation set is empty");
  double s = 0.0;
  for (const auto& smp : ds) {
    const auto es = make_example(smp, student.config(), mode);
    const auto et = make_example(smp, teacher.config(), mode);
    s += kd_loss(student.forward_grid(es.grid, es.prompt).logits, teacher.forward_grid(et.grid, et.prompt).logits, dc);
  }
  return s / static_cast<double>(ds.size());
}

}  // namespace v2x
