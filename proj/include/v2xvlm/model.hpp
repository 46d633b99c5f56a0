#pragma once

// Tiny multimodal encoder-decoder.
//
//   composite image -> patch embedding -> vision encoder --+--> mean pool -> z
//   prompt tokens   -> token embedding -> text encoder  ---+--> mean pool -> h
//   vision tokens attend to text tokens (fusion block); the fused vision
//   tokens and text tokens form the decoder memory. 2T learned query slots run
//   through the decoder and a linear head gives one coordinate-token
//   distribution per slot (x1, y1, ..., xT, yT).

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "v2xvlm/nn.hpp"
#include "v2xvlm/numerics.hpp"
#include "v2xvlm/types.hpp"

namespace v2x {

struct ModelConfig {
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t enc_layers = 2;  // per branch
  std::size_t dec_layers = 2;
  std::size_t patch = 16;
  std::size_t d_prime = 64;
  std::size_t horizon = 9;  // waypoints T
  std::size_t coord_bins = 128;
  double bin_size = 0.5;
  double coord_min = -32.0;
  std::size_t text_vocab = 256;
  std::size_t max_text_len = 64;
  std::size_t img_height = 64;
  std::size_t img_max_width = 192;

  std::size_t head_dim() const { return d / heads; }
  std::size_t vocab_coord() const { return coord_bins + 3; }
  std::size_t bos() const { return coord_bins; }
  std::size_t eos() const { return coord_bins + 1; }
  std::size_t pad() const { return coord_bins + 2; }
  std::size_t slots() const { return 2 * horizon; }
  double coord_max() const { return coord_min + bin_size * static_cast<double>(coord_bins); }
  std::size_t grid_rows() const { return img_height / patch; }
  std::size_t grid_cols_max() const { return img_max_width / patch; }

  void validate() const {
    if (heads == 0 || d % heads != 0) fail(Errc::invalid_config, "d must be divisible by heads");
    if (patch == 0 || img_height % patch != 0 || img_max_width % patch != 0)
      fail(Errc::invalid_config, "image extent must be a multiple of the patch edge");
    if (horizon == 0 || coord_bins == 0 || text_vocab == 0 || max_text_len == 0 || d_prime == 0)
      fail(Errc::invalid_config, "zero-sized model dimension");
    if (!(bin_size > 0.0)) fail(Errc::invalid_config, "bin size must be positive");
  }

  static ModelConfig student() { return {}; }

  static ModelConfig teacher() {
    ModelConfig c;
    c.d = 96;
    c.enc_layers = 3;
    return c;
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct PromptTokens {
  std::vector<std::size_t> ids;
};

struct TrajectoryTokens {
  std::vector<std::size_t> ids;  // BOS, x1, y1, ..., xT, yT, EOS
};

struct EmbeddingPair {
  std::vector<double> z;
  std::vector<double> h;
};

// ---------------------------------------------------------------------------
// Views and patches

inline Image concat_views(const Image& vehicle, const Image& infra) {
  if (infra.width == 0) return vehicle;
  if (vehicle.height != infra.height) fail(Errc::height_mismatch, "vehicle and infrastructure heights differ");
  if (vehicle.channels != infra.channels) fail(Errc::channel_mismatch, "channel counts differ");
  Image out(vehicle.height, vehicle.width + infra.width, vehicle.channels);
  const std::size_t c = vehicle.channels;
  for (std::size_t r = 0; r < vehicle.height; ++r) {
    std::memcpy(&out.data[r * out.width * c], &vehicle.data[r * vehicle.width * c], vehicle.width * c);
    std::memcpy(&out.data[(r * out.width + vehicle.width) * c], &infra.data[r * infra.width * c], infra.width * c);
  }
  return out;
}

struct PatchGrid {
  Matrix patches;  // N_v x (patch * patch * channels), values in [-0.5, 0.5]
  std::size_t rows = 0;
  std::size_t cols = 0;
};

inline PatchGrid extract_patches(const Image& img, const ModelConfig& cfg) {
  const std::size_t p = cfg.patch;
  if (img.height == 0 || img.width == 0 || img.height % p != 0 || img.width % p != 0)
    fail(Errc::indivisible_patch_grid, "image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                                           " not divisible by patch " + std::to_string(p));
  if (img.channels != 3) fail(Errc::channel_mismatch, "encoder expects 3 channels");
  if (img.height != cfg.img_height || img.width > cfg.img_max_width)
    fail(Errc::shape_mismatch, "image exceeds the configured raster extent");
  PatchGrid g;
  g.rows = img.height / p;
  g.cols = img.width / p;
  const std::size_t feat = p * p * img.channels;
  g.patches = Matrix(g.rows * g.cols, feat);
  for (std::size_t pr = 0; pr < g.rows; ++pr)
    for (std::size_t pc = 0; pc < g.cols; ++pc) {
      double* out = &g.patches(pr * g.cols + pc, 0);
      std::size_t k = 0;
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t ch = 0; ch < img.channels; ++ch)
            out[k++] = static_cast<double>(img.at(pr * p + dy, pc * p + dx, ch)) / 255.0 - 0.5;
    }
  return g;
}

// ---------------------------------------------------------------------------
// Trajectory tokens

inline TrajectoryTokens tokenize_trajectory(const Trajectory& traj, const ModelConfig& cfg) {
  TrajectoryTokens t;
  t.ids.reserve(2 * traj.size() + 2);
  t.ids.push_back(cfg.bos());
  auto bin = [&cfg](double v) -> std::size_t {
    if (!std::isfinite(v) || v < cfg.coord_min || v >= cfg.coord_max())
      fail(Errc::out_of_range_coordinate, "coordinate " + std::to_string(v) + " outside quantization range");
    auto b = static_cast<std::size_t>(std::floor((v - cfg.coord_min) / cfg.bin_size));
    return std::min(b, cfg.coord_bins - 1);
  };
  for (const auto& w : traj) {
    t.ids.push_back(bin(w.x));
    t.ids.push_back(bin(w.y));
  }
  t.ids.push_back(cfg.eos());
  return t;
}

inline double bin_center(std::size_t bin, const ModelConfig& cfg) {
  return cfg.coord_min + (static_cast<double>(bin) + 0.5) * cfg.bin_size;
}

inline Trajectory detokenize_trajectory(const TrajectoryTokens& tokens, const ModelConfig& cfg) {
  const auto& ids = tokens.ids;
  if (ids.size() < 2 || ids.front() != cfg.bos() || ids.back() != cfg.eos())
    fail(Errc::malformed_token_sequence, "missing BOS/EOS");
  const std::size_t n = ids.size() - 2;
  if (n % 2 != 0) fail(Errc::malformed_token_sequence, "odd coordinate count");
  Trajectory traj;
  traj.reserve(n / 2);
  for (std::size_t i = 1; i + 1 < ids.size(); i += 2) {
    if (ids[i] >= cfg.coord_bins || ids[i + 1] >= cfg.coord_bins)
      fail(Errc::malformed_token_sequence, "non-coordinate token inside trajectory");
    traj.push_back({bin_center(ids[i], cfg), bin_center(ids[i + 1], cfg)});
  }
  return traj;
}

// Coordinate ids (no BOS/EOS) the decoder is trained to emit.
inline std::vector<std::size_t> coordinate_targets(const TrajectoryTokens& t) {
  return {t.ids.begin() + 1, t.ids.end() - 1};
}

// Greedy argmax per slot, restricted to coordinate bins.
inline TrajectoryTokens greedy_decode(const Matrix& logits, const ModelConfig& cfg) {
  TrajectoryTokens t;
  t.ids.push_back(cfg.bos());
  for (std::size_t n = 0; n < logits.rows(); ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < cfg.coord_bins; ++k)
      if (logits(n, k) > logits(n, best)) best = k;
    t.ids.push_back(best);
  }
  t.ids.push_back(cfg.eos());
  return t;
}

// ---------------------------------------------------------------------------
// Model

struct ForwardOutput {
  Matrix logits;  // 2T x C
  std::vector<double> z;
  std::vector<double> h;
};

class Model {
 public:
  struct VisionTrace {
    PatchGrid grid;
    Matrix embedded;
    std::vector<nn::EncoderBlock::Cache> blocks;
    nn::LayerNorm::Cache ln_f;
    Matrix tokens;
  };

  struct TextTrace {
    std::vector<std::size_t> ids;
    std::vector<nn::EncoderBlock::Cache> blocks;
    nn::LayerNorm::Cache ln_f;
    Matrix tokens;
  };

  struct HeadTrace {
    Matrix vis_pooled, txt_pooled;  // 1 x d
    nn::CrossBlock::Cache fuse;
    Matrix memory;
    std::vector<nn::DecoderBlock::Cache> dec;
    nn::LayerNorm::Cache ln_f;
    Matrix dec_out;
  };

  struct Trace {
    VisionTrace vision;
    TextTrace text;
    HeadTrace head;
  };

  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = Rng(seed).derive(0x6d6f64656cULL);
    const std::size_t d = cfg_.d;
    const std::size_t feat = cfg_.patch * cfg_.patch * 3;

    patch_ = nn::Linear::make(ps_, "vision.patch", feat, d, rng);
    vis_pos_ = ps_.add("vision.pos", cfg_.grid_rows() * cfg_.grid_cols_max(), d);
    nn::init_normal(ps_[vis_pos_], rng, 0.02);
    for (std::size_t i = 0; i < cfg_.enc_layers; ++i)
      vis_blocks_.push_back(nn::EncoderBlock::make(ps_, "vision.blk" + std::to_string(i), d, cfg_.heads, rng));
    vis_ln_ = nn::LayerNorm::make(ps_, "vision.ln_f", d);

    tok_emb_ = ps_.add("text.emb", cfg_.text_vocab, d);
    nn::init_normal(ps_[tok_emb_], rng, 0.1);
    txt_pos_ = ps_.add("text.pos", cfg_.max_text_len, d);
    nn::init_normal(ps_[txt_pos_], rng, 0.02);
    for (std::size_t i = 0; i < cfg_.enc_layers; ++i)
      txt_blocks_.push_back(nn::EncoderBlock::make(ps_, "text.blk" + std::to_string(i), d, cfg_.heads, rng));
    txt_ln_ = nn::LayerNorm::make(ps_, "text.ln_f", d);

    proj_z_ = nn::Linear::make(ps_, "proj.z", d, cfg_.d_prime, rng);
    proj_h_ = nn::Linear::make(ps_, "proj.h", d, cfg_.d_prime, rng);

    fuse_ = nn::CrossBlock::make(ps_, "fuse", d, cfg_.heads, rng);

    query_ = ps_.add("dec.query", cfg_.slots(), d);
    nn::init_normal(ps_[query_], rng, 0.1);
    for (std::size_t i = 0; i < cfg_.dec_layers; ++i)
      dec_blocks_.push_back(nn::DecoderBlock::make(ps_, "dec.blk" + std::to_string(i), d, cfg_.heads, rng));
    dec_ln_ = nn::LayerNorm::make(ps_, "dec.ln_f", d);
    out_ = nn::Linear::make(ps_, "dec.out", d, cfg_.vocab_coord(), rng);
  }

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

  // Vision-encoder blocks: the part kept frozen during student fine-tuning.
  static bool is_vision_encoder_param(const std::string& name) { return name.rfind("vision.", 0) == 0; }

  // --- vision branch -------------------------------------------------------

  Matrix vision_tokens(const PatchGrid& grid, VisionTrace* tr = nullptr) const {
    VisionTrace local;
    VisionTrace& t = tr ? *tr : local;
    if (grid.cols > cfg_.grid_cols_max() || grid.rows != cfg_.grid_rows())
      fail(Errc::shape_mismatch, "patch grid exceeds configured extent");
    t.grid = grid;
    t.embedded = patch_.forward(ps_, grid.patches);
    const auto& pos = ps_[vis_pos_].value;
    for (std::size_t r = 0; r < grid.rows; ++r)
      for (std::size_t c = 0; c < grid.cols; ++c) {
        const std::size_t row = r * grid.cols + c;
        const std::size_t slot = r * cfg_.grid_cols_max() + c;
        for (std::size_t j = 0; j < cfg_.d; ++j) t.embedded(row, j) += pos[slot * cfg_.d + j];
      }
    t.blocks.assign(vis_blocks_.size(), {});
    Matrix x = t.embedded;
    for (std::size_t i = 0; i < vis_blocks_.size(); ++i) x = vis_blocks_[i].forward(ps_, x, t.blocks[i]);
    t.tokens = vis_ln_.forward(ps_, x, t.ln_f);
    return t.tokens;
  }

  void vision_backward(const VisionTrace& t, const Matrix& dtokens, nn::Grads& g) const {
    Matrix dx = vis_ln_.backward(ps_, t.ln_f, dtokens, g);
    for (std::size_t i = vis_blocks_.size(); i-- > 0;) dx = vis_blocks_[i].backward(ps_, t.blocks[i], dx, g);
    auto& dpos = g[vis_pos_];
    for (std::size_t r = 0; r < t.grid.rows; ++r)
      for (std::size_t c = 0; c < t.grid.cols; ++c) {
        const std::size_t row = r * t.grid.cols + c;
        const std::size_t slot = r * cfg_.grid_cols_max() + c;
        for (std::size_t j = 0; j < cfg_.d; ++j) dpos[slot * cfg_.d + j] += dx(row, j);
      }
    patch_.backward(ps_, t.grid.patches, dx, g, false);
  }

  // --- text branch ---------------------------------------------------------

  void check_prompt(const PromptTokens& p) const {
    if (p.ids.empty()) fail(Errc::empty_prompt, "prompt has no tokens");
    if (p.ids.size() > cfg_.max_text_len) fail(Errc::length_mismatch, "prompt longer than max_text_len");
    for (auto id : p.ids)
      if (id >= cfg_.text_vocab) fail(Errc::unknown_token_id, "token id " + std::to_string(id) + " >= vocab");
  }

  Matrix text_tokens(const PromptTokens& prompt, TextTrace* tr = nullptr) const {
    check_prompt(prompt);
    TextTrace local;
    TextTrace& t = tr ? *tr : local;
    t.ids = prompt.ids;
    const std::size_t d = cfg_.d;
    const auto& emb = ps_[tok_emb_].value;
    const auto& pos = ps_[txt_pos_].value;
    Matrix x(prompt.ids.size(), d);
    for (std::size_t i = 0; i < prompt.ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) x(i, j) = emb[prompt.ids[i] * d + j] + pos[i * d + j];
    t.blocks.assign(txt_blocks_.size(), {});
    for (std::size_t i = 0; i < txt_blocks_.size(); ++i) x = txt_blocks_[i].forward(ps_, x, t.blocks[i]);
    t.tokens = txt_ln_.forward(ps_, x, t.ln_f);
    return t.tokens;
  }

  void text_backward(const TextTrace& t, const Matrix& dtokens, nn::Grads& g) const {
    Matrix dx = txt_ln_.backward(ps_, t.ln_f, dtokens, g);
    for (std::size_t i = txt_blocks_.size(); i-- > 0;) dx = txt_blocks_[i].backward(ps_, t.blocks[i], dx, g);
    const std::size_t d = cfg_.d;
    auto& demb = g[tok_emb_];
    auto& dpos = g[txt_pos_];
    for (std::size_t i = 0; i < t.ids.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) {
        demb[t.ids[i] * d + j] += dx(i, j);
        dpos[i * d + j] += dx(i, j);
      }
  }

  // --- projections, fusion, decoder ---------------------------------------

  std::vector<double> project_visual(const Matrix& vis) const {
    return proj_z_.forward(ps_, Matrix(1, cfg_.d, mean_pool(vis))).data();
  }
  std::vector<double> project_text(const Matrix& txt) const {
    return proj_h_.forward(ps_, Matrix(1, cfg_.d, mean_pool(txt))).data();
  }

  ForwardOutput head(const Matrix& vis, const Matrix& txt, HeadTrace* tr = nullptr) const {
    HeadTrace local;
    HeadTrace& t = tr ? *tr : local;
    ForwardOutput out;
    t.vis_pooled = Matrix(1, cfg_.d, mean_pool(vis));
    t.txt_pooled = Matrix(1, cfg_.d, mean_pool(txt));
    out.z = proj_z_.forward(ps_, t.vis_pooled).data();
    out.h = proj_h_.forward(ps_, t.txt_pooled).data();

    Matrix fused = fuse_.forward(ps_, vis, txt, t.fuse);
    t.memory = nn::vstack(fused, txt);
    const auto& q = ps_[query_];
    Matrix x(q.rows, q.cols, q.value);
    t.dec.assign(dec_blocks_.size(), {});
    for (std::size_t i = 0; i < dec_blocks_.size(); ++i) x = dec_blocks_[i].forward(ps_, x, t.memory, t.dec[i]);
    t.dec_out = dec_ln_.forward(ps_, x, t.ln_f);
    out.logits = out_.forward(ps_, t.dec_out);
    return out;
  }

  struct HeadInputGrads {
    Matrix dvis, dtxt;
  };

  HeadInputGrads head_backward(const HeadTrace& t, std::size_t n_vis, const Matrix& dlogits,
                               std::span<const double> dz, std::span<const double> dh, nn::Grads& g) const {
    const std::size_t d = cfg_.d;
    Matrix dx = dec_ln_.backward(ps_, t.ln_f, out_.backward(ps_, t.dec_out, dlogits, g), g);
    Matrix dmem(t.memory.rows(), d);
    for (std::size_t i = dec_blocks_.size(); i-- > 0;) {
      auto bg = dec_blocks_[i].backward(ps_, t.dec[i], dx, g);
      nn::add_inplace(dmem, bg.dmem);
      dx = std::move(bg.dx);
    }
    auto& dq = g[query_];
    for (std::size_t i = 0; i < dx.size(); ++i) dq[i] += dx.data()[i];

    const std::size_t n_txt = t.memory.rows() - n_vis;
    Matrix dfused = nn::rows_slice(dmem, 0, n_vis);
    HeadInputGrads out;
    out.dtxt = nn::rows_slice(dmem, n_vis, n_txt);
    auto fg = fuse_.backward(ps_, t.fuse, dfused, g);
    out.dvis = std::move(fg.dx);
    nn::add_inplace(out.dtxt, fg.dkv);

    auto spread = [d](Matrix& tokens, const Matrix& dpooled) {
      const double inv = 1.0 / static_cast<double>(tokens.rows());
      for (std::size_t i = 0; i < tokens.rows(); ++i)
        for (std::size_t j = 0; j < d; ++j) tokens(i, j) += dpooled(0, j) * inv;
    };
    if (!dz.empty()) {
      Matrix dzm(1, cfg_.d_prime, std::vector<double>(dz.begin(), dz.end()));
      spread(out.dvis, proj_z_.backward(ps_, t.vis_pooled, dzm, g));
    }
    if (!dh.empty()) {
      Matrix dhm(1, cfg_.d_prime, std::vector<double>(dh.begin(), dh.end()));
      spread(out.dtxt, proj_h_.backward(ps_, t.txt_pooled, dhm, g));
    }
    return out;
  }

  // --- whole-model entry points --------------------------------------------

  ForwardOutput forward_grid(const PatchGrid& grid, const PromptTokens& prompt, Trace* tr = nullptr) const {
    Matrix vis = vision_tokens(grid, tr ? &tr->vision : nullptr);
    Matrix txt = text_tokens(prompt, tr ? &tr->text : nullptr);
    return head(vis, txt, tr ? &tr->head : nullptr);
  }

  ForwardOutput forward(const Image& vehicle, const Image& infra, const PromptTokens& prompt) const {
    return forward_grid(extract_patches(concat_views(vehicle, infra), cfg_), prompt);
  }

  // Backpropagates dL/dlogits, dL/dz, dL/dh through a traced forward.
  void backward(const Trace& t, const Matrix& dlogits, std::span<const double> dz, std::span<const double> dh,
                nn::Grads& g, bool through_vision) const {
    auto hg = head_backward(t.head, t.vision.tokens.rows(), dlogits, dz, dh, g);
    text_backward(t.text, hg.dtxt, g);
    if (through_vision) vision_backward(t.vision, hg.dvis, g);
  }

 private:
  ModelConfig cfg_;
  nn::ParamStore ps_;
  nn::Linear patch_;
  std::size_t vis_pos_ = 0;
  std::vector<nn::EncoderBlock> vis_blocks_;
  nn::LayerNorm vis_ln_;
  std::size_t tok_emb_ = 0;
  std::size_t txt_pos_ = 0;
  std::vector<nn::EncoderBlock> txt_blocks_;
  nn::LayerNorm txt_ln_;
  nn::Linear proj_z_, proj_h_;
  nn::CrossBlock fuse_;
  std::size_t query_ = 0;
  std::vector<nn::DecoderBlock> dec_blocks_;
  nn::LayerNorm dec_ln_;
  nn::Linear out_;
};

struct ImageEncoding {
  Matrix tokens;
  std::vector<double> z;
};

inline ImageEncoding encode_image(const Image& composite, const Model& model) {
  ImageEncoding e;
  e.tokens = model.vision_tokens(extract_patches(composite, model.config()));
  e.z = model.project_visual(e.tokens);
  return e;
}

struct TextEncoding {
  Matrix tokens;
  std::vector<double> h;
};

inline TextEncoding encode_text(const PromptTokens& prompt, const Model& model) {
  TextEncoding e;
  e.tokens = model.text_tokens(prompt);
  e.h = model.project_text(e.tokens);
  return e;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   "V2XC" | u32 version=1 | u32 n_fields | n_fields x (u32 key_len, key, f64 value)
//   | u32 n_blocks | n_blocks x (u32 name_len, name, u32 rows, u32 cols, rows*cols x f32)
//
// All integers and floats little-endian.

namespace ckpt_detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_f64(std::ostream& os, double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, 8);
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((u >> (8 * i)) & 0xFF));
}
inline void put_f32(std::ostream& os, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(os, u);
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) fail(Errc::io_error, "truncated checkpoint");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) fail(Errc::io_error, "truncated checkpoint");
  std::uint64_t u = 0;
  for (int i = 7; i >= 0; --i) u = (u << 8) | b[i];
  double v;
  std::memcpy(&v, &u, 8);
  return v;
}
inline float get_f32(std::istream& is) {
  const std::uint32_t u = get_u32(is);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}
inline std::string get_str(std::istream& is) {
  const std::uint32_t n = get_u32(is);
  if (n > (1u << 20)) fail(Errc::io_error, "implausible string length in checkpoint");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) fail(Errc::io_error, "truncated checkpoint");
  return s;
}

inline std::vector<std::pair<std::string, double>> config_fields(const ModelConfig& c) {
  auto f = [](std::size_t v) { return static_cast<double>(v); };
  return {{"d", f(c.d)},
          {"heads", f(c.heads)},
          {"enc_layers", f(c.enc_layers)},
          {"dec_layers", f(c.dec_layers)},
          {"patch", f(c.patch)},
          {"d_prime", f(c.d_prime)},
          {"horizon", f(c.horizon)},
          {"coord_bins", f(c.coord_bins)},
          {"bin_size", c.bin_size},
          {"coord_min", c.coord_min},
          {"text_vocab", f(c.text_vocab)},
          {"max_text_len", f(c.max_text_len)},
          {"img_height", f(c.img_height)},
          {"img_max_width", f(c.img_max_width)}};
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const Model& model) {
  using namespace ckpt_detail;
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::io_error, "cannot open " + path + " for writing");
  os.write("V2XC", 4);
  put_u32(os, 1);
  const auto fields = config_fields(model.config());
  put_u32(os, static_cast<std::uint32_t>(fields.size()));
  for (const auto& [k, v] : fields) {
    put_u32(os, static_cast<std::uint32_t>(k.size()));
    os.write(k.data(), static_cast<std::streamsize>(k.size()));
    put_f64(os, v);
  }
  const auto& blocks = model.params().blocks();
  put_u32(os, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    put_u32(os, static_cast<std::uint32_t>(b.name.size()));
    os.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    put_u32(os, static_cast<std::uint32_t>(b.rows));
    put_u32(os, static_cast<std::uint32_t>(b.cols));
    for (double v : b.value) put_f32(os, static_cast<float>(v));
  }
  if (!os) fail(Errc::io_error, "write failed for " + path);
}

inline Model load_checkpoint(const std::string& path) {
  using namespace ckpt_detail;
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(Errc::io_error, "cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "V2XC", 4) != 0) fail(Errc::bad_magic, path + " is not a checkpoint");
  if (get_u32(is) != 1) fail(Errc::unsupported_version, "checkpoint version");
  ModelConfig cfg;
  const std::uint32_t nf = get_u32(is);
  for (std::uint32_t i = 0; i < nf; ++i) {
    const std::string key = get_str(is);
    const double v = get_f64(is);
    const auto sz = static_cast<std::size_t>(v);
    if (key == "d") cfg.d = sz;
    else if (key == "heads") cfg.heads = sz;
    else if (key == "enc_layers") cfg.enc_layers = sz;
    else if (key == "dec_layers") cfg.dec_layers = sz;
    else if (key == "patch") cfg.patch = sz;
    else if (key == "d_prime") cfg.d_prime = sz;
    else if (key == "horizon") cfg.horizon = sz;
    else if (key == "coord_bins") cfg.coord_bins = sz;
    else if (key == "bin_size") cfg.bin_size = v;
    else if (key == "coord_min") cfg.coord_min = v;
    else if (key == "text_vocab") cfg.text_vocab = sz;
    else if (key == "max_text_len") cfg.max_text_len = sz;
    else if (key == "img_height") cfg.img_height = sz;
    else if (key == "img_max_width") cfg.img_max_width = sz;
  }
  Model model(cfg, 0);
  auto& ps = model.params();
  const std::uint32_t nb = get_u32(is);
  if (nb != ps.count()) fail(Errc::shape_mismatch, "checkpoint block count does not match config");
  for (std::uint32_t i = 0; i < nb; ++i) {
    const std::string name = get_str(is);
    const std::uint32_t rows = get_u32(is);
    const std::uint32_t cols = get_u32(is);
    auto& b = ps[ps.find(name)];
    if (b.rows != rows || b.cols != cols) fail(Errc::shape_mismatch, "block " + name + " has unexpected shape");
    for (double& v : b.value) v = static_cast<double>(get_f32(is));
  }
  return model;
}

// Rounds every parameter through float32, matching what a checkpoint stores.
inline void round_to_float(Model& model) {
  for (auto& b : model.params().blocks())
    for (double& v : b.value) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace v2x
