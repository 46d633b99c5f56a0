// v2xvlm: dataset generation, training, cooperative inference and studies.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <list>
#include <sstream>
#include <thread>

#include "v2xvlm/evalkit.hpp"
#include "v2xvlm/flops.hpp"
#include "v2xvlm/verify.hpp"

namespace fs = std::filesystem;
using namespace v2x;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kRuntime = 1, kUsage = 2, kVerify = 3, kIo = 4, kDivergence = 5 };

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

// "key = value" lines; '#' starts a comment. Each key becomes "--key=value".
std::vector<std::string> read_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) fail(Errc::io_error, "cannot read config file " + path);
  std::vector<std::string> args;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(Errc::usage_error, path + ":" + std::to_string(n) + ": expected key = value");
    args.push_back("--" + trim(line.substr(0, eq)) + "=" + trim(line.substr(eq + 1)));
  }
  return args;
}

// Moves --config out of argv and splices its entries in right after the
// command name, so later command-line flags override them.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> rest;
  std::string config;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config") {
      if (i + 1 >= argc) fail(Errc::usage_error, "--config needs a path");
      config = argv[++i];
    } else if (a.rfind("--config=", 0) == 0) {
      config = a.substr(9);
    } else {
      rest.push_back(a);
    }
  }
  if (config.empty() || rest.empty()) return rest;
  const auto extra = read_config(config);
  std::vector<std::string> out{rest.front()};
  out.insert(out.end(), extra.begin(), extra.end());
  out.insert(out.end(), rest.begin() + 1, rest.end());
  return out;
}

std::vector<double> parse_scales(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      out.push_back(std::stod(trim(tok)));
    } catch (const std::exception&) {
      fail(Errc::usage_error, "bad scale '" + tok + "'");
    }
  }
  if (out.empty()) fail(Errc::usage_error, "no scales given");
  return out;
}

// Comma-separated perturbations: a default row name, or terms such as
// "noise=7" and "text=0.2" joined with '+'.
std::vector<NamedPerturb> parse_perturbs(const std::string& s) {
  const auto defaults = default_perturbations();
  if (s.empty() || s == "all") return defaults;
  std::vector<NamedPerturb> out{defaults.front()};
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    tok = trim(tok);
    if (tok == "clean") continue;
    auto it = std::find_if(defaults.begin(), defaults.end(), [&](const auto& p) { return p.name == tok; });
    if (it != defaults.end()) {
      out.push_back(*it);
      continue;
    }
    NamedPerturb p{tok, {}};
    std::stringstream ts(tok);
    for (std::string term; std::getline(ts, term, '+');) {
      const auto eq = term.find('=');
      if (eq == std::string::npos) fail(Errc::usage_error, "unknown perturbation '" + tok + "'");
      const std::string key = term.substr(0, eq);
      double v = 0;
      try {
        v = std::stod(term.substr(eq + 1));
      } catch (const std::exception&) {
        fail(Errc::usage_error, "bad perturbation value in '" + tok + "'");
      }
      if (key == "noise") p.spec.image_noise_std = v;
      else if (key == "text") p.spec.text_flip_prob = v;
      else fail(Errc::usage_error, "unknown perturbation key '" + key + "'");
    }
    p.spec.validate();
    out.push_back(p);
  }
  return out;
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary);
  if (!os) fail(Errc::io_error, "cannot write " + p.string());
  os << text;
  if (!os) fail(Errc::io_error, "write failed for " + p.string());
}

void save_model(const fs::path& p, const Model& m) {
  fs::create_directories(p.parent_path());
  save_checkpoint(p.string(), m);
}

json traj_json(const Trajectory& t) {
  json a = json::array();
  for (const auto& w : t) a.push_back({w.x, w.y});
  return a;
}

// Options shared by several commands.
struct Common {
  std::string out;
  std::uint64_t seed = 0;
  std::string data;
  std::size_t n = 0;
  std::string model;

  fs::path out_dir() const {
    if (!out.empty()) return out;
    if (const char* e = std::getenv("V2XVLM_OUT"); e && *e) return e;
    return "out";
  }
};

void add_out(CLI::App* c, Common& o) {
  c->add_option("--out", o.out, "output directory (default $V2XVLM_OUT or ./out)");
  c->add_option("--seed", o.seed, "seed for every random choice");
}

void add_data(CLI::App* c, Common& o, std::size_t default_n) {
  o.n = default_n;
  c->add_option("--data", o.data, "dataset directory (otherwise scenes are generated)");
  c->add_option("--n", o.n, "number of scenes to generate when --data is absent")->capture_default_str();
}

// Held-out scenes unless `train` is set.
Dataset dataset_of(const Common& o, bool train) {
  if (!o.data.empty()) return load_dataset(o.data);
  if (o.n == 0) fail(Errc::usage_error, "--n must be positive");
  return generate_dataset(o.n, o.seed, train ? 0 : kHeldOutOffset);
}

Model model_of(const Common& o) {
  if (!o.model.empty()) return load_checkpoint(o.model);
  return Model(ModelConfig::student(), model_seed(o.seed, 0x73747564ULL));
}

struct TrainOpts {
  std::size_t epochs = 10;
  std::size_t batch = 4;
  double lr = 3e-4;
  bool reference_lr = false;
  double lambda1 = 0.1;
  double lambda2 = 0.5;
  double temp = 2.0;
  double kappa = 0.1;
  std::string kd_grad = "chain";
  bool freeze_vision = true;
  std::string prompt = "full";

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c;
    c.epochs = epochs;
    c.batch = batch;
    c.lr = reference_lr ? TrainConfig::kReferenceLr : lr;
    c.weights = {lambda1, lambda2};
    c.distill.temp = temp;
    c.distill.grad_form = kd_grad == "boxed" ? KdGradForm::boxed_t_squared : KdGradForm::chain_rule;
    c.align.kappa = kappa;
    c.seed = seed;
    c.freeze_vision = freeze_vision;
    return c;
  }
  PromptMode mode() const { return prompt == "task-only" ? PromptMode::task_only : PromptMode::full; }
};

void add_train(CLI::App* c, TrainOpts& t, bool student) {
  c->add_option("--epochs", t.epochs)->capture_default_str();
  c->add_option("--batch", t.batch)->capture_default_str();
  c->add_option("--lr", t.lr)->capture_default_str();
  c->add_flag("--reference-lr", t.reference_lr, "use the 1e-6 learning rate");
  c->add_option("--lambda1", t.lambda1)->capture_default_str();
  c->add_option("--kappa", t.kappa)->capture_default_str();
  c->add_option("--prompt", t.prompt)->check(CLI::IsMember({"full", "task-only"}))->capture_default_str();
  if (student) {
    c->add_option("--lambda2", t.lambda2)->capture_default_str();
    c->add_option("--temp", t.temp)->capture_default_str();
    c->add_option("--kd-grad", t.kd_grad)->check(CLI::IsMember({"chain", "boxed"}))->capture_default_str();
    c->add_option("--freeze-vision", t.freeze_vision)->capture_default_str();
  }
}

void print_epochs(const TrainReport& r) {
  for (const auto& e : r.epochs)
    std::printf("epoch %zu  L_traj %.4f  L_align %.4f  L_KD %.4f  L_total %.4f  %.0f ms\n", e.epoch, e.traj, e.align,
                e.kd, e.total, e.wall_ms);
}

void write_table(const fs::path& dir, const std::string& stem, const std::vector<StudyRow>& rows) {
  const std::string table = format_table(rows);
  write_file(dir / (stem + ".txt"), table);
  write_file(dir / (stem + ".csv"), format_csv(rows));
  std::cout << table;
}

std::chrono::milliseconds timeout_from(long flag) {
  if (flag > 0) return std::chrono::milliseconds(flag);
  if (const char* e = std::getenv("V2XVLM_TIMEOUT_MS"); e && *e) {
    try {
      return std::chrono::milliseconds(std::stol(e));
    } catch (const std::exception&) {
      fail(Errc::usage_error, "V2XVLM_TIMEOUT_MS is not a number");
    }
  }
  return std::chrono::milliseconds(5000);
}

int verify_all(std::size_t trials, std::size_t samples, std::uint64_t seed, const fs::path& out) {
  const std::vector<verify::CheckResult> checks = {
      verify::alignment_gradient_suite(trials, seed), verify::kd_gradient_suite(trials, seed),
      verify::kd_identities(trials, seed), verify::alignment_identities(seed),
      verify::model_gradcheck(samples, seed), verify::flop_agreement_suite(10, seed)};
  json report = json::array();
  bool ok = true;
  for (const auto& c : checks) {
    std::printf("%-40s %s  max error %.3e (tol %.1e, %zu trials) %s\n", c.name.c_str(), c.pass ? "ok  " : "FAIL",
                c.worst, c.tolerance, c.trials, c.detail.c_str());
    report.push_back({{"name", c.name}, {"pass", c.pass}, {"max_error", c.worst}, {"tolerance", c.tolerance},
                      {"trials", c.trials}, {"detail", c.detail}});
    ok = ok && c.pass;
  }
  write_file(out / "verify.json", report.dump(2) + "\n");
  return ok ? kOk : kVerify;
}

int flops_report(const flops::FlopSpec& spec, const std::string& reading, const std::string& which,
                 const fs::path& out) {
  using namespace flops;
  std::ostringstream txt, csv;
  txt << "closed form at N_v=" << spec.n_vis << " N_t=" << spec.n_txt << " d=" << spec.d << "\n";
  txt << "  vision self-attention   " << flops_vis(spec) << "\n";
  txt << "  text self-attention     " << flops_text(spec) << "\n";
  txt << "  cross-modal attention   " << flops_cross(spec) << "\n";
  if (spec.rank) {
    const auto r = reading == "per-matrix" ? LowRankReading::per_matrix : LowRankReading::pair;
    txt << "  cross-modal, rank " << *spec.rank << " (" << reading << ")  " << flops_cross_lowrank(spec, r) << "\n";
  }
  txt << "  dominant term           " << dominant_name(dominant_term(spec)) << "\n\n";

  // Per-layer counts from one instrumented forward pass of a full model.
  const ModelConfig mc = which == "teacher" ? ModelConfig::teacher() : ModelConfig::student();
  const Model model(mc, 0);
  const auto s = generate_scene(Maneuver::straight, 0);
  const PromptTokens p = prompt_tokens(s.prompt);
  const PatchGrid grid = extract_patches(concat_views(s.vehicle, s.infra), mc);
  nn::MacCounter counter;
  {
    nn::MacScope scope(counter);
    model.forward_grid(grid, p);
  }
  const FlopSpec ms{grid.patches.rows(), p.ids.size(), mc.d, mc.heads, std::nullopt};
  char line[256];
  std::snprintf(line, sizeof line, "%s model, N_v=%zu N_t=%zu d=%zu\n%-18s %9s %9s %9s %9s %9s %9s %10s %10s\n",
                which.c_str(), grid.patches.rows(), p.ids.size(), mc.d, "layer", "q_proj", "k_proj", "v_proj", "o_proj",
                "scores", "mix", "convention", "formula");
  txt << line;
  csv << "layer,q_proj,k_proj,v_proj,o_proj,scores,mix,convention,formula\n";
  for (const auto& [name, t] : counter.blocks) {
    std::string formula = "-";
    if (name.rfind("vision.", 0) == 0) formula = std::to_string(flops_vis(ms));
    else if (name.rfind("text.", 0) == 0) formula = std::to_string(flops_text(ms));
    else if (name == "fuse.attn") formula = std::to_string(flops_cross(ms));
    using nn::MacTag;
    std::snprintf(line, sizeof line, "%-18s %9llu %9llu %9llu %9llu %9llu %9llu %10llu %10s\n", name.c_str(),
                  static_cast<unsigned long long>(t[MacTag::q_proj]), static_cast<unsigned long long>(t[MacTag::k_proj]),
                  static_cast<unsigned long long>(t[MacTag::v_proj]), static_cast<unsigned long long>(t[MacTag::o_proj]),
                  static_cast<unsigned long long>(t[MacTag::scores]), static_cast<unsigned long long>(t[MacTag::mix]),
                  static_cast<unsigned long long>(t.formula_convention()), formula.c_str());
    txt << line;
    csv << name << "," << t[MacTag::q_proj] << "," << t[MacTag::k_proj] << "," << t[MacTag::v_proj] << ","
        << t[MacTag::o_proj] << "," << t[MacTag::scores] << "," << t[MacTag::mix] << "," << t.formula_convention()
        << "," << (formula == "-" ? "" : formula) << "\n";
  }
  write_file(out / "flops.txt", txt.str());
  write_file(out / "flops.csv", csv.str());
  std::cout << txt.str();
  return kOk;
}

int exit_code_of(Errc e) {
  switch (e) {
    case Errc::usage_error:
    case Errc::invalid_config: return kUsage;
    case Errc::io_error:
    case Errc::bad_magic:
    case Errc::crc_mismatch:
    case Errc::truncated_frame:
    case Errc::unsupported_version:
    case Errc::decode_failure:
    case Errc::peer_timeout: return kIo;
    case Errc::divergence_detected: return kDivergence;
    default: return kRuntime;
  }
}

int run(int argc, char** argv) {
  const std::vector<std::string> args = expand_config(argc, argv);

  CLI::App app{"v2xvlm: cooperative trajectory planning toolkit", fs::path(argv[0]).filename().string()};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");
  app.footer("Every command also accepts --config FILE (key = value lines, overridden by flags).");

  // Per-command option state; std::list keeps the references stable.
  std::list<Common> commons;
  std::list<TrainOpts> trains;
  int result = kOk;

  {
    auto& o = commons.emplace_back();
    auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset directory");
    add_out(gen, o);
    o.n = 200;
    gen->add_option("--n", o.n)->capture_default_str();
    std::string split = "train";
    gen->add_option("--split", split)->check(CLI::IsMember({"train", "test"}))->capture_default_str();
    gen->callback([&] {
      if (o.n == 0) fail(Errc::usage_error, "--n must be positive");
      const auto ds = generate_dataset(o.n, o.seed, split == "test" ? kHeldOutOffset : 0);
      save_dataset(o.out_dir(), ds);
      std::printf("wrote %zu scenes to %s\n", ds.size(), o.out_dir().string().c_str());
    });
  }

  {
    auto& o = commons.emplace_back();
    auto& t = trains.emplace_back();
    auto* teach = app.add_subcommand("train-teacher", "pretrain the teacher model");
    add_out(teach, o);
    add_data(teach, o, 200);
    add_train(teach, t, false);
    teach->callback([&] {
      const auto r = train_teacher(dataset_of(o, true), t.config(o.seed), ModelConfig::teacher(), t.mode());
      print_epochs(r.report);
      save_model(o.out_dir() / "teacher.ckpt", r.model);
      write_file(o.out_dir() / "teacher_report.jsonl", r.report.to_jsonl());
    });
  }

  std::string teacher_path;
  {
    auto& o = commons.emplace_back();
    auto& t = trains.emplace_back();
    auto* distill = app.add_subcommand("distill", "train the student against a teacher");
    add_out(distill, o);
    add_data(distill, o, 200);
    add_train(distill, t, true);
    distill->add_option("--teacher", teacher_path, "teacher checkpoint (required unless --lambda2 0)");
    distill->callback([&] {
      const auto cfg = t.config(o.seed);
      std::optional<Model> teacher;
      if (!teacher_path.empty()) teacher = load_checkpoint(teacher_path);
      else if (cfg.weights.lambda2 != 0.0) fail(Errc::usage_error, "--teacher is required when --lambda2 is nonzero");
      const auto r = train_student(dataset_of(o, true), teacher ? &*teacher : nullptr, cfg, ModelConfig::student(),
                                   t.mode());
      print_epochs(r.report);
      save_model(o.out_dir() / "student.ckpt", r.model);
      write_file(o.out_dir() / "student_report.jsonl", r.report.to_jsonl());
    });
  }

  long index = -1;
  double scale = 1.0;
  {
    auto& o = commons.emplace_back();
    auto* infer = app.add_subcommand("infer", "plan trajectories for dataset scenes");
    add_out(infer, o);
    add_data(infer, o, 10);
    infer->add_option("--model", o.model, "checkpoint (default: untrained student)");
    infer->add_option("--index", index, "single scene index (default: all)");
    infer->add_option("--scale", scale, "infrastructure downsampling factor")->capture_default_str();
    infer->callback([&] {
      const Model m = model_of(o);
      const Dataset ds = dataset_of(o, false);
      std::string lines;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        if (index >= 0 && static_cast<std::size_t>(index) != i) continue;
        CoopOptions co;
        co.scale = scale;
        const auto r = sequential_infer(m, vehicle_endpoint(ds[i]), roadside_endpoint(ds[i]), co);
        const auto l2 = l2_error(r.plan.refined, ds[i].truth);
        lines += json{{"index", i},
                      {"tokens", r.plan.tokens.ids},
                      {"raw", traj_json(r.plan.raw)},
                      {"refined", traj_json(r.plan.refined)},
                      {"truth", traj_json(ds[i].truth)},
                      {"l2_avg", l2.avg}}
                     .dump() +
                 "\n";
        std::printf("scene %zu  L2 avg %.3f m\n", i, l2.avg);
      }
      if (index >= 0 && static_cast<std::size_t>(index) >= ds.size()) fail(Errc::usage_error, "--index out of range");
      write_file(o.out_dir() / "infer.jsonl", lines);
    });
  }

  std::uint16_t port = 0;
  long timeout_ms = 0;
  double noise_std = 0.0, text_p = 0.0;
  {
    auto& o = commons.emplace_back();
    auto* coop = app.add_subcommand("coop-demo", "run both endpoints over a loopback TCP link");
    add_out(coop, o);
    add_data(coop, o, 1);
    coop->add_option("--model", o.model, "checkpoint (default: untrained student)");
    coop->add_option("--index", index, "scene index")->capture_default_str();
    coop->add_option("--scale", scale)->capture_default_str();
    coop->add_option("--port", port, "loopback port (0 picks a free one)")->capture_default_str();
    coop->add_option("--timeout-ms", timeout_ms, "receive deadline (default $V2XVLM_TIMEOUT_MS or 5000)");
    coop->add_option("--noise-std", noise_std)->capture_default_str();
    coop->add_option("--text-p", text_p)->capture_default_str();
    coop->callback([&] {
      const Model m = model_of(o);
      const Dataset ds = dataset_of(o, false);
      const std::size_t i = index < 0 ? 0 : static_cast<std::size_t>(index);
      if (i >= ds.size()) fail(Errc::usage_error, "--index out of range");
      CoopOptions co;
      co.scale = scale;
      co.noise_std = noise_std;
      co.noise_seed = Rng(o.seed).derive(1).next_u64();
      co.text_flip_prob = text_p;
      co.text_seed = Rng(o.seed).derive(2).next_u64();
      co.deadline = timeout_from(timeout_ms);
      TcpListener listener(port);
      std::exception_ptr roadside_error;
      std::thread roadside([&] {
        try {
          auto ch = TcpChannel::connect(listener.port(), co.deadline);
          roadside_task(*ch, roadside_endpoint(ds[i]), co);
        } catch (...) {
          roadside_error = std::current_exception();
        }
      });
      std::optional<CoopResult> r;
      std::exception_ptr vehicle_error;
      try {
        auto ch = listener.accept(co.deadline);
        r = vehicle_task(m, vehicle_endpoint(ds[i]), *ch, co);
      } catch (...) {
        vehicle_error = std::current_exception();
      }
      roadside.join();
      if (roadside_error) std::rethrow_exception(roadside_error);
      if (vehicle_error) std::rethrow_exception(vehicle_error);
      const auto l2 = l2_error(r->plan.refined, ds[i].truth);
      const json j = {{"port", listener.port()},
                      {"scale", scale},
                      {"payload_bytes", r->payload_bytes},
                      {"frame_bytes", r->frame_bytes},
                      {"bps_full_resolution", bps(reference_link(scale))},
                      {"prompt", r->prompt.full_text()},
                      {"tokens", r->plan.tokens.ids},
                      {"refined", traj_json(r->plan.refined)},
                      {"l2_avg", l2.avg}};
      write_file(o.out_dir() / "coop.json", j.dump(2) + "\n");
      std::printf("port %u  frame %zu bytes  payload %zu bytes  BPS %s  L2 avg %.3f m\n", listener.port(),
                  r->frame_bytes, r->payload_bytes, sci3(static_cast<double>(bps(reference_link(scale)))).c_str(), l2.avg);
    });
  }

  std::string scales = "1,0.5,0.2,0.1";
  {
    auto& o = commons.emplace_back();
    auto* sweep = app.add_subcommand("sweep-bandwidth", "accuracy and link rate across downsampling factors");
    add_out(sweep, o);
    add_data(sweep, o, 20);
    sweep->add_option("--model", o.model, "checkpoint (default: untrained student)");
    sweep->add_option("--scales", scales)->capture_default_str();
    sweep->callback([&] {
      write_table(o.out_dir(), "sweep", sweep_bandwidth(model_of(o), dataset_of(o, false), parse_scales(scales), o.seed));
    });
  }

  std::string perturb = "all";
  {
    auto& o = commons.emplace_back();
    auto* robust = app.add_subcommand("robustness", "evaluate under image and text perturbations");
    add_out(robust, o);
    add_data(robust, o, 20);
    robust->add_option("--model", o.model, "checkpoint (default: untrained student)");
    robust->add_option("--perturb", perturb, "comma list of row names or noise=S+text=P terms")->capture_default_str();
    robust->callback([&] {
      write_table(o.out_dir(), "robustness",
                  robustness_suite(model_of(o), dataset_of(o, false), o.seed, parse_perturbs(perturb)));
    });
  }

  std::size_t test_n = 100, teacher_epochs = 10;
  {
    auto& o = commons.emplace_back();
    auto& t = trains.emplace_back();
    auto* ablate = app.add_subcommand("ablate", "train and evaluate the five ablation variants");
    add_out(ablate, o);
    add_data(ablate, o, 200);
    add_train(ablate, t, true);
    ablate->add_option("--teacher", teacher_path, "teacher checkpoint (trained here when absent)");
    ablate->add_option("--teacher-epochs", teacher_epochs)->capture_default_str();
    ablate->add_option("--test-n", test_n, "held-out scenes")->capture_default_str();
    ablate->callback([&] {
      const TrainConfig cfg = t.config(o.seed);
      const Dataset train = dataset_of(o, true);
      const Dataset test = generate_dataset(test_n, o.seed, kHeldOutOffset);
      Model teacher = teacher_path.empty() ? [&] {
        TrainConfig tc = cfg;
        tc.epochs = teacher_epochs;
        return train_teacher(train, tc).model;
      }()
                                           : load_checkpoint(teacher_path);
      write_table(o.out_dir(), "ablation", ablation_suite(train, test, teacher, cfg));
    });
  }

  std::size_t trials = 100, samples = 50;
  {
    auto& o = commons.emplace_back();
    auto* ver = app.add_subcommand("verify-gradients", "check analytic gradients and identities");
    add_out(ver, o);
    ver->add_option("--trials", trials)->capture_default_str();
    ver->add_option("--samples", samples, "parameters probed in the whole-model check")->capture_default_str();
    ver->callback([&] { result = verify_all(trials, samples, o.seed, o.out_dir()); });
  }

  flops::FlopSpec spec{16, 8, 64, 4, std::nullopt};
  std::uint64_t rank = 0;
  std::string reading = "pair", which = "student";
  {
    auto& o = commons.emplace_back();
    auto* fl = app.add_subcommand("flops-report", "attention FLOP counts, closed form and per layer");
    add_out(fl, o);
    fl->add_option("--nv", spec.n_vis)->capture_default_str();
    fl->add_option("--nt", spec.n_txt)->capture_default_str();
    fl->add_option("--d", spec.d)->capture_default_str();
    fl->add_option("--heads", spec.heads)->capture_default_str();
    fl->add_option("--rank", rank, "low-rank adapter rank (0: none)");
    fl->add_option("--reading", reading)->check(CLI::IsMember({"pair", "per-matrix"}))->capture_default_str();
    fl->add_option("--model-config", which)->check(CLI::IsMember({"student", "teacher"}))->capture_default_str();
    fl->callback([&] {
      if (rank > 0) spec.rank = rank;
      result = flops_report(spec, reading, which, o.out_dir());
    });
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  return result;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_of(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
