// gsa: command-line driver for data generation, VAE training, loop experiments and the
// annotation service.

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gsa/gateway/server.hpp"

namespace fs = std::filesystem;
using gsa::Error;
using gsa::ErrorCode;
using nlohmann::json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

std::atomic<bool> g_interrupted{false};

fs::path default_data_dir() {
  const char* d = std::getenv("GS_DATA_DIR");
  return d && *d ? fs::path(d) : fs::path(".");
}

fs::path dataset_path(const fs::path& dir) { return dir / "dataset.gsad"; }
fs::path vae_path(const fs::path& dir, std::size_t z) {
  return dir / ("vae_z" + std::to_string(z) + ".gsck");
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, "config " + path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  gsa::io::write_file(path, text);
  std::cout << "wrote " << path.string() << "\n";
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

gsa::Dataset load_data(const fs::path& dir) {
  const fs::path p = dataset_path(dir);
  if (!fs::exists(p)) {
    throw Error(ErrorCode::kInvalidArgument,
                "no dataset at " + p.string() + " (run gen-data or set GS_DATA_DIR)");
  }
  return gsa::load_dataset(p);
}

gsa::Vae<float> load_model(const fs::path& dir, std::size_t z) {
  const fs::path p = vae_path(dir, z);
  if (!fs::exists(p)) {
    throw Error(ErrorCode::kInvalidArgument, "no VAE for z_dim " + std::to_string(z) + " at " +
                                                 p.string() + " (run train-vae --z-dim " +
                                                 std::to_string(z) + ")");
  }
  return gsa::load_vae<float>(p);
}

/// Loop config from `--config`, defaulted to the dataset geometry.
gsa::LoopConfig loop_config(const std::string& config, const gsa::Dataset& ds) {
  gsa::LoopConfig c;
  c.segmenter.height = ds.spec.height;
  c.segmenter.width = ds.spec.width;
  c.segmenter.classes = ds.spec.classes;
  if (!config.empty()) {
    json j = read_json(config);
    json& seg = j["segmenter"];
    if (seg.is_null()) seg = json::object();
    if (seg.is_object()) {
      for (const char* k : {"height", "width", "classes"}) {
        if (!seg.contains(k)) seg[k] = json(c.segmenter)[k];
      }
    }
    c = j.get<gsa::LoopConfig>();
  }
  return c;
}

struct Options {
  fs::path data = default_data_dir();
  fs::path out = ".";
  std::string config;
  std::optional<std::uint64_t> seed;
};

// ---------------------------------------------------------------------------

int gen_data(const Options& o, std::optional<std::size_t> n_train, std::optional<std::size_t> n_test) {
  gsa::DatasetSpec spec;
  if (!o.config.empty()) spec = read_json(o.config).get<gsa::DatasetSpec>();
  if (o.seed) spec.seed = *o.seed;
  if (n_train) spec.n_train = *n_train;
  if (n_test) spec.n_test = *n_test;
  fs::create_directories(o.out);
  gsa::save_dataset(gsa::generate_dataset(spec), dataset_path(o.out));
  std::cout << "wrote " << dataset_path(o.out).string() << "\n";
  return 0;
}

int train_vae_cmd(const Options& o, std::optional<std::size_t> z, std::optional<std::size_t> epochs,
                  std::optional<double> kl_weight) {
  const gsa::Dataset ds = load_data(o.data);
  gsa::VaeConfig model;
  gsa::VaeTrainConfig train;
  if (!o.config.empty()) {
    const json j = read_json(o.config);
    model = j.value("model", json::object()).get<gsa::VaeConfig>();
    train = j.value("train", json::object()).get<gsa::VaeTrainConfig>();
  }
  model.height = ds.spec.height;
  model.width = ds.spec.width;
  if (z) model.z_dim = *z;
  if (epochs) train.epochs = *epochs;
  if (kl_weight) train.kl_weight = *kl_weight;
  if (o.seed) train.seed = *o.seed;

  const auto t0 = std::chrono::steady_clock::now();
  gsa::Vae<float> vae = gsa::init_vae<float>(model, train.seed);
  const auto ids = ds.ids(gsa::Split::kTrain);
  const gsa::VaeTrainLog log = gsa::train_vae(vae, ds, ids, train);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  fs::create_directories(o.out);
  gsa::save_vae(vae, vae_path(o.out, model.z_dim));
  std::cout << "wrote " << vae_path(o.out, model.z_dim).string() << "\n";
  const std::string tag = "z" + std::to_string(model.z_dim);
  gsa::save_latent_table(gsa::encode_pool(vae, ds, ids), o.out / ("latents_" + tag + ".gslt"));
  write_json(o.out / ("vae_" + tag + "_log.json"),
             {{"model", model},
              {"train", train},
              {"epoch_loss", log.epoch_loss},
              {"epoch_reconstruction", log.epoch_reconstruction},
              {"epoch_kl", log.epoch_kl},
              {"wall_clock_seconds", secs}});
  return 0;
}

void write_run(const fs::path& out, const gsa::RunReport& rep, const gsa::Dataset& ds,
               const gsa::LoopState& st) {
  write_json(out / "report.json", gsa::report_json(rep));
  write_text(out / "metrics.csv", gsa::report_csv(rep, ds.spec.classes));
  write_json(out / "timing.json", {{"wall_clock_seconds", rep.wall_clock_seconds}});
  gsa::save_unet(st.seg, out / "segmenter.gsck");
  std::cout << "wrote " << (out / "segmenter.gsck").string() << "\n";
}

int run_loop_cmd(const Options& o, const std::string& strategy, bool resume) {
  const gsa::Dataset ds = load_data(o.data);
  fs::create_directories(o.out);
  const fs::path ck = o.out / "loop.gslp";
  gsa::LoopState st;
  std::unique_ptr<gsa::LoopContext> ctx;
  if (resume) {
    st = gsa::load_checkpoint(ck, ds);
    ctx = std::make_unique<gsa::LoopContext>(ds, load_model(o.data, st.config.z_dim));
  } else {
    gsa::LoopConfig cfg = loop_config(o.config, ds);
    if (o.seed) cfg.seed = *o.seed;
    if (!strategy.empty()) cfg.strategy = gsa::parse_strategy(strategy);
    cfg.validate_against(ds);
    if (cfg.annotator != "oracle") {
      throw Error(ErrorCode::kInvalidArgument, "run-loop needs the oracle annotator; use serve");
    }
    ctx = std::make_unique<gsa::LoopContext>(ds, load_model(o.data, cfg.z_dim));
    st = gsa::start_loop(cfg, *ctx);
  }
  gsa::OracleAnnotator oracle(ds);
  gsa::LoopHooks hooks;
  hooks.checkpoint = ck;
  hooks.on_iteration = [](const gsa::LoopState& s) {
    const auto& row = s.report.rows.back();
    std::printf("iteration %zu: labeled %zu, test dice %.4f\n", row.iteration, row.labeled_count,
                row.mean_dice);
    std::fflush(stdout);
  };
  const gsa::RunReport rep = gsa::resume_loop(st, *ctx, oracle, hooks);
  write_run(o.out, rep, ds, st);
  return 0;
}

// Contexts per z_dim, loaded on first use.
class ContextCache {
 public:
  ContextCache(const gsa::Dataset& ds, fs::path dir) : ds_(ds), dir_(std::move(dir)) {}
  const gsa::LoopContext& get(std::size_t z) {
    auto& slot = cache_[z];
    if (!slot) slot = std::make_unique<gsa::LoopContext>(ds_, load_model(dir_, z));
    return *slot;
  }

 private:
  const gsa::Dataset& ds_;
  fs::path dir_;
  std::map<std::size_t, std::unique_ptr<gsa::LoopContext>> cache_;
};

auto progress(std::map<std::string, double>& seconds) {
  return [&seconds](const std::string& name, std::size_t r, const gsa::RunReport& rep) {
    seconds[name] += rep.wall_clock_seconds;
    std::printf("%s rep %zu: final dice %.4f (%.1fs)\n", name.c_str(), r, rep.final_dice(),
                rep.wall_clock_seconds);
    std::fflush(stdout);
  };
}

int compare_cmd(const Options& o, const std::string& strategies, std::size_t reps) {
  const gsa::Dataset ds = load_data(o.data);
  const gsa::LoopConfig base = loop_config(o.config, ds);
  std::vector<gsa::StrategyRun> runs;
  for (const auto& name : split_list(strategies)) {
    gsa::LoopConfig c = base;
    c.strategy = gsa::parse_strategy(name);
    c.validate_against(ds);
    runs.push_back({name, c});
  }
  if (runs.size() < 2) throw Error(ErrorCode::kInvalidArgument, "--strategies needs at least two names");
  ContextCache contexts(ds, o.data);
  std::map<std::string, double> seconds;
  const gsa::Comparison cmp = gsa::compare_strategies(runs, reps, o.seed.value_or(base.seed),
                                                      contexts.get(base.z_dim), progress(seconds));
  fs::create_directories(o.out);
  write_json(o.out / "comparison.json", cmp);
  write_json(o.out / "timing.json", {{"wall_clock_seconds", seconds}});
  return 0;
}

int ablate_cmd(const Options& o, const std::string& z_dims, const std::string& angular,
               std::size_t reps) {
  const gsa::Dataset ds = load_data(o.data);
  gsa::LoopConfig base = loop_config(o.config, ds);
  base.validate_against(ds);
  std::vector<gsa::AblationPoint> grid;
  for (const auto& z : split_list(z_dims)) {
    for (const auto& a : split_list(angular)) {
      if (a != "on" && a != "off") {
        throw Error(ErrorCode::kInvalidArgument, "--angular takes on/off, got '" + a + "'");
      }
      std::size_t zv = 0;
      try {
        zv = std::stoul(z);
      } catch (const std::exception&) {
        throw Error(ErrorCode::kInvalidArgument, "--z-dims entry '" + z + "' is not a number");
      }
      grid.push_back({zv, a == "on"});
    }
  }
  ContextCache contexts(ds, o.data);
  for (const auto& p : grid) contexts.get(p.z_dim);  // fail before any run starts
  std::map<std::string, double> seconds;
  const gsa::Ablation ab =
      gsa::ablate(grid, base, reps, o.seed.value_or(base.seed),
                  [&](std::size_t z) -> const gsa::LoopContext& { return contexts.get(z); },
                  progress(seconds));
  fs::create_directories(o.out);
  write_json(o.out / "ablation.json", ab);
  write_json(o.out / "timing.json", {{"wall_clock_seconds", seconds}});
  return 0;
}

int evaluate_cmd(const Options& o, const fs::path& model) {
  const gsa::Dataset ds = load_data(o.data);
  const gsa::UNet<float> seg = gsa::load_unet<float>(model);
  if (seg.config.height != ds.spec.height || seg.config.width != ds.spec.width ||
      seg.config.classes != ds.spec.classes) {
    throw Error(ErrorCode::kInvalidArgument, "segmenter does not match the dataset geometry");
  }
  const json j = gsa::evaluate_segmenter(seg, ds);
  std::cout << j.dump(2) << "\n";
  if (!o.out.empty() && o.out != ".") {
    fs::create_directories(o.out);
    write_json(o.out / "evaluation.json", j);
  }
  return 0;
}

int serve_cmd(const Options& o, std::optional<int> port, bool resume) {
  const gsa::Dataset ds = load_data(o.data);
  fs::create_directories(o.out);
  const fs::path ck = o.out / "loop.gslp";
  gsa::LoopState st;
  std::unique_ptr<gsa::LoopContext> ctx;
  if (resume) {
    st = gsa::load_checkpoint(ck, ds);
    ctx = std::make_unique<gsa::LoopContext>(ds, load_model(o.data, st.config.z_dim));
  } else {
    gsa::LoopConfig cfg = loop_config(o.config, ds);
    cfg.annotator = "human";
    if (o.seed) cfg.seed = *o.seed;
    cfg.validate_against(ds);
    ctx = std::make_unique<gsa::LoopContext>(ds, load_model(o.data, cfg.z_dim));
    st = gsa::start_loop(cfg, *ctx);
  }
  const int p = port.value_or(gsa::gateway::env_port());

  gsa::gateway::Session session(*ctx, std::move(st), ck);
  httplib::Server srv;
  gsa::gateway::install_routes(srv, session, [&srv] { srv.stop(); });
  if (!srv.bind_to_port("0.0.0.0", p)) {
    throw Error(ErrorCode::kIo, "cannot bind port " + std::to_string(p) + " (in use?)");
  }
  std::signal(SIGINT, [](int) { g_interrupted = true; });
  std::signal(SIGTERM, [](int) { g_interrupted = true; });
  std::thread watcher([&] {
    for (;;) {
      if (g_interrupted) {
        session.abort();
        srv.stop();
        return;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  });
  session.start();
  std::cout << "serving on port " << p << "\n" << std::flush;
  srv.listen_after_bind();
  g_interrupted = true;
  watcher.join();
  const json final_session = session.session_json();
  write_json(o.out / "report.json", gsa::report_json(session.report()));
  std::cout << "session ended: " << final_session["phase"].get<std::string>() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-guided suggestive annotation for image segmentation"};
  app.require_subcommand(1);
  Options o;
  std::string data_dir = o.data.string(), out_dir = ".";
  std::uint64_t seed = 0;

  auto common = [&](CLI::App* sub, bool with_data) {
    if (with_data) sub->add_option("--data", data_dir, "dataset/VAE directory (default $GS_DATA_DIR)");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--seed", seed, "seed override");
  };

  std::optional<std::size_t> n_train, n_test, z_dim, epochs;
  std::optional<double> kl_weight;
  std::optional<int> port;
  std::string strategy, strategies = "gradient,random", z_dims = "3,10", angular = "on,off";
  std::size_t reps = 10;
  bool resume = false;
  std::string model;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  common(gen, false);
  gen->add_option("--n-train", n_train);
  gen->add_option("--n-test", n_test);

  auto* tv = app.add_subcommand("train-vae", "train the VAE manifold and export the latent table");
  common(tv, true);
  tv->add_option("--z-dim", z_dim);
  tv->add_option("--epochs", epochs);
  tv->add_option("--kl-weight", kl_weight);

  auto* rl = app.add_subcommand("run-loop", "run one annotation loop with the oracle annotator");
  common(rl, true);
  rl->add_option("--strategy", strategy, "random|gradient|oracle");
  rl->add_flag("--resume", resume, "continue from <out>/loop.gslp");

  auto* cmp = app.add_subcommand("compare", "compare strategies over seeded repetitions");
  common(cmp, true);
  cmp->add_option("--strategies", strategies, "comma-separated strategy names");
  cmp->add_option("--reps", reps);

  auto* ab = app.add_subcommand("ablate", "z-dimension and angular-condition ablation");
  common(ab, true);
  ab->add_option("--z-dims", z_dims, "comma-separated latent sizes");
  ab->add_option("--angular", angular, "comma-separated on/off");
  ab->add_option("--reps", reps);

  auto* ev = app.add_subcommand("evaluate", "evaluate a segmenter checkpoint on the test split");
  common(ev, true);
  ev->add_option("--model", model, "segmenter checkpoint")->required();

  auto* sv = app.add_subcommand("serve", "run a human-in-the-loop session over HTTP");
  common(sv, true);
  sv->add_option("--port", port, "listen port (default $GS_PORT or 8080)");
  sv->add_flag("--resume", resume, "continue from <out>/loop.gslp");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    CLI::App* shown = &app;
    for (CLI::App* s : app.get_subcommands()) shown = s;
    std::cerr << shown->help();
    return kExitUsage;
  }

  o.data = data_dir;
  o.out = out_dir;
  for (CLI::App* s : app.get_subcommands()) {
    if (s->count("--seed")) o.seed = seed;
  }

  try {
    if (*gen) return gen_data(o, n_train, n_test);
    if (*tv) return train_vae_cmd(o, z_dim, epochs, kl_weight);
    if (*rl) return run_loop_cmd(o, strategy, resume);
    if (*cmp) return compare_cmd(o, strategies, reps);
    if (*ab) return ablate_cmd(o, z_dims, angular, reps);
    if (*ev) return evaluate_cmd(o, model);
    if (*sv) return serve_cmd(o, port, resume);
  } catch (const Error& e) {
    std::cerr << "error: " << gsa::to_string(e.code()) << ": " << e.what() << "\n";
    const bool usage = e.code() == ErrorCode::kInvalidArgument || e.code() == ErrorCode::kBudget;
    return usage ? kExitUsage : kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
