// ============================================================================
// cli.hpp -- the `ulidar` command-line front end
//
//   ulidar [--threads N] [--config run.ini] <subcommand> [flags]
//
// Every flag may also come from the config file, one [section] per
// subcommand; unknown keys are rejected. Each command writes the resolved
// configuration next to its main output as `<output>.ini`.
//
// Exit codes: 0 success, 1 usage error, 2 data or model error. All messages
// go to the diagnostic stream.
// ============================================================================
#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "bayes.hpp"
#include "io.hpp"
#include "metrics.hpp"
#include "multiscale.hpp"
#include "parallel.hpp"
#include "simulate.hpp"
#include "unroll/network.hpp"
#include "unroll/train.hpp"
#include "unroll/weights_io.hpp"

namespace ulidar::cli {

namespace fs = std::filesystem;

struct SimulateOpts {
  std::size_t rows = 64, cols = 64, bins = 256;
  double ppp = 4.0, sbr = 1.0, irf_sigma = 2.0;
  std::string scene = "planes";
  std::uint64_t seed = 0;
  std::string out, truth;
};

struct ExtractOpts {
  std::string cube, out;
  double irf_sigma = 2.0;
  std::size_t scales = 12;
};

struct BayesOpts {
  std::string cube, out, uncertainty;
  double irf_sigma = 2.0;
  std::size_t scales = 4;
  BayesParams params;
};

struct UnrollOpts {
  std::string cube, weights, out, uncertainty, trace;
  double irf_sigma = 2.0;
};

struct TrainOpts {
  std::vector<std::string> data;
  double irf_sigma = 2.0;
  std::size_t samples = 128, patch = 32, bins = 256;
  double ppp = 4.0, sbr = 1.0;
  int stages = 4, scales = 12;
  unroll::TrainConfig train;
  std::string out;
};

struct EvalOpts {
  std::string pred, truth, report;
  CannyParams canny;
};

struct PlyOpts {
  std::string depth, intensity, out;
  std::size_t bins = 256;
};

namespace detail {

inline void write_map(const fs::path& p, const Grid<double>& g) {
  if (p.extension() == ".csv") {
    io::write_csv(p, g);
  } else {
    io::write_pfm(p, g);
  }
}

inline std::string ini_quote(const std::string& v) {
  std::string out = "\"";
  for (char ch : v) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch;
  }
  return out + "\"";
}

/// Writes the active subcommand's resolved options as one INI section that
/// `--config` accepts back. Options with neither a value nor a default are
/// left out.
inline void echo_config(const CLI::App& sub, const fs::path& output) {
  std::ostringstream ini;
  ini << "[" << sub.get_name() << "]\n";
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string key = opt->get_single_name();
    if (key.empty() || key == "help" || !opt->get_configurable()) continue;
    std::vector<std::string> vals = opt->results();
    if (vals.empty() && !opt->get_default_str().empty()) vals = {opt->get_default_str()};
    if (vals.empty()) continue;
    ini << key << "=";
    if (vals.size() == 1) {
      ini << ini_quote(vals[0]);
    } else {
      ini << "[";
      for (std::size_t i = 0; i < vals.size(); ++i) ini << (i ? "," : "") << ini_quote(vals[i]);
      ini << "]";
    }
    ini << "\n";
  }
  fs::path p = output;
  p += ".ini";
  auto os = io::detail::open_out(p);
  os << ini.str();
}

inline std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

inline Irf cube_irf(const HistogramCube& cube, double sigma) {
  return make_gaussian_irf(cube.bins(), 0.0, sigma);
}

/// Training pairs from `<name>.spc` cubes with `<name>.gt.pfm` ground truth.
inline std::vector<unroll::Sample> load_dataset(const std::vector<std::string>& dirs,
                                                double irf_sigma, std::size_t scales) {
  std::vector<fs::path> cubes;
  for (const auto& d : dirs) {
    if (!fs::is_directory(d)) throw Error("data directory '" + d + "' not found");
    for (const auto& e : fs::directory_iterator(d)) {
      if (e.path().extension() == ".spc") cubes.push_back(e.path());
    }
  }
  std::sort(cubes.begin(), cubes.end());
  if (cubes.empty()) throw Error("no .spc cubes in the data directories");
  std::vector<unroll::Sample> out;
  for (const auto& c : cubes) {
    fs::path gt = c;
    gt.replace_extension(".gt.pfm");
    const HistogramCube cube = io::read_cube(c);
    const DepthMap truth(io::read_pfm(gt));
    if (truth.rows() != cube.rows() || truth.cols() != cube.cols()) {
      throw Error("ground truth " + gt.string() + " is " +
                  shape_str(truth.rows(), truth.cols()) + " but cube is " +
                  shape_str(cube.rows(), cube.cols()));
    }
    const Irf irf = cube_irf(cube, irf_sigma);
    auto st = build_stack(cube, irf, ScaleSpec::with_scales(scales));
    out.push_back({unroll::stack_tensor<float>(st.stack), truth.grid()});
  }
  return out;
}

}  // namespace detail

// ============================================================================
// Commands
// ============================================================================

inline void run_simulate(const SimulateOpts& o, std::ostream& log) {
  Scene scene;
  if (o.scene.ends_with(".pfm")) {
    scene = scene_from_depth(DepthMap(io::read_pfm(o.scene)));
  } else {
    scene = make_scene(parse_scene_preset(o.scene), o.rows, o.cols, o.seed);
  }
  const Irf irf = make_gaussian_irf(o.bins, 0.0, o.irf_sigma);
  const NoiseSpec noise{o.ppp, o.sbr, o.seed};
  const Scene scaled = apply_noise_level(scene, o.bins, noise);
  const auto sampled = sample_cube_with_stats(scaled, irf, o.bins, o.seed);
  io::write_cube(o.out, sampled.cube);
  if (!o.truth.empty()) detail::write_map(o.truth, scene.depth.grid());
  const std::size_t pixels = sampled.cube.pixels();
  log << "simulate: wrote " << o.out << " (" << sampled.cube.rows() << "x"
      << sampled.cube.cols() << "x" << sampled.cube.bins() << ")\n"
      << "simulate: empirical PPP " << detail::fmt(sampled.stats.ppp(pixels))
      << " (target " << o.ppp << "), SBR " << detail::fmt(sampled.stats.sbr())
      << " (target " << o.sbr << ")\n";
}

inline void run_extract(const ExtractOpts& o, std::ostream& log) {
  const HistogramCube cube = io::read_cube(o.cube);
  const ScaleSpec spec = ScaleSpec::with_scales(o.scales);
  auto st = build_stack(cube, detail::cube_irf(cube, o.irf_sigma), spec);
  fs::create_directories(o.out);
  std::ofstream manifest(fs::path(o.out) / "manifest.txt");
  if (!manifest) throw Error("cannot write manifest in '" + o.out + "'");
  manifest << "# plane file temporal_kernel spatial_kernel\n";
  std::size_t l = 0;
  for (std::size_t kt : spec.temporal) {
    for (std::size_t ks : spec.spatial) {
      std::ostringstream name;
      name << "plane_" << std::setw(2) << std::setfill('0') << l + 1 << ".pfm";
      io::write_pfm(fs::path(o.out) / name.str(), st.stack.plane(l).grid());
      manifest << l + 1 << ' ' << name.str() << ' ' << kt << ' ' << ks << '\n';
      ++l;
    }
  }
  log << "extract: wrote " << l << " planes to " << o.out << "\n";
}

inline void run_bayes_cmd(const BayesOpts& o, std::ostream& log) {
  const HistogramCube cube = io::read_cube(o.cube);
  const auto res = bayes_from_cube(cube, detail::cube_irf(cube, o.irf_sigma),
                                   ScaleSpec::with_scales(o.scales), o.params);
  detail::write_map(o.out, res.depth.grid());
  if (!o.uncertainty.empty()) detail::write_map(o.uncertainty, res.uncertainty.grid());
  log << "bayes: " << res.iterations << " iterations, "
      << (res.converged ? "converged" : "stopped at the iteration limit") << "\n";
}

inline void run_unroll_cmd(const UnrollOpts& o, std::ostream& log) {
  const HistogramCube cube = io::read_cube(o.cube);
  const auto weights = unroll::read_weights<float>(o.weights);
  const auto& cfg = weights.config;
  auto st = build_stack(cube, detail::cube_irf(cube, o.irf_sigma),
                        ScaleSpec::with_scales(static_cast<std::size_t>(cfg.scales)));
  const auto fwd = unroll::forward(unroll::stack_tensor<float>(st.stack), weights,
                                   unroll::SelectMode::kInfer);
  Grid<double> x = unroll::to_grid(fwd.output());
  for (double& v : x.values()) v = std::clamp(v, 0.0, 1.0);
  detail::write_map(o.out, x);
  if (!o.uncertainty.empty()) {
    detail::write_map(o.uncertainty, unroll::uncertainty(fwd, cfg));
  }
  if (!o.trace.empty()) {
    const auto delta = unroll::stage_change(fwd);
    for (std::size_t k = 0; k < fwd.stages.size(); ++k) {
      const fs::path dir = fs::path(o.trace) / ("stage_" + std::to_string(k + 1));
      fs::create_directories(dir);
      const auto& c = fwd.stages[k];
      io::write_pfm(dir / "x.pfm", unroll::to_grid(c.x));
      io::write_pfm(dir / "delta.pfm", delta[k]);
      for (std::size_t l = 0; l < c.logits.channels; ++l) {
        const std::string s = std::to_string(l + 1);
        io::write_pfm(dir / ("select_" + s + ".pfm"), unroll::to_grid(c.logits, l));
        if (c.wbar.size()) {
          io::write_pfm(dir / ("wbar_" + s + ".pfm"), unroll::to_grid(c.wbar, l));
          io::write_pfm(dir / ("refined_" + s + ".pfm"), unroll::to_grid(c.d_out, l));
        }
      }
    }
  }
  log << "unroll: K=" << cfg.stages << " L=" << cfg.scales << ", wrote " << o.out << "\n";
}

inline void run_train(const TrainOpts& o, std::ostream& log) {
  std::vector<unroll::Sample> data;
  if (!o.data.empty()) {
    data = detail::load_dataset(o.data, o.irf_sigma, static_cast<std::size_t>(o.scales));
  } else {
    unroll::DatasetSpec ds;
    ds.count = o.samples;
    ds.rows = ds.cols = o.patch;
    ds.bins = o.bins;
    ds.irf_sigma = o.irf_sigma;
    ds.noise = {{o.ppp, o.sbr, 0}};
    ds.scales = static_cast<std::size_t>(o.scales);
    ds.seed = o.train.seed;
    data = unroll::make_procedural_dataset(ds);
  }
  unroll::NetConfig cfg;
  cfg.stages = o.stages;
  cfg.scales = o.scales;
  cfg.seed = o.train.seed;
  log << "train: " << data.size() << " samples, K=" << cfg.stages << " L=" << cfg.scales
      << ", " << unroll::count_parameters(cfg) << " parameters\n";
  const auto t0 = std::chrono::steady_clock::now();
  auto res = unroll::train(data, unroll::init_weights<float>(cfg), o.train,
                           [&](const unroll::EpochLog& e) {
                             const double s = std::chrono::duration<double>(
                                                  std::chrono::steady_clock::now() - t0)
                                                  .count();
                             log << "train: epoch " << e.epoch + 1 << " loss "
                                 << detail::fmt(e.mean_loss, 6) << " lr " << e.lr
                                 << " (" << detail::fmt(s, 1) << " s)\n";
                           });
  unroll::write_weights(o.out, res.weights);
  log << "train: wrote " << o.out << "\n";
}

inline void run_eval(const EvalOpts& o, std::ostream& log) {
  const Grid<double> pred = io::read_pfm(o.pred);
  const Grid<double> truth = io::read_pfm(o.truth);
  if (!pred.same_shape(truth)) {
    throw Error("eval: prediction is " + shape_str(pred) + " but truth is " +
                shape_str(truth));
  }
  const EdgeSet edges = canny_edges(truth, o.canny);
  nlohmann::ordered_json r;
  r["dae"] = dae(pred, truth);
  r["see"] = see(pred, truth, edges);
  r["rmse"] = rmse(pred, truth);
  r["shape"] = {pred.rows(), pred.cols()};
  r["edge_pixels"] = edges.size();
  r["canny"] = {{"sigma", o.canny.sigma}, {"low", o.canny.low}, {"high", o.canny.high}};
  const std::string text = r.dump(2) + "\n";
  if (o.report.empty()) {
    log << text;
  } else {
    auto os = io::detail::open_out(o.report);
    os << text;
    log << "eval: DAE " << detail::fmt(r["dae"].get<double>(), 6) << " SEE "
        << detail::fmt(r["see"].get<double>(), 6) << " RMSE "
        << detail::fmt(r["rmse"].get<double>(), 6) << ", wrote " << o.report << "\n";
  }
}

inline void run_export_ply(const PlyOpts& o, std::ostream& log) {
  const DepthMap depth(io::read_pfm(o.depth));
  Grid<double> intensity;
  if (!o.intensity.empty()) intensity = io::read_pfm(o.intensity);
  const std::string ply =
      io::export_ply(depth, o.bins, o.intensity.empty() ? nullptr : &intensity);
  auto os = io::detail::open_out(o.out);
  os << ply;
  log << "export-ply: wrote " << depth.size() << " vertices to " << o.out << "\n";
}

// ============================================================================
// Dispatch
// ============================================================================

/// Parses `args` (without the program name) and runs one subcommand.
inline int dispatch(const std::vector<std::string>& args, std::ostream& log = std::cerr) {
  CLI::App app{"Single-photon Lidar depth and uncertainty reconstruction", "ulidar"};
  app.set_config("--config", "", "INI/TOML file with one section per subcommand");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);
  app.fallthrough();
  int threads = thread_count();
  app.add_option("--threads", threads, "worker threads for the parallel kernels")
      ->envname("SPAD_THREADS")
      ->check(CLI::PositiveNumber);

  SimulateOpts sim;
  auto* c_sim = app.add_subcommand("simulate", "simulate a photon histogram cube");
  c_sim->add_option("--rows", sim.rows)->check(CLI::PositiveNumber)->capture_default_str();
  c_sim->add_option("--cols", sim.cols)->check(CLI::PositiveNumber)->capture_default_str();
  c_sim->add_option("--bins", sim.bins)->check(CLI::Range(2, 1 << 20))->capture_default_str();
  c_sim->add_option("--ppp", sim.ppp)->check(CLI::PositiveNumber)->capture_default_str();
  c_sim->add_option("--sbr", sim.sbr)->check(CLI::PositiveNumber)->capture_default_str();
  c_sim->add_option("--irf-sigma", sim.irf_sigma)->check(CLI::PositiveNumber)->capture_default_str();
  c_sim->add_option("--scene", sim.scene, "preset (flat, step, planes, spheres, random) or depth .pfm")
      ->capture_default_str();
  c_sim->add_option("--seed", sim.seed)->required();
  c_sim->add_option("--out", sim.out, "output cube (.spc)")->required();
  c_sim->add_option("--truth", sim.truth, "also write the ground-truth depth map");

  ExtractOpts ext;
  auto* c_ext = app.add_subcommand("extract", "multiscale maximum-likelihood depth planes");
  c_ext->add_option("--cube", ext.cube)->required()->check(CLI::ExistingFile);
  c_ext->add_option("--irf-sigma", ext.irf_sigma)->check(CLI::PositiveNumber)->capture_default_str();
  c_ext->add_option("--scales", ext.scales)->check(CLI::IsMember({4, 8, 12}))->capture_default_str();
  c_ext->add_option("--out", ext.out, "output directory")->required();

  BayesOpts bay;
  auto* c_bay = app.add_subcommand("bayes", "iterative Bayesian reconstruction");
  c_bay->add_option("--cube", bay.cube)->required()->check(CLI::ExistingFile);
  c_bay->add_option("--irf-sigma", bay.irf_sigma)->check(CLI::PositiveNumber)->capture_default_str();
  c_bay->add_option("--scales", bay.scales)->check(CLI::IsMember({4, 8, 12}))->capture_default_str();
  c_bay->add_option("--alpha", bay.params.alpha)->check(CLI::PositiveNumber)->capture_default_str();
  c_bay->add_option("--beta", bay.params.beta)->check(CLI::PositiveNumber)->capture_default_str();
  c_bay->add_option("--tol", bay.params.tol)->check(CLI::PositiveNumber)->capture_default_str();
  c_bay->add_option("--max-iters", bay.params.max_iters)->check(CLI::PositiveNumber)->capture_default_str();
  c_bay->add_option("--out", bay.out, "depth map (.pfm or .csv)")->required();
  c_bay->add_option("--uncertainty", bay.uncertainty, "uncertainty map (.pfm or .csv)");

  UnrollOpts unr;
  auto* c_unr = app.add_subcommand("unroll", "reconstruction with a trained unrolled network");
  c_unr->add_option("--cube", unr.cube)->required()->check(CLI::ExistingFile);
  c_unr->add_option("--weights", unr.weights)->required()->check(CLI::ExistingFile);
  c_unr->add_option("--irf-sigma", unr.irf_sigma)->check(CLI::PositiveNumber)->capture_default_str();
  c_unr->add_option("--out", unr.out, "depth map (.pfm or .csv)")->required();
  c_unr->add_option("--uncertainty", unr.uncertainty, "uncertainty map (.pfm or .csv)");
  c_unr->add_option("--trace", unr.trace, "directory for per-stage intermediate maps");

  TrainOpts trn;
  auto* c_trn = app.add_subcommand("train", "train the unrolled network");
  c_trn->add_option("--data", trn.data, "directories of NAME.spc + NAME.gt.pfm pairs; "
                                        "procedural scenes when omitted");
  c_trn->add_option("--irf-sigma", trn.irf_sigma)->check(CLI::PositiveNumber)->capture_default_str();
  c_trn->add_option("--samples", trn.samples, "procedural training patches")
      ->check(CLI::PositiveNumber)->capture_default_str();
  c_trn->add_option("--patch", trn.patch)->check(CLI::PositiveNumber)->capture_default_str();
  c_trn->add_option("--bins", trn.bins)->check(CLI::Range(2, 1 << 20))->capture_default_str();
  c_trn->add_option("--ppp", trn.ppp)->check(CLI::PositiveNumber)->capture_default_str();
  c_trn->add_option("--sbr", trn.sbr)->check(CLI::PositiveNumber)->capture_default_str();
  c_trn->add_option("--stages", trn.stages)->check(CLI::Range(2, 64))->capture_default_str();
  c_trn->add_option("--scales", trn.scales)->check(CLI::IsMember({4, 8, 12}))->capture_default_str();
  c_trn->add_option("--epochs", trn.train.epochs)->check(CLI::NonNegativeNumber)->capture_default_str();
  c_trn->add_option("--batch", trn.train.batch_size)->check(CLI::PositiveNumber)->capture_default_str();
  c_trn->add_option("--lr", trn.train.lr)->check(CLI::NonNegativeNumber)->capture_default_str();
  c_trn->add_option("--decay-epoch", trn.train.decay_epoch)->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  c_trn->add_option("--seed", trn.train.seed)->required();
  c_trn->add_option("--out", trn.out, "weights file (.urw)")->required();

  EvalOpts ev;
  auto* c_ev = app.add_subcommand("eval", "DAE, SEE and RMSE against ground truth");
  c_ev->add_option("--pred", ev.pred)->required()->check(CLI::ExistingFile);
  c_ev->add_option("--truth", ev.truth)->required()->check(CLI::ExistingFile);
  c_ev->add_option("--report", ev.report, "JSON report file");
  c_ev->add_option("--canny-sigma", ev.canny.sigma)->check(CLI::NonNegativeNumber)->capture_default_str();
  c_ev->add_option("--canny-low", ev.canny.low)->check(CLI::Range(0.0, 1.0))->capture_default_str();
  c_ev->add_option("--canny-high", ev.canny.high)->check(CLI::Range(0.0, 1.0))->capture_default_str();

  PlyOpts ply;
  auto* c_ply = app.add_subcommand("export-ply", "depth map to an ASCII point cloud");
  c_ply->add_option("--depth", ply.depth)->required()->check(CLI::ExistingFile);
  c_ply->add_option("--intensity", ply.intensity)->check(CLI::ExistingFile);
  c_ply->add_option("--bins", ply.bins)->check(CLI::PositiveNumber)->capture_default_str();
  c_ply->add_option("--out", ply.out)->required();

  if (args.empty()) {
    log << app.help();
    return 1;
  }
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    log << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, log, log);
    if (code == 0) return 0;
    if (app.get_subcommands().empty()) log << app.help();
    return 1;
  }

  try {
    set_thread_count(threads);
    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "simulate") {
      run_simulate(sim, log);
      detail::echo_config(*sub, sim.out);
    } else if (name == "extract") {
      run_extract(ext, log);
      detail::echo_config(*sub, fs::path(ext.out) / "extract");
    } else if (name == "bayes") {
      bay.params.validate();
      run_bayes_cmd(bay, log);
      detail::echo_config(*sub, bay.out);
    } else if (name == "unroll") {
      run_unroll_cmd(unr, log);
      detail::echo_config(*sub, unr.out);
    } else if (name == "train") {
      run_train(trn, log);
      detail::echo_config(*sub, trn.out);
    } else if (name == "eval") {
      run_eval(ev, log);
      if (!ev.report.empty()) detail::echo_config(*sub, ev.report);
    } else if (name == "export-ply") {
      run_export_ply(ply, log);
      detail::echo_config(*sub, ply.out);
    }
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

inline int dispatch(int argc, const char* const* argv, std::ostream& log = std::cerr) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, log);
}

}  // namespace ulidar::cli
