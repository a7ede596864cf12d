#include "svfuse/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>

#include "svfuse/bench.hpp"
#include "svfuse/checkpoint.hpp"

namespace svfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Options {
  std::string config, out, data;
  std::optional<std::uint64_t> seed;
  bool print_config = false;
  std::optional<int> frames, steps, horizon;
  std::optional<std::string> scene;
  bool no_velocity_loss = false, from_scratch = false, timing = false, export_ply = false;
  std::string input, output;
};

RunConfig resolve(const Options& o, const std::string& stage) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  c.stage = stage;
  if (o.seed) c.seed = *o.seed;
  if (!o.out.empty()) c.paths.out = o.out;
  if (!o.data.empty()) c.paths.data = o.data;
  if (o.frames) c.frames = *o.frames;
  if (o.steps) (stage == "depth" ? c.depth.steps : c.ssl.steps) = *o.steps;
  if (o.horizon) c.ssl.history_horizon = *o.horizon;
  if (o.scene) c.depth.scene = *o.scene;
  if (o.no_velocity_loss) c.ssl.velocity_loss = false;
  if (o.from_scratch) c.ssl.from_scratch = true;
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json header(const RunConfig& c) {
  return {{"config_hash", config_hash(c)}, {"seed", c.seed}, {"version", version_string()}};
}

DepthRefiner<float> load_depth(const RunConfig& c, bool allow_scratch) {
  DepthRefiner<float> m = make_depth_model(c);
  if (allow_scratch && c.ssl.from_scratch) return m;
  const fs::path p = c.depth_checkpoint_path();
  if (!fs::exists(p)) throw DataError("missing depth checkpoint " + p.string() + " (run train-depth first)");
  nn::ParamList<float> params;
  m.collect(params);
  load_checkpoint(p, params);
  return m;
}

int run_simulate(const RunConfig& c) {
  for (int id : {0, 1}) {
    const fs::path dir = make_sequence(c.sim_for(id), c.frames, c.paths.data);
    std::cerr << "wrote " << c.frames << " frames to " << dir.string() << "\n";
  }
  return 0;
}

int run_train_depth(const RunConfig& c) {
  DepthTrainResult r = train_stage1(c);
  const fs::path out(c.paths.out);
  nn::ParamList<float> params;
  r.model.collect(params);
  fs::create_directories(out);
  save_checkpoint(c.depth_checkpoint_path(), params);
  std::string log;
  for (const auto& e : r.log) log += json{{"step", e.step}, {"loss", e.loss}, {"val_mae", e.mae}}.dump() + "\n";
  write_text(out / "depth_log.jsonl", log);
  json rep = header(c);
  rep["scene"] = c.depth.scene;
  rep["steps"] = c.depth.steps;
  rep["initial_loss"] = r.initial_loss;
  rep["final_loss"] = r.final_loss;
  rep["nn_init_mae"] = r.baseline_mae;
  rep["final_mae"] = r.final_mae;
  write_json(out / "depth_report.json", rep);
  std::cerr << "depth: val MAE " << r.final_mae << " m (nearest-neighbour fill " << r.baseline_mae << " m), checkpoint "
            << c.depth_checkpoint_path().string() << "\n";
  return 0;
}

int run_train_ssl(const RunConfig& c) {
  const DepthRefiner<float> depth = load_depth(c, true);
  const SequenceData train = prepare_sequence(fs::path(c.paths.data) / "seq_0", c, depth);
  SslModel model(c, depth.cfg.channels);
  const SslTrainResult r = train_stage2(c, model, train);
  const fs::path out(c.paths.out);
  save_checkpoint(c.ssl_checkpoint_path(), model.params());
  std::string log;
  const int every = std::max(1, c.ssl.log_every);
  for (const auto& e : r.log)
    if (e.step % every == 0 || e.step == c.ssl.steps)
      log += json{{"step", e.step}, {"occ", e.occ}, {"vel", e.vel}, {"total", e.total}}.dump() + "\n";
  write_text(out / ("ssl_" + c.tag() + "_log.jsonl"), log);
  json rep = header(c);
  rep["tag"] = c.tag();
  rep["steps"] = c.ssl.steps;
  if (!r.log.empty()) {
    rep["first_occ"] = r.log.front().occ;
    rep["last_occ"] = r.log.back().occ;
  }
  write_json(out / ("ssl_" + c.tag() + "_report.json"), rep);
  std::cerr << "ssl: " << c.ssl.steps << " steps, checkpoint " << c.ssl_checkpoint_path().string() << "\n";
  return 0;
}

int run_forecast(const RunConfig& c, const Options& o) {
  const fs::path ckpt = c.ssl_checkpoint_path();
  if (!fs::exists(ckpt)) throw DataError("missing checkpoint " + ckpt.string() + " (run train-ssl first)");
  const DepthRefiner<float> depth = load_depth(c, true);
  SslModel model(c, depth.cfg.channels);
  load_checkpoint(ckpt, model.params());
  const SequenceData eval = prepare_sequence(fs::path(c.paths.data) / "seq_1", c, depth);
  const fs::path out(c.paths.out);
  const fs::path ply = out / ("ply_" + c.tag());
  const auto t0 = std::chrono::steady_clock::now();
  ForecastReport rep = run_forecast_benchmark(c, model, eval, o.export_ply ? &ply : nullptr);
  if (o.timing) rep.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const fs::path path = out / ("forecast_" + c.tag() + ".json");
  write_json(path, rep);
  for (const auto& [k, v] : rep.metrics)
    std::cerr << k << ": model " << v << " m^2, static baseline " << rep.baseline.at(k) << " m^2\n";
  std::cerr << "report " << path.string() << "\n";
  return 0;
}

int run_eval(const RunConfig& c) {
  const DepthRefiner<float> depth = load_depth(c, false);
  const DepthEvaluation e = evaluate_depth(c, depth);
  json rep = header(c);
  rep["scene"] = c.depth.scene;
  rep["examples"] = e.examples;
  rep["pixels"] = e.pixels;
  rep["refined"] = {{"mae", e.refined.mae}, {"rmse", std::sqrt(e.refined.mse)}};
  rep["nn_init"] = {{"mae", e.nn_init.mae}, {"rmse", std::sqrt(e.nn_init.mse)}};
  const fs::path path = fs::path(c.paths.out) / "eval_depth.json";
  write_json(path, rep);
  std::cerr << "depth MAE " << e.refined.mae << " m, nearest-neighbour fill " << e.nn_init.mae << " m; report "
            << path.string() << "\n";
  return 0;
}

int run_export_ply(const Options& o) {
  fs::path out = o.output.empty() ? fs::path(o.input).replace_extension(".ply") : fs::path(o.output);
  write_ply(out, read_lrpc(o.input));
  std::cerr << "wrote " << out.string() << "\n";
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"Sparse voxel camera/LiDAR fusion with occupancy and velocity forecasting"};
  app.name("svfuse");
  Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--seed", o.seed, "Run seed");
    sub->add_option("--out", o.out, "Output directory");
    sub->add_option("--data", o.data, "Dataset root (holds seq_0 and seq_1)");
    sub->add_flag("--print-config", o.print_config, "Print the resolved configuration and exit");
  };
  common(&app);

  auto* simulate = app.add_subcommand("simulate", "Generate the training and evaluation sequences");
  common(simulate);
  simulate->add_option("--frames", o.frames, "Frames per sequence");

  auto* depth = app.add_subcommand("train-depth", "Stage 1: train depth refinement");
  common(depth);
  depth->add_option("--steps", o.steps, "Optimizer steps");
  depth->add_option("--scene", o.scene, "sequence or plane");

  auto* ssl = app.add_subcommand("train-ssl", "Stage 2: self-supervised occupancy and velocity training");
  common(ssl);
  ssl->add_option("--steps", o.steps, "Optimizer steps");
  ssl->add_option("--history-horizon", o.horizon, "Input history in seconds (0, 1 or 3)");
  ssl->add_flag("--no-velocity-loss", o.no_velocity_loss, "Train without the velocity term");
  ssl->add_flag("--from-scratch", o.from_scratch, "Use an untrained depth network");

  auto* forecast = app.add_subcommand("forecast", "Point-cloud forecasting benchmark");
  common(forecast);
  forecast->add_option("--history-horizon", o.horizon, "Input history in seconds (0, 1 or 3)");
  forecast->add_flag("--no-velocity-loss", o.no_velocity_loss, "Evaluate the model trained without velocity loss");
  forecast->add_flag("--from-scratch", o.from_scratch, "Use an untrained depth network");
  forecast->add_flag("--timing", o.timing, "Record runtime_s in the report");
  forecast->add_flag("--export-ply", o.export_ply, "Write PLY clouds of the first window");

  auto* eval = app.add_subcommand("eval", "Depth metrics of the stage-1 model on the evaluation set");
  common(eval);
  eval->add_option("--scene", o.scene, "sequence or plane");

  auto* ply = app.add_subcommand("export-ply", "Convert a .lrpc cloud to ASCII PLY");
  ply->add_option("input", o.input, "Input .lrpc file")->required();
  ply->add_option("-o,--output", o.output, "Output .ply file");

  app.require_subcommand(0, 1);
  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  static const std::map<std::string, std::string> stage_of{
      {"simulate", "ssl"}, {"train-depth", "depth"}, {"train-ssl", "ssl"}, {"forecast", "forecast"}, {"eval", "eval"}};
  const auto subs = app.get_subcommands();
  try {
    if (subs.empty()) {
      if (o.print_config) {
        std::cout << json(resolve(o, "ssl")).dump(2) << "\n";
        return 0;
      }
      std::cerr << app.help();
      return 1;
    }
    const std::string name = subs.front()->get_name();
    if (name == "export-ply") return run_export_ply(o);
    const RunConfig c = resolve(o, stage_of.at(name));
    if (o.print_config) {
      std::cout << json(c).dump(2) << "\n";
      return 0;
    }
    if (name == "simulate") return run_simulate(c);
    if (name == "train-depth") return run_train_depth(c);
    if (name == "train-ssl") return run_train_ssl(c);
    if (name == "forecast") return run_forecast(c, o);
    return run_eval(c);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int cli_main(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_main(args);
}

}  // namespace svfuse
