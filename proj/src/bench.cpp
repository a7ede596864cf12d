#include "svfuse/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "svfuse/binary_io.hpp"
#include "svfuse/chamfer.hpp"
#include "svfuse/parallel.hpp"
#include "svfuse/sim_json.hpp"

namespace svfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

std::string cd_key(int in, int out) { return "cd_" + std::to_string(in) + "in_" + std::to_string(out) + "out"; }

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericError("non-finite " + what);
}

template <typename T>
json array_json(const T& a) {
  json j = json::array();
  for (const auto& v : a) j.push_back(v);
  return j;
}

template <std::size_t N, typename T>
void read_array(const json& j, const char* key, std::array<T, N>& out) {
  if (auto it = j.find(key); it != j.end()) {
    const auto v = it->template get<std::vector<T>>();
    if (v.size() != N) throw std::invalid_argument(std::string(key) + ": expected " + std::to_string(N) + " values");
    std::copy(v.begin(), v.end(), out.begin());
  }
}

// cosine decay to 5% of the base rate over the run
float cosine_lr(double base, int step, int steps) {
  const double x = steps > 1 ? double(step - 1) / double(steps - 1) : 0.0;
  return float(base * (0.05 + 0.95 * 0.5 * (1.0 + std::cos(std::numbers::pi * x))));
}

Eigen::Matrix3Xd directions_of(const PointCloud& c) {
  Eigen::Matrix3Xd d(3, c.size());
  for (Eigen::Index i = 0; i < c.size(); ++i) d.col(i) = c.ray_direction(i);
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

GridSpec GridConfig::spec() const {
  GridSpec s;
  s.base_size = voxel_size;
  s.extent = Eigen::AlignedBox3d(Eigen::Vector3d(extent_min[0], extent_min[1], extent_min[2]),
                                 Eigen::Vector3d(extent_max[0], extent_max[1], extent_max[2]));
  return s;
}

void RunConfig::validate() const {
  static const std::vector<std::string> stages{"depth", "ssl", "forecast", "eval"};
  if (std::find(stages.begin(), stages.end(), stage) == stages.end())
    throw std::invalid_argument("stage must be one of depth, ssl, forecast, eval");
  if (ssl.history_horizon != 0 && ssl.history_horizon != 1 && ssl.history_horizon != 3)
    throw std::invalid_argument("history_horizon must be 0, 1 or 3");
  if (ssl.steps < 0 || depth.steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (frames < 1) throw std::invalid_argument("frames must be >= 1");
  if (!(grid.voxel_size > 0)) throw std::invalid_argument("voxel_size must be positive");
  for (int k = 0; k < 3; ++k)
    if (!(grid.extent_min[std::size_t(k)] < grid.extent_max[std::size_t(k)]))
      throw std::invalid_argument("extent_min must be below extent_max");
  if (model.channels < 1 || model.lidar_hidden < 1 || model.window_radius < 0 || model.heads < 1 ||
      model.channels % model.heads != 0)
    throw std::invalid_argument("invalid model dimensions");
  if (depth.scene != "sequence" && depth.scene != "plane") throw std::invalid_argument("depth.scene must be sequence or plane");
  if (!(depth.plane_min > 0) || depth.plane_min > depth.plane_max || !(depth.plane_density > 0) || depth.plane_noise < 0)
    throw std::invalid_argument("invalid plane scene");
  if (!(ssl.history_stride > 0)) throw std::invalid_argument("history_stride must be positive");
  if (ssl.rays_per_frame < 1 || ssl.free_per_ray < 0)
    throw std::invalid_argument("invalid label sampling");
  if (ssl.supervision_times.empty()) throw std::invalid_argument("supervision_times must not be empty");
  if (forecast.out_horizons.empty()) throw std::invalid_argument("out_horizons must not be empty");
  for (int h : forecast.out_horizons)
    if (h < 1) throw std::invalid_argument("out_horizons must be positive");
  if (forecast.windows < 1 || !(forecast.tau > 0 && forecast.tau < 1) || forecast.march_step < 0 ||
      !(forecast.max_range > 0))
    throw std::invalid_argument("invalid forecast settings");
  sim.validate();
}

SimConfig RunConfig::sim_for(int id) const {
  SimConfig s = sim;
  s.seed = seed + std::uint64_t(id);
  s.sequence_id = id;
  return s;
}

std::string RunConfig::tag() const {
  return "h" + std::to_string(ssl.history_horizon) + (ssl.velocity_loss ? "" : "_novel");
}

fs::path RunConfig::depth_checkpoint_path() const {
  return paths.depth_checkpoint.empty() ? fs::path(paths.out) / "depth.svwt" : fs::path(paths.depth_checkpoint);
}

fs::path RunConfig::ssl_checkpoint_path() const {
  return paths.ssl_checkpoint.empty() ? fs::path(paths.out) / ("ssl_" + tag() + ".svwt") : fs::path(paths.ssl_checkpoint);
}

void to_json(json& j, const DecoderConfig& c) {
  j = {{"hidden", c.hidden},
       {"hidden_layers", c.hidden_layers},
       {"frequencies", c.frequencies},
       {"position_scale", c.position_scale},
       {"time_scale", c.time_scale},
       {"velocity_scale", c.velocity_scale}};
}

void from_json(const json& j, DecoderConfig& c) {
  reject_unknown_keys(j, {"hidden", "hidden_layers", "frequencies", "position_scale", "time_scale", "velocity_scale"},
                      "decoder");
  read_if(j, "hidden", c.hidden);
  read_if(j, "hidden_layers", c.hidden_layers);
  read_if(j, "frequencies", c.frequencies);
  read_if(j, "position_scale", c.position_scale);
  read_if(j, "time_scale", c.time_scale);
  read_if(j, "velocity_scale", c.velocity_scale);
}

void to_json(json& j, const RunConfig& c) {
  j["stage"] = c.stage;
  j["seed"] = c.seed;
  j["frames"] = c.frames;
  j["paths"] = {{"data", c.paths.data},
                {"out", c.paths.out},
                {"depth_checkpoint", c.paths.depth_checkpoint},
                {"ssl_checkpoint", c.paths.ssl_checkpoint}};
  j["sim"] = c.sim;
  j["sim"].erase("seed");
  j["sim"].erase("sequence_id");
  j["grid"] = {{"voxel_size", c.grid.voxel_size},
               {"extent_min", array_json(c.grid.extent_min)},
               {"extent_max", array_json(c.grid.extent_max)}};
  j["model"] = {{"channels", c.model.channels},
                {"lidar_hidden", c.model.lidar_hidden},
                {"window_radius", c.model.window_radius},
                {"heads", c.model.heads},
                {"decoder", c.model.decoder}};
  j["depth"] = {{"scene", c.depth.scene},
                {"learning_rate", c.depth.learning_rate},
                {"steps", c.depth.steps},
                {"log_every", c.depth.log_every},
                {"channels", c.depth.channels},
                {"iterations", array_json(c.depth.iterations)},
                {"plane_min", c.depth.plane_min},
                {"plane_max", c.depth.plane_max},
                {"plane_eval", c.depth.plane_eval},
                {"plane_density", c.depth.plane_density},
                {"plane_noise", c.depth.plane_noise}};
  j["ssl"] = {{"from_scratch", c.ssl.from_scratch},
              {"history_horizon", c.ssl.history_horizon},
              {"history_stride", c.ssl.history_stride},
              {"velocity_loss", c.ssl.velocity_loss},
              {"lambda_v", c.ssl.lambda_v},
              {"learning_rate", c.ssl.learning_rate},
              {"grad_clip", c.ssl.grad_clip},
              {"steps", c.ssl.steps},
              {"log_every", c.ssl.log_every},
              {"rays_per_frame", c.ssl.rays_per_frame},
              {"free_per_ray", c.ssl.free_per_ray},
              {"supervision_times", c.ssl.supervision_times}};
  j["forecast"] = {{"out_horizons", c.forecast.out_horizons},
                   {"windows", c.forecast.windows},
                   {"tau", c.forecast.tau},
                   {"march_step", c.forecast.march_step},
                   {"max_range", c.forecast.max_range}};
}

void from_json(const json& j, RunConfig& c) {
  reject_unknown_keys(j, {"stage", "seed", "frames", "paths", "sim", "grid", "model", "depth", "ssl", "forecast"}, "config");
  read_if(j, "stage", c.stage);
  read_if(j, "seed", c.seed);
  read_if(j, "frames", c.frames);
  if (auto it = j.find("paths"); it != j.end()) {
    reject_unknown_keys(*it, {"data", "out", "depth_checkpoint", "ssl_checkpoint"}, "paths");
    read_if(*it, "data", c.paths.data);
    read_if(*it, "out", c.paths.out);
    read_if(*it, "depth_checkpoint", c.paths.depth_checkpoint);
    read_if(*it, "ssl_checkpoint", c.paths.ssl_checkpoint);
  }
  if (auto it = j.find("sim"); it != j.end()) {
    if (it->contains("seed") || it->contains("sequence_id"))
      throw std::invalid_argument("sim: seed and sequence_id follow the run seed and are not configurable");
    from_json(*it, c.sim);
  }
  if (auto it = j.find("grid"); it != j.end()) {
    reject_unknown_keys(*it, {"voxel_size", "extent_min", "extent_max"}, "grid");
    read_if(*it, "voxel_size", c.grid.voxel_size);
    read_array(*it, "extent_min", c.grid.extent_min);
    read_array(*it, "extent_max", c.grid.extent_max);
  }
  if (auto it = j.find("model"); it != j.end()) {
    reject_unknown_keys(*it, {"channels", "lidar_hidden", "window_radius", "heads", "decoder"}, "model");
    read_if(*it, "channels", c.model.channels);
    read_if(*it, "lidar_hidden", c.model.lidar_hidden);
    read_if(*it, "window_radius", c.model.window_radius);
    read_if(*it, "heads", c.model.heads);
    read_if(*it, "decoder", c.model.decoder);
  }
  if (auto it = j.find("depth"); it != j.end()) {
    reject_unknown_keys(*it,
                        {"scene", "learning_rate", "steps", "log_every", "channels", "iterations", "plane_min",
                         "plane_max", "plane_eval", "plane_density", "plane_noise"},
                        "depth");
    auto& d = c.depth;
    read_if(*it, "scene", d.scene);
    read_if(*it, "learning_rate", d.learning_rate);
    read_if(*it, "steps", d.steps);
    read_if(*it, "log_every", d.log_every);
    read_if(*it, "channels", d.channels);
    read_array(*it, "iterations", d.iterations);
    read_if(*it, "plane_min", d.plane_min);
    read_if(*it, "plane_max", d.plane_max);
    read_if(*it, "plane_eval", d.plane_eval);
    read_if(*it, "plane_density", d.plane_density);
    read_if(*it, "plane_noise", d.plane_noise);
  }
  if (auto it = j.find("ssl"); it != j.end()) {
    reject_unknown_keys(*it,
                        {"from_scratch", "history_horizon", "history_stride", "velocity_loss", "lambda_v",
                         "learning_rate", "grad_clip", "steps", "log_every", "rays_per_frame", "free_per_ray",
                         "supervision_times"},
                        "ssl");
    auto& s = c.ssl;
    read_if(*it, "from_scratch", s.from_scratch);
    read_if(*it, "history_horizon", s.history_horizon);
    read_if(*it, "history_stride", s.history_stride);
    read_if(*it, "velocity_loss", s.velocity_loss);
    read_if(*it, "lambda_v", s.lambda_v);
    read_if(*it, "learning_rate", s.learning_rate);
    read_if(*it, "grad_clip", s.grad_clip);
    read_if(*it, "steps", s.steps);
    read_if(*it, "log_every", s.log_every);
    read_if(*it, "rays_per_frame", s.rays_per_frame);
    read_if(*it, "free_per_ray", s.free_per_ray);
    read_if(*it, "supervision_times", s.supervision_times);
  }
  if (auto it = j.find("forecast"); it != j.end()) {
    reject_unknown_keys(*it, {"out_horizons", "windows", "tau", "march_step", "max_range"}, "forecast");
    auto& f = c.forecast;
    read_if(*it, "out_horizons", f.out_horizons);
    read_if(*it, "windows", f.windows);
    read_if(*it, "tau", f.tau);
    read_if(*it, "march_step", f.march_step);
    read_if(*it, "max_range", f.max_range);
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config: " + path.string());
  RunConfig c;
  try {
    c = json::parse(in).get<RunConfig>();
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + path.string() + ": " + e.what());
  }
  c.validate();
  return c;
}

std::string config_hash(const RunConfig& cfg) {
  const std::string s = json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string version_string() { return std::string("svfuse ") + SVFUSE_VERSION; }

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

DepthRefiner<float> make_depth_model(const RunConfig& cfg) {
  DepthConfig dc;
  dc.channels = cfg.depth.channels;
  dc.iterations = cfg.depth.iterations;
  Rng rng = Rng(cfg.seed).fork(0xde97);
  return DepthRefiner<float>("depth", dc, rng);
}

DepthExample sequence_example(const FrameRecord& rec, const Camerad& cam, double max_range) {
  DepthExample ex;
  const Scene s = rec.scene();
  ex.frame.rgb = render_rgb(s, cam, max_range);
  ex.frame.sparse_depth = sparse_depth_from_cloud(rec.cloud, cam);
  ex.gt = render_depth_gt(s, cam, max_range);
  ex.camera = cam;
  return ex;
}

namespace {

std::vector<DepthExample> sequence_examples(const fs::path& seq, int stride) {
  const SimConfig sim = read_sequence_config(seq);
  const int n = count_frames(seq);
  std::vector<DepthExample> out;
  for (int i = 0; i < n; i += stride) {
    const FrameRecord rec = load_frame(seq, i, false);
    for (const auto& cam : sim.cameras) {
      DepthExample ex = sequence_example(rec, cam, sim.lidar.max_range);
      if (ex.frame.valid_count() > 0) out.push_back(std::move(ex));
    }
  }
  if (out.empty()) throw DataError("no frame with projected LiDAR depth in " + seq.string());
  return out;
}

DepthExample plane_example(const RunConfig& cfg, double distance, Rng& rng) {
  const Camerad& cam = cfg.sim.cameras.at(0);
  PlaneSample p = make_plane_frame(cam, distance, cfg.depth.plane_density, cfg.depth.plane_noise, rng);
  return {std::move(p.frame), std::move(p.gt), cam};
}

struct DepthValidation {
  double loss = 0.0, mae = 0.0;
};

DepthValidation validate_depth(const DepthRefiner<float>& m, const std::vector<DepthExample>& val, const DepthConfig& dc) {
  DepthValidation v;
  double n = 0;
  for (const auto& ex : val) {
    nn::Tape<float> t(false);
    const auto trace = refine_on_tape(t, m, ex.frame, ex.camera.cast<float>());
    v.loss += double(depth_loss(trace, ex.gt, dc).value()(0, 0));
    const Eigen::MatrixXd pred = map_of(trace.depth[0].value().cast<double>(), ex.frame.height(), ex.frame.width());
    const Eigen::MatrixXd mask = (ex.gt.array() > 0).cast<double>().matrix();
    const double k = mask.sum();
    v.mae += depth_metrics(pred, ex.gt, mask).mae * k;
    n += k;
  }
  v.loss /= double(val.size());
  v.mae /= n;
  return v;
}

std::vector<DepthExample> validation_examples(const RunConfig& cfg) {
  std::vector<DepthExample> val;
  if (cfg.depth.scene == "plane") {
    Rng vr = Rng(cfg.seed).fork(0x7a1);
    for (int i = 0; i < 4; ++i) val.push_back(plane_example(cfg, cfg.depth.plane_eval, vr));
  } else {
    val = sequence_examples(fs::path(cfg.paths.data) / "seq_1", 10);
  }
  return val;
}

}  // namespace

DepthTrainResult train_stage1(const RunConfig& cfg) {
  cfg.validate();
  DepthTrainResult res;
  res.model = make_depth_model(cfg);
  const DepthConfig& dc = res.model.cfg;
  const bool plane = cfg.depth.scene == "plane";
  const std::vector<DepthExample> val = validation_examples(cfg);
  std::vector<DepthExample> train;
  if (!plane) train = sequence_examples(fs::path(cfg.paths.data) / "seq_0", 1);
  double base = 0, n = 0;
  for (const auto& ex : val) {
    const Eigen::MatrixXd mask = (ex.gt.array() > 0).cast<double>().matrix();
    base += depth_metrics(init_depth(ex.frame.sparse_depth), ex.gt, mask).mae * mask.sum();
    n += mask.sum();
  }
  res.baseline_mae = base / n;

  DepthValidation v = validate_depth(res.model, val, dc);
  res.initial_loss = v.loss;
  nn::ParamList<float> params;
  res.model.collect(params);
  nn::Adam<float> opt(float(cfg.depth.learning_rate), 1.0f);
  Rng rng = Rng(cfg.seed).fork(0xde98);
  for (int step = 1; step <= cfg.depth.steps; ++step) {
    const DepthExample ex =
        plane ? plane_example(cfg, rng.uniform(cfg.depth.plane_min, cfg.depth.plane_max), rng) : train[rng.index(train.size())];
    opt.set_lr(cosine_lr(cfg.depth.learning_rate, step, cfg.depth.steps));
    nn::Tape<float> t(true);
    const auto trace = refine_on_tape(t, res.model, ex.frame, ex.camera.cast<float>());
    const auto loss = depth_loss(trace, ex.gt, dc);
    const double l = double(loss.value()(0, 0));
    require_finite(l, "depth loss at step " + std::to_string(step));
    nn::zero_grads(params);
    t.backward(loss);
    opt.step(params);
    if (step % std::max(1, cfg.depth.log_every) == 0 || step == cfg.depth.steps) {
      v = validate_depth(res.model, val, dc);
      res.log.push_back({step, l, v.mae});
    }
  }
  v = validate_depth(res.model, val, dc);
  res.final_loss = v.loss;
  res.final_mae = v.mae;
  return res;
}

DepthEvaluation evaluate_depth(const RunConfig& cfg, const DepthRefiner<float>& model) {
  cfg.validate();
  const std::vector<DepthExample> val = validation_examples(cfg);
  DepthEvaluation e;
  e.examples = int(val.size());
  for (const auto& ex : val) {
    const Eigen::MatrixXd mask = (ex.gt.array() > 0).cast<double>().matrix();
    const double k = mask.sum();
    const DepthResult d = run_refinement(model, ex.frame, ex.camera.cast<float>());
    const DepthMetrics r = depth_metrics(d.depth, ex.gt, mask), b = depth_metrics(init_depth(ex.frame.sparse_depth), ex.gt, mask);
    e.refined.mae += r.mae * k;
    e.refined.mse += r.mse * k;
    e.nn_init.mae += b.mae * k;
    e.nn_init.mse += b.mse * k;
    e.pixels += long(k);
  }
  for (DepthMetrics* m : {&e.refined, &e.nn_init}) {
    m->mae /= double(e.pixels);
    m->mse /= double(e.pixels);
  }
  return e;
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

SslModel::SslModel(const RunConfig& cfg, Eigen::Index camera_channels) {
  Rng rng = Rng(cfg.seed).fork(0x55a);
  const Eigen::Index C = cfg.model.channels;
  camera_adapter = nn::Linear<float>("ssl.camera_adapter", camera_channels, C, rng);
  lidar = LidarEncoder<float>("ssl.lidar", cfg.model.lidar_hidden, C, rng);
  fusion = FusionLayer<float>("ssl.fusion", C, C, rng);
  late = LateEncoder<float>("ssl.late", C, rng);
  attention = TemporalAttention<float>("ssl.attention", C, rng, cfg.model.heads, AttentionWindow{cfg.model.window_radius});
  decoder = OccVelDecoder<float>("ssl.decoder", kNumScales * C, cfg.model.decoder, rng);
}

nn::ParamList<float> SslModel::params() {
  nn::ParamList<float> p;
  camera_adapter.collect(p);
  lidar.collect(p);
  fusion.collect(p);
  late.collect(p);
  attention.collect(p);
  decoder.collect(p);
  return p;
}

int SequenceData::offset(double seconds) const { return int(std::lround(seconds * frame_rate())); }

namespace {

/// Lifted image features of all cameras merged on the base lattice
/// (count-weighted mean where cameras overlap).
SparseVoxelGrid<float> lift_cameras(const FrameRecord& rec, const SimConfig& sim, const GridSpec& spec,
                                    const DepthRefiner<float>& depth) {
  std::map<Eigen::Vector3i, std::pair<Eigen::RowVectorXf, int>, IjkLess> cells;
  const Eigen::Index C = depth.cfg.channels;
  for (const auto& cam : sim.cameras) {
    const DepthExample ex = sequence_example(rec, cam, sim.lidar.max_range);
    if (ex.frame.valid_count() == 0) continue;
    nn::Tape<float> t(false);
    const auto feats = encode_image(t, depth, ex.frame, cam.cast<float>());
    const DepthResult d = run_refinement(depth, ex.frame, cam.cast<float>());
    const SparseVoxelGrid<float> g = lift_camera_features(Mat<float>(feats.maps[0].value()), d.depth, cam, spec);
    for (Eigen::Index r = 0; r < g.size(); ++r) {
      auto& [sum, n] = cells.try_emplace(g.coords()[std::size_t(r)], Eigen::RowVectorXf::Zero(C), 0).first->second;
      const int k = g.counts()[std::size_t(r)];
      sum += float(k) * g.features().row(r);
      n += k;
    }
  }
  std::vector<Eigen::Vector3i> coords;
  std::vector<int> counts;
  Mat<float> f(Eigen::Index(cells.size()), C);
  Eigen::Index r = 0;
  for (const auto& [c, v] : cells) {
    coords.push_back(c);
    counts.push_back(v.second);
    f.row(r++) = v.first / float(v.second);
  }
  const auto m = Eigen::Index(coords.size());
  return SparseVoxelGrid<float>::from_sorted(spec, 1, std::move(coords), std::move(f), Mat<float>::Zero(m, 3),
                                             std::move(counts));
}

}  // namespace

SequenceData prepare_sequence(const fs::path& dir, const RunConfig& cfg, const DepthRefiner<float>& depth) {
  if (!fs::is_directory(dir)) throw DataError("missing dataset: " + dir.string());
  SequenceData seq;
  seq.dir = dir;
  seq.sim = read_sequence_config(dir);
  const int n = count_frames(dir);
  const GridSpec spec = cfg.grid.spec();
  seq.frames.resize(std::size_t(n));
  std::vector<FrameRecord> records(static_cast<std::size_t>(n));
  parallel_for(std::size_t(n), [&](std::size_t i) { records[i] = load_frame(dir, int(i), false); });
  parallel_for(std::size_t(n), [&](std::size_t i) {
    const FrameRecord& rec = records[i];
    PreparedFrame& f = seq.frames[i];
    f.index = int(i);
    f.world_from_ego = rec.ego.world_from_ego;
    f.cloud = rec.cloud;
    f.compensated = compensate_ego_velocity(rec.cloud, rec.ego.velocity_ego());
    f.lidar = voxelize_points<float>(f.compensated, spec);
    f.camera = lift_cameras(rec, seq.sim, spec, depth);
    f.fusion = plan_fusion(f.camera, f.lidar.grid);
    f.pyramid = plan_pyramid(f.fusion.grid);
  });
  const int stride = std::max(1, seq.offset(cfg.ssl.history_stride));
  for (int i = 0; i < n; ++i) {
    PreparedFrame& f = seq.frames[std::size_t(i)];
    f.history.pyramid.levels = f.pyramid.levels;
    f.history.dt = cfg.ssl.history_stride;
    if (i + stride < n) f.history.next_from_this = seq.frames[std::size_t(i + stride)].world_from_ego.inverse() * f.world_from_ego;
  }
  return seq;
}

std::vector<int> history_indices(const RunConfig& cfg, const SequenceData& seq, int current) {
  const int stride = std::max(1, seq.offset(cfg.ssl.history_stride));
  const int count = int(std::lround(cfg.ssl.history_horizon / cfg.ssl.history_stride));
  std::vector<int> out;
  for (int k = count; k >= 1; --k) out.push_back(current - k * stride);
  return out;
}

PyramidView<float> encode_window(nn::Tape<float>& tape, SslModel& model, const SequenceData& seq,
                                 const std::vector<int>& history, int current, bool training) {
  auto encode = [&](const PreparedFrame& f) {
    auto lid = model.lidar(tape, f.lidar);
    auto cam = model.camera_adapter(tape.constant(f.camera.features()));
    auto fused = model.fusion(f.fusion, cam, lid, training);
    return model.late(f.pyramid, fused);
  };
  const PreparedFrame& cur = seq.frames.at(std::size_t(current));
  auto levels = encode(cur);
  if (!history.empty()) {
    std::vector<const HistoryFrame<float>*> frames;
    std::vector<nn::Var<float>> feats;
    for (int h : history) {
      const PreparedFrame& f = seq.frames.at(std::size_t(h));
      frames.push_back(&f.history);
      feats.push_back(encode(f)[std::size_t(kTemporalScale - 1)]);
    }
    const auto li = std::size_t(kTemporalScale - 1);
    levels[li] = temporal_fuse_level(cur.pyramid.levels[li], levels[li], frames, feats, model.attention);
  }
  PyramidView<float> v;
  for (std::size_t l = 0; l < std::size_t(kNumScales); ++l) {
    v.grids[l] = &cur.pyramid.levels[l];
    v.feats[l] = levels[l];
  }
  return v;
}

EgoPath window_path(const SequenceData& seq, int current, int first, int last) {
  std::vector<std::pair<double, SE3d>> poses;
  for (int i = std::min(first, current); i <= std::max(last, current); ++i)
    poses.emplace_back(double(i - current) / seq.frame_rate(), seq.frames.at(std::size_t(i)).world_from_ego);
  return EgoPath::from_world(poses, 0.0);
}

std::vector<int> valid_currents(const RunConfig& cfg, const SequenceData& seq, double max_future_s) {
  const int n = int(seq.frames.size());
  int lo = 0;
  const auto hist = history_indices(cfg, seq, 0);
  if (!hist.empty()) lo = -hist.front();
  int hi = n - 1 - seq.offset(max_future_s);
  std::vector<int> out;
  for (int c = lo; c <= hi; ++c) out.push_back(c);
  return out;
}

std::vector<SupervisionSample> window_samples(const RunConfig& cfg, const SequenceData& seq, int current, Rng& rng) {
  std::vector<SupervisionSample> all;
  const auto [lo, hi] = std::minmax_element(cfg.ssl.supervision_times.begin(), cfg.ssl.supervision_times.end());
  const EgoPath path = window_path(seq, current, current + seq.offset(*lo), current + seq.offset(*hi));
  for (double t : cfg.ssl.supervision_times) {
    const int f = current + seq.offset(t);
    if (f < 0 || f >= int(seq.frames.size())) throw DataError("supervision frame outside the sequence");
    auto s = generate_labels(seq.frames[std::size_t(f)].compensated, Eigen::Vector3d::Zero(), cfg.ssl.rays_per_frame,
                             cfg.ssl.free_per_ray, cfg.grid.voxel_size, rng, t);
    const Eigen::Matrix3d R = path.current_from(t).rotation;
    for (auto& x : s)
      if (x.velocity) x.velocity = R * *x.velocity;
    all.insert(all.end(), s.begin(), s.end());
  }
  return all;
}

SslTrainResult train_stage2(const RunConfig& cfg, SslModel& model, const SequenceData& train) {
  cfg.validate();
  const double max_t = *std::max_element(cfg.ssl.supervision_times.begin(), cfg.ssl.supervision_times.end());
  const double min_t = *std::min_element(cfg.ssl.supervision_times.begin(), cfg.ssl.supervision_times.end());
  std::vector<int> currents;
  for (int c : valid_currents(cfg, train, max_t))
    if (c + train.offset(min_t) >= 0) currents.push_back(c);
  if (currents.empty())
    throw DataError("sequence " + train.dir.string() + " is too short for the history and supervision horizons");
  const auto [lo, hi] = std::minmax_element(cfg.ssl.supervision_times.begin(), cfg.ssl.supervision_times.end());
  nn::ParamList<float> params = model.params();
  nn::Adam<float> opt(float(cfg.ssl.learning_rate), float(cfg.ssl.grad_clip));
  SslTrainResult res;
  for (int step = 1; step <= cfg.ssl.steps; ++step) {
    Rng rng = Rng(cfg.seed).fork(0x5500000 + std::uint64_t(step));
    const int c = currents[rng.index(currents.size())];
    const auto samples = window_samples(cfg, train, c, rng);
    opt.set_lr(cosine_lr(cfg.ssl.learning_rate, step, cfg.ssl.steps));
    nn::Tape<float> t(true);
    const PyramidView<float> view = encode_window(t, model, train, history_indices(cfg, train, c), c, true);
    const EgoPath path = window_path(train, c, c + train.offset(*lo), c + train.offset(*hi));
    const auto loss = ssl_loss(samples, model.decoder, view, path, cfg.ssl.lambda_v, cfg.ssl.velocity_loss);
    SslLogEntry e;
    e.step = step;
    e.occ = double(loss.occ.value()(0, 0));
    e.vel = loss.vel.valid() ? double(loss.vel.value()(0, 0)) : 0.0;
    e.total = double(loss.total.value()(0, 0));
    require_finite(e.total, "ssl loss at step " + std::to_string(step));
    nn::zero_grads(params);
    t.backward(loss.total);
    opt.step(params);
    res.log.push_back(e);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Forecast benchmark
// ---------------------------------------------------------------------------

void to_json(json& j, const ForecastReport& r) {
  j["definition"] = r.definition;
  j["config_hash"] = r.config_hash;
  j["seed"] = r.seed;
  j["version"] = r.version;
  j["input_horizon"] = r.input_horizon;
  j["windows"] = r.windows;
  j["metrics"] = r.metrics;
  j["baseline"] = r.baseline;
  json pts = json::object();
  for (const auto& [k, p] : r.points) pts[k] = {{"gt", p.gt}, {"forecast", p.forecast}, {"baseline", p.baseline}};
  j["points"] = pts;
  if (r.runtime_s) j["runtime_s"] = *r.runtime_s;
}

void from_json(const json& j, ForecastReport& r) {
  reject_unknown_keys(j,
                      {"definition", "config_hash", "seed", "version", "input_horizon", "windows", "metrics",
                       "baseline", "points", "runtime_s"},
                      "report");
  r.definition = j.at("definition").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.version = j.at("version").get<std::string>();
  r.input_horizon = j.at("input_horizon").get<int>();
  r.windows = j.at("windows").get<int>();
  r.metrics = j.at("metrics").get<std::map<std::string, double>>();
  r.baseline = j.at("baseline").get<std::map<std::string, double>>();
  r.points.clear();
  for (const auto& [k, v] : j.at("points").items()) {
    reject_unknown_keys(v, {"gt", "forecast", "baseline"}, "points");
    r.points[k] = {v.at("gt").get<long>(), v.at("forecast").get<long>(), v.at("baseline").get<long>()};
  }
  r.runtime_s.reset();
  if (auto it = j.find("runtime_s"); it != j.end()) r.runtime_s = it->get<double>();
  for (const auto& [k, v] : r.metrics)
    if (v < 0) throw std::invalid_argument("report: negative Chamfer distance " + k);
}

bool ScoringRegion::contains(const Eigen::Vector3d& p_future) const {
  return p_future.norm() <= max_range && spec.contains(current_from_future * p_future);
}

PointCloud crop(const PointCloud& cloud, const std::function<bool(const Eigen::Vector3d&)>& keep) {
  PointCloud out;
  out.timestamp = cloud.timestamp;
  std::vector<Eigen::Index> idx;
  for (Eigen::Index i = 0; i < cloud.size(); ++i)
    if (keep(cloud.xyz.col(i))) idx.push_back(i);
  out = PointCloud(Eigen::Index(idx.size()));
  out.timestamp = cloud.timestamp;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    out.xyz.col(Eigen::Index(k)) = cloud.xyz.col(idx[k]);
    out.radial_velocity(Eigen::Index(k)) = cloud.radial_velocity(idx[k]);
    out.intensity(Eigen::Index(k)) = cloud.intensity(idx[k]);
  }
  return out;
}

PointCloud static_baseline(const PointCloud& last, const SE3d& future_from_last, const LidarConfig& lidar) {
  PointCloud moved = last;
  for (Eigen::Index i = 0; i < moved.size(); ++i) moved.xyz.col(i) = future_from_last * Eigen::Vector3d(last.xyz.col(i));
  const double az_half = 0.5 * lidar.azimuth_fov_deg + 0.5 * lidar.azimuth_resolution_deg;
  const double el_pad = lidar.channels > 1 ? 0.5 * (lidar.elevation_max_deg - lidar.elevation_min_deg) / (lidar.channels - 1) : 0.5;
  return crop(moved, [&](const Eigen::Vector3d& p) {
    const double r = p.norm();
    if (!(r > 0) || r > lidar.max_range) return false;
    const double az = std::atan2(p.y(), p.x()) / kDeg;
    const double el = std::asin(p.z() / r) / kDeg;
    return std::abs(az) <= az_half && el >= lidar.elevation_min_deg - el_pad && el <= lidar.elevation_max_deg + el_pad;
  });
}

WindowForecast forecast_window(const RunConfig& cfg, SslModel& model, const SequenceData& seq, int current,
                               int out_horizon) {
  const int future = current + seq.offset(out_horizon);
  if (future >= int(seq.frames.size()))
    throw DataError("horizon " + std::to_string(out_horizon) + " s unavailable in " + seq.dir.string());
  nn::Tape<float> tape(false);
  const auto view = encode_window(tape, model, seq, history_indices(cfg, seq, current), current, false);
  const PreparedFrame& cur = seq.frames[std::size_t(current)];
  std::array<Mat<float>, kNumScales> feats;
  for (std::size_t l = 0; l < std::size_t(kNumScales); ++l) feats[l] = view.feats[l].value();
  const FeaturePyramid<float> pyramid = materialize(cur.pyramid, feats);
  const EgoPath path = window_path(seq, current, current, future);
  const double t_future = double(out_horizon);
  ScoringRegion region{cfg.grid.spec(), path.current_from(t_future), cfg.forecast.max_range};
  auto in_region = [&](const Eigen::Vector3d& p) { return region.contains(p); };
  WindowForecast w;
  w.gt = crop(seq.frames[std::size_t(future)].cloud, in_region);
  RayMarch march;
  march.tau = cfg.forecast.tau;
  march.step = cfg.forecast.march_step > 0 ? cfg.forecast.march_step : 0.5 * cfg.grid.voxel_size;
  march.max_range = cfg.forecast.max_range;
  w.forecast = forecast_cloud(model.decoder, pyramid, path, directions_of(w.gt), t_future, march);
  w.baseline = crop(static_baseline(cur.cloud, region.current_from_future.inverse(), seq.sim.lidar), in_region);
  return w;
}

ForecastReport run_forecast_benchmark(const RunConfig& cfg, SslModel& model, const SequenceData& eval,
                                      const fs::path* ply_dir) {
  cfg.validate();
  const int max_out = *std::max_element(cfg.forecast.out_horizons.begin(), cfg.forecast.out_horizons.end());
  const std::vector<int> currents = valid_currents(cfg, eval, max_out);
  if (currents.empty())
    throw DataError("horizons unavailable in " + eval.dir.string() + ": " + std::to_string(eval.frames.size()) +
                    " frames are too few for " + std::to_string(cfg.ssl.history_horizon) + " s in and " +
                    std::to_string(max_out) + " s out");
  std::vector<int> windows;
  const int W = std::min<int>(cfg.forecast.windows, int(currents.size()));
  for (int k = 0; k < W; ++k) {
    const std::size_t i = W == 1 ? currents.size() / 2 : std::size_t(std::lround(double(k) * (currents.size() - 1) / (W - 1)));
    windows.push_back(currents[i]);
  }
  const std::size_t H = cfg.forecast.out_horizons.size();
  std::vector<WindowForecast> results(windows.size() * H);
  parallel_for(results.size(), [&](std::size_t i) {
    results[i] = forecast_window(cfg, model, eval, windows[i / H], cfg.forecast.out_horizons[i % H]);
  });

  ForecastReport rep;
  rep.definition = kChamferDefinition;
  rep.config_hash = config_hash(cfg);
  rep.seed = cfg.seed;
  rep.version = version_string();
  rep.input_horizon = cfg.ssl.history_horizon;
  rep.windows = int(windows.size());
  for (std::size_t h = 0; h < H; ++h) {
    const int out = cfg.forecast.out_horizons[h];
    const std::string key = cd_key(cfg.ssl.history_horizon, out);
    double cd = 0, base = 0;
    PointCounts pc;
    for (std::size_t w = 0; w < windows.size(); ++w) {
      const WindowForecast& r = results[w * H + h];
      if (r.gt.empty()) throw DataError("no ground-truth points inside the scoring region for " + key);
      if (r.forecast.empty()) throw NumericError("forecast produced no points for " + key);
      if (r.baseline.empty()) throw DataError("static baseline has no points inside the scoring region for " + key);
      cd += chamfer_distance(r.forecast, r.gt);
      base += chamfer_distance(r.baseline, r.gt);
      pc.gt += long(r.gt.size());
      pc.forecast += long(r.forecast.size());
      pc.baseline += long(r.baseline.size());
      if (ply_dir && w == 0) {
        fs::create_directories(*ply_dir);
        write_ply(*ply_dir / (key + "_forecast.ply"), r.forecast);
        write_ply(*ply_dir / (key + "_gt.ply"), r.gt);
        write_ply(*ply_dir / (key + "_baseline.ply"), r.baseline);
      }
    }
    rep.metrics[key] = cd / double(windows.size());
    rep.baseline[key] = base / double(windows.size());
    rep.points[key] = pc;
    require_finite(rep.metrics[key], "Chamfer distance for " + key);
  }
  return rep;
}

}  // namespace svfuse
