#pragma once

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "svfuse/decoder.hpp"
#include "svfuse/depth_refine.hpp"
#include "svfuse/lift_fuse.hpp"
#include "svfuse/sim.hpp"
#include "svfuse/temporal.hpp"

namespace svfuse {

/// NaN or infinite loss; the CLI maps it to exit code 3.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PathConfig {
  std::string data = "data";          // holds seq_0 (training) and seq_1 (evaluation)
  std::string out = "runs";
  std::string depth_checkpoint;       // empty: <out>/depth.svwt
  std::string ssl_checkpoint;         // empty: <out>/ssl_<tag>.svwt
};

struct GridConfig {
  double voxel_size = 1.0;
  std::array<double, 3> extent_min{-40.0, -24.0, -4.0};
  std::array<double, 3> extent_max{120.0, 24.0, 8.0};

  GridSpec spec() const;
};

struct ModelConfig {
  Eigen::Index channels = 8;
  Eigen::Index lidar_hidden = 16;
  int window_radius = 1;
  int heads = 1;
  DecoderConfig decoder;
};

struct DepthStageConfig {
  std::string scene = "sequence";  // "sequence" or "plane"
  double learning_rate = 1e-3;
  int steps = 300;
  int log_every = 50;
  Eigen::Index channels = 16;
  std::array<int, kDepthScales> iterations{2, 2, 3, 4};
  double plane_min = 40.0;
  double plane_max = 60.0;
  double plane_eval = 50.0;
  double plane_density = 0.01;
  double plane_noise = 0.5;
};

struct SslStageConfig {
  bool from_scratch = false;  // untrained camera branch instead of a stage-1 checkpoint
  int history_horizon = 1;    // seconds: 0, 1 or 3
  double history_stride = 1.0;
  bool velocity_loss = true;
  double lambda_v = 0.1;
  double learning_rate = 3e-3;
  double grad_clip = 5.0;
  int steps = 1000;
  int log_every = 50;
  int rays_per_frame = 192;
  int free_per_ray = 4;  // free samples stop one base voxel short of the return
  std::vector<double> supervision_times{-1.0, 0.0, 1.0, 3.0};
};

struct ForecastConfig {
  std::vector<int> out_horizons{1, 3};
  int windows = 12;
  double tau = 0.5;
  double march_step = 0.0;  // 0: half the base voxel
  double max_range = 200.0;
};

struct RunConfig {
  std::string stage = "ssl";  // depth, ssl, forecast, eval
  std::uint64_t seed = 1;
  int frames = 100;
  PathConfig paths;
  SimConfig sim;
  GridConfig grid;
  ModelConfig model;
  DepthStageConfig depth;
  SslStageConfig ssl;
  ForecastConfig forecast;

  void validate() const;
  /// Simulator settings for sequence `id` (0 training, 1 evaluation).
  SimConfig sim_for(int id) const;
  /// "h<H>" plus "_novel" when the velocity loss is off.
  std::string tag() const;
  std::filesystem::path depth_checkpoint_path() const;
  std::filesystem::path ssl_checkpoint_path() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
RunConfig load_run_config(const std::filesystem::path& path);

/// FNV-1a (64 bit) of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);
std::string version_string();

// ---------------------------------------------------------------------------
// Stage 1: depth refinement
// ---------------------------------------------------------------------------

DepthRefiner<float> make_depth_model(const RunConfig& cfg);

struct DepthExample {
  ImageFrame frame;
  Eigen::MatrixXd gt;
  Camerad camera;
};

/// Camera frame of a simulated record: flat-shaded image, projected sparse
/// LiDAR depth and rendered ground truth.
DepthExample sequence_example(const FrameRecord& rec, const Camerad& cam, double max_range);

struct DepthLogEntry {
  int step = 0;
  double loss = 0.0;  // training loss of the step
  double mae = 0.0;   // validation MAE after the step
};

struct DepthTrainResult {
  DepthRefiner<float> model;
  std::vector<DepthLogEntry> log;
  double initial_loss = 0.0;  // validation loss before training
  double final_loss = 0.0;
  double baseline_mae = 0.0;  // nearest-neighbour fill on the validation set
  double final_mae = 0.0;
};

/// Trains on `cfg.depth.scene`; validation uses a fixed plane at
/// `plane_eval` m (plane scene) or evaluation-sequence frames.
DepthTrainResult train_stage1(const RunConfig& cfg);

struct DepthEvaluation {
  int examples = 0;
  long pixels = 0;  // pixels with ground truth
  DepthMetrics refined;
  DepthMetrics nn_init;
};

/// Refined depth against the nearest-neighbour fill on the validation set
/// of `cfg.depth.scene`.
DepthEvaluation evaluate_depth(const RunConfig& cfg, const DepthRefiner<float>& model);

// ---------------------------------------------------------------------------
// Stage 2: self-supervised pipeline
// ---------------------------------------------------------------------------

struct SslModel {
  nn::Linear<float> camera_adapter;
  LidarEncoder<float> lidar;
  FusionLayer<float> fusion;
  LateEncoder<float> late;
  TemporalAttention<float> attention;
  OccVelDecoder<float> decoder;

  SslModel() = default;
  SslModel(const RunConfig& cfg, Eigen::Index camera_channels);
  nn::ParamList<float> params();
};

/// Per-frame inputs that do not depend on trainable weights.
struct PreparedFrame {
  int index = 0;
  SE3d world_from_ego;
  PointCloud cloud;        // as measured
  PointCloud compensated;  // v_r of world motion
  PointVoxelization<float> lidar;
  SparseVoxelGrid<float> camera;  // lifted image features
  FusionPlan<float> fusion;
  PyramidPlan<float> pyramid;
  HistoryFrame<float> history;  // structure and pose towards frame index + stride
};

struct SequenceData {
  std::filesystem::path dir;
  SimConfig sim;
  std::vector<PreparedFrame> frames;

  double frame_rate() const { return sim.frame_rate; }
  int offset(double seconds) const;  // frames for a time offset
};

/// Loads and prepares every frame; the camera branch runs once per frame.
SequenceData prepare_sequence(const std::filesystem::path& dir, const RunConfig& cfg, const DepthRefiner<float>& depth);

/// Frame indices (oldest first) feeding the window at `current`.
std::vector<int> history_indices(const RunConfig& cfg, const SequenceData& seq, int current);

/// Pyramid of the current frame after fusion, late encoding and temporal
/// fusion, on `tape`. The view's grids point into `seq`.
PyramidView<float> encode_window(nn::Tape<float>& tape, SslModel& model, const SequenceData& seq,
                                 const std::vector<int>& history, int current, bool training);

/// Ego path through every frame in [first, last], relative to `current`.
EgoPath window_path(const SequenceData& seq, int current, int first, int last);

/// Current frames usable with the configured history and the given future offsets.
std::vector<int> valid_currents(const RunConfig& cfg, const SequenceData& seq, double max_future_s);

std::vector<SupervisionSample> window_samples(const RunConfig& cfg, const SequenceData& seq, int current, Rng& rng);

struct SslLogEntry {
  int step = 0;
  double occ = 0.0;
  double vel = 0.0;
  double total = 0.0;
};

struct SslTrainResult {
  std::vector<SslLogEntry> log;  // every step
};

/// Trains `model` in place on the prepared training sequence.
SslTrainResult train_stage2(const RunConfig& cfg, SslModel& model, const SequenceData& train);

// ---------------------------------------------------------------------------
// Forecast benchmark
// ---------------------------------------------------------------------------

struct PointCounts {
  long gt = 0;
  long forecast = 0;
  long baseline = 0;
};

struct ForecastReport {
  std::string definition;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string version;
  int input_horizon = 0;
  int windows = 0;
  std::map<std::string, double> metrics;   // cd_<in>in_<out>out, model
  std::map<std::string, double> baseline;  // same keys, static world
  std::map<std::string, PointCounts> points;
  std::optional<double> runtime_s;
};

void to_json(nlohmann::json& j, const ForecastReport& r);
void from_json(const nlohmann::json& j, ForecastReport& r);

/// Region in which forecasts are scored: inside the extent of the current
/// frame and within `max_range` of the future sensor.
struct ScoringRegion {
  GridSpec spec;
  SE3d current_from_future;
  double max_range = 200.0;

  bool contains(const Eigen::Vector3d& p_future) const;
};

PointCloud crop(const PointCloud& cloud, const std::function<bool(const Eigen::Vector3d&)>& keep);

/// Last input cloud moved into the future sensor frame, restricted to the
/// future sensor's field of view and range.
PointCloud static_baseline(const PointCloud& last, const SE3d& future_from_last, const LidarConfig& lidar);

struct WindowForecast {
  PointCloud gt, forecast, baseline;
};

/// Forecast, ground truth and baseline for one window and output horizon.
WindowForecast forecast_window(const RunConfig& cfg, SslModel& model, const SequenceData& seq, int current,
                               int out_horizon);

ForecastReport run_forecast_benchmark(const RunConfig& cfg, SslModel& model, const SequenceData& eval,
                                      const std::filesystem::path* ply_dir = nullptr);

}  // namespace svfuse
