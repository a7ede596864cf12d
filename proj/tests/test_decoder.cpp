#include "doctest.h"

#include <algorithm>
#include <sstream>

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "svfuse/decoder.hpp"
#include "svfuse/rng.hpp"

using namespace svfuse;
using svfuse::testing::check_gradients;
using svfuse::testing::pyramid_from;
using svfuse::testing::random_pyramid;

namespace {

GridSpec box_spec(double base, const Eigen::Vector3d& lo, const Eigen::Vector3d& hi) {
  GridSpec s;
  s.base_size = base;
  s.extent = Eigen::AlignedBox3d(lo, hi);
  return s;
}

FeaturePyramid<double> empty_pyramid(const GridSpec& spec, Eigen::Index C) {
  FeaturePyramid<double> p;
  for (int s = 1; s <= kNumScales; ++s) p.level(s) = SparseVoxelGrid<double>(spec, s, C);
  return p;
}

DecoderConfig small_config() {
  DecoderConfig c;
  c.hidden = 16;
  c.position_scale = 4.0;
  return c;
}

void randomize(nn::Mlp<double>& m, Rng& rng, double a) {
  for (auto& l : m.layers) {
    for (Eigen::Index i = 0; i < l.weight.value.size(); ++i) l.weight.value.data()[i] = rng.uniform(-a, a);
    for (Eigen::Index i = 0; i < l.bias.value.size(); ++i) l.bias.value.data()[i] = rng.uniform(-a, a);
  }
}

void set_constant_occupancy(OccVelDecoder<double>& dec, double logit) {
  dec.f_occ.last().zero();
  dec.f_occ.last().bias.value(0, 0) = logit;
}

bool is_identity(const SE3d& p) {
  return p.rotation.isApprox(Eigen::Matrix3d::Identity()) && p.translation.norm() < 1e-12;
}

double bce(double x, double y) { return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

TEST_CASE("ego path is identity at the current time and interpolates between keys") {
  EgoPath path;
  CHECK(is_identity(path.current_from(0.0)));
  std::vector<std::pair<double, SE3d>> world;
  world.emplace_back(10.0, SE3d(Eigen::Matrix3d::Identity(), Eigen::Vector3d(100, 0, 0)));
  world.emplace_back(11.0, SE3d(Eigen::AngleAxisd(0.2, Eigen::Vector3d::UnitZ()).toRotationMatrix(),
                                Eigen::Vector3d(120, 2, 0)));
  path = EgoPath::from_world(world, 10.0);
  CHECK(is_identity(path.current_from(0.0)));
  const SE3d mid = path.current_from(0.5);
  CHECK(mid.translation.isApprox(Eigen::Vector3d(10, 1, 0)));
  CHECK(Eigen::AngleAxisd(mid.rotation).angle() == doctest::Approx(0.1));
  CHECK(path.current_from(5.0).translation.isApprox(Eigen::Vector3d(20, 2, 0)));
  CHECK_THROWS_AS(EgoPath::from_world(world, 10.5), std::invalid_argument);
}

TEST_CASE("tape sampling matches the value-level trilinear sample") {
  Rng rng(3);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d::Constant(-4), Eigen::Vector3d::Constant(4));
  const auto pyr = random_pyramid(rng, spec, 8, 0.5, 3);
  const auto& g = pyr.levels[0];
  Mat<double> P(40, 3);
  for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = rng.uniform(-2.5, 2.5);
  nn::Tape<double> tape(false);
  auto out = sample_features(g, tape.constant(g.features()), tape.constant(P));
  for (Eigen::Index b = 0; b < P.rows(); ++b) {
    const auto ref = trilinear_sample(g, Eigen::Vector3d(P.row(b).transpose()));
    CHECK((out.value().row(b).transpose() - ref.feature).norm() < 1e-12);
  }
}

TEST_CASE("sampling gradients w.r.t. features and positions match finite differences") {
  Rng rng(4);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d::Constant(-4), Eigen::Vector3d::Constant(4));
  const auto pyr = random_pyramid(rng, spec, 8, 0.6, 2);
  const auto& g = pyr.levels[0];
  nn::Tensor<double> feats("feats", g.size(), 2), pos("pos", 30, 3);
  feats.value = g.features();
  for (Eigen::Index i = 0; i < pos.value.size(); ++i) pos.value.data()[i] = rng.uniform(-1.9, 1.9);
  Mat<double> w(30, 2);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1, 1);
  auto loss = [&](nn::Tape<double>& t) {
    auto s = sample_features(g, t.param(feats), t.param(pos));
    return nn::sum(nn::mul(s, t.constant(w)));
  };
  const auto r = check_gradients(loss, {&feats, &pos});
  CHECK_MESSAGE(r.max_rel_error < 1e-6, r.worst);
}

TEST_CASE("zeroed f_pose leaves the query where the rigid map put it") {
  Rng rng(5);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d::Constant(-4), Eigen::Vector3d::Constant(4));
  const auto pyr = random_pyramid(rng, spec, 8, 0.5, 2);
  OccVelDecoder<double> dec("dec", 8, small_config(), rng);
  EgoPath path;
  path.add(1.0, SE3d(Eigen::Matrix3d::Identity(), Eigen::Vector3d(0.5, 0, 0)));
  Eigen::MatrixXd q(3, 4);
  q << 0.1, 0.2, 0.3, 0.0, -1, 1, 0.5, 1.0, 0.7, -0.3, 0.0, 0.5;
  nn::Tape<double> tape(false);
  const auto d = decode_batch(dec, constant_view(tape, pyr), q, path);
  CHECK((d.second_position - d.first_position).norm() == 0.0);
  CHECK(d.first_position.row(1).isApprox(Eigen::RowVector3d(-0.5, 1, 0.5)));
  CHECK(d.first_position.row(2).isApprox(Eigen::RowVector3d(0.95, -0.3, 0.0)));
}

TEST_CASE("empty pyramid decodes from the query encoding alone") {
  Rng rng(6);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d::Constant(-4), Eigen::Vector3d::Constant(4));
  const auto pyr = empty_pyramid(spec, 2);
  OccVelDecoder<double> dec("dec", 8, small_config(), rng);
  randomize(dec.f_pose, rng, 0.5);
  Eigen::MatrixXd q(1, 4);
  q << 0.3, -1.2, 0.4, 0.0;
  const auto d = decode(dec, pyr, q, EgoPath());
  REQUIRE(d[0].in_bounds);
  nn::Tape<double> tape(false);
  Mat<double> in = Mat<double>::Zero(1, 16 + fourier_width(dec.cfg.frequencies));
  in.rightCols(fourier_width(dec.cfg.frequencies)) = fourier_encode(Eigen::Vector4d(q.row(0).transpose()), dec.cfg);
  const double logit = dec.f_occ(tape.constant(in)).value()(0, 0);
  CHECK(d[0].occupancy == doctest::Approx(1 / (1 + std::exp(-logit))).epsilon(1e-12));
}

TEST_CASE("out-of-extent queries decode to zero and are flagged") {
  Rng rng(7);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d::Constant(-4), Eigen::Vector3d::Constant(4));
  const auto pyr = random_pyramid(rng, spec, 8, 0.5, 2);
  OccVelDecoder<double> dec("dec", 8, small_config(), rng);
  set_constant_occupancy(dec, 3.0);
  Eigen::MatrixXd q(2, 4);
  q << 10, 0, 0, 0, 0, 0, 0, 0;
  const auto d = decode(dec, pyr, q, EgoPath());
  CHECK_FALSE(d[0].in_bounds);
  CHECK(d[0].occupancy == 0.0);
  CHECK(d[0].velocity.norm() == 0.0);
  CHECK(d[1].in_bounds);
  CHECK(d[1].occupancy > 0.9);
}

TEST_CASE("decode is continuous under small query perturbations") {
  Rng rng(8);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d::Constant(-4), Eigen::Vector3d::Constant(4));
  const auto pyr = random_pyramid(rng, spec, 8, 0.5, 2);
  OccVelDecoder<double> dec("dec", 8, small_config(), rng);
  randomize(dec.f_pose, rng, 0.3);
  Eigen::MatrixXd q(200, 4), qp(200, 4);
  for (Eigen::Index b = 0; b < 200; ++b) {
    q.row(b) << rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), 0.0;
    qp.row(b) = q.row(b);
    qp.row(b).head<3>() += 1e-6 * Eigen::RowVector3d(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  }
  const auto a = decode(dec, pyr, q, EgoPath());
  const auto b = decode(dec, pyr, qp, EgoPath());
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i].occupancy - b[i].occupancy));
  CHECK(worst < 1e-4);
}

TEST_CASE("loss gradients w.r.t. all heads and pyramid features match finite differences") {
  Rng rng(9);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d::Constant(-4), Eigen::Vector3d::Constant(4));
  const auto pyr = random_pyramid(rng, spec, 8, 0.6, 2);
  DecoderConfig cfg = small_config();
  cfg.hidden = 8;
  OccVelDecoder<double> dec("dec", 8, cfg, rng);
  randomize(dec.f_pose, rng, 0.3);
  EgoPath path;
  path.add(0.5, SE3d(Eigen::Matrix3d::Identity(), Eigen::Vector3d(0.3, 0.1, 0)));
  std::vector<SupervisionSample> samples(24);
  for (auto& s : samples) {
    s.query << rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), rng.uniform() < 0.5 ? 0.0 : 0.5;
    s.occ = rng.uniform() < 0.5;
    if (s.occ) s.velocity = Eigen::Vector3d(rng.uniform(-2, 2), rng.uniform(-2, 2), 0);
  }
  std::vector<nn::Tensor<double>> feats;
  for (std::size_t l = 0; l < 4; ++l) {
    feats.emplace_back("feat" + std::to_string(l), pyr.levels[l].size(), 2);
    feats.back().value = pyr.levels[l].features();
  }
  nn::ParamList<double> params;
  dec.collect(params);
  for (auto& f : feats) params.push_back(&f);
  auto loss = [&](nn::Tape<double>& t) {
    PyramidView<double> v;
    for (std::size_t l = 0; l < 4; ++l) {
      v.grids[l] = &pyr.levels[l];
      v.feats[l] = t.param(feats[l]);
    }
    return ssl_loss(samples, dec, v, path, 0.1).total;
  };
  const auto r = check_gradients(loss, params);
  CHECK_MESSAGE(r.max_rel_error < 1e-3, r.worst);
}

TEST_CASE("one ray with two free samples gives three samples") {
  PointCloud c(1);
  c.xyz.col(0) = Eigen::Vector3d(10, 0, 0);
  c.radial_velocity(0) = -3.0;
  Rng rng(10);
  const auto s = generate_labels(c, Eigen::Vector3d::Zero(), 1, 2, 0.5, rng, 0.7);
  REQUIRE(s.size() == 3);
  CHECK(s[0].occ == 1);
  CHECK(s[0].query.head<3>() == Eigen::Vector3d(10, 0, 0));
  REQUIRE(s[0].velocity);
  CHECK(s[0].velocity->isApprox(Eigen::Vector3d(-3, 0, 0)));
  for (std::size_t i = 1; i < 3; ++i) {
    CHECK(s[i].occ == 0);
    CHECK_FALSE(s[i].velocity);
    CHECK(s[i].query.x() > 0.0);
    CHECK(s[i].query.x() < 9.5);
  }
  for (const auto& x : s) CHECK(x.query(3) == 0.7);
}

TEST_CASE("free samples stay short of the return and counts per ray are fixed") {
  Rng rng(11);
  PointCloud c(50);
  for (Eigen::Index i = 0; i < 50; ++i) c.xyz.col(i) = Eigen::Vector3d(rng.uniform(2, 40), rng.uniform(-10, 10), rng.uniform(-2, 2));
  const Eigen::Vector3d origin(0, 0, 1.5);
  const double eps = 0.4;
  const auto s = generate_labels(c, origin, 200, 3, eps, rng);
  REQUIRE(s.size() == 200 * 4);
  for (std::size_t r = 0; r < 200; ++r) {
    const auto& hit = s[4 * r];
    CHECK(hit.occ == 1);
    const double range = (hit.query.head<3>() - origin).norm();
    for (std::size_t k = 1; k < 4; ++k) {
      CHECK(s[4 * r + k].occ == 0);
      CHECK((s[4 * r + k].query.head<3>() - origin).norm() < range - eps);
    }
  }
  CHECK_THROWS_AS(generate_labels(c, origin, 0, 3, eps, rng), std::invalid_argument);
}

TEST_CASE("free-sample ranges are uniform by Kolmogorov-Smirnov") {
  PointCloud c(1);
  c.xyz.col(0) = Eigen::Vector3d(0, 30, 0);
  Rng rng(12);
  const int n = 100000;
  const double eps = 0.5, L = 30 - eps;
  const auto s = generate_labels(c, Eigen::Vector3d::Zero(), 1, n, eps, rng);
  std::vector<double> r;
  for (std::size_t i = 1; i < s.size(); ++i) r.push_back(s[i].query.head<3>().norm() / L);
  std::sort(r.begin(), r.end());
  double D = 0;
  for (std::size_t i = 0; i < r.size(); ++i)
    D = std::max({D, double(i + 1) / n - r[i], r[i] - double(i) / n});
  CHECK(D < 1.628 / std::sqrt(double(n)));
}

TEST_CASE("sample dump lines") {
  SupervisionSample a, b;
  a.query << 1, 2, 3, -1;
  a.occ = 1;
  a.velocity = Eigen::Vector3d(0.5, 0, 0);
  b.query << 0, 0, 0.25, 0;
  std::ostringstream os;
  dump_samples_jsonl(os, {a, b});
  CHECK(os.str() == "{\"q\":[1,2,3,-1],\"occ\":1,\"vel\":[0.5,0,0]}\n{\"q\":[0,0,0.25,0],\"occ\":0,\"vel\":null}\n");
}

TEST_CASE("occupancy loss of a constant one-half decoder is ln 2") {
  Rng rng(13);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d::Constant(-4), Eigen::Vector3d::Constant(4));
  const auto pyr = random_pyramid(rng, spec, 8, 0.5, 2);
  OccVelDecoder<double> dec("dec", 8, small_config(), rng);
  set_constant_occupancy(dec, 0.0);
  std::vector<SupervisionSample> samples(10);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].query << rng.uniform(-1, 1), rng.uniform(-1, 1), 0, 0;
    samples[i].occ = int(i % 2);
  }
  nn::Tape<double> tape(false);
  const auto l = ssl_loss(samples, dec, constant_view(tape, pyr), EgoPath(), 0.1);
  CHECK(l.occ.value()(0, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK_FALSE(l.vel.valid());
}

TEST_CASE("perfect predictions drive both losses to zero") {
  Rng rng(14);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d::Constant(-4), Eigen::Vector3d::Constant(4));
  const auto pyr = random_pyramid(rng, spec, 8, 0.5, 2);
  OccVelDecoder<double> dec("dec", 8, small_config(), rng);
  set_constant_occupancy(dec, 40.0);
  dec.f_vel.last().zero();
  std::vector<SupervisionSample> samples(5);
  for (auto& s : samples) {
    s.query << rng.uniform(-1, 1), rng.uniform(-1, 1), 0, 0;
    s.occ = 1;
    s.velocity = Eigen::Vector3d::Zero();
  }
  nn::Tape<double> tape(false);
  const auto l = ssl_loss(samples, dec, constant_view(tape, pyr), EgoPath(), 0.1);
  CHECK(l.occ.value()(0, 0) < 1e-15);
  CHECK(l.vel.value()(0, 0) == 0.0);
  CHECK_THROWS_AS(ssl_loss({}, dec, constant_view(tape, pyr), EgoPath(), 0.1), std::invalid_argument);
}

TEST_CASE("loss equals a hand-summed per-sample oracle") {
  Rng rng(15);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d::Constant(-4), Eigen::Vector3d::Constant(4));
  const auto pyr = random_pyramid(rng, spec, 8, 0.5, 2);
  OccVelDecoder<double> dec("dec", 8, small_config(), rng);
  randomize(dec.f_pose, rng, 0.2);
  std::vector<SupervisionSample> samples(40);
  for (auto& s : samples) {
    s.query << rng.uniform(-5, 5), rng.uniform(-3, 3), rng.uniform(-3, 3), 0;  // some fall outside
    s.occ = rng.uniform() < 0.5;
    s.weight = rng.uniform(0.5, 2.0);
    if (s.occ && rng.uniform() < 0.7) s.velocity = Eigen::Vector3d(rng.uniform(-5, 5), rng.uniform(-5, 5), 0);
  }
  Eigen::MatrixXd q(40, 4);
  for (Eigen::Index b = 0; b < 40; ++b) q.row(b) = samples[std::size_t(b)].query.transpose();
  nn::Tape<double> tape(false);
  const auto d = decode_batch(dec, constant_view(tape, pyr), q, EgoPath());
  double occ_num = 0, occ_den = 0, vel = 0;
  int nv = 0;
  for (std::size_t b = 0; b < samples.size(); ++b) {
    if (!d.in_bounds[b]) continue;
    const auto& s = samples[b];
    occ_num += s.weight * bce(d.logits.value()(Eigen::Index(b), 0), s.occ);
    occ_den += s.weight;
    if (s.velocity) {
      vel += (d.velocity.value().row(Eigen::Index(b)).transpose() - *s.velocity).squaredNorm();
      nv += 3;
    }
  }
  const auto l = ssl_loss(samples, dec, constant_view(tape, pyr), EgoPath(), 0.1);
  CHECK(std::abs(l.occ.value()(0, 0) - occ_num / occ_den) < 1e-9);
  CHECK(std::abs(l.vel.value()(0, 0) - vel / nv) < 1e-9);
  CHECK(std::abs(l.total.value()(0, 0) - (occ_num / occ_den + 0.1 * vel / nv)) < 1e-9);

  SUBCASE("unlabelled samples leave the velocity term untouched") {
    auto more = samples;
    for (int i = 0; i < 5; ++i) {
      SupervisionSample s;
      s.query << rng.uniform(-1, 1), rng.uniform(-1, 1), 0, 0;
      s.occ = 1;
      more.push_back(s);
    }
    const auto l2 = ssl_loss(more, dec, constant_view(tape, pyr), EgoPath(), 0.1);
    CHECK(l2.vel.value()(0, 0) == doctest::Approx(l.vel.value()(0, 0)).epsilon(1e-14));
  }
}

TEST_CASE("forecast rendering follows the occupancy threshold") {
  Rng rng(16);
  const GridSpec spec = box_spec(0.5, Eigen::Vector3d(-2, -6, -3), Eigen::Vector3d(30, 6, 3));
  const auto pyr = random_pyramid(rng, spec, 8, 0.5, 2);
  OccVelDecoder<double> dec("dec", 8, small_config(), rng);
  Eigen::Matrix3Xd dirs(3, 20);
  for (Eigen::Index i = 0; i < 20; ++i)
    dirs.col(i) = Eigen::Vector3d(1, rng.uniform(-0.2, 0.2), rng.uniform(-0.1, 0.1)).normalized();
  RayMarch m;
  m.step = 0.25;
  m.max_range = 40;
  set_constant_occupancy(dec, -30.0);
  CHECK(forecast_cloud(dec, pyr, EgoPath(), dirs, 1.0, m).empty());
  set_constant_occupancy(dec, 30.0);
  const auto full = forecast_cloud(dec, pyr, EgoPath(), dirs, 1.0, m);
  REQUIRE(full.size() == 20);
  for (Eigen::Index i = 0; i < 20; ++i) CHECK(full.xyz.col(i).norm() == doctest::Approx(0.25));
  CHECK(full.timestamp == 1.0);
  CHECK_THROWS_AS(forecast_cloud(dec, pyr, EgoPath(), dirs, 1.0, RayMarch{1.0, 0.25, 10}), std::invalid_argument);
}

TEST_CASE("a decoder trained on a wall at 20 m renders returns near 20 m") {
  Rng rng(17);
  const GridSpec spec = box_spec(1.0, Eigen::Vector3d(-2, -10, -5), Eigen::Vector3d(30, 10, 5));
  std::vector<Eigen::Vector3i> coords;
  for (int j = -10; j < 10; ++j)
    for (int k = -5; k < 5; ++k) coords.emplace_back(20, j, k);
  const auto m = Eigen::Index(coords.size());
  auto base = SparseVoxelGrid<double>::from_sorted(spec, 1, coords, Mat<double>::Ones(m, 2), Mat<double>::Zero(m, 3),
                                                   std::vector<int>(std::size_t(m), 1));
  const auto pyr = pyramid_from(base, nullptr);
  DecoderConfig cfg;
  cfg.hidden = 32;
  cfg.position_scale = 32.0;
  OccVelDecoder<double> dec("dec", 8, cfg, rng);

  auto wall_cloud = [&](int n) {
    PointCloud c(n);
    for (int i = 0; i < n; ++i) c.xyz.col(i) = Eigen::Vector3d(20.0, rng.uniform(-6, 6), rng.uniform(-3, 3));
    return c;
  };
  nn::ParamList<double> params;
  dec.collect(params);
  nn::Adam<double> opt(3e-3, 5.0);
  for (int it = 0; it < 300; ++it) {
    const auto samples = generate_labels(wall_cloud(200), Eigen::Vector3d::Zero(), 128, 4, 1.0, rng);
    nn::zero_grads(params);
    nn::Tape<double> tape;
    const auto l = ssl_loss(samples, dec, constant_view(tape, pyr), EgoPath(), 0.1);
    tape.backward(l.total);
    opt.step(params);
  }
  const auto truth = wall_cloud(100);
  Eigen::Matrix3Xd dirs(3, truth.size());
  for (Eigen::Index i = 0; i < truth.size(); ++i) dirs.col(i) = truth.ray_direction(i);
  const auto out = forecast_cloud(dec, pyr, EgoPath(), dirs, 0.0, RayMarch{0.5, 0.5, 40});
  CHECK(out.size() >= 90);
  std::vector<double> dx;
  for (Eigen::Index i = 0; i < out.size(); ++i) dx.push_back(std::abs(out.xyz(0, i) - 20.0));
  std::sort(dx.begin(), dx.end());
  REQUIRE_FALSE(dx.empty());
  CHECK(dx[dx.size() / 2] < 1.0);
}
