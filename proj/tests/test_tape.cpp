#include "doctest.h"

#include <cmath>

#include "support/gradcheck.hpp"
#include "svfuse/layers.hpp"
#include "svfuse/rng.hpp"

using namespace svfuse;
using namespace svfuse::nn;
using svfuse::testing::check_gradients;

namespace {

Tensor<double> random_tensor(const std::string& name, Eigen::Index r, Eigen::Index c, Rng& rng, double lo = -1,
                             double hi = 1) {
  Tensor<double> t(name, r, c);
  for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = rng.uniform(lo, hi);
  return t;
}

// Contracts a tensor to a scalar with fixed random weights so every output
// element carries a distinct gradient.
Var<double> contract(const Var<double>& v, std::uint64_t seed) {
  Rng rng(seed);
  Mat<double> w(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1, 1);
  return sum(mul(v, v.tape->constant(w)));
}

constexpr double kPrimitiveTol = 1e-4;
constexpr double kPrimitiveStep = 1e-4;

}  // namespace

TEST_CASE("softmax and sigmoid reference values") {
  Tape<double> t;
  auto s = softmax_lastdim(t.constant(Mat<double>::Zero(1, 3)));
  for (int i = 0; i < 3; ++i) CHECK(s.value()(0, i) == doctest::Approx(1.0 / 3.0));
  auto g = sigmoid(t.constant(Mat<double>::Zero(1, 1)));
  CHECK(g.value()(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("shape mismatch names both shapes") {
  Tape<double> t;
  auto a = t.constant(Mat<double>::Zero(3, 4));
  auto b = t.constant(Mat<double>::Zero(3, 4));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[3x4]") != std::string::npos);
    CHECK(msg.find("vs [3x4]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, t.constant(Mat<double>::Zero(4, 3))), ShapeError);
}

TEST_CASE("every primitive matches central finite differences on random 3x4 tensors") {
  Rng rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto A = random_tensor("A", 3, 4, rng);
    auto B = random_tensor("B", 3, 4, rng);
    auto W = random_tensor("W", 4, 3, rng);
    auto row = random_tensor("row", 1, 4, rng);
    auto col = random_tensor("col", 3, 1, rng);
    auto P = random_tensor("P", 3, 4, rng, 0.5, 1.5);  // kept away from relu/l1 kinks
    Mat<double> targets(3, 4);
    for (Eigen::Index i = 0; i < targets.size(); ++i) targets.data()[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    const std::uint64_t s = 100 + trial;

    struct Case {
      const char* name;
      std::function<Var<double>(Tape<double>&)> f;
      std::vector<Tensor<double>*> params;
    };
    std::vector<Case> cases = {
        {"matmul", [&](Tape<double>& t) { return contract(matmul(t.param(A), t.param(W)), s); }, {&A, &W}},
        {"add", [&](Tape<double>& t) { return contract(add(t.param(A), t.param(B)), s); }, {&A, &B}},
        {"sub", [&](Tape<double>& t) { return contract(sub(t.param(A), t.param(B)), s); }, {&A, &B}},
        {"mul", [&](Tape<double>& t) { return contract(mul(t.param(A), t.param(B)), s); }, {&A, &B}},
        {"add_row", [&](Tape<double>& t) { return contract(add_row(t.param(A), t.param(row)), s); }, {&A, &row}},
        {"mul_row", [&](Tape<double>& t) { return contract(mul_row(t.param(A), t.param(row)), s); }, {&A, &row}},
        {"mul_col", [&](Tape<double>& t) { return contract(mul_col(t.param(A), t.param(col)), s); }, {&A, &col}},
        {"sigmoid", [&](Tape<double>& t) { return contract(sigmoid(t.param(A)), s); }, {&A}},
        {"tanh", [&](Tape<double>& t) { return contract(nn::tanh(t.param(A)), s); }, {&A}},
        {"relu", [&](Tape<double>& t) { return contract(relu(sub(t.param(P), t.constant(Mat<double>::Constant(3, 4, 1.0)))), s); }, {&P}},
        {"softmax_lastdim", [&](Tape<double>& t) { return contract(softmax_lastdim(t.param(A)), s); }, {&A}},
        {"concat", [&](Tape<double>& t) { return contract(concat_cols<double>({t.param(A), t.param(B)}), s); }, {&A, &B}},
        {"slice", [&](Tape<double>& t) { return contract(slice_cols(t.param(A), 1, 2), s); }, {&A}},
        {"mean", [&](Tape<double>& t) { return mean(mul(t.param(A), t.param(A))); }, {&A}},
        {"sum", [&](Tape<double>& t) { return sum(mul(t.param(A), t.param(B))); }, {&A, &B}},
        {"mse", [&](Tape<double>& t) { return mse(t.param(A), t.param(B)); }, {&A, &B}},
        {"bce_with_logits", [&](Tape<double>& t) { return bce_with_logits(t.param(A), targets); }, {&A}},
        {"l1", [&](Tape<double>& t) { return l1(t.param(P), t.constant(Mat<double>::Zero(3, 4))); }, {&P}},
        {"normalize_cols", [&](Tape<double>& t) { return contract(normalize_cols(t.param(A), 1e-5), s); }, {&A}},
        {"sin_cos", [&](Tape<double>& t) { return contract(add(nn::sin(t.param(A)), nn::cos(t.param(B))), s); }, {&A, &B}},
    };
    for (auto& c : cases) {
      auto r = check_gradients(c.f, c.params, kPrimitiveStep);
      INFO(c.name << " worst " << r.worst);
      CHECK(r.max_rel_error < kPrimitiveTol);
    }
  }
}

TEST_CASE("gather, spmm and segment_max gradients") {
  Rng rng(11);
  auto A = random_tensor("A", 5, 3, rng);
  auto idx = std::make_shared<const std::vector<int>>(std::vector<int>{4, -1, 0, 0, 2, 3});
  auto f1 = [&](Tape<double>& t) { return contract(gather_rows(t.param(A), idx), 3); };
  CHECK(check_gradients(f1, {&A}, kPrimitiveStep).max_rel_error < kPrimitiveTol);

  auto table = std::make_shared<IndexTable>(3, 2);
  *table << 0, 1, -1, 4, 3, 3;
  std::shared_ptr<const IndexTable> ctable = table;
  auto f2 = [&](Tape<double>& t) { return contract(gather_neighbors(t.param(A), ctable), 5); };
  CHECK(check_gradients(f2, {&A}, kPrimitiveStep).max_rel_error < kPrimitiveTol);

  auto S = std::make_shared<SpMat<double>>(2, 5);
  S->insert(0, 1) = 0.5;
  S->insert(0, 3) = -2.0;
  S->insert(1, 4) = 1.5;
  std::shared_ptr<const SpMat<double>> cS = S;
  auto f3 = [&](Tape<double>& t) { return contract(spmm(cS, t.param(A)), 9); };
  CHECK(check_gradients(f3, {&A}, kPrimitiveStep).max_rel_error < kPrimitiveTol);

  const std::vector<int> seg{0, 1, 0, 2, 1};
  auto f4 = [&](Tape<double>& t) { return contract(segment_max(t.param(A), seg, 4), 13); };
  CHECK(check_gradients(f4, {&A}, kPrimitiveStep).max_rel_error < kPrimitiveTol);

  Tape<double> t;
  auto m = segment_max(t.constant(A.value), seg, 4);
  CHECK(m.value().row(3).isZero());
  CHECK(m.value()(0, 0) == std::max(A.value(0, 0), A.value(2, 0)));
}

TEST_CASE("clamp passes gradient only inside the bounds") {
  Tape<double> t;
  Mat<double> x(1, 3);
  x << -1.0, 0.5, 3.0;
  auto v = t.leaf(x, true);
  auto c = clamp(v, 0.0, 1.0);
  t.backward(sum(c));
  const Mat<double> g = t.grad(v);
  CHECK(g(0, 0) == 0.0);
  CHECK(g(0, 1) == 1.0);
  CHECK(g(0, 2) == 0.0);
  CHECK(c.value()(0, 2) == 1.0);
}

TEST_CASE("mgu gate extremes") {
  Rng rng(3);
  MguCell<double> cell("mgu", 4, 5, rng);
  Tape<double> t;
  Mat<double> xm(2, 4), hm(2, 5);
  for (Eigen::Index i = 0; i < xm.size(); ++i) xm.data()[i] = rng.uniform(-1, 1);
  for (Eigen::Index i = 0; i < hm.size(); ++i) hm.data()[i] = rng.uniform(-1, 1);
  auto x = t.constant(xm);
  auto h = t.constant(hm);

  SUBCASE("closed gate keeps the state") {
    cell.w_forget.value.setZero();
    cell.b_forget.value.setConstant(-1e4);
    auto out = cell(x, h);
    CHECK((out.value() - hm).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("open gate takes the candidate") {
    cell.w_forget.value.setZero();
    cell.b_forget.value.setConstant(1e4);
    auto out = cell(x, h);
    // with f = 1 the candidate sees the untouched state
    Mat<double> hx(2, 9);
    hx << hm, xm;
    Mat<double> cand = (hx * cell.w_cand.value).rowwise() + cell.b_cand.value.row(0);
    cand = cand.array().tanh().matrix();
    CHECK((out.value() - cand).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("mgu gradients and parameter budget") {
  Rng rng(5);
  MguCell<double> cell("mgu", 3, 4, rng);
  cell.b_forget.value.setRandom();
  cell.b_cand.value.setRandom();
  auto X = random_tensor("x", 2, 3, rng);
  auto H = random_tensor("h", 2, 4, rng);
  nn::ParamList<double> ps;
  cell.collect(ps);
  ps.push_back(&X);
  ps.push_back(&H);
  auto r = check_gradients([&](Tape<double>& t) { return contract(cell(t.param(X), t.param(H)), 21); }, ps, 1e-6);
  CHECK(r.max_rel_error < 1e-4);

  for (int hidden : {4, 16, 64}) {
    MguCell<double> c("m", 7, hidden, rng);
    CHECK(3 * c.parameter_count() == 2 * gru_parameter_count(7, hidden));
  }
}

TEST_CASE("sgd step") {
  SUBCASE("quadratic converges") {
    Tensor<double> p("p", 1, 1);
    for (int i = 0; i < 100; ++i) {
      p.zero_grad();
      Tape<double> t;
      auto d = add_scalar(t.param(p), -3.0);
      t.backward(sum(mul(d, d)));
      sgd_step<double>({&p}, 0.1);
    }
    CHECK(std::abs(p.value(0, 0) - 3.0) < 1e-3);
  }
  SUBCASE("zero gradient or zero lr leaves parameters") {
    Tensor<double> p("p", 2, 2);
    p.value << 1, 2, 3, 4;
    const Mat<double> before = p.value;
    p.zero_grad();
    sgd_step<double>({&p}, 0.5);
    CHECK(p.value == before);
    p.grad.setOnes();
    sgd_step<double>({&p}, 0.0);
    CHECK(p.value == before);
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(9);
  auto A = random_tensor("A", 3, 4, rng);
  auto W = random_tensor("W", 4, 2, rng);
  auto l1f = [&](Tape<double>& t) { return contract(nn::tanh(matmul(t.param(A), t.param(W))), 1); };
  auto l2f = [&](Tape<double>& t) { return contract(sigmoid(matmul(t.param(A), t.param(W))), 2); };
  auto grads = [&](const std::function<Var<double>(Tape<double>&)>& f) {
    A.zero_grad();
    W.zero_grad();
    Tape<double> t;
    t.backward(f(t));
    return std::make_pair(A.grad, W.grad);
  };
  auto [a1, w1] = grads(l1f);
  auto [a2, w2] = grads(l2f);
  auto [a12, w12] = grads([&](Tape<double>& t) { return add(l1f(t), l2f(t)); });
  CHECK((a12 - a1 - a2).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((w12 - w1 - w2).cwiseAbs().maxCoeff() < 1e-12);
}
