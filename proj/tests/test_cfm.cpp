#include <doctest.h>

#include "ctefm/cfm.hpp"
#include "helpers.hpp"

using namespace ctefm;
using namespace ctefm::nn;

namespace {

VfConfig tiny_vf() {
  VfConfig cfg;
  cfg.n_mels = 6;
  cfg.cond_dim = 8;
  cfg.timbre_dim = 10;
  cfg.base_channels = 6;
  cfg.mid_channels = 8;
  cfg.kernel = 3;
  cfg.temb_dim = 8;
  return cfg;
}

Matrix random_matrix(std::uint64_t seed, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Rng rng(seed);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
  }
  return m;
}

void randomize(ParamStore& store, std::uint64_t seed) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store.at(i);
    const bool ln_gain = p.name.find(".ln.g") != std::string::npos;
    if (ln_gain) {
      p.value.setOnes();
    } else {
      p.value = random_matrix(Rng::derive(seed, i), p.value.rows(), p.value.cols(),
                              1.0 / std::sqrt(double(p.value.rows())));
    }
  }
}

}  // namespace

TEST_SUITE_BEGIN("cfm");

TEST_CASE("ot_flow endpoints and hand values") {
  FlowSchedule sched;  // sigma_min = 1e-4
  Matrix z(1, 2), x(1, 2);
  z << 2.0, 2.0;
  x << 1.0, 1.0;

  const Matrix at0 = ot_flow(0.0, z, x, sched);
  CHECK((at0 - x).cwiseAbs().maxCoeff() == 0.0);

  const Matrix at1 = ot_flow(1.0, z, x, sched);
  CHECK(at1(0, 0) == doctest::Approx(2.0001).epsilon(1e-12));
  CHECK(at1(0, 1) == doctest::Approx(2.0001).epsilon(1e-12));

  FlowSchedule zero;
  zero.sigma_min = 0.0;
  Matrix z2(1, 2), x2(1, 2);
  z2 << 4.0, 0.0;
  x2 << 2.0, 2.0;
  const Matrix mid = ot_flow(0.5, z2, x2, zero);
  CHECK(mid(0, 0) == doctest::Approx(3.0));
  CHECK(mid(0, 1) == doctest::Approx(1.0));

  CHECK_THROWS_AS(ot_flow(-0.1, z, x, sched), std::runtime_error);
  CHECK_THROWS_AS(ot_flow(1.1, z, x, sched), std::runtime_error);
}

TEST_CASE("ot_flow endpoint identities over many random tensors") {
  FlowSchedule sched;
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto r = static_cast<Eigen::Index>(rng.uniform_int(1, 8));
    const auto c = static_cast<Eigen::Index>(rng.uniform_int(1, 8));
    const Matrix z = random_matrix(Rng::derive(6, i), r, c, 3.0);
    const Matrix x = random_matrix(Rng::derive(7, i), r, c, 3.0);
    CHECK((ot_flow(0.0, z, x, sched) - x).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((ot_flow(1.0, z, x, sched) - (z + sched.sigma_min * x)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("path is straight: two-point slope equals the target vector") {
  FlowSchedule sched;
  const Matrix x1 = random_matrix(8, 3, 4, 2.0);
  const Matrix x0 = random_matrix(9, 3, 4);
  const Matrix u = target_vector(x0, x1, sched);
  for (double t : {0.1, 0.45, 0.8}) {
    const double h2 = 0.05;
    const Matrix slope =
        (ot_flow(t + h2, x1, x0, sched) - ot_flow(t - h2, x1, x0, sched)) / (2.0 * h2);
    CHECK((slope - u).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("target_vector special cases and hand value") {
  FlowSchedule sched;
  const Matrix x1 = random_matrix(10, 2, 3);
  CHECK((target_vector(Matrix::Zero(2, 3), x1, sched) - x1).cwiseAbs().maxCoeff() == 0.0);

  FlowSchedule one;
  one.sigma_min = 1.0 - 1e-15;  // sigma_min < 1 required; coefficient ~0
  CHECK((target_vector(x1, x1, one) - x1).cwiseAbs().maxCoeff() < 1e-12);

  Matrix x0(1, 2), x1b(1, 2);
  x0 << 1.0, 1.0;
  x1b << 2.0, 0.0;
  const Matrix u = target_vector(x0, x1b, sched);
  CHECK(u(0, 0) == doctest::Approx(1.0001).epsilon(1e-12));
  CHECK(u(0, 1) == doctest::Approx(-0.9999).epsilon(1e-12));
}

TEST_CASE("vector field: shape, frame mismatch, timestep sensitivity") {
  const VfConfig cfg = tiny_vf();
  ParamStore store;
  VfParams params = VfParams::build(store, cfg);
  randomize(store, 11);

  const Matrix x = random_matrix(12, 9, cfg.n_mels);
  const Matrix h = random_matrix(13, 9, cfg.cond_dim);
  const Vector ft = random_matrix(14, cfg.timbre_dim, 1).col(0);

  const Matrix out = vector_field_forward(x, 0.3, h, ft, params);
  CHECK(out.rows() == 9);
  CHECK(out.cols() == cfg.n_mels);

  const Matrix out2 = vector_field_forward(x, 0.7, h, ft, params);
  CHECK((out - out2).cwiseAbs().maxCoeff() > 1e-8);

  const Matrix h_bad = random_matrix(15, 8, cfg.cond_dim);
  CHECK_THROWS_WITH_AS(vector_field_forward(x, 0.3, h_bad, ft, params),
                       doctest::Contains("frame-count mismatch"), std::runtime_error);
}

TEST_CASE("vector field input gradient matches finite differences") {
  const VfConfig cfg = tiny_vf();
  ParamStore store;
  VfParams params = VfParams::build(store, cfg);
  randomize(store, 21);

  ParamStore xstore;
  Parameter& x = xstore.create("x", 7, cfg.n_mels);
  x.value = random_matrix(22, 7, cfg.n_mels);
  const Matrix h = random_matrix(23, 7, cfg.cond_dim);
  const Matrix ft = random_matrix(24, 1, cfg.timbre_dim);
  const Matrix readout = random_matrix(25, 7, cfg.n_mels);

  auto build = [&](Tape& tape) {
    Var out = vector_field_graph(tape, params, tape.param(x), 0.4, tape.constant(h),
                                 tape.constant(ft));
    return sum_all(mul(out, tape.constant(readout)));
  };
  auto loss = [&]() {
    Tape tape;
    return build(tape).scalar();
  };
  Tape tape;
  Var root = build(tape);
  tape.backward(root);
  const Matrix g = tape.param_grad(x);
  CHECK(test::max_grad_rel_err(x.value, g, loss, 30, 26, 1e-5) < 1e-4);
}

TEST_CASE("vector field parameter gradients match finite differences") {
  const VfConfig cfg = tiny_vf();
  ParamStore store;
  VfParams params = VfParams::build(store, cfg);
  randomize(store, 31);

  const Matrix x = random_matrix(32, 6, cfg.n_mels);
  const Matrix h = random_matrix(33, 6, cfg.cond_dim);
  const Matrix ft = random_matrix(34, 1, cfg.timbre_dim);
  const Matrix readout = random_matrix(35, 6, cfg.n_mels);

  auto build = [&](Tape& tape) {
    Var out = vector_field_graph(tape, params, tape.constant(x), 0.6, tape.constant(h),
                                 tape.constant(ft));
    return sum_all(mul(out, tape.constant(readout)));
  };
  auto loss = [&]() {
    Tape tape;
    return build(tape).scalar();
  };
  Tape tape;
  Var root = build(tape);
  tape.backward(root);
  std::vector<Matrix> acc(store.size());
  tape.collect_param_grads(acc);
  for (std::size_t i = 0; i < store.size(); ++i) {
    Parameter& p = store.at(i);
    const int probes = static_cast<int>(std::min<Eigen::Index>(p.value.size(), 5));
    const double err =
        test::max_grad_rel_err(p.value, acc[i], loss, probes, Rng::derive(36, i), 1e-5);
    INFO("param ", p.name);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("cfm_loss: oracle regressor gives exactly zero") {
  // the oracle recovers x0 from (x_t, t) and emits the exact target vector
  FlowSchedule sched;
  const Matrix x1 = random_matrix(41, 5, 4, 2.0);
  const CondField oracle = [&](const Matrix& xt, double t) {
    const double denom = 1.0 - (1.0 - sched.sigma_min) * t;
    const Matrix x0_rec = (xt - t * x1) / denom;
    return target_vector(x0_rec, x1, sched);
  };
  Rng rng(42);
  for (int i = 0; i < 100; ++i) {
    CHECK(cfm_loss_field(oracle, x1, rng, sched) <= 1e-12);
  }
}

TEST_CASE("cfm_loss with a zero net equals mean squared target") {
  // zero-init final conv makes a freshly built net the zero field
  const VfConfig cfg = tiny_vf();
  ParamStore store;
  VfParams params = VfParams::build(store, cfg);
  randomize(store, 43);
  params.out_w->value.setZero();
  params.out_b->value.setZero();

  FlowSchedule sched;
  const Matrix x1 = random_matrix(44, 6, cfg.n_mels, 1.5);
  const Matrix h = random_matrix(45, 6, cfg.cond_dim);
  const Vector ft = random_matrix(46, cfg.timbre_dim, 1).col(0);

  // x0 = 0 fixed: loss reduces to mean(x1^2)
  const double loss = cfm_loss_at(params, x1, h, ft, 0.37, Matrix::Zero(6, cfg.n_mels), sched);
  CHECK(loss == doctest::Approx(x1.squaredNorm() / x1.size()).epsilon(1e-12));
}

TEST_CASE("cfm_loss is deterministic under a fixed seed") {
  const VfConfig cfg = tiny_vf();
  ParamStore store;
  VfParams params = VfParams::build(store, cfg);
  randomize(store, 47);
  const Matrix x1 = random_matrix(48, 5, cfg.n_mels);
  const Matrix h = random_matrix(49, 5, cfg.cond_dim);
  const Vector ft = random_matrix(50, cfg.timbre_dim, 1).col(0);
  Rng a(99), b(99);
  CHECK(cfm_loss(params, x1, h, ft, a, {}) == cfm_loss(params, x1, h, ft, b, {}));
}

TEST_CASE("monte carlo loss matches a quadrature oracle on a toy instance") {
  // 2x2 instance, fixed x0; the only randomness is t ~ U[0,1]
  FlowSchedule sched;
  Matrix x1(2, 2), x0(2, 2);
  x1 << 1.0, -0.5, 0.25, 2.0;
  x0 << 0.3, -1.2, 0.8, -0.1;
  // a fixed affine stand-in field keeps the oracle independent of any net
  const CondField field = [&](const Matrix& x, double t) {
    return Matrix((0.7 * x.array() + 0.2 * t - 0.1).matrix());
  };
  auto loss_at = [&](double t) { return cfm_loss_field_at(field, x1, t, x0, sched); };

  // quadrature over a 1001-point grid (midpoint rule)
  const int grid = 1001;
  double quad = 0.0;
  for (int i = 0; i < grid; ++i) quad += loss_at((i + 0.5) / grid);
  quad /= grid;

  Rng rng(123);
  double mc = 0.0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) mc += loss_at(rng.uniform());
  mc /= draws;

  CHECK(std::abs(mc - quad) / quad < 0.01);
}

TEST_CASE("euler: zero field returns the initial noise, constant field adds c") {
  const Matrix x0 = random_matrix(51, 4, 3);
  const Matrix out = euler_integrate([](const Matrix& x, double) { return Matrix::Zero(4, 3); },
                                     x0, 17);
  CHECK((out - x0).cwiseAbs().maxCoeff() == 0.0);

  const Matrix c = random_matrix(52, 4, 3);
  for (int steps : {1, 7, 20}) {
    const Matrix got = euler_integrate([&](const Matrix&, double) { return c; }, x0, steps);
    CHECK((got - (x0 + c)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("euler on v(x) = -x matches the discrete closed form and halves its error") {
  const Matrix x0 = random_matrix(53, 3, 5, 2.0);
  auto decay = [](const Matrix& x, double) { return Matrix(-x); };

  const Matrix at20 = euler_integrate(decay, x0, 20);
  const Matrix closed = std::pow(1.0 - 1.0 / 20.0, 20) * x0;
  CHECK((at20 - closed).cwiseAbs().maxCoeff() < 1e-12);

  const Matrix exact = std::exp(-1.0) * x0;
  double prev_err = -1.0;
  for (int steps : {5, 10, 20, 40, 80}) {
    const Matrix got = euler_integrate(decay, x0, steps);
    const double err = (got - exact).cwiseAbs().maxCoeff();
    if (prev_err > 0.0) {
      const double ratio = prev_err / err;
      CHECK(ratio > 1.8);
      CHECK(ratio < 2.2);
    }
    prev_err = err;
  }
}

TEST_CASE("euler reports divergence with the step index") {
  const Matrix x0 = Matrix::Ones(2, 2);
  auto blowup = [](const Matrix& x, double t) {
    return t > 0.5 ? Matrix(Matrix::Constant(2, 2, std::numeric_limits<double>::infinity()))
                   : Matrix(Matrix::Zero(2, 2));
  };
  CHECK_THROWS_WITH_AS(euler_integrate(blowup, x0, 10), doctest::Contains("diverged at step"),
                       std::runtime_error);
}

TEST_CASE("euler_sample is deterministic and conditioning-sensitive") {
  const VfConfig cfg = tiny_vf();
  ParamStore store;
  VfParams params = VfParams::build(store, cfg);
  randomize(store, 61);

  const Matrix h = random_matrix(62, 8, cfg.cond_dim);
  Vector ft = random_matrix(63, cfg.timbre_dim, 1).col(0);

  Rng r1(7), r2(7), r3(7);
  const MelSpectrogram a = euler_sample(params, h, ft, 5, r1, {});
  const MelSpectrogram b = euler_sample(params, h, ft, 5, r2, {});
  CHECK((a.frames - b.frames).cwiseAbs().maxCoeff() == 0.0);

  Vector ft2 = ft;
  ft2(0) += 0.5;
  const MelSpectrogram c = euler_sample(params, h, ft2, 5, r3, {});
  CHECK((a.frames - c.frames).cwiseAbs().maxCoeff() > 1e-9);
}

TEST_SUITE_END();
