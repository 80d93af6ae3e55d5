#include "regionbag/grid_pool.hpp"

#include "doctest.h"
#include "regionbag/rng.hpp"
#include "test_util.hpp"

using namespace regionbag;
using ad::Matrix;

namespace {

// reference evaluation of the clamped bilinear field at a point
double field_at(const Matrix& grid, int gw, int gh, int col, double u, double v) {
  u = std::clamp(u, 0.0, double(gw - 1));
  v = std::clamp(v, 0.0, double(gh - 1));
  const int i0 = std::min(int(std::floor(u)), gw - 2 >= 0 ? gw - 2 : 0);
  const int j0 = std::min(int(std::floor(v)), gh - 2 >= 0 ? gh - 2 : 0);
  const double fu = u - i0, fv = v - j0;
  auto g = [&](int i, int j) { return grid(j * gw + i, col); };
  if (gw == 1 && gh == 1) return g(0, 0);
  if (gw == 1) return g(0, j0) * (1 - fv) + g(0, j0 + 1) * fv;
  if (gh == 1) return g(i0, 0) * (1 - fu) + g(i0 + 1, 0) * fu;
  return g(i0, j0) * (1 - fu) * (1 - fv) + g(i0 + 1, j0) * fu * (1 - fv) +
         g(i0, j0 + 1) * (1 - fu) * fv + g(i0 + 1, j0 + 1) * fu * fv;
}

// dense midpoint average over the box: the independent oracle
double dense_average(const Matrix& grid, int gw, int gh, int col, double u0, double v0,
                     double u1, double v1, int samples) {
  double acc = 0;
  for (int sy = 0; sy < samples; ++sy) {
    for (int sx = 0; sx < samples; ++sx) {
      const double u = u0 + (u1 - u0) * (sx + 0.5) / samples;
      const double v = v0 + (v1 - v0) * (sy + 0.5) / samples;
      acc += field_at(grid, gw, gh, col, u, v);
    }
  }
  return acc / (double(samples) * samples);
}

}  // namespace

TEST_CASE("hat integrals sum to the interval length") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + int(rng.uniform_int(9));
    const double a = rng.uniform(-3.0, n + 1.0);
    const double b = a + rng.uniform(0.01, 5.0);
    double total = 0;
    for (int i = 0; i < n; ++i) total += clamped_hat_integral(i, n, a, b);
    CHECK(total == doctest::Approx(b - a).epsilon(1e-12));
  }
}

TEST_CASE("pooled value equals dense bilinear average") {
  Rng rng(4);
  const int gw = 8, gh = 8;
  const Matrix grid = rbtest::random_matrix(gw * gh, 3, rng);
  for (int trial = 0; trial < 40; ++trial) {
    const double u0 = rng.uniform(-1.5, gw - 1.0);
    const double u1 = u0 + rng.uniform(0.3, 4.0);
    const double v0 = rng.uniform(-1.5, gh - 1.0);
    const double v1 = v0 + rng.uniform(0.3, 4.0);
    const auto plan = make_grid_pool_plan(gw, gh, u0, v0, u1, v1, 1, 1);
    const Matrix pooled = apply_row_mix(grid, plan.entries, 1);
    for (int c = 0; c < 3; ++c) {
      const double want = dense_average(grid, gw, gh, c, u0, v0, u1, v1, 700);
      CHECK(pooled(0, c) == doctest::Approx(want).epsilon(2e-5));
    }
  }
}

TEST_CASE("constant field pools to the constant") {
  const int gw = 6, gh = 6;
  Matrix grid = Matrix::Zero(gw * gh, 2);
  grid.col(0).setConstant(3.25);
  grid.col(1).setConstant(-1.5);
  const auto plan = make_grid_pool_plan(gw, gh, -0.5, -0.5, 5.5, 5.5, 1, 1);
  const Matrix pooled = apply_row_mix(grid, plan.entries, 1);
  CHECK(pooled(0, 0) == doctest::Approx(3.25).epsilon(1e-12));
  CHECK(pooled(0, 1) == doctest::Approx(-1.5).epsilon(1e-12));
}

TEST_CASE("translation equivariance over a shifted grid") {
  // shifting both the box and the field contents by one full node leaves the
  // pooled value unchanged (away from the clamped border)
  Rng rng(5);
  const int gw = 10, gh = 10;
  Matrix grid(gw * gh, 1);
  for (int j = 0; j < gh; ++j)
    for (int i = 0; i < gw; ++i) grid(j * gw + i, 0) = rng.normal();
  Matrix shifted(gw * gh, 1);
  for (int j = 0; j < gh; ++j)
    for (int i = 0; i < gw; ++i)
      shifted(j * gw + i, 0) = grid(j * gw + std::min(i + 1, gw - 1), 0);

  const double u0 = 2.2, v0 = 3.1, u1 = 5.7, v1 = 6.4;
  const auto plan1 = make_grid_pool_plan(gw, gh, u0 + 1, v0, u1 + 1, v1, 1, 1);
  const auto plan2 = make_grid_pool_plan(gw, gh, u0, v0, u1, v1, 1, 1);
  const double a = apply_row_mix(grid, plan1.entries, 1)(0, 0);
  const double b = apply_row_mix(shifted, plan2.entries, 1)(0, 0);
  CHECK(a == doctest::Approx(b).epsilon(1e-10));
}

TEST_CASE("zero-outside pooling matches manual zero padding") {
  Rng rng(6);
  const int gw = 6, gh = 6;
  const Matrix grid = rbtest::random_matrix(gw * gh, 1, rng);
  // box hangs off the left image border (image spans u in [-0.5, 5.5])
  const double u0 = -3.5, u1 = 2.5, v0 = 1.0, v1 = 4.0;
  const auto plan = make_grid_pool_plan(gw, gh, u0, v0, u1, v1, 1, 1, true, -0.5, 5.5,
                                        -0.5, 5.5);
  const double got = apply_row_mix(grid, plan.entries, 1)(0, 0);
  // manual: integral over the inside part only, divided by the full area
  const auto inside = make_grid_pool_plan(gw, gh, -0.5, v0, 2.5, v1, 1, 1);
  const double inside_avg = apply_row_mix(grid, inside.entries, 1)(0, 0);
  const double want = inside_avg * (2.5 - (-0.5)) / (u1 - u0);
  CHECK(got == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("multi-bin pooling splits the box") {
  Rng rng(7);
  const int gw = 8, gh = 8;
  const Matrix grid = rbtest::random_matrix(gw * gh, 2, rng);
  const double u0 = 0.7, v0 = 1.2, u1 = 6.3, v1 = 5.9;
  const auto plan = make_grid_pool_plan(gw, gh, u0, v0, u1, v1, 2, 2);
  const Matrix pooled = apply_row_mix(grid, plan.entries, 4);
  const double um = 0.5 * (u0 + u1), vm = 0.5 * (v0 + v1);
  const double corners[4][4] = {{u0, v0, um, vm}, {um, v0, u1, vm}, {u0, vm, um, v1},
                                {um, vm, u1, v1}};
  for (int b = 0; b < 4; ++b) {
    const auto single = make_grid_pool_plan(gw, gh, corners[b][0], corners[b][1],
                                            corners[b][2], corners[b][3], 1, 1);
    const Matrix want = apply_row_mix(grid, single.entries, 1);
    CHECK((pooled.row(b) - want.row(0)).cwiseAbs().maxCoeff() < 1e-12);
  }
}
