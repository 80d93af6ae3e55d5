#include "regionbag/grid_pool.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace regionbag {

namespace {

// antiderivative of the unit hat centered at 0, H(-inf)=0
double hat_antideriv(double t) {
  if (t <= -1.0) return 0.0;
  if (t <= 0.0) return 0.5 * (t + 1.0) * (t + 1.0);
  if (t <= 1.0) return 0.5 + t - 0.5 * t * t;
  return 1.0;
}

}  // namespace

double clamped_hat_integral(int i, int n, double a, double b) {
  if (b <= a) return 0.0;
  if (n == 1) return b - a;  // single node: constant field
  double total = 0.0;
  // left clamp region u < 0: field value is node 0's
  if (a < 0.0) {
    const double hi = std::min(b, 0.0);
    if (i == 0) total += hi - a;
  }
  // right clamp region u > n-1
  const double nm1 = static_cast<double>(n - 1);
  if (b > nm1) {
    const double lo = std::max(a, nm1);
    if (i == n - 1) total += b - lo;
  }
  // interior
  const double c = std::max(a, 0.0);
  const double d = std::min(b, nm1);
  if (d > c) total += hat_antideriv(d - i) - hat_antideriv(c - i);
  return total;
}

GridPoolPlan make_grid_pool_plan(int gw, int gh, double u0, double v0, double u1, double v1,
                                 int bins_x, int bins_y, bool zero_outside, double lo_u,
                                 double hi_u, double lo_v, double hi_v) {
  if (!(u1 > u0) || !(v1 > v0)) throw std::invalid_argument("grid pool: degenerate box");
  GridPoolPlan plan;
  plan.out_rows = bins_x * bins_y;
  const double bw = (u1 - u0) / bins_x;
  const double bh = (v1 - v0) / bins_y;
  for (int by = 0; by < bins_y; ++by) {
    for (int bx = 0; bx < bins_x; ++bx) {
      double a = u0 + bw * bx, b = u0 + bw * (bx + 1);
      double c = v0 + bh * by, d = v0 + bh * (by + 1);
      const double full_area = (b - a) * (d - c);
      if (zero_outside) {
        a = std::max(a, lo_u);
        b = std::min(b, hi_u);
        c = std::max(c, lo_v);
        d = std::min(d, hi_v);
        if (b <= a || d <= c) continue;  // bin entirely outside: zeros
      }
      std::vector<double> wx(gw), wy(gh);
      for (int i = 0; i < gw; ++i) wx[i] = clamped_hat_integral(i, gw, a, b);
      for (int j = 0; j < gh; ++j) wy[j] = clamped_hat_integral(j, gh, c, d);
      const int out_row = by * bins_x + bx;
      for (int j = 0; j < gh; ++j) {
        if (wy[j] == 0.0) continue;
        for (int i = 0; i < gw; ++i) {
          if (wx[i] == 0.0) continue;
          plan.entries.push_back({out_row, j * gw + i, wx[i] * wy[j] / full_area});
        }
      }
    }
  }
  return plan;
}

Eigen::MatrixXd apply_row_mix(const Eigen::MatrixXd& src,
                              const std::vector<ad::RowMixEntry>& entries, int out_rows) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(out_rows, src.cols());
  for (const auto& e : entries) out.row(e.out_row) += e.w * src.row(e.in_row);
  return out;
}

}  // namespace regionbag
