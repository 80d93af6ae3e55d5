#pragma once

#include <Eigen/Core>
#include <vector>

#include "regionbag/autodiff.hpp"
#include "regionbag/geometry.hpp"

namespace regionbag {

// Average pooling of a piecewise-bilinear field over axis-aligned bins.
//
// The field is defined by node values on a gw x gh grid (node (i,j) at grid
// coords (i,j), matrix row j*gw+i), bilinear between nodes and clamped
// (constant) beyond the border nodes. Pooled bin values are exact integrals
// of that field: bilinear interpolation is a tensor product of 1-D hat
// functions, so each node's integration weight separates into a product of
// 1-D hat integrals.

// Integral over [a,b] of the i-th clamped hat on nodes 0..n-1. The weights
// over all i sum to (b-a).
double clamped_hat_integral(int i, int n, double a, double b);

struct GridPoolPlan {
  std::vector<ad::RowMixEntry> entries;
  int out_rows = 0;
};

// Pool `box` (grid coordinates) into bins_x x bins_y bins (out row index
// by*bins_x + bx). When zero_outside is set, only [lo_u,hi_u]x[lo_v,hi_v]
// contributes (the field is zero elsewhere) while denominators remain the
// full bin area: zero padding semantics.
GridPoolPlan make_grid_pool_plan(int gw, int gh, double u0, double v0, double u1, double v1,
                                 int bins_x, int bins_y, bool zero_outside = false,
                                 double lo_u = 0, double hi_u = 0, double lo_v = 0,
                                 double hi_v = 0);

// image coords -> grid coords for a gw x gh grid spanning an image of size
// (img_w, img_h): u = x * gw / img_w - 0.5 puts node i at the center of the
// i-th of gw equal strips
inline double image_to_grid(double x, int g, double img_extent) {
  return x * g / img_extent - 0.5;
}

Eigen::MatrixXd apply_row_mix(const Eigen::MatrixXd& src,
                              const std::vector<ad::RowMixEntry>& entries, int out_rows);

}  // namespace regionbag
