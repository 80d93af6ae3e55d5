#pragma once

#include <functional>
#include <vector>

#include "regionbag/autodiff.hpp"
#include "regionbag/rng.hpp"

namespace rbtest {

using regionbag::Rng;
using regionbag::ad::Matrix;
using regionbag::ad::Param;
using regionbag::ad::ParamStore;
using regionbag::ad::Tape;
using regionbag::ad::Val;

inline Matrix random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = scale * rng.normal();
  return m;
}

inline Matrix random_unit_rows(int r, int c, Rng& rng) {
  Matrix m = random_matrix(r, c, rng);
  for (int i = 0; i < r; ++i) m.row(i).normalize();
  return m;
}

// Central-difference gradient check against the tape. `build` must construct
// a 1x1 loss from parameter leaves wired onto the given tape.
using BuildFn = std::function<Val(Tape&, std::vector<Param*>&)>;

inline double max_grad_rel_err(std::vector<Matrix> inputs, const BuildFn& build,
                               double h = 1e-5) {
  ParamStore store;
  std::vector<Param*> params;
  for (size_t i = 0; i < inputs.size(); ++i) {
    Param& p = store.create("in" + std::to_string(i), int(inputs[i].rows()),
                            int(inputs[i].cols()));
    p.value = inputs[i];
    params.push_back(&p);
  }
  auto eval = [&]() {
    Tape tape;
    std::vector<Param*> ps = params;
    Val loss = build(tape, ps);
    return tape.value(loss)(0, 0);
  };
  // analytic
  store.zero_grad();
  {
    Tape tape;
    std::vector<Param*> ps = params;
    Val loss = build(tape, ps);
    tape.backward(loss);
  }
  double worst = 0.0;
  for (Param* p : params) {
    for (int c = 0; c < p->value.cols(); ++c) {
      for (int r = 0; r < p->value.rows(); ++r) {
        const double keep = p->value(r, c);
        p->value(r, c) = keep + h;
        const double fp = eval();
        p->value(r, c) = keep - h;
        const double fm = eval();
        p->value(r, c) = keep;
        const double fd = (fp - fm) / (2 * h);
        const double an = p->grad(r, c);
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6});
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

// Per-group central-difference check over sampled coordinates. Gradients must
// already be accumulated in the params; `eval` re-evaluates the loss. The
// error metric is norm-relative within each sampled group.
template <typename EvalFn>
double sampled_group_fd_err(const std::vector<std::unique_ptr<Param>>& params, EvalFn eval,
                            Rng& rng, int per_group = 8, double h = 1e-3) {
  double worst = 0.0;
  for (const auto& p : params) {
    double num = 0.0, den = 0.0;
    for (int k = 0; k < per_group; ++k) {
      const int r = int(rng.uniform_int(p->value.rows()));
      const int c = int(rng.uniform_int(p->value.cols()));
      const double keep = p->value(r, c);
      p->value(r, c) = keep + h;
      const double fp = eval();
      p->value(r, c) = keep - h;
      const double fm = eval();
      p->value(r, c) = keep;
      const double fd = (fp - fm) / (2 * h);
      const double an = p->grad(r, c);
      num += (an - fd) * (an - fd);
      den += an * an;
    }
    worst = std::max(worst, std::sqrt(num) / std::max(std::sqrt(den), 1e-8));
  }
  return worst;
}

}  // namespace rbtest
