#include "regionbag/autodiff.hpp"

#include "doctest.h"
#include "regionbag/nn.hpp"
#include "test_util.hpp"

using namespace regionbag;
using namespace regionbag::ad;
using rbtest::max_grad_rel_err;
using rbtest::random_matrix;

namespace {
Rng g_rng(42);

Matrix rand_w(int r, int c) {
  Rng rng = g_rng.derive(uint64_t(r * 131 + c));
  return rbtest::random_matrix(r, c, rng);
}
}  // namespace

TEST_CASE("primitive gradients match central differences") {
  Rng rng(1);
  const Matrix A = random_matrix(3, 4, rng);
  const Matrix B = random_matrix(3, 4, rng);
  const Matrix C = random_matrix(4, 5, rng);
  const Matrix R = random_matrix(1, 4, rng);
  const double tol = 1e-7;

  auto loss_of = [](Val v, const Matrix& w) { return weighted_sum(v, w); };

  SUBCASE("add / sub / cmul / scale") {
    const Matrix W = rand_w(3, 4);
    CHECK(max_grad_rel_err({A, B}, [&](Tape& t, auto& p) {
            return loss_of(add(t.param(*p[0]), t.param(*p[1])), W);
          }) < tol);
    CHECK(max_grad_rel_err({A, B}, [&](Tape& t, auto& p) {
            return loss_of(sub(t.param(*p[0]), t.param(*p[1])), W);
          }) < tol);
    CHECK(max_grad_rel_err({A, B}, [&](Tape& t, auto& p) {
            return loss_of(cmul(t.param(*p[0]), t.param(*p[1])), W);
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(scale(t.param(*p[0]), -1.7), W);
          }) < tol);
  }

  SUBCASE("matmul family") {
    const Matrix W35 = rand_w(3, 5);
    CHECK(max_grad_rel_err({A, C}, [&](Tape& t, auto& p) {
            return loss_of(matmul(t.param(*p[0]), t.param(*p[1])), W35);
          }) < tol);
    const Matrix W33 = rand_w(3, 3);
    CHECK(max_grad_rel_err({A, B}, [&](Tape& t, auto& p) {
            return loss_of(matmul_nt(t.param(*p[0]), t.param(*p[1])), W33);
          }) < tol);
    const Matrix W44 = rand_w(4, 4);
    CHECK(max_grad_rel_err({A, B}, [&](Tape& t, auto& p) {
            return loss_of(matmul_tn(t.param(*p[0]), t.param(*p[1])), W44);
          }) < tol);
    const Matrix W43 = rand_w(4, 3);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(transpose(t.param(*p[0])), W43);
          }) < tol);
  }

  SUBCASE("broadcast and reductions") {
    CHECK(max_grad_rel_err({A, R}, [&](Tape& t, auto& p) {
            return loss_of(add_rowvec(t.param(*p[0]), t.param(*p[1])), rand_w(3, 4));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(mean_rows(t.param(*p[0])), rand_w(1, 4));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return sum_all(t.param(*p[0]));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return mean_all(cmul(t.param(*p[0]), t.param(*p[0])));
          }) < tol);
  }

  SUBCASE("structure ops") {
    CHECK(max_grad_rel_err({A, B}, [&](Tape& t, auto& p) {
            return loss_of(concat_rows({t.param(*p[0]), t.param(*p[1])}), rand_w(6, 4));
          }) < tol);
    CHECK(max_grad_rel_err({A, B}, [&](Tape& t, auto& p) {
            return loss_of(concat_cols({t.param(*p[0]), t.param(*p[1])}), rand_w(3, 8));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(slice_rows(t.param(*p[0]), 1, 2), rand_w(2, 4));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(slice_cols(t.param(*p[0]), 1, 3), rand_w(3, 3));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(select_rows(t.param(*p[0]), {2, 0, 2}), rand_w(3, 4));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(reshape_rowmajor(t.param(*p[0]), 4, 3), rand_w(4, 3));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return pick(t.param(*p[0]), 1, 2);
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(trace_select(t.param(*p[0]), {0, 1}, {1, 3}), rand_w(1, 1));
          }) < tol);
  }

  SUBCASE("nonlinearities") {
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(tanh_op(t.param(*p[0])), rand_w(3, 4));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(gelu(t.param(*p[0])), rand_w(3, 4));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(softmax_rows(t.param(*p[0])), rand_w(3, 4));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(log_softmax_rows(t.param(*p[0])), rand_w(3, 4));
          }) < tol);
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(l2_normalize_rows(t.param(*p[0])), rand_w(3, 4));
          }) < tol);
  }

  SUBCASE("layer norm") {
    Rng r2(5);
    const Matrix gain = random_matrix(1, 4, r2, 0.5);
    const Matrix bias = random_matrix(1, 4, r2, 0.5);
    CHECK(max_grad_rel_err({A, gain, bias}, [&](Tape& t, auto& p) {
            return loss_of(
                layer_norm(t.param(*p[0]), t.param(*p[1]), t.param(*p[2])), rand_w(3, 4));
          }) < 1e-6);
  }

  SUBCASE("row_mix and im2col") {
    std::vector<RowMixEntry> entries = {{0, 0, 0.5}, {0, 2, 0.25}, {1, 1, 1.5}, {1, 0, -0.5}};
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(row_mix(t.param(*p[0]), entries, 2), rand_w(2, 4));
          }) < tol);
    Im2ColPlan plan;
    plan.out_rows = 2;
    plan.taps = 3;
    plan.src = {0, 1, -1, 2, -1, 0};
    CHECK(max_grad_rel_err({A}, [&](Tape& t, auto& p) {
            return loss_of(im2col(t.param(*p[0]), plan), rand_w(2, 12));
          }) < tol);
  }
}

TEST_CASE("constant leaves receive no gradient and cost no backward work") {
  Tape tape;
  Val c = tape.constant(Matrix::Ones(2, 2));
  ParamStore store;
  Param& p = store.create("p", 2, 2);
  p.value.setConstant(2.0);
  Val x = tape.param(p);
  Val loss = sum_all(cmul(c, x));
  tape.backward(loss);
  CHECK(p.grad(0, 0) == doctest::Approx(1.0));
  CHECK(tape.grad(c).isZero());
}

TEST_CASE("gradient accumulates across reuse of a node") {
  ParamStore store;
  Param& p = store.create("p", 1, 1);
  p.value(0, 0) = 3.0;
  Tape tape;
  Val x = tape.param(p);
  Val y = add(cmul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 7
  tape.backward(y);
  CHECK(p.grad(0, 0) == doctest::Approx(7.0));
}

TEST_CASE("multi-head attention block gradcheck") {
  using namespace regionbag::nn;
  Rng rng(9);
  ParamStore store;
  TransformerBlock block = TransformerBlock::create(store, "blk", 8, 2, 16, rng);
  const Matrix X = random_matrix(5, 8, rng, 0.7);
  const Matrix W = random_matrix(5, 8, rng);

  // check w.r.t. the input and a couple of parameter tensors
  ParamStore xstore;
  Param& px = xstore.create("x", 5, 8);
  px.value = X;

  auto build = [&](Tape& t) {
    Ctx ctx{t, true};
    Val out = block.apply(ctx, t.param(px), Eigen::RowVectorXd());
    return weighted_sum(out, W);
  };

  xstore.zero_grad();
  store.zero_grad();
  {
    Tape t;
    Val loss = build(t);
    t.backward(loss);
  }
  auto eval = [&]() {
    Tape t;
    return t.value(build(t))(0, 0);
  };
  const double h = 1e-5;
  double worst = 0.0;
  auto check_param = [&](Param& p) {
    for (int c = 0; c < p.value.cols(); ++c) {
      for (int r = 0; r < p.value.rows(); ++r) {
        const double keep = p.value(r, c);
        p.value(r, c) = keep + h;
        const double fp = eval();
        p.value(r, c) = keep - h;
        const double fm = eval();
        p.value(r, c) = keep;
        const double fd = (fp - fm) / (2 * h);
        const double an = p.grad(r, c);
        worst = std::max(worst,
                         std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-6}));
      }
    }
  };
  check_param(px);
  check_param(*store.find("blk.attn.q.W"));
  check_param(*store.find("blk.fc2.W"));
  check_param(*store.find("blk.ln1.gain"));
  CHECK(worst < 1e-6);
}

TEST_CASE("masked attention: masked keys get exactly zero weight") {
  using namespace regionbag::nn;
  Rng rng(10);
  ParamStore store;
  MultiHeadAttention attn = MultiHeadAttention::create(store, "a", 8, 2, rng);
  Matrix X = random_matrix(4, 8, rng);
  Eigen::RowVectorXd mask(4);
  mask << 0, 1, 0, 0;

  Tape t1;
  Ctx c1{t1, false};
  Val out1 = attn.apply(c1, t1.constant(X), mask);
  Matrix before = t1.value(out1);

  X.row(1).setConstant(55.0);  // perturb the masked token only
  Tape t2;
  Ctx c2{t2, false};
  Val out2 = attn.apply(c2, t2.constant(X), mask);
  Matrix after = t2.value(out2);

  // unmasked rows are bit-identical; the masked token's own row may change
  for (int r : {0, 2, 3}) CHECK((before.row(r) - after.row(r)).cwiseAbs().maxCoeff() == 0.0);
}
