#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace regionbag::ad {

using Matrix = Eigen::MatrixXd;

// Named trainable tensor. Gradients accumulate into `grad` across tape
// backward passes until zero_grad().
struct Param {
  std::string name;
  Matrix value;
  Matrix grad;
};

class ParamStore {
 public:
  Param& create(const std::string& name, int rows, int cols);
  Param& create_normal(const std::string& name, int rows, int cols, double stddev,
                       class RngRef rng);
  Param* find(const std::string& name);
  const std::vector<std::unique_ptr<Param>>& all() const { return params_; }
  void zero_grad();

 private:
  std::vector<std::unique_ptr<Param>> params_;
};

// Thin adapter so the store does not depend on the Rng header.
class RngRef {
 public:
  template <typename R>
  RngRef(R& rng) : draw_([&rng]() { return rng.normal(); }) {}
  double normal() const { return draw_(); }

 private:
  std::function<double()> draw_;
};

class Tape;

// Handle to a node on a tape. Cheap to copy.
struct Val {
  Tape* tape = nullptr;
  int id = -1;
  bool ok() const { return tape != nullptr && id >= 0; }
};

// Fixed linear row-mixing map: out(out_row, :) += w * in(in_row, :).
struct RowMixEntry {
  int out_row;
  int in_row;
  double w;
};

// im2col plan: out(p, t*C + c) = src(p,t) >= 0 ? in(src(p,t), c) : 0
struct Im2ColPlan {
  int out_rows = 0;
  int taps = 0;
  std::vector<int> src;  // out_rows * taps, spatial row index or -1 for padding
};

// Reverse-mode tape over double matrices. Build a graph per step; call
// backward() on a 1x1 loss; param gradients land in their Param::grad.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Val constant(Matrix m);
  Val param(Param& p);

  const Matrix& value(Val v) const;
  const Matrix& grad(Val v) const;

  void backward(Val loss);

  size_t size() const { return nodes_.size(); }

 private:
  friend Val add(Val a, Val b);
  friend Val sub(Val a, Val b);
  friend Val cmul(Val a, Val b);
  friend Val scale(Val a, double s);
  friend Val add_rowvec(Val a, Val row);
  friend Val matmul(Val a, Val b);
  friend Val matmul_nt(Val a, Val b);
  friend Val matmul_tn(Val a, Val b);
  friend Val transpose(Val a);
  friend Val concat_rows(const std::vector<Val>& parts);
  friend Val concat_cols(const std::vector<Val>& parts);
  friend Val slice_rows(Val a, int r0, int n);
  friend Val slice_cols(Val a, int c0, int n);
  friend Val select_rows(Val a, const std::vector<int>& idx);
  friend Val mean_rows(Val a);
  friend Val sum_all(Val a);
  friend Val mean_all(Val a);
  friend Val tanh_op(Val a);
  friend Val gelu(Val a);
  friend Val softmax_rows(Val a);
  friend Val log_softmax_rows(Val a);
  friend Val layer_norm(Val x, Val gain, Val bias, double eps);
  friend Val l2_normalize_rows(Val x, double eps);
  friend Val row_mix(Val a, const std::vector<RowMixEntry>& entries, int out_rows);
  friend Val im2col(Val a, const Im2ColPlan& plan) /* a: (H*W) x C */;
  friend Val reshape_rowmajor(Val a, int rows, int cols);
  friend Val pick(Val a, int r, int c);
  friend Val weighted_sum(Val a, const Matrix& weights);
  friend Val trace_select(Val a, const std::vector<int>& rows, const std::vector<int>& cols);
  friend Val add_n(const std::vector<Val>& terms);

  struct Node {
    Matrix val;
    Matrix grad;
    bool needs_grad = false;
    std::function<void(Tape&)> backprop;  // may be empty for leaves/constants
  };

  int push(Matrix val, bool needs_grad, std::function<void(Tape&)> backprop);
  Matrix& grad_ref(int id) { return nodes_[id].grad; }
  const Matrix& val_ref(int id) const { return nodes_[id].val; }

  std::vector<Node> nodes_;
};

// ---- op builders (declared as friends above) ----
Val add(Val a, Val b);
Val sub(Val a, Val b);
Val cmul(Val a, Val b);
Val scale(Val a, double s);
Val add_rowvec(Val a, Val row);
Val matmul(Val a, Val b);
Val matmul_nt(Val a, Val b);
Val matmul_tn(Val a, Val b);
Val transpose(Val a);
Val concat_rows(const std::vector<Val>& parts);
Val concat_cols(const std::vector<Val>& parts);
Val slice_rows(Val a, int r0, int n);
Val slice_cols(Val a, int c0, int n);
Val select_rows(Val a, const std::vector<int>& idx);
Val mean_rows(Val a);
Val sum_all(Val a);
Val mean_all(Val a);
Val tanh_op(Val a);
Val gelu(Val a);
Val softmax_rows(Val a);
Val log_softmax_rows(Val a);
Val layer_norm(Val x, Val gain, Val bias, double eps = 1e-5);
Val l2_normalize_rows(Val x, double eps = 1e-12);
Val row_mix(Val a, const std::vector<RowMixEntry>& entries, int out_rows);
Val im2col(Val a, const Im2ColPlan& plan);
Val reshape_rowmajor(Val a, int rows, int cols);
Val pick(Val a, int r, int c);
Val weighted_sum(Val a, const Matrix& weights);
Val trace_select(Val a, const std::vector<int>& rows, const std::vector<int>& cols);
Val add_n(const std::vector<Val>& terms);

}  // namespace regionbag::ad
