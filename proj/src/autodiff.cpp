#include "regionbag/autodiff.hpp"

#include <cmath>
#include <stdexcept>

namespace regionbag::ad {

namespace {
void check_same_tape(Val a, Val b) {
  if (a.tape != b.tape) throw std::logic_error("autodiff: values from different tapes");
}
}  // namespace

Param& ParamStore::create(const std::string& name, int rows, int cols) {
  if (find(name)) throw std::logic_error("duplicate param name: " + name);
  auto p = std::make_unique<Param>();
  p->name = name;
  p->value = Matrix::Zero(rows, cols);
  p->grad = Matrix::Zero(rows, cols);
  params_.push_back(std::move(p));
  return *params_.back();
}

Param& ParamStore::create_normal(const std::string& name, int rows, int cols, double stddev,
                                 RngRef rng) {
  Param& p = create(name, rows, cols);
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) p.value(r, c) = stddev * rng.normal();
  return p;
}

Param* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

int Tape::push(Matrix val, bool needs_grad, std::function<void(Tape&)> backprop) {
  Node n;
  n.val = std::move(val);
  n.needs_grad = needs_grad;
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Val Tape::constant(Matrix m) { return Val{this, push(std::move(m), false, nullptr)}; }

Val Tape::param(Param& p) {
  Param* pp = &p;
  int id = static_cast<int>(nodes_.size());
  push(p.value, true, [pp, id](Tape& t) { pp->grad += t.grad_ref(id); });
  return Val{this, id};
}

const Matrix& Tape::value(Val v) const { return nodes_.at(v.id).val; }
const Matrix& Tape::grad(Val v) const { return nodes_.at(v.id).grad; }

void Tape::backward(Val loss) {
  if (loss.tape != this) throw std::logic_error("backward: loss from another tape");
  const Node& ln = nodes_.at(loss.id);
  if (ln.val.rows() != 1 || ln.val.cols() != 1)
    throw std::logic_error("backward: loss must be 1x1");
  for (int i = 0; i <= loss.id; ++i) {
    nodes_[i].grad = Matrix::Zero(nodes_[i].val.rows(), nodes_[i].val.cols());
  }
  nodes_[loss.id].grad(0, 0) = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    if (nodes_[i].needs_grad && nodes_[i].backprop) nodes_[i].backprop(*this);
  }
}

Val add(Val a, Val b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  bool needs = t.nodes_[a.id].needs_grad || t.nodes_[b.id].needs_grad;
  int ia = a.id, ib = b.id;
  int id = t.push(t.val_ref(ia) + t.val_ref(ib), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, ib, id](Tape& t) {
      if (t.nodes_[ia].needs_grad) t.grad_ref(ia) += t.grad_ref(id);
      if (t.nodes_[ib].needs_grad) t.grad_ref(ib) += t.grad_ref(id);
    };
  }
  return Val{&t, id};
}

Val sub(Val a, Val b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  bool needs = t.nodes_[a.id].needs_grad || t.nodes_[b.id].needs_grad;
  int ia = a.id, ib = b.id;
  int id = t.push(t.val_ref(ia) - t.val_ref(ib), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, ib, id](Tape& t) {
      if (t.nodes_[ia].needs_grad) t.grad_ref(ia) += t.grad_ref(id);
      if (t.nodes_[ib].needs_grad) t.grad_ref(ib) -= t.grad_ref(id);
    };
  }
  return Val{&t, id};
}

Val cmul(Val a, Val b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  bool needs = t.nodes_[a.id].needs_grad || t.nodes_[b.id].needs_grad;
  int ia = a.id, ib = b.id;
  int id = t.push(t.val_ref(ia).cwiseProduct(t.val_ref(ib)), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, ib, id](Tape& t) {
      if (t.nodes_[ia].needs_grad)
        t.grad_ref(ia) += t.grad_ref(id).cwiseProduct(t.val_ref(ib));
      if (t.nodes_[ib].needs_grad)
        t.grad_ref(ib) += t.grad_ref(id).cwiseProduct(t.val_ref(ia));
    };
  }
  return Val{&t, id};
}

Val scale(Val a, double s) {
  Tape& t = *a.tape;
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(t.val_ref(ia) * s, needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id, s](Tape& t) { t.grad_ref(ia) += s * t.grad_ref(id); };
  }
  return Val{&t, id};
}

Val add_rowvec(Val a, Val row) {
  check_same_tape(a, row);
  Tape& t = *a.tape;
  const Matrix& av = t.val_ref(a.id);
  const Matrix& rv = t.val_ref(row.id);
  if (rv.rows() != 1 || rv.cols() != av.cols())
    throw std::logic_error("add_rowvec: shape mismatch");
  bool needs = t.nodes_[a.id].needs_grad || t.nodes_[row.id].needs_grad;
  int ia = a.id, ir = row.id;
  Matrix out = av.rowwise() + rv.row(0);
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, ir, id](Tape& t) {
      if (t.nodes_[ia].needs_grad) t.grad_ref(ia) += t.grad_ref(id);
      if (t.nodes_[ir].needs_grad) t.grad_ref(ir) += t.grad_ref(id).colwise().sum();
    };
  }
  return Val{&t, id};
}

Val matmul(Val a, Val b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  bool needs = t.nodes_[a.id].needs_grad || t.nodes_[b.id].needs_grad;
  int ia = a.id, ib = b.id;
  int id = t.push(t.val_ref(ia) * t.val_ref(ib), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, ib, id](Tape& t) {
      if (t.nodes_[ia].needs_grad)
        t.grad_ref(ia) += t.grad_ref(id) * t.val_ref(ib).transpose();
      if (t.nodes_[ib].needs_grad)
        t.grad_ref(ib) += t.val_ref(ia).transpose() * t.grad_ref(id);
    };
  }
  return Val{&t, id};
}

Val matmul_nt(Val a, Val b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  bool needs = t.nodes_[a.id].needs_grad || t.nodes_[b.id].needs_grad;
  int ia = a.id, ib = b.id;
  int id = t.push(t.val_ref(ia) * t.val_ref(ib).transpose(), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, ib, id](Tape& t) {
      if (t.nodes_[ia].needs_grad) t.grad_ref(ia) += t.grad_ref(id) * t.val_ref(ib);
      if (t.nodes_[ib].needs_grad)
        t.grad_ref(ib) += t.grad_ref(id).transpose() * t.val_ref(ia);
    };
  }
  return Val{&t, id};
}

Val matmul_tn(Val a, Val b) {
  check_same_tape(a, b);
  Tape& t = *a.tape;
  bool needs = t.nodes_[a.id].needs_grad || t.nodes_[b.id].needs_grad;
  int ia = a.id, ib = b.id;
  int id = t.push(t.val_ref(ia).transpose() * t.val_ref(ib), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, ib, id](Tape& t) {
      if (t.nodes_[ia].needs_grad)
        t.grad_ref(ia) += t.val_ref(ib) * t.grad_ref(id).transpose();
      if (t.nodes_[ib].needs_grad) t.grad_ref(ib) += t.val_ref(ia) * t.grad_ref(id);
    };
  }
  return Val{&t, id};
}

Val transpose(Val a) {
  Tape& t = *a.tape;
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(t.val_ref(ia).transpose(), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id](Tape& t) {
      t.grad_ref(ia) += t.grad_ref(id).transpose();
    };
  }
  return Val{&t, id};
}

Val concat_rows(const std::vector<Val>& parts) {
  if (parts.empty()) throw std::logic_error("concat_rows: empty");
  Tape& t = *parts[0].tape;
  int rows = 0;
  const int cols = static_cast<int>(t.val_ref(parts[0].id).cols());
  bool needs = false;
  for (Val p : parts) {
    check_same_tape(parts[0], p);
    rows += static_cast<int>(t.val_ref(p.id).rows());
    needs = needs || t.nodes_[p.id].needs_grad;
  }
  Matrix out(rows, cols);
  int r = 0;
  std::vector<int> ids, offs, lens;
  for (Val p : parts) {
    const Matrix& pv = t.val_ref(p.id);
    out.middleRows(r, pv.rows()) = pv;
    ids.push_back(p.id);
    offs.push_back(r);
    lens.push_back(static_cast<int>(pv.rows()));
    r += static_cast<int>(pv.rows());
  }
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ids, offs, lens, id](Tape& t) {
      for (size_t k = 0; k < ids.size(); ++k) {
        if (t.nodes_[ids[k]].needs_grad)
          t.grad_ref(ids[k]) += t.grad_ref(id).middleRows(offs[k], lens[k]);
      }
    };
  }
  return Val{&t, id};
}

Val concat_cols(const std::vector<Val>& parts) {
  if (parts.empty()) throw std::logic_error("concat_cols: empty");
  Tape& t = *parts[0].tape;
  int cols = 0;
  const int rows = static_cast<int>(t.val_ref(parts[0].id).rows());
  bool needs = false;
  for (Val p : parts) {
    check_same_tape(parts[0], p);
    cols += static_cast<int>(t.val_ref(p.id).cols());
    needs = needs || t.nodes_[p.id].needs_grad;
  }
  Matrix out(rows, cols);
  int c = 0;
  std::vector<int> ids, offs, lens;
  for (Val p : parts) {
    const Matrix& pv = t.val_ref(p.id);
    out.middleCols(c, pv.cols()) = pv;
    ids.push_back(p.id);
    offs.push_back(c);
    lens.push_back(static_cast<int>(pv.cols()));
    c += static_cast<int>(pv.cols());
  }
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ids, offs, lens, id](Tape& t) {
      for (size_t k = 0; k < ids.size(); ++k) {
        if (t.nodes_[ids[k]].needs_grad)
          t.grad_ref(ids[k]) += t.grad_ref(id).middleCols(offs[k], lens[k]);
      }
    };
  }
  return Val{&t, id};
}

Val slice_rows(Val a, int r0, int n) {
  Tape& t = *a.tape;
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(t.val_ref(ia).middleRows(r0, n), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id, r0, n](Tape& t) {
      t.grad_ref(ia).middleRows(r0, n) += t.grad_ref(id);
    };
  }
  return Val{&t, id};
}

Val slice_cols(Val a, int c0, int n) {
  Tape& t = *a.tape;
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(t.val_ref(ia).middleCols(c0, n), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id, c0, n](Tape& t) {
      t.grad_ref(ia).middleCols(c0, n) += t.grad_ref(id);
    };
  }
  return Val{&t, id};
}

Val select_rows(Val a, const std::vector<int>& idx) {
  Tape& t = *a.tape;
  const Matrix& av = t.val_ref(a.id);
  Matrix out(static_cast<int>(idx.size()), av.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<int>(i)) = av.row(idx[i]);
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    std::vector<int> ix = idx;
    t.nodes_[id].backprop = [ia, id, ix](Tape& t) {
      for (size_t i = 0; i < ix.size(); ++i)
        t.grad_ref(ia).row(ix[i]) += t.grad_ref(id).row(static_cast<int>(i));
    };
  }
  return Val{&t, id};
}

Val mean_rows(Val a) {
  Tape& t = *a.tape;
  const Matrix& av = t.val_ref(a.id);
  const double inv_n = 1.0 / static_cast<double>(av.rows());
  Matrix out = av.colwise().mean();
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id, inv_n](Tape& t) {
      const Matrix& g = t.grad_ref(id);
      Matrix& ga = t.grad_ref(ia);
      for (int r = 0; r < ga.rows(); ++r) ga.row(r) += inv_n * g.row(0);
    };
  }
  return Val{&t, id};
}

Val sum_all(Val a) {
  Tape& t = *a.tape;
  Matrix out(1, 1);
  out(0, 0) = t.val_ref(a.id).sum();
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id](Tape& t) {
      t.grad_ref(ia).array() += t.grad_ref(id)(0, 0);
    };
  }
  return Val{&t, id};
}

Val mean_all(Val a) {
  const double n = static_cast<double>(a.tape->value(a).size());
  return scale(sum_all(a), 1.0 / n);
}

Val tanh_op(Val a) {
  Tape& t = *a.tape;
  Matrix out = t.val_ref(a.id).array().tanh();
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id](Tape& t) {
      t.grad_ref(ia).array() +=
          t.grad_ref(id).array() * (1.0 - t.val_ref(id).array().square());
    };
  }
  return Val{&t, id};
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Val gelu(Val a) {
  // tanh approximation; smooth everywhere, which keeps finite-difference
  // gradient checks clean
  Tape& t = *a.tape;
  const double kC = kGeluC;
  const double kA = kGeluA;
  const Matrix& x = t.val_ref(a.id);
  Matrix inner = kC * (x.array() + kA * x.array().cube());
  Matrix th = inner.array().tanh();
  Matrix out = 0.5 * x.array() * (1.0 + th.array());
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    Matrix th_saved = std::move(th);
    t.nodes_[id].backprop = [ia, id, th_saved](Tape& t) {
      const Matrix& x = t.val_ref(ia);
      Eigen::ArrayXXd sech2 = 1.0 - th_saved.array().square();
      Eigen::ArrayXXd dinner = kGeluC * (1.0 + 3.0 * kGeluA * x.array().square());
      Eigen::ArrayXXd d =
          0.5 * (1.0 + th_saved.array()) + 0.5 * x.array() * sech2 * dinner;
      t.grad_ref(ia).array() += t.grad_ref(id).array() * d;
    };
  }
  return Val{&t, id};
}

Val softmax_rows(Val a) {
  Tape& t = *a.tape;
  const Matrix& av = t.val_ref(a.id);
  Matrix out(av.rows(), av.cols());
  for (int r = 0; r < av.rows(); ++r) {
    const double m = av.row(r).maxCoeff();
    Eigen::ArrayXd e = (av.row(r).array() - m).exp();
    out.row(r) = (e / e.sum()).matrix();
  }
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id](Tape& t) {
      const Matrix& y = t.val_ref(id);
      const Matrix& g = t.grad_ref(id);
      Matrix& ga = t.grad_ref(ia);
      for (int r = 0; r < y.rows(); ++r) {
        const double dot = (g.row(r).array() * y.row(r).array()).sum();
        ga.row(r).array() += y.row(r).array() * (g.row(r).array() - dot);
      }
    };
  }
  return Val{&t, id};
}

Val log_softmax_rows(Val a) {
  Tape& t = *a.tape;
  const Matrix& av = t.val_ref(a.id);
  Matrix out(av.rows(), av.cols());
  for (int r = 0; r < av.rows(); ++r) {
    const double m = av.row(r).maxCoeff();
    const double lse = m + std::log((av.row(r).array() - m).exp().sum());
    out.row(r) = av.row(r).array() - lse;
  }
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id](Tape& t) {
      const Matrix& lsm = t.val_ref(id);
      const Matrix& g = t.grad_ref(id);
      Matrix& ga = t.grad_ref(ia);
      for (int r = 0; r < lsm.rows(); ++r) {
        const double gsum = g.row(r).sum();
        ga.row(r).array() += g.row(r).array() - lsm.row(r).array().exp() * gsum;
      }
    };
  }
  return Val{&t, id};
}

Val layer_norm(Val x, Val gain, Val bias, double eps) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  Tape& t = *x.tape;
  const Matrix& xv = t.val_ref(x.id);
  const int n = static_cast<int>(xv.cols());
  Matrix xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (int r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std(r) = is;
    xhat.row(r) = (xv.row(r).array() - mu) * is;
  }
  const Matrix& gv = t.val_ref(gain.id);
  const Matrix& bv = t.val_ref(bias.id);
  Matrix out =
      ((xhat.array().rowwise() * gv.row(0).array()).rowwise() + bv.row(0).array()).matrix();
  bool needs = t.nodes_[x.id].needs_grad || t.nodes_[gain.id].needs_grad ||
               t.nodes_[bias.id].needs_grad;
  int ix = x.id, ig = gain.id, ib = bias.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    Matrix xhat_s = std::move(xhat);
    Eigen::VectorXd is_s = std::move(inv_std);
    t.nodes_[id].backprop = [ix, ig, ib, id, xhat_s, is_s](Tape& t) {
      const Matrix& g = t.grad_ref(id);
      const Matrix& gv = t.val_ref(ig);
      if (t.nodes_[ig].needs_grad)
        t.grad_ref(ig) += (g.array() * xhat_s.array()).colwise().sum().matrix();
      if (t.nodes_[ib].needs_grad) t.grad_ref(ib) += g.colwise().sum();
      if (t.nodes_[ix].needs_grad) {
        Matrix& gx = t.grad_ref(ix);
        for (int r = 0; r < g.rows(); ++r) {
          Eigen::RowVectorXd dxhat = g.row(r).cwiseProduct(gv.row(0));
          const double m1 = dxhat.mean();
          const double m2 = dxhat.cwiseProduct(xhat_s.row(r)).mean();
          gx.row(r) +=
              is_s(r) * (dxhat.array() - m1 - xhat_s.row(r).array() * m2).matrix();
        }
      }
    };
  }
  return Val{&t, id};
}

Val l2_normalize_rows(Val x, double eps) {
  Tape& t = *x.tape;
  const Matrix& xv = t.val_ref(x.id);
  Matrix out(xv.rows(), xv.cols());
  Eigen::VectorXd inv_norm(xv.rows());
  for (int r = 0; r < xv.rows(); ++r) {
    const double n = std::sqrt(xv.row(r).squaredNorm() + eps * eps);
    inv_norm(r) = 1.0 / n;
    out.row(r) = xv.row(r) * inv_norm(r);
  }
  bool needs = t.nodes_[x.id].needs_grad;
  int ix = x.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    Eigen::VectorXd in_s = std::move(inv_norm);
    t.nodes_[id].backprop = [ix, id, in_s](Tape& t) {
      const Matrix& y = t.val_ref(id);
      const Matrix& g = t.grad_ref(id);
      Matrix& gx = t.grad_ref(ix);
      for (int r = 0; r < y.rows(); ++r) {
        const double dot = g.row(r).dot(y.row(r));
        gx.row(r) += in_s(r) * (g.row(r) - dot * y.row(r));
      }
    };
  }
  return Val{&t, id};
}

Val row_mix(Val a, const std::vector<RowMixEntry>& entries, int out_rows) {
  Tape& t = *a.tape;
  const Matrix& av = t.val_ref(a.id);
  Matrix out = Matrix::Zero(out_rows, av.cols());
  for (const auto& e : entries) out.row(e.out_row) += e.w * av.row(e.in_row);
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    std::vector<RowMixEntry> es = entries;
    t.nodes_[id].backprop = [ia, id, es](Tape& t) {
      const Matrix& g = t.grad_ref(id);
      Matrix& ga = t.grad_ref(ia);
      for (const auto& e : es) ga.row(e.in_row) += e.w * g.row(e.out_row);
    };
  }
  return Val{&t, id};
}

Val im2col(Val a, const Im2ColPlan& plan) {
  Tape& t = *a.tape;
  const Matrix& av = t.val_ref(a.id);
  const int C = static_cast<int>(av.cols());
  Matrix out = Matrix::Zero(plan.out_rows, plan.taps * C);
  for (int p = 0; p < plan.out_rows; ++p) {
    for (int tap = 0; tap < plan.taps; ++tap) {
      const int s = plan.src[static_cast<size_t>(p) * plan.taps + tap];
      if (s >= 0) out.row(p).segment(tap * C, C) = av.row(s);
    }
  }
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    Im2ColPlan ps = plan;
    t.nodes_[id].backprop = [ia, id, ps, C](Tape& t) {
      const Matrix& g = t.grad_ref(id);
      Matrix& ga = t.grad_ref(ia);
      for (int p = 0; p < ps.out_rows; ++p) {
        for (int tap = 0; tap < ps.taps; ++tap) {
          const int s = ps.src[static_cast<size_t>(p) * ps.taps + tap];
          if (s >= 0) ga.row(s) += g.row(p).segment(tap * C, C);
        }
      }
    };
  }
  return Val{&t, id};
}

Val reshape_rowmajor(Val a, int rows, int cols) {
  Tape& t = *a.tape;
  const Matrix& av = t.val_ref(a.id);
  if (av.size() != static_cast<long>(rows) * cols)
    throw std::logic_error("reshape_rowmajor: size mismatch");
  Matrix out(rows, cols);
  {
    int k = 0;
    for (int r = 0; r < av.rows(); ++r)
      for (int c = 0; c < av.cols(); ++c) {
        out(k / cols, k % cols) = av(r, c);
        ++k;
      }
  }
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id, cols](Tape& t) {
      const Matrix& g = t.grad_ref(id);
      Matrix& ga = t.grad_ref(ia);
      int k = 0;
      for (int r = 0; r < ga.rows(); ++r)
        for (int c = 0; c < ga.cols(); ++c) {
          ga(r, c) += g(k / cols, k % cols);
          ++k;
        }
    };
  }
  return Val{&t, id};
}

Val pick(Val a, int r, int c) {
  Tape& t = *a.tape;
  Matrix out(1, 1);
  out(0, 0) = t.val_ref(a.id)(r, c);
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    t.nodes_[id].backprop = [ia, id, r, c](Tape& t) {
      t.grad_ref(ia)(r, c) += t.grad_ref(id)(0, 0);
    };
  }
  return Val{&t, id};
}

Val weighted_sum(Val a, const Matrix& weights) {
  Tape& t = *a.tape;
  Matrix out(1, 1);
  out(0, 0) = (t.val_ref(a.id).array() * weights.array()).sum();
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    Matrix w = weights;
    t.nodes_[id].backprop = [ia, id, w](Tape& t) {
      t.grad_ref(ia) += t.grad_ref(id)(0, 0) * w;
    };
  }
  return Val{&t, id};
}

Val trace_select(Val a, const std::vector<int>& rows, const std::vector<int>& cols) {
  if (rows.size() != cols.size()) throw std::logic_error("trace_select: size mismatch");
  Tape& t = *a.tape;
  const Matrix& av = t.val_ref(a.id);
  double s = 0.0;
  for (size_t i = 0; i < rows.size(); ++i) s += av(rows[i], cols[i]);
  Matrix out(1, 1);
  out(0, 0) = s;
  bool needs = t.nodes_[a.id].needs_grad;
  int ia = a.id;
  int id = t.push(std::move(out), needs, nullptr);
  if (needs) {
    std::vector<int> rs = rows, cs = cols;
    t.nodes_[id].backprop = [ia, id, rs, cs](Tape& t) {
      const double g = t.grad_ref(id)(0, 0);
      for (size_t i = 0; i < rs.size(); ++i) t.grad_ref(ia)(rs[i], cs[i]) += g;
    };
  }
  return Val{&t, id};
}

Val add_n(const std::vector<Val>& terms) {
  if (terms.empty()) throw std::logic_error("add_n: empty");
  Val acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

}  // namespace regionbag::ad
