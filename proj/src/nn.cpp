#include "regionbag/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace regionbag::nn {

using namespace ad;

Linear Linear::create(ParamStore& store, const std::string& name, int in, int out,
                      Rng& rng, bool bias) {
  Linear l;
  l.W = &store.create_normal(name + ".W", in, out, 1.0 / std::sqrt(double(in)), rng);
  if (bias) l.b = &store.create(name + ".b", 1, out);
  return l;
}

Val Linear::apply(const Ctx& ctx, Val x) const {
  Val y = matmul(x, ctx.of(*W));
  if (b) y = add_rowvec(y, ctx.of(*b));
  return y;
}

LayerNormLayer LayerNormLayer::create(ParamStore& store, const std::string& name, int dim) {
  LayerNormLayer l;
  l.gain = &store.create(name + ".gain", 1, dim);
  l.gain->value.setOnes();
  l.bias = &store.create(name + ".bias", 1, dim);
  return l;
}

Val LayerNormLayer::apply(const Ctx& ctx, Val x) const {
  return layer_norm(x, ctx.of(*gain), ctx.of(*bias));
}

MultiHeadAttention MultiHeadAttention::create(ParamStore& store, const std::string& name,
                                              int dim, int heads, Rng& rng) {
  if (dim % heads != 0) throw std::invalid_argument("attention: dim % heads != 0");
  MultiHeadAttention a;
  a.heads = heads;
  a.dim = dim;
  a.q = Linear::create(store, name + ".q", dim, dim, rng);
  // no key bias: a shared additive key offset cancels inside the softmax,
  // leaving a zero-gradient direction
  a.k = Linear::create(store, name + ".k", dim, dim, rng, /*bias=*/false);
  a.v = Linear::create(store, name + ".v", dim, dim, rng);
  a.o = Linear::create(store, name + ".o", dim, dim, rng);
  return a;
}

Val MultiHeadAttention::apply(const Ctx& ctx, Val x,
                              const Eigen::RowVectorXd& key_mask) const {
  const int n = static_cast<int>(ctx.tape.value(x).rows());
  const int hd = dim / heads;
  Val Q = q.apply(ctx, x);
  Val K = k.apply(ctx, x);
  Val V = v.apply(ctx, x);

  // additive key mask: -1e9 on masked keys underflows to exactly zero
  // attention weight after the softmax shift
  Val mask_val{};
  if (key_mask.size() > 0) {
    Matrix m = Matrix::Zero(n, n);
    for (int j = 0; j < n; ++j)
      if (key_mask(j) != 0.0) m.col(j).setConstant(-1e9);
    mask_val = ctx.cst(std::move(m));
  }

  std::vector<Val> head_outs;
  head_outs.reserve(heads);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  for (int h = 0; h < heads; ++h) {
    Val Qh = slice_cols(Q, h * hd, hd);
    Val Kh = slice_cols(K, h * hd, hd);
    Val Vh = slice_cols(V, h * hd, hd);
    Val scores = scale(matmul_nt(Qh, Kh), inv_sqrt);
    if (mask_val.ok()) scores = add(scores, mask_val);
    Val attn = softmax_rows(scores);
    head_outs.push_back(matmul(attn, Vh));
  }
  return o.apply(ctx, concat_cols(head_outs));
}

TransformerBlock TransformerBlock::create(ParamStore& store, const std::string& name,
                                          int dim, int heads, int mlp_hidden, Rng& rng) {
  TransformerBlock b;
  b.ln1 = LayerNormLayer::create(store, name + ".ln1", dim);
  b.ln2 = LayerNormLayer::create(store, name + ".ln2", dim);
  b.attn = MultiHeadAttention::create(store, name + ".attn", dim, heads, rng);
  b.fc1 = Linear::create(store, name + ".fc1", dim, mlp_hidden, rng);
  b.fc2 = Linear::create(store, name + ".fc2", mlp_hidden, dim, rng);
  return b;
}

Val TransformerBlock::apply(const Ctx& ctx, Val x, const Eigen::RowVectorXd& key_mask,
                            Val* attn_out) const {
  Val a = attn.apply(ctx, ln1.apply(ctx, x), key_mask);
  Val h = add(x, a);
  if (attn_out) *attn_out = h;
  Val m = fc2.apply(ctx, gelu(fc1.apply(ctx, ln2.apply(ctx, h))));
  return add(h, m);
}

void SgdMomentum::step(ParamStore& store) {
  for (const auto& p : store.all()) {
    Matrix& vel = velocity_[p.get()];
    if (vel.size() == 0) vel = Matrix::Zero(p->value.rows(), p->value.cols());
    vel = momentum_ * vel + p->grad;
    p->value -= lr_ * vel;
  }
}

void Adam::step(ParamStore& store) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (const auto& p : store.all()) {
    Matrix& m = m_[p.get()];
    Matrix& v = v_[p.get()];
    if (m.size() == 0) {
      m = Matrix::Zero(p->value.rows(), p->value.cols());
      v = Matrix::Zero(p->value.rows(), p->value.cols());
    }
    m = beta1_ * m + (1.0 - beta1_) * p->grad;
    v = beta2_ * v + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
    p->value.array() -=
        lr_ * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps_);
  }
}

}  // namespace regionbag::nn
