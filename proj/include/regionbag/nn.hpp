#pragma once

#include <map>
#include <string>

#include "regionbag/autodiff.hpp"
#include "regionbag/rng.hpp"

namespace regionbag::nn {

using ad::Matrix;
using ad::Param;
using ad::ParamStore;
using ad::Tape;
using ad::Val;

// Wires parameters onto a tape, either trainable (param leaf) or frozen
// (constant). Frozen still lets gradients flow through to other inputs.
struct Ctx {
  Tape& tape;
  bool trainable;

  Val of(Param& p) const { return trainable ? tape.param(p) : tape.constant(p.value); }
  Val cst(Matrix m) const { return tape.constant(std::move(m)); }
};

struct Linear {
  Param* W = nullptr;  // in x out
  Param* b = nullptr;  // 1 x out, absent when bias is disabled

  static Linear create(ParamStore& store, const std::string& name, int in, int out,
                       Rng& rng, bool bias = true);
  Val apply(const Ctx& ctx, Val x) const;
};

struct LayerNormLayer {
  Param* gain = nullptr;
  Param* bias = nullptr;

  static LayerNormLayer create(ParamStore& store, const std::string& name, int dim);
  Val apply(const Ctx& ctx, Val x) const;
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 4;
  int dim = 0;

  static MultiHeadAttention create(ParamStore& store, const std::string& name, int dim,
                                   int heads, Rng& rng);
  // key_mask: empty, or 1 x N row with 0 (visible) / 1 (masked key)
  Val apply(const Ctx& ctx, Val x, const Eigen::RowVectorXd& key_mask) const;
};

struct TransformerBlock {
  LayerNormLayer ln1, ln2;
  MultiHeadAttention attn;
  Linear fc1, fc2;

  static TransformerBlock create(ParamStore& store, const std::string& name, int dim,
                                 int heads, int mlp_hidden, Rng& rng);
  // Pre-LN block. Returns the post-attention residual stream (the "last
  // attention layer" view) in attn_out when requested.
  Val apply(const Ctx& ctx, Val x, const Eigen::RowVectorXd& key_mask,
            Val* attn_out = nullptr) const;
};

// Plain SGD with momentum; velocity keyed by parameter, persists across steps.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}
  void step(ParamStore& store);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  std::map<Param*, Matrix> velocity_;
};

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(ParamStore& store);

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<Param*, Matrix> m_, v_;
};

}  // namespace regionbag::nn
