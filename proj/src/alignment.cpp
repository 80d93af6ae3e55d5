#include "regionbag/alignment.hpp"

#include <cmath>
#include <stdexcept>

namespace regionbag {

using namespace nn;
using ad::Matrix;
using nlohmann::json;

json LossConfig::to_json() const {
  return json{{"tau_bag", tau_bag},
              {"tau_individual", tau_individual},
              {"tau_cls", tau_cls},
              {"queue_capacity", queue_capacity},
              {"lambda_bag", lambda_bag},
              {"lambda_ind", lambda_ind},
              {"lambda_cls", lambda_cls},
              {"lambda_reg", lambda_reg},
              {"lambda_caption", lambda_caption}};
}

LossConfig LossConfig::from_json(const json& j) {
  LossConfig c;
  c.tau_bag = j.value("tau_bag", c.tau_bag);
  c.tau_individual = j.value("tau_individual", c.tau_individual);
  c.tau_cls = j.value("tau_cls", c.tau_cls);
  c.queue_capacity = j.value("queue_capacity", c.queue_capacity);
  c.lambda_bag = j.value("lambda_bag", c.lambda_bag);
  c.lambda_ind = j.value("lambda_ind", c.lambda_ind);
  c.lambda_cls = j.value("lambda_cls", c.lambda_cls);
  c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
  c.lambda_caption = j.value("lambda_caption", c.lambda_caption);
  return c;
}

void EmbeddingQueue::push(const Eigen::MatrixXd& rows) {
  if (rows.cols() != buf_.cols()) throw std::invalid_argument("queue: dim mismatch");
  for (int r = 0; r < rows.rows(); ++r) {
    buf_.row(cursor_) = rows.row(r);
    cursor_ = (cursor_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
  }
}

Eigen::MatrixXd EmbeddingQueue::negatives() const {
  Eigen::MatrixXd out(size_, buf_.cols());
  // oldest first
  const int start = (size_ < capacity_) ? 0 : cursor_;
  for (int i = 0; i < size_; ++i) out.row(i) = buf_.row((start + i) % capacity_);
  return out;
}

namespace {

// one direction of the InfoNCE sum: -sum_k log softmax(tau * a . b_all)[k,k]
Val infonce_direction(const Ctx& ctx, Val anchors, Val positives,
                      const Eigen::MatrixXd& extra_negs, double tau) {
  Val bank = positives;
  if (extra_negs.rows() > 0)
    bank = ad::concat_rows({positives, ctx.tape.constant(extra_negs)});
  Val logits = ad::scale(ad::matmul_nt(anchors, bank), tau);
  const int n = static_cast<int>(ctx.tape.value(anchors).rows());
  std::vector<int> diag(n);
  for (int i = 0; i < n; ++i) diag[i] = i;
  return ad::scale(ad::trace_select(ad::log_softmax_rows(logits), diag, diag), -1.0);
}

Val paired_infonce(const Ctx& ctx, Val f_t, Val f_v, const Eigen::MatrixXd& queue_t_negs,
                   const Eigen::MatrixXd& queue_v_negs, double tau) {
  const int g = static_cast<int>(ctx.tape.value(f_t).rows());
  if (g == 0) throw std::invalid_argument("infonce: empty batch");
  if (ctx.tape.value(f_v).rows() != g) throw std::invalid_argument("infonce: pair mismatch");
  // student anchors see teacher-side negatives and vice versa
  Val t_to_v = infonce_direction(ctx, f_t, f_v, queue_v_negs, tau);
  Val v_to_t = infonce_direction(ctx, f_v, f_t, queue_t_negs, tau);
  return ad::scale(ad::add(t_to_v, v_to_t), 0.5);
}

}  // namespace

Val bag_infonce(const Ctx& ctx, Val f_t, Val f_v, const Eigen::MatrixXd& queue_t_negs,
                const Eigen::MatrixXd& queue_v_negs, double tau) {
  return paired_infonce(ctx, f_t, f_v, queue_t_negs, queue_v_negs, tau);
}

Val individual_infonce(const Ctx& ctx, Val g_t, Val g_v, const Eigen::MatrixXd& queue_t_negs,
                       const Eigen::MatrixXd& queue_v_negs, double tau) {
  return paired_infonce(ctx, g_t, g_v, queue_t_negs, queue_v_negs, tau);
}

Val caption_soft_ce(const Ctx& ctx, Val f_t_bags, Val caption_embs,
                    const Eigen::MatrixXd& targets, double tau, bool symmetric) {
  const int g = static_cast<int>(ctx.tape.value(f_t_bags).rows());
  const int m = static_cast<int>(ctx.tape.value(caption_embs).rows());
  if (targets.rows() != g || targets.cols() != m)
    throw std::invalid_argument("caption_soft_ce: target shape mismatch");
  for (int r = 0; r < g; ++r) {
    if (std::abs(targets.row(r).sum() - 1.0) > 1e-9)
      throw std::invalid_argument("caption_soft_ce: target row must sum to 1");
  }
  Val logits = ad::scale(ad::matmul_nt(f_t_bags, caption_embs), tau);
  Val t2v = ad::scale(ad::weighted_sum(ad::log_softmax_rows(logits), targets), -1.0 / g);
  if (!symmetric) return t2v;

  Matrix tt = targets.transpose();
  int nonzero_rows = 0;
  for (int r = 0; r < tt.rows(); ++r) {
    const double s = tt.row(r).sum();
    if (s > 0) {
      tt.row(r) /= s;
      ++nonzero_rows;
    }
  }
  Val logits_vt = ad::scale(ad::matmul_nt(caption_embs, f_t_bags), tau);
  Val v2t = ad::scale(ad::weighted_sum(ad::log_softmax_rows(logits_vt), tt),
                      -1.0 / std::max(1, nonzero_rows));
  return ad::scale(ad::add(t2v, v2t), 0.5);
}

Val cross_entropy_from_logits(const Ctx& ctx, Val logits, int label) {
  Val lsm = ad::log_softmax_rows(logits);
  return ad::scale(ad::pick(lsm, 0, label), -1.0);
}

double classification_ce(const Eigen::VectorXd& probs, int label) {
  if (label < 0 || label >= probs.size())
    throw std::invalid_argument("classification_ce: label out of range");
  return -std::log(std::max(probs(label), 1e-12));
}

}  // namespace regionbag
