#pragma once

#include <Eigen/Core>

#include "json.hpp"
#include "regionbag/nn.hpp"

namespace regionbag {

struct LossConfig {
  double tau_bag = 30.0;
  double tau_individual = 50.0;
  double tau_cls = 50.0;
  int queue_capacity = 256;
  double lambda_bag = 1.0;
  double lambda_ind = 1.0;
  double lambda_cls = 1.0;
  double lambda_reg = 1.0;
  double lambda_caption = 1.0;

  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

// Fixed-capacity FIFO of unit vectors supplying extra InfoNCE negatives.
// Contents are plain values: no gradient ever flows into or out of them.
class EmbeddingQueue {
 public:
  EmbeddingQueue(int capacity, int dim)
      : capacity_(capacity), buf_(Eigen::MatrixXd::Zero(capacity, dim)) {}

  void push(const Eigen::MatrixXd& rows);
  Eigen::MatrixXd negatives() const;  // size() x dim, oldest first
  int size() const { return size_; }
  int capacity() const { return capacity_; }

 private:
  int capacity_;
  int size_ = 0;
  int cursor_ = 0;
  Eigen::MatrixXd buf_;
};

// L = -1/2 sum_k [log p_{t,v}^k + log p_{v,t}^k], a literal sum over the
// matched pairs. Queue vectors are appended to the negative set of the
// opposite modality. Rows of f_t / f_v must be unit vectors.
nn::Val bag_infonce(const nn::Ctx& ctx, nn::Val f_t, nn::Val f_v,
                    const Eigen::MatrixXd& queue_t_negs, const Eigen::MatrixXd& queue_v_negs,
                    double tau);

// identical kernel on per-region embeddings with its own temperature/queues
nn::Val individual_infonce(const nn::Ctx& ctx, nn::Val g_t, nn::Val g_v,
                           const Eigen::MatrixXd& queue_t_negs,
                           const Eigen::MatrixXd& queue_v_negs, double tau);

// Soft cross entropy aligning bag embeddings to caption embeddings (UniCL
// style): each target row is a distribution over captions; when `symmetric`,
// the caption->bag term with row-normalized transposed targets is averaged in.
nn::Val caption_soft_ce(const nn::Ctx& ctx, nn::Val f_t_bags, nn::Val caption_embs,
                        const Eigen::MatrixXd& targets, double tau, bool symmetric = true);

// tape-level CE on tau-scaled logits (training path)
nn::Val cross_entropy_from_logits(const nn::Ctx& ctx, nn::Val logits, int label);

// -log p_label on an explicit probability vector, epsilon-floored at 1e-12
double classification_ce(const Eigen::VectorXd& probs, int label);

}  // namespace regionbag
