#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "regionbag/autodiff.hpp"
#include "regionbag/image.hpp"
#include "regionbag/nn.hpp"
#include "regionbag/rng.hpp"
#include "regionbag/sampling.hpp"
#include "regionbag/vlm.hpp"

namespace regionbag {

struct StudentConfig {
  int words_per_region = 6;  // W
  int word_dim = 64;         // D, must match the teacher's token width
  int embed_dim = 64;        // E
  int roi_bins = 4;
  std::vector<int> backbone_channels = {16, 32, 32, 8};
  std::vector<int> backbone_strides = {2, 2, 2, 1};
  double pe_freq_base = 100.0;
  double p_drop = 0.5;
  double tau_cls = 50.0;

  int feature_dim() const { return roi_bins * roi_bins * backbone_channels.back(); }

  nlohmann::json to_json() const;
  static StudentConfig from_json(const nlohmann::json& j);
};

// Detector-side student: conv backbone, RoI pooling, linear projection to
// pseudo words, box-delta head, learned background embedding.
class StudentDetector {
 public:
  StudentDetector(StudentConfig cfg, uint64_t seed);

  struct BackboneOut {
    nn::Val rows;  // (gh*gw) x C
    int gw = 0, gh = 0;
    ImageExtent ext;
  };

  BackboneOut backbone(const nn::Ctx& ctx, const ImageU8& image) const;

  // N x F pooled region features; boxes may extend past the image
  // (clip-and-pool with zero padding)
  nn::Val region_features(const nn::Ctx& ctx, const BackboneOut& fm,
                          const std::vector<Box>& boxes) const;

  // single linear map, N x (W*D); no normalization
  nn::Val project_to_pseudo_words(const nn::Ctx& ctx, nn::Val features) const;
  // W x D block of one region from the projected rows
  nn::Val region_words(const nn::Ctx& ctx, nn::Val pseudo_rows, int region_index) const;

  nn::Val box_deltas(const nn::Ctx& ctx, nn::Val features) const;  // N x 4

  // sinusoidal encoding of (cx, cy, w, h) relative to the bag's enclosing box
  Eigen::RowVectorXd spatial_positional_embedding(const Box& region,
                                                  const Box& enclosing) const;

  // training-time word dropout: each word kept with prob 1 - p_drop, at least
  // one word always retained; returns sorted kept indices
  std::vector<int> word_dropout_keep(Rng& rng) const;

  const StudentConfig& config() const { return cfg_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }
  ad::Param& background_embedding() { return *bg_embed_; }

  void save(const std::string& path) const;
  static std::unique_ptr<StudentDetector> load(const std::string& path);

 private:
  const ad::Im2ColPlan& conv_plan(int layer, int in_w, int in_h) const;

  StudentConfig cfg_;
  ad::ParamStore params_;
  std::vector<nn::Linear> convs_;
  nn::Linear word_proj_;
  nn::Linear box_head_;
  ad::Param* bg_embed_ = nullptr;
  mutable std::map<std::tuple<int, int, int>, ad::Im2ColPlan> plan_cache_;
};

// Student bag-of-regions embedding: every region's spatial PE is added to all
// of that region's pseudo words, regions are concatenated in bag order, and
// the result runs through the teacher's text encoder (final layer).
nn::Val bag_student_embedding(const nn::Ctx& ctx, const FrozenVLM& vlm,
                              const std::vector<nn::Val>& region_words,
                              const std::vector<Eigen::RowVectorXd>& region_pes);

// Individual region embedding: words through the text encoder, token outputs
// of the last attention layer averaged, projected, normalized.
nn::Val individual_student_embedding(const nn::Ctx& ctx, const FrozenVLM& vlm,
                                     nn::Val words);

// tau-scaled cosine logits over C categories (+ background when bg.ok());
// the region encoding uses the text encoder's penultimate layer
nn::Val classify_region_logits(const nn::Ctx& ctx, const FrozenVLM& vlm, nn::Val words,
                               const Eigen::MatrixXd& cat_embs, nn::Val bg, double tau);

// plain probability vector; pass bg == nullptr for the C-way zero-shot form
Eigen::VectorXd classify_region(const FrozenVLM& vlm, const Eigen::MatrixXd& words,
                                const Eigen::MatrixXd& cat_embs,
                                const Eigen::VectorXd* bg, double tau);

// apply predicted deltas (dx, dy, dw, dh) to a proposal box
Box apply_box_deltas(const Box& proposal, const Eigen::RowVectorXd& deltas);
// inverse: regression targets for a matched proposal/gt pair
Eigen::RowVectorXd box_delta_targets(const Box& proposal, const Box& gt);

}  // namespace regionbag
