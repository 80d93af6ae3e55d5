#pragma once

#include <Eigen/Core>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "regionbag/geometry.hpp"
#include "regionbag/image.hpp"
#include "regionbag/nn.hpp"
#include "regionbag/rng.hpp"

namespace regionbag {

struct VlmConfig {
  int dim = 64;  // token width D; also the joint embedding dim E
  int heads = 4;
  int mlp_hidden = 128;
  int text_blocks = 2;
  int image_blocks = 2;
  int input_side = 64;
  int patch = 8;
  int max_text_len = 64;
  double pretrain_temperature = 20.0;
  int pretrain_steps = 1500;
  int pretrain_batch = 16;
  double pretrain_lr = 1e-3;

  nlohmann::json to_json() const;
  static VlmConfig from_json(const nlohmann::json& j);
};

// Closed vocabulary, whitespace tokenization.
class Vocab {
 public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> words);
  static Vocab build(const std::vector<std::string>& category_names);

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  std::vector<int> encode(const std::string& text) const;  // throws on unknown token

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

enum class TextLayer { kFinal, kPenultimate };

// Contrastively pre-trained text/image encoder pair. After pretraining the
// parameters are frozen; all public encode_* outputs are unit vectors of
// dim E.
class FrozenVLM {
 public:
  FrozenVLM(VlmConfig cfg, Vocab vocab, uint64_t seed);

  // ---- tape-level forwards; gradients flow through to tape inputs ----
  nn::Val text_embed_ids(const nn::Ctx& ctx, const std::vector<int>& ids) const;
  // token_embeddings: N x D raw word vectors (token rows or pseudo words)
  nn::Val text_encode(const nn::Ctx& ctx, nn::Val token_embeddings, TextLayer layer) const;
  nn::Val text_last_attn_tokens(const nn::Ctx& ctx, nn::Val token_embeddings) const;
  nn::Val project_text(const nn::Ctx& ctx, nn::Val pooled) const;  // -> unit rows
  // pixels: (side*side) x 3; patch_masked: grid patches excluded as attention keys
  nn::Val image_encode(const nn::Ctx& ctx, const Eigen::MatrixXd& pixels,
                       const std::vector<char>& patch_masked) const;
  nn::Val image_last_attn_tokens(const nn::Ctx& ctx, const Eigen::MatrixXd& pixels) const;
  nn::Val project_image(const nn::Ctx& ctx, nn::Val pooled) const;

  // ---- frozen convenience API ----
  Eigen::VectorXd encode_text(const std::string& text, TextLayer layer) const;
  Eigen::VectorXd encode_text_embeddings(const Eigen::MatrixXd& emb, TextLayer layer) const;
  // crop = enclosing box of the regions; patches whose centers fall outside
  // every region (or in letterbox padding) are masked out of attention
  Eigen::VectorXd encode_image_masked(const ImageU8& image, const Box& crop,
                                      const std::vector<Box>& regions) const;
  // token features of the image encoder's last attention layer, (g*g) x D,
  // spatial row index j*g + i
  Eigen::MatrixXd teacher_feature_map(const ImageU8& image) const;
  // average of the bilinear token field over the box, pre-projection (1 x D)
  Eigen::RowVectorXd roi_pool_grid(const Eigen::MatrixXd& grid, const Box& box,
                                   const ImageExtent& ext) const;
  Eigen::VectorXd roi_region_embedding(const Eigen::MatrixXd& grid, const Box& box,
                                       const ImageExtent& ext) const;
  // prompt contains "{}" which is replaced by each category name
  Eigen::MatrixXd category_embeddings(const std::vector<std::string>& names,
                                      const std::string& prompt) const;

  std::vector<char> patch_mask_for_regions(const Letterbox& lb,
                                           const std::vector<Box>& regions) const;

  int grid_side() const { return cfg_.input_side / cfg_.patch; }
  const VlmConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  void save(const std::string& path) const;
  static std::unique_ptr<FrozenVLM> load(const std::string& path);

 private:
  nn::Val encoder_tokens(const nn::Ctx& ctx, nn::Val x,
                         const std::vector<nn::TransformerBlock>& blocks,
                         const Eigen::RowVectorXd& key_mask, int upto_blocks,
                         nn::Val* last_attn) const;
  Eigen::MatrixXd patch_rows(const Eigen::MatrixXd& pixels) const;

  VlmConfig cfg_;
  Vocab vocab_;
  ad::ParamStore params_;
  ad::Param* token_table_ = nullptr;
  ad::Param* text_pos_ = nullptr;
  std::vector<nn::TransformerBlock> text_blocks_;
  nn::LayerNormLayer text_final_ln_;
  ad::Param* text_proj_ = nullptr;
  nn::Linear patch_embed_;
  ad::Param* image_pos_ = nullptr;
  std::vector<nn::TransformerBlock> image_blocks_;
  nn::LayerNormLayer image_final_ln_;
  ad::Param* image_proj_ = nullptr;
  bool frozen_ = false;
};

// stretch-resize to side x side, rows (side*side) x 3 in [0,1]
Eigen::MatrixXd resize_stretch_rows(const ImageU8& img, int side);

struct PretrainPair {
  ImageU8 image;
  std::string caption;
};

struct PretrainReport {
  std::vector<double> losses;
};

// Symmetric InfoNCE pre-training over scene/caption pairs. Refuses to run if
// some required category name never appears in the corpus captions: the
// teacher must have seen every concept, novel ones included. Freezes the
// model afterwards (steps == 0 freezes the random init).
PretrainReport pretrain_toy_vlm(FrozenVLM& vlm, const std::vector<PretrainPair>& corpus,
                                const std::vector<std::string>& required_categories,
                                Rng& rng);

// Batch pretraining loss on a tape (also used by the gradient checks).
nn::Val pretrain_contrastive_loss(const FrozenVLM& vlm, const nn::Ctx& ctx,
                                  const std::vector<const PretrainPair*>& batch);

}  // namespace regionbag
