#include "regionbag/vlm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "regionbag/checkpoint.hpp"
#include "regionbag/grid_pool.hpp"

namespace regionbag {

using namespace nn;
using ad::Matrix;
using nlohmann::json;

json VlmConfig::to_json() const {
  return json{{"dim", dim},
              {"heads", heads},
              {"mlp_hidden", mlp_hidden},
              {"text_blocks", text_blocks},
              {"image_blocks", image_blocks},
              {"input_side", input_side},
              {"patch", patch},
              {"max_text_len", max_text_len},
              {"pretrain_temperature", pretrain_temperature},
              {"pretrain_steps", pretrain_steps},
              {"pretrain_batch", pretrain_batch},
              {"pretrain_lr", pretrain_lr}};
}

VlmConfig VlmConfig::from_json(const json& j) {
  VlmConfig c;
  c.dim = j.value("dim", c.dim);
  c.heads = j.value("heads", c.heads);
  c.mlp_hidden = j.value("mlp_hidden", c.mlp_hidden);
  c.text_blocks = j.value("text_blocks", c.text_blocks);
  c.image_blocks = j.value("image_blocks", c.image_blocks);
  c.input_side = j.value("input_side", c.input_side);
  c.patch = j.value("patch", c.patch);
  c.max_text_len = j.value("max_text_len", c.max_text_len);
  c.pretrain_temperature = j.value("pretrain_temperature", c.pretrain_temperature);
  c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
  c.pretrain_batch = j.value("pretrain_batch", c.pretrain_batch);
  c.pretrain_lr = j.value("pretrain_lr", c.pretrain_lr);
  return c;
}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
}

Vocab Vocab::build(const std::vector<std::string>& category_names) {
  std::vector<std::string> words = {"a",    "an",   "photo", "of",    "in",   "the",
                                    "scene", "with", "and",   "left",  "right", "above",
                                    "below", "empty", "thing", "object"};
  for (const auto& name : category_names) {
    std::istringstream ss(name);
    std::string tok;
    while (ss >> tok)
      if (std::find(words.begin(), words.end(), tok) == words.end()) words.push_back(tok);
  }
  return Vocab(std::move(words));
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  std::istringstream ss(text);
  std::string tok;
  while (ss >> tok) {
    auto it = index_.find(tok);
    if (it == index_.end()) throw std::invalid_argument("vocab: unknown token '" + tok + "'");
    ids.push_back(it->second);
  }
  if (ids.empty()) throw std::invalid_argument("vocab: empty text");
  return ids;
}

FrozenVLM::FrozenVLM(VlmConfig cfg, Vocab vocab, uint64_t seed)
    : cfg_(cfg), vocab_(std::move(vocab)) {
  Rng rng(seed);
  const int D = cfg_.dim;
  token_table_ = &params_.create_normal("text.token_table", vocab_.size(), D, 0.1, rng);
  text_pos_ = &params_.create_normal("text.pos_table", cfg_.max_text_len, D, 0.1, rng);
  for (int b = 0; b < cfg_.text_blocks; ++b)
    text_blocks_.push_back(TransformerBlock::create(
        params_, "text.block" + std::to_string(b), D, cfg_.heads, cfg_.mlp_hidden, rng));
  text_final_ln_ = LayerNormLayer::create(params_, "text.final_ln", D);
  text_proj_ = &params_.create_normal("text.proj", D, D, 1.0 / std::sqrt(double(D)), rng);

  const int patch_dim = cfg_.patch * cfg_.patch * 3;
  patch_embed_ = Linear::create(params_, "image.patch_embed", patch_dim, D, rng);
  const int tokens = grid_side() * grid_side();
  image_pos_ = &params_.create_normal("image.pos_table", tokens, D, 0.1, rng);
  for (int b = 0; b < cfg_.image_blocks; ++b)
    image_blocks_.push_back(TransformerBlock::create(
        params_, "image.block" + std::to_string(b), D, cfg_.heads, cfg_.mlp_hidden, rng));
  image_final_ln_ = LayerNormLayer::create(params_, "image.final_ln", D);
  image_proj_ = &params_.create_normal("image.proj", D, D, 1.0 / std::sqrt(double(D)), rng);
}

Val FrozenVLM::encoder_tokens(const Ctx& ctx, Val x,
                              const std::vector<TransformerBlock>& blocks,
                              const Eigen::RowVectorXd& key_mask, int upto_blocks,
                              Val* last_attn) const {
  for (int b = 0; b < upto_blocks; ++b) {
    Val attn_out{};
    x = blocks[b].apply(ctx, x, key_mask,
                        (last_attn && b == upto_blocks - 1) ? &attn_out : nullptr);
    if (last_attn && b == upto_blocks - 1) *last_attn = attn_out;
  }
  return x;
}

Val FrozenVLM::text_embed_ids(const Ctx& ctx, const std::vector<int>& ids) const {
  if (ids.empty()) throw std::invalid_argument("text_embed_ids: empty sequence");
  return ad::select_rows(ctx.of(*token_table_), ids);
}

Val FrozenVLM::project_text(const Ctx& ctx, Val pooled) const {
  return ad::l2_normalize_rows(ad::matmul(pooled, ctx.of(*text_proj_)));
}

Val FrozenVLM::text_encode(const Ctx& ctx, Val token_embeddings, TextLayer layer) const {
  const int n = static_cast<int>(ctx.tape.value(token_embeddings).rows());
  if (n < 1) throw std::invalid_argument("text_encode: empty sequence");
  if (n > cfg_.max_text_len) throw std::invalid_argument("text_encode: sequence too long");
  Val pos = ad::slice_rows(ctx.of(*text_pos_), 0, n);
  Val x = ad::add(token_embeddings, pos);
  const Eigen::RowVectorXd no_mask;
  // sequence summary = final position's token (it attends over the whole
  // sequence), CLIP end-of-text style
  if (layer == TextLayer::kPenultimate) {
    // output of the second-last block
    x = encoder_tokens(ctx, x, text_blocks_, no_mask,
                       std::max(0, cfg_.text_blocks - 1), nullptr);
    return project_text(ctx, ad::slice_rows(x, n - 1, 1));
  }
  x = encoder_tokens(ctx, x, text_blocks_, no_mask, cfg_.text_blocks, nullptr);
  x = text_final_ln_.apply(ctx, x);
  return project_text(ctx, ad::slice_rows(x, n - 1, 1));
}

Val FrozenVLM::text_last_attn_tokens(const Ctx& ctx, Val token_embeddings) const {
  const int n = static_cast<int>(ctx.tape.value(token_embeddings).rows());
  if (n < 1) throw std::invalid_argument("text_last_attn_tokens: empty sequence");
  Val pos = ad::slice_rows(ctx.of(*text_pos_), 0, n);
  Val x = ad::add(token_embeddings, pos);
  Val last{};
  encoder_tokens(ctx, x, text_blocks_, Eigen::RowVectorXd(), cfg_.text_blocks, &last);
  return last;
}

Eigen::MatrixXd FrozenVLM::patch_rows(const Eigen::MatrixXd& pixels) const {
  const int side = cfg_.input_side;
  const int P = cfg_.patch;
  const int g = grid_side();
  Matrix rows(g * g, P * P * 3);
  for (int gj = 0; gj < g; ++gj) {
    for (int gi = 0; gi < g; ++gi) {
      int k = 0;
      for (int dy = 0; dy < P; ++dy) {
        for (int dx = 0; dx < P; ++dx) {
          const int x = gi * P + dx;
          const int y = gj * P + dy;
          for (int c = 0; c < 3; ++c) rows(gj * g + gi, k++) = pixels(y * side + x, c);
        }
      }
    }
  }
  return rows;
}

Val FrozenVLM::project_image(const Ctx& ctx, Val pooled) const {
  return ad::l2_normalize_rows(ad::matmul(pooled, ctx.of(*image_proj_)));
}

Val FrozenVLM::image_encode(const Ctx& ctx, const Eigen::MatrixXd& pixels,
                            const std::vector<char>& patch_masked) const {
  const int tokens = grid_side() * grid_side();
  Eigen::RowVectorXd mask;
  std::vector<int> visible;
  if (!patch_masked.empty()) {
    if (static_cast<int>(patch_masked.size()) != tokens)
      throw std::invalid_argument("image_encode: bad mask size");
    mask = Eigen::RowVectorXd::Zero(tokens);
    for (int i = 0; i < tokens; ++i) {
      if (patch_masked[i])
        mask(i) = 1.0;
      else
        visible.push_back(i);
    }
    if (visible.empty()) throw std::invalid_argument("image_encode: all patches masked");
  } else {
    for (int i = 0; i < tokens; ++i) visible.push_back(i);
  }
  Val x = patch_embed_.apply(ctx, ctx.tape.constant(patch_rows(pixels)));
  x = ad::add(x, ctx.of(*image_pos_));
  x = encoder_tokens(ctx, x, image_blocks_, mask, cfg_.image_blocks, nullptr);
  x = image_final_ln_.apply(ctx, x);
  Val pooled = ad::mean_rows(ad::select_rows(x, visible));
  return project_image(ctx, pooled);
}

Val FrozenVLM::image_last_attn_tokens(const Ctx& ctx, const Eigen::MatrixXd& pixels) const {
  Val x = patch_embed_.apply(ctx, ctx.tape.constant(patch_rows(pixels)));
  x = ad::add(x, ctx.of(*image_pos_));
  Val last{};
  encoder_tokens(ctx, x, image_blocks_, Eigen::RowVectorXd(), cfg_.image_blocks, &last);
  return last;
}

Eigen::VectorXd FrozenVLM::encode_text(const std::string& text, TextLayer layer) const {
  ad::Tape tape;
  Ctx ctx{tape, false};
  Val emb = text_embed_ids(ctx, vocab_.encode(text));
  Val out = text_encode(ctx, emb, layer);
  return tape.value(out).row(0).transpose();
}

Eigen::VectorXd FrozenVLM::encode_text_embeddings(const Eigen::MatrixXd& emb,
                                                  TextLayer layer) const {
  ad::Tape tape;
  Ctx ctx{tape, false};
  Val out = text_encode(ctx, tape.constant(emb), layer);
  return tape.value(out).row(0).transpose();
}

std::vector<char> FrozenVLM::patch_mask_for_regions(const Letterbox& lb,
                                                    const std::vector<Box>& regions) const {
  const int g = grid_side();
  const int P = cfg_.patch;
  std::vector<char> masked(g * g, 1);
  std::vector<Box> tregions;
  tregions.reserve(regions.size());
  for (const Box& r : regions) tregions.push_back(lb.to_target(r));
  for (int gj = 0; gj < g; ++gj) {
    for (int gi = 0; gi < g; ++gi) {
      const double cx = (gi + 0.5) * P;
      const double cy = (gj + 0.5) * P;
      if (!lb.in_content(cx, cy)) continue;  // letterbox padding stays masked
      for (const Box& r : tregions) {
        if (cx >= r.x1 && cx < r.x2 && cy >= r.y1 && cy < r.y2) {
          masked[gj * g + gi] = 0;
          break;
        }
      }
    }
  }
  return masked;
}

Eigen::VectorXd FrozenVLM::encode_image_masked(const ImageU8& image, const Box& crop,
                                               const std::vector<Box>& regions) const {
  if (regions.empty()) throw std::invalid_argument("encode_image_masked: no regions");
  const Letterbox lb = extract_letterbox(image, crop, cfg_.input_side);
  const std::vector<char> masked = patch_mask_for_regions(lb, regions);
  ad::Tape tape;
  Ctx ctx{tape, false};
  Val out = image_encode(ctx, lb.pixels, masked);
  return tape.value(out).row(0).transpose();
}

Eigen::MatrixXd resize_stretch_rows(const ImageU8& img, int side) {
  Eigen::MatrixXd rows(side * side, 3);
  const double sx = double(img.width) / side;
  const double sy = double(img.height) / side;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      for (int c = 0; c < 3; ++c)
        rows(y * side + x, c) = bilinear_sample(img, (x + 0.5) * sx, (y + 0.5) * sy, c);
  return rows;
}

Eigen::MatrixXd FrozenVLM::teacher_feature_map(const ImageU8& image) const {
  ad::Tape tape;
  Ctx ctx{tape, false};
  Val last = image_last_attn_tokens(ctx, resize_stretch_rows(image, cfg_.input_side));
  return tape.value(last);
}

Eigen::RowVectorXd FrozenVLM::roi_pool_grid(const Eigen::MatrixXd& grid, const Box& box,
                                            const ImageExtent& ext) const {
  if (!box.valid() || box.width() < 1.0 || box.height() < 1.0)
    throw std::invalid_argument("roi_pool_grid: degenerate sub-pixel box");
  if (out_of_image_fraction(box, ext) > 1e-9)
    throw std::invalid_argument("roi_pool_grid: box outside image");
  const int g = grid_side();
  const double u0 = image_to_grid(box.x1, g, ext.width);
  const double u1 = image_to_grid(box.x2, g, ext.width);
  const double v0 = image_to_grid(box.y1, g, ext.height);
  const double v1 = image_to_grid(box.y2, g, ext.height);
  const GridPoolPlan plan = make_grid_pool_plan(g, g, u0, v0, u1, v1, 1, 1);
  return apply_row_mix(grid, plan.entries, 1).row(0);
}

Eigen::VectorXd FrozenVLM::roi_region_embedding(const Eigen::MatrixXd& grid, const Box& box,
                                                const ImageExtent& ext) const {
  const Eigen::RowVectorXd pooled = roi_pool_grid(grid, box, ext);
  Eigen::RowVectorXd proj = pooled * image_proj_->value;
  const double n = std::sqrt(proj.squaredNorm() + 1e-24);
  return (proj / n).transpose();
}

Eigen::MatrixXd FrozenVLM::category_embeddings(const std::vector<std::string>& names,
                                               const std::string& prompt) const {
  const auto pos = prompt.find("{}");
  if (pos == std::string::npos)
    throw std::invalid_argument("category_embeddings: prompt must contain {}");
  Eigen::MatrixXd out(static_cast<int>(names.size()), cfg_.dim);
  for (size_t i = 0; i < names.size(); ++i) {
    std::string text = prompt;
    text.replace(pos, 2, names[i]);
    out.row(static_cast<int>(i)) = encode_text(text, TextLayer::kFinal).transpose();
  }
  return out;
}

void FrozenVLM::save(const std::string& path) const {
  json config;
  config["kind"] = "toy_vlm";
  config["vlm"] = cfg_.to_json();
  config["vocab"] = vocab_.words();
  config["frozen"] = frozen_;
  save_checkpoint(path, config, params_);
}

std::unique_ptr<FrozenVLM> FrozenVLM::load(const std::string& path) {
  const json config = read_checkpoint_config(path);
  if (config.value("kind", "") != "toy_vlm")
    throw std::runtime_error("checkpoint is not a toy_vlm: " + path);
  VlmConfig cfg = VlmConfig::from_json(config["vlm"]);
  Vocab vocab(config["vocab"].get<std::vector<std::string>>());
  auto vlm = std::make_unique<FrozenVLM>(cfg, std::move(vocab), 0);
  load_checkpoint_values(path, vlm->params());
  if (config.value("frozen", false)) vlm->freeze();
  return vlm;
}

Val pretrain_contrastive_loss(const FrozenVLM& vlm, const Ctx& ctx,
                              const std::vector<const PretrainPair*>& batch) {
  const int B = static_cast<int>(batch.size());
  if (B == 0) throw std::invalid_argument("pretrain loss: empty batch");
  std::vector<Val> text_rows, image_rows;
  for (const PretrainPair* pair : batch) {
    Val emb = vlm.text_embed_ids(ctx, vlm.vocab().encode(pair->caption));
    text_rows.push_back(vlm.text_encode(ctx, emb, TextLayer::kFinal));
    const Eigen::MatrixXd px = resize_stretch_rows(pair->image, vlm.config().input_side);
    image_rows.push_back(vlm.image_encode(ctx, px, {}));
  }
  Val T = ad::concat_rows(text_rows);
  Val V = ad::concat_rows(image_rows);
  Val logits = ad::scale(ad::matmul_nt(T, V), vlm.config().pretrain_temperature);
  std::vector<int> diag(B);
  for (int i = 0; i < B; ++i) diag[i] = i;
  Val pos_tv = ad::trace_select(ad::log_softmax_rows(logits), diag, diag);
  Val pos_vt = ad::trace_select(ad::log_softmax_rows(ad::transpose(logits)), diag, diag);
  return ad::scale(ad::add(pos_tv, pos_vt), -0.5 / B);
}

PretrainReport pretrain_toy_vlm(FrozenVLM& vlm, const std::vector<PretrainPair>& corpus,
                                const std::vector<std::string>& required_categories,
                                Rng& rng) {
  if (vlm.frozen()) throw std::logic_error("pretrain: model already frozen");
  for (const auto& name : required_categories) {
    bool found = false;
    for (const auto& pair : corpus) {
      if (pair.caption.find(name) != std::string::npos) {
        found = true;
        break;
      }
    }
    if (!found)
      throw std::invalid_argument("pretrain: corpus never mentions category '" + name + "'");
  }
  PretrainReport report;
  Adam opt(vlm.config().pretrain_lr);
  const int B = vlm.config().pretrain_batch;
  for (int step = 0; step < vlm.config().pretrain_steps; ++step) {
    // block sampling: windows of 4 consecutive corpus entries, so corpora
    // arranged in hard-negative quads put those quads inside one batch
    std::vector<const PretrainPair*> batch;
    while (int(batch.size()) < B) {
      const size_t start = rng.uniform_int(corpus.size());
      for (size_t k = 0; k < 4 && int(batch.size()) < B; ++k)
        batch.push_back(&corpus[(start + k) % corpus.size()]);
    }
    ad::Tape tape;
    Ctx ctx{tape, true};
    Val loss = pretrain_contrastive_loss(vlm, ctx, batch);
    vlm.params().zero_grad();
    tape.backward(loss);
    opt.step(vlm.params());
    report.losses.push_back(tape.value(loss)(0, 0));
  }
  vlm.freeze();
  return report;
}

}  // namespace regionbag
