#include "regionbag/student.hpp"

#include <cmath>
#include <stdexcept>

#include "regionbag/checkpoint.hpp"
#include "regionbag/grid_pool.hpp"

namespace regionbag {

using namespace nn;
using ad::Matrix;
using nlohmann::json;

json StudentConfig::to_json() const {
  return json{{"words_per_region", words_per_region},
              {"word_dim", word_dim},
              {"embed_dim", embed_dim},
              {"roi_bins", roi_bins},
              {"backbone_channels", backbone_channels},
              {"backbone_strides", backbone_strides},
              {"pe_freq_base", pe_freq_base},
              {"p_drop", p_drop},
              {"tau_cls", tau_cls}};
}

StudentConfig StudentConfig::from_json(const json& j) {
  StudentConfig c;
  c.words_per_region = j.value("words_per_region", c.words_per_region);
  c.word_dim = j.value("word_dim", c.word_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.roi_bins = j.value("roi_bins", c.roi_bins);
  c.backbone_channels = j.value("backbone_channels", c.backbone_channels);
  c.backbone_strides = j.value("backbone_strides", c.backbone_strides);
  c.pe_freq_base = j.value("pe_freq_base", c.pe_freq_base);
  c.p_drop = j.value("p_drop", c.p_drop);
  c.tau_cls = j.value("tau_cls", c.tau_cls);
  return c;
}

StudentDetector::StudentDetector(StudentConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  Rng rng(seed);
  int in_ch = 3;
  for (size_t l = 0; l < cfg_.backbone_channels.size(); ++l) {
    const int out_ch = cfg_.backbone_channels[l];
    convs_.push_back(
        Linear::create(params_, "backbone.conv" + std::to_string(l), 9 * in_ch, out_ch, rng));
    in_ch = out_ch;
  }
  word_proj_ = Linear::create(params_, "word_proj", cfg_.feature_dim(),
                              cfg_.words_per_region * cfg_.word_dim, rng);
  box_head_ = Linear::create(params_, "box_head", cfg_.feature_dim(), 4, rng);
  // unit-scale init: the embedding is cosine-compared after normalization
  bg_embed_ = &params_.create_normal("background_embedding", 1, cfg_.embed_dim,
                                     1.0 / std::sqrt(double(cfg_.embed_dim)), rng);
}

const ad::Im2ColPlan& StudentDetector::conv_plan(int layer, int in_w, int in_h) const {
  const auto key = std::make_tuple(layer, in_w, in_h);
  auto it = plan_cache_.find(key);
  if (it != plan_cache_.end()) return it->second;

  const int stride = cfg_.backbone_strides[layer];
  const int out_w = (in_w + 2 - 3) / stride + 1;  // k=3, pad=1
  const int out_h = (in_h + 2 - 3) / stride + 1;
  ad::Im2ColPlan plan;
  plan.out_rows = out_w * out_h;
  plan.taps = 9;
  plan.src.resize(static_cast<size_t>(plan.out_rows) * 9);
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const int p = oy * out_w + ox;
      int tap = 0;
      for (int ky = -1; ky <= 1; ++ky) {
        for (int kx = -1; kx <= 1; ++kx) {
          const int sx = ox * stride + kx;  // pad=1: ox*stride-1+kx+1
          const int sy = oy * stride + ky;
          plan.src[static_cast<size_t>(p) * 9 + tap] =
              (sx >= 0 && sy >= 0 && sx < in_w && sy < in_h) ? sy * in_w + sx : -1;
          ++tap;
        }
      }
    }
  }
  return plan_cache_.emplace(key, std::move(plan)).first->second;
}

StudentDetector::BackboneOut StudentDetector::backbone(const Ctx& ctx,
                                                       const ImageU8& image) const {
  Val x = ctx.tape.constant(image_to_rows(image));
  int w = image.width, h = image.height;
  for (size_t l = 0; l < convs_.size(); ++l) {
    const auto& plan = conv_plan(static_cast<int>(l), w, h);
    x = convs_[l].apply(ctx, ad::im2col(x, plan));
    x = ad::gelu(x);
    const int stride = cfg_.backbone_strides[l];
    w = (w + 2 - 3) / stride + 1;
    h = (h + 2 - 3) / stride + 1;
  }
  BackboneOut out;
  out.rows = x;
  out.gw = w;
  out.gh = h;
  out.ext = ImageExtent{double(image.width), double(image.height)};
  return out;
}

Val StudentDetector::region_features(const Ctx& ctx, const BackboneOut& fm,
                                     const std::vector<Box>& boxes) const {
  const int S = cfg_.roi_bins;
  const int C = cfg_.backbone_channels.back();
  std::vector<Val> rows;
  rows.reserve(boxes.size());
  for (const Box& b : boxes) {
    if (!b.valid()) throw std::invalid_argument("region_features: invalid box");
    const double u0 = image_to_grid(b.x1, fm.gw, fm.ext.width);
    const double u1 = image_to_grid(b.x2, fm.gw, fm.ext.width);
    const double v0 = image_to_grid(b.y1, fm.gh, fm.ext.height);
    const double v1 = image_to_grid(b.y2, fm.gh, fm.ext.height);
    const auto plan = make_grid_pool_plan(fm.gw, fm.gh, u0, v0, u1, v1, S, S,
                                          /*zero_outside=*/true, -0.5, fm.gw - 0.5, -0.5,
                                          fm.gh - 0.5);
    Val pooled = ad::row_mix(fm.rows, plan.entries, S * S);  // (S*S) x C
    rows.push_back(ad::reshape_rowmajor(pooled, 1, S * S * C));
  }
  return ad::concat_rows(rows);
}

Val StudentDetector::project_to_pseudo_words(const Ctx& ctx, Val features) const {
  return word_proj_.apply(ctx, features);
}

Val StudentDetector::region_words(const Ctx& ctx, Val pseudo_rows, int region_index) const {
  Val row = ad::slice_rows(pseudo_rows, region_index, 1);
  return ad::reshape_rowmajor(row, cfg_.words_per_region, cfg_.word_dim);
}

Val StudentDetector::box_deltas(const Ctx& ctx, Val features) const {
  return box_head_.apply(ctx, features);
}

Eigen::RowVectorXd StudentDetector::spatial_positional_embedding(const Box& region,
                                                                 const Box& enclosing) const {
  const int D = cfg_.word_dim;
  const int pairs = D / 8;  // per scalar
  const double ew = enclosing.width();
  const double eh = enclosing.height();
  const double vals[4] = {(region.cx() - enclosing.x1) / ew, (region.cy() - enclosing.y1) / eh,
                          region.width() / ew, region.height() / eh};
  Eigen::RowVectorXd pe(D);
  for (int s = 0; s < 4; ++s) {
    for (int k = 0; k < pairs; ++k) {
      const double omega =
          2.0 * M_PI * std::pow(cfg_.pe_freq_base, double(k) / double(pairs - 1)) /
          cfg_.pe_freq_base;
      pe(s * 2 * pairs + 2 * k) = std::sin(omega * vals[s]);
      pe(s * 2 * pairs + 2 * k + 1) = std::cos(omega * vals[s]);
    }
  }
  return pe;
}

std::vector<int> StudentDetector::word_dropout_keep(Rng& rng) const {
  std::vector<int> kept;
  for (int w = 0; w < cfg_.words_per_region; ++w)
    if (!rng.bernoulli(cfg_.p_drop)) kept.push_back(w);
  if (kept.empty())
    kept.push_back(static_cast<int>(rng.uniform_int(cfg_.words_per_region)));
  return kept;
}

void StudentDetector::save(const std::string& path) const {
  json config;
  config["kind"] = "student";
  config["student"] = cfg_.to_json();
  save_checkpoint(path, config, params_);
}

std::unique_ptr<StudentDetector> StudentDetector::load(const std::string& path) {
  const json config = read_checkpoint_config(path);
  if (config.value("kind", "") != "student")
    throw std::runtime_error("checkpoint is not a student: " + path);
  auto det = std::make_unique<StudentDetector>(StudentConfig::from_json(config["student"]), 0);
  load_checkpoint_values(path, det->params());
  return det;
}

Val bag_student_embedding(const Ctx& ctx, const FrozenVLM& vlm,
                          const std::vector<Val>& region_words,
                          const std::vector<Eigen::RowVectorXd>& region_pes) {
  if (region_words.empty()) throw std::invalid_argument("bag_student_embedding: empty bag");
  if (!region_pes.empty() && region_pes.size() != region_words.size())
    throw std::invalid_argument("bag_student_embedding: PE count mismatch");
  std::vector<Val> parts;
  parts.reserve(region_words.size());
  for (size_t i = 0; i < region_words.size(); ++i) {
    Val words = region_words[i];
    if (!region_pes.empty()) {
      Matrix pe = region_pes[i];
      words = ad::add_rowvec(words, ctx.cst(std::move(pe)));
    }
    parts.push_back(words);
  }
  return vlm.text_encode(ctx, ad::concat_rows(parts), TextLayer::kFinal);
}

Val individual_student_embedding(const Ctx& ctx, const FrozenVLM& vlm, Val words) {
  Val tokens = vlm.text_last_attn_tokens(ctx, words);
  return vlm.project_text(ctx, ad::mean_rows(tokens));
}

Val classify_region_logits(const Ctx& ctx, const FrozenVLM& vlm, Val words,
                           const Eigen::MatrixXd& cat_embs, Val bg, double tau) {
  Val region = vlm.text_encode(ctx, words, TextLayer::kPenultimate);  // 1 x E unit
  Val cat_sims = ad::matmul_nt(region, ctx.tape.constant(cat_embs));
  if (bg.ok()) {
    Val bg_sim = ad::matmul_nt(region, ad::l2_normalize_rows(bg));
    cat_sims = ad::concat_cols({cat_sims, bg_sim});
  }
  return ad::scale(cat_sims, tau);
}

Eigen::VectorXd classify_region(const FrozenVLM& vlm, const Eigen::MatrixXd& words,
                                const Eigen::MatrixXd& cat_embs, const Eigen::VectorXd* bg,
                                double tau) {
  ad::Tape tape;
  Ctx ctx{tape, false};
  Val bg_val{};
  if (bg) {
    Matrix b(1, bg->size());
    b.row(0) = bg->transpose();
    bg_val = tape.constant(std::move(b));
  }
  Val logits =
      classify_region_logits(ctx, vlm, tape.constant(words), cat_embs, bg_val, tau);
  Val probs = ad::softmax_rows(logits);
  return tape.value(probs).row(0).transpose();
}

Box apply_box_deltas(const Box& proposal, const Eigen::RowVectorXd& deltas) {
  const double pw = proposal.width(), ph = proposal.height();
  const double cx = proposal.cx() + deltas(0) * pw;
  const double cy = proposal.cy() + deltas(1) * ph;
  const double w = pw * std::exp(std::clamp(deltas(2), -2.0, 2.0));
  const double h = ph * std::exp(std::clamp(deltas(3), -2.0, 2.0));
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

Eigen::RowVectorXd box_delta_targets(const Box& proposal, const Box& gt) {
  Eigen::RowVectorXd t(4);
  t(0) = (gt.cx() - proposal.cx()) / proposal.width();
  t(1) = (gt.cy() - proposal.cy()) / proposal.height();
  t(2) = std::log(gt.width() / proposal.width());
  t(3) = std::log(gt.height() / proposal.height());
  return t;
}

}  // namespace regionbag
