#include "regionbag/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "regionbag/plots.hpp"

namespace fs = std::filesystem;

namespace regionbag {

using namespace nn;
using ad::Matrix;
using nlohmann::json;

// ---------------------------------------------------------------- config io

json ExperimentConfig::to_json() const {
  json j;
  j["schema_version"] = 1;
  j["seed"] = seed;
  j["dataset_path"] = dataset_path;
  j["teacher_checkpoint"] = teacher_checkpoint;
  j["out_dir"] = out_dir;
  j["supervision"] = supervision;
  j["use_bag_loss"] = use_bag_loss;
  j["use_individual_loss"] = use_individual_loss;
  j["use_spatial_pe"] = use_spatial_pe;
  j["use_word_dropout"] = use_word_dropout;
  j["use_proposal_cache"] = use_proposal_cache;
  j["learning_rate"] = learning_rate;
  j["momentum"] = momentum;
  j["steps"] = steps;
  j["batch_scenes"] = batch_scenes;
  j["lr_decay_at"] = lr_decay_at;
  j["pos_iou"] = pos_iou;
  j["bg_iou"] = bg_iou;
  j["bg_boxes_per_scene"] = bg_boxes_per_scene;
  j["individual_regions_cap"] = individual_regions_cap;
  j["max_bags_per_scene"] = max_bags_per_scene;
  j["caption_bags_per_image"] = caption_bags_per_image;
  j["caption_bag_size"] = caption_bag_size;
  j["prompt"] = prompt;
  j["sampling"] = sampling.to_json();
  j["loss"] = loss.to_json();
  j["student"] = student.to_json();
  j["proposals"] = {{"copies_per_gt", proposals.copies_per_gt},
                    {"center_jitter", proposals.center_jitter},
                    {"size_jitter", proposals.size_jitter},
                    {"background_boxes", proposals.background_boxes},
                    {"bg_min_size", proposals.bg_min_size},
                    {"bg_max_size", proposals.bg_max_size},
                    {"objectness_noise", proposals.objectness_noise}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (j.contains("schema_version") && j["schema_version"].get<int>() != 1)
    throw std::runtime_error("experiment config: unsupported schema version");
  ExperimentConfig c;
  c.seed = j.value("seed", c.seed);
  c.dataset_path = j.value("dataset_path", c.dataset_path);
  c.teacher_checkpoint = j.value("teacher_checkpoint", c.teacher_checkpoint);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.supervision = j.value("supervision", c.supervision);
  c.use_bag_loss = j.value("use_bag_loss", c.use_bag_loss);
  c.use_individual_loss = j.value("use_individual_loss", c.use_individual_loss);
  c.use_spatial_pe = j.value("use_spatial_pe", c.use_spatial_pe);
  c.use_word_dropout = j.value("use_word_dropout", c.use_word_dropout);
  c.use_proposal_cache = j.value("use_proposal_cache", c.use_proposal_cache);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.steps = j.value("steps", c.steps);
  c.batch_scenes = j.value("batch_scenes", c.batch_scenes);
  c.lr_decay_at = j.value("lr_decay_at", c.lr_decay_at);
  c.pos_iou = j.value("pos_iou", c.pos_iou);
  c.bg_iou = j.value("bg_iou", c.bg_iou);
  c.bg_boxes_per_scene = j.value("bg_boxes_per_scene", c.bg_boxes_per_scene);
  c.individual_regions_cap = j.value("individual_regions_cap", c.individual_regions_cap);
  c.max_bags_per_scene = j.value("max_bags_per_scene", c.max_bags_per_scene);
  c.caption_bags_per_image = j.value("caption_bags_per_image", c.caption_bags_per_image);
  c.caption_bag_size = j.value("caption_bag_size", c.caption_bag_size);
  c.prompt = j.value("prompt", c.prompt);
  if (j.contains("sampling")) c.sampling = SamplingConfig::from_json(j["sampling"]);
  if (j.contains("loss")) c.loss = LossConfig::from_json(j["loss"]);
  if (j.contains("student")) c.student = StudentConfig::from_json(j["student"]);
  if (j.contains("proposals")) {
    const json& p = j["proposals"];
    c.proposals.copies_per_gt = p.value("copies_per_gt", c.proposals.copies_per_gt);
    c.proposals.center_jitter = p.value("center_jitter", c.proposals.center_jitter);
    c.proposals.size_jitter = p.value("size_jitter", c.proposals.size_jitter);
    c.proposals.background_boxes = p.value("background_boxes", c.proposals.background_boxes);
    c.proposals.bg_min_size = p.value("bg_min_size", c.proposals.bg_min_size);
    c.proposals.bg_max_size = p.value("bg_max_size", c.proposals.bg_max_size);
    c.proposals.objectness_noise = p.value("objectness_noise", c.proposals.objectness_noise);
  }
  return c;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  json j;
  f >> j;
  return from_json(j);
}

void ExperimentConfig::save_file(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config: " + path);
  f << to_json().dump(2) << "\n";
}

// ------------------------------------------------------------ run record io

void RunRecord::write_jsonl(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write run record: " + path);
  f << json{{"type", "config"}, {"seed", seed}, {"config", config_snapshot}}.dump() << "\n";
  for (const auto& s : steps) {
    f << json{{"type", "step"},     {"step", s.step},       {"total", s.total},
              {"cls", s.cls},       {"reg", s.reg},         {"bag", s.bag},
              {"individual", s.individual}, {"caption", s.caption}}
             .dump()
      << "\n";
  }
  json per = json::object();
  for (const auto& [name, ap] : eval.per_category) per[name] = ap;
  f << json{{"type", "result"},
            {"ap50_novel", eval.ap50_novel},
            {"ap50_base", eval.ap50_base},
            {"ap50_all", eval.ap50_all},
            {"per_category", per},
            {"wall_seconds", wall_seconds}}
           .dump()
    << "\n";
}

RunRecord RunRecord::read_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open run record: " + path);
  RunRecord rec;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string type = j.value("type", "");
    if (type == "config") {
      rec.seed = j.value("seed", uint64_t(0));
      rec.config_snapshot = j.value("config", json::object());
    } else if (type == "step") {
      StepLosses s;
      s.step = j.value("step", 0);
      s.total = j.value("total", 0.0);
      s.cls = j.value("cls", 0.0);
      s.reg = j.value("reg", 0.0);
      s.bag = j.value("bag", 0.0);
      s.individual = j.value("individual", 0.0);
      s.caption = j.value("caption", 0.0);
      rec.steps.push_back(s);
    } else if (type == "result") {
      rec.eval.ap50_novel = j.value("ap50_novel", 0.0);
      rec.eval.ap50_base = j.value("ap50_base", 0.0);
      rec.eval.ap50_all = j.value("ap50_all", 0.0);
      rec.wall_seconds = j.value("wall_seconds", 0.0);
      if (j.contains("per_category"))
        for (const auto& [k, v] : j["per_category"].items())
          rec.eval.per_category[k] = v.get<double>();
    }
  }
  return rec;
}

// -------------------------------------------------------------- AP50 metric

double category_average_precision(std::vector<Prediction> preds,
                                  const std::map<uint64_t, std::vector<Box>>& gt_by_scene,
                                  double iou_thresh) {
  int n_gt = 0;
  for (const auto& [id, boxes] : gt_by_scene) n_gt += int(boxes.size());
  if (n_gt == 0) return 0.0;
  std::stable_sort(preds.begin(), preds.end(),
                   [](const Prediction& a, const Prediction& b) { return a.score > b.score; });
  std::map<uint64_t, std::vector<bool>> matched;
  for (const auto& [id, boxes] : gt_by_scene) matched[id].assign(boxes.size(), false);

  std::vector<double> precision, recall;
  int tp = 0;
  for (size_t k = 0; k < preds.size(); ++k) {
    const Prediction& p = preds[k];
    auto it = gt_by_scene.find(p.scene_id);
    int best = -1;
    double best_iou = iou_thresh;
    if (it != gt_by_scene.end()) {
      const auto& boxes = it->second;
      auto& used = matched[p.scene_id];
      for (size_t g = 0; g < boxes.size(); ++g) {
        if (used[g]) continue;
        const double v = iou(p.box, boxes[g]);
        if (v >= best_iou) {
          best_iou = v;
          best = int(g);
        }
      }
    }
    if (best >= 0) {
      matched[p.scene_id][best] = true;
      ++tp;
    }
    precision.push_back(double(tp) / double(k + 1));
    recall.push_back(double(tp) / double(n_gt));
  }
  if (precision.empty()) return 0.0;
  // monotone envelope, exact area (continuous interpolation)
  for (int i = int(precision.size()) - 2; i >= 0; --i)
    precision[i] = std::max(precision[i], precision[i + 1]);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

// ------------------------------------------------------------- shared bits

namespace {

constexpr uint64_t kProposalSalt = 0x5eed0001;

std::string teacher_bag_key(int scene_index, const std::vector<Box>& regions) {
  std::string key;
  key.resize(sizeof(int) + regions.size() * 4 * sizeof(double));
  char* out = key.data();
  std::memcpy(out, &scene_index, sizeof(int));
  out += sizeof(int);
  for (const Box& b : regions) {
    const double coords[4] = {b.x1, b.y1, b.x2, b.y2};
    std::memcpy(out, coords, sizeof(coords));
    out += sizeof(coords);
  }
  return key;
}

}  // namespace

std::vector<ClsTarget> assign_cls_targets(const std::vector<Box>& boxes,
                                          const SyntheticScene& scene, const Catalog& catalog,
                                          const std::vector<int>& base_slot_of_category,
                                          double pos_iou, double bg_iou) {
  const int n_base = int(catalog.base_indices().size());
  std::vector<ClsTarget> out;
  for (size_t i = 0; i < boxes.size(); ++i) {
    double best_iou = 0.0;
    int best_obj = -1;
    for (size_t o = 0; o < scene.objects.size(); ++o) {
      if (catalog.categories[scene.objects[o].category].novel) continue;
      const double v = iou(boxes[i], scene.objects[o].box);
      if (v > best_iou) {
        best_iou = v;
        best_obj = int(o);
      }
    }
    ClsTarget t;
    t.box_index = int(i);
    if (best_iou >= pos_iou) {
      t.label = base_slot_of_category[scene.objects[best_obj].category];
      t.regress = true;
      t.reg_target = box_delta_targets(boxes[i], scene.objects[best_obj].box);
    } else if (best_iou < bg_iou) {
      t.label = n_base;  // background
    }  // else: ignore band
    out.push_back(std::move(t));
  }
  return out;
}

namespace {

struct TrainContext {
  Dataset dataset;
  std::unique_ptr<FrozenVLM> vlm;
  std::unique_ptr<StudentDetector> student;
  std::vector<int> base_slot_of_category;  // -1 for novel
  std::vector<std::string> base_names;
  Matrix base_cat_embs;
  std::vector<std::vector<RegionProposal>> proposals;       // per train scene
  std::vector<std::optional<Matrix>> teacher_grids;         // lazy per scene
  std::unordered_map<std::string, Eigen::VectorXd> bag_emb_cache;
  std::vector<std::optional<Matrix>> caption_embs;          // lazy per scene
};

TrainContext make_train_context(const ExperimentConfig& cfg) {
  TrainContext ctx;
  ctx.dataset = read_dataset(cfg.dataset_path);
  if (!ctx.dataset.splits.count("train"))
    throw std::runtime_error("dataset has no train split: " + cfg.dataset_path);
  ctx.vlm = FrozenVLM::load(cfg.teacher_checkpoint);
  if (!ctx.vlm->frozen())
    throw std::runtime_error("teacher checkpoint is not frozen: " + cfg.teacher_checkpoint);
  if (cfg.student.word_dim != ctx.vlm->config().dim)
    throw std::runtime_error("student word_dim must match the teacher token width");
  ctx.student = std::make_unique<StudentDetector>(cfg.student, cfg.seed);

  const Catalog& catalog = ctx.dataset.catalog;
  ctx.base_slot_of_category.assign(catalog.categories.size(), -1);
  for (int idx : catalog.base_indices()) {
    ctx.base_slot_of_category[idx] = int(ctx.base_names.size());
    ctx.base_names.push_back(catalog.categories[idx].name);
  }
  ctx.base_cat_embs = ctx.vlm->category_embeddings(ctx.base_names, cfg.prompt);

  const auto& train = ctx.dataset.splits.at("train");
  ctx.proposals.reserve(train.size());
  for (const auto& scene : train) ctx.proposals.push_back(proposals_for_scene(scene, cfg.proposals));
  ctx.teacher_grids.assign(train.size(), std::nullopt);
  ctx.caption_embs.assign(train.size(), std::nullopt);
  return ctx;
}

const Matrix& teacher_grid(TrainContext& ctx, int scene_index) {
  auto& slot = ctx.teacher_grids[scene_index];
  if (!slot)
    slot = ctx.vlm->teacher_feature_map(ctx.dataset.splits.at("train")[scene_index].image);
  return *slot;
}

Eigen::VectorXd teacher_bag_embedding(TrainContext& ctx, int scene_index,
                                      const RegionBag& bag) {
  const std::string key = teacher_bag_key(scene_index, bag.regions);
  auto it = ctx.bag_emb_cache.find(key);
  if (it != ctx.bag_emb_cache.end()) return it->second;
  const auto& scene = ctx.dataset.splits.at("train")[scene_index];
  Eigen::VectorXd emb = ctx.vlm->encode_image_masked(scene.image, bag.enclosing, bag.regions);
  if (ctx.bag_emb_cache.size() < 200000) ctx.bag_emb_cache.emplace(key, emb);
  return emb;
}

double val_of(const ad::Tape& tape, Val v) { return tape.value(v)(0, 0); }

Val mean_of_terms(const std::vector<Val>& terms) {
  return ad::scale(ad::add_n(terms), 1.0 / double(terms.size()));
}

void check_finite(double v, const char* what, int step) {
  if (!std::isfinite(v)) {
    std::ostringstream msg;
    msg << "non-finite " << what << " loss (" << v << ") at step " << step
        << "; aborting training";
    throw std::runtime_error(msg.str());
  }
}

// shared skeleton for the two training variants
RunRecord train_impl(const ExperimentConfig& cfg, bool caption_mode) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainContext ctx = make_train_context(cfg);
  const Catalog& catalog = ctx.dataset.catalog;
  const auto& train = ctx.dataset.splits.at("train");
  const int n_base = int(ctx.base_names.size());
  const int E = ctx.vlm->config().dim;
  const ImageExtent ext{double(train[0].image.width), double(train[0].image.height)};

  if (caption_mode) {
    for (const auto& scene : train)
      if (scene.captions.empty())
        throw std::invalid_argument("caption supervision requires captions on every scene");
  }

  EmbeddingQueue q_bag_t(cfg.loss.queue_capacity, E), q_bag_v(cfg.loss.queue_capacity, E);
  EmbeddingQueue q_ind_t(cfg.loss.queue_capacity, E), q_ind_v(cfg.loss.queue_capacity, E);
  ProposalCache cache(cfg.sampling.cache_capacity);

  SgdMomentum opt(cfg.learning_rate, cfg.momentum);
  Rng root(cfg.seed);
  Rng batch_rng = root.derive(0xBA7C);
  Rng cache_rng = root.derive(0xCACE);

  RunRecord rec;
  rec.seed = cfg.seed;
  rec.config_snapshot = cfg.to_json();

  const int decay_step = int(cfg.steps * cfg.lr_decay_at);
  for (int step = 0; step < cfg.steps; ++step) {
    if (step == decay_step && decay_step > 0 && decay_step < cfg.steps)
      opt.set_lr(cfg.learning_rate * 0.1);

    std::vector<int> batch;
    for (int b = 0; b < cfg.batch_scenes; ++b)
      batch.push_back(int(batch_rng.uniform_int(train.size())));

    ad::Tape tape;
    Ctx tctx{tape, true};
    std::vector<Val> cls_terms, reg_terms;
    std::vector<Val> bag_ft, ind_gt, cap_ft;
    std::vector<Eigen::VectorXd> bag_fv, ind_gv;
    // caption mode bookkeeping: which batch slot each caption bag belongs to
    std::vector<int> cap_bag_scene_slot;
    std::vector<Matrix> cap_embs_batch(caption_mode ? batch.size() : 0);

    for (int b = 0; b < int(batch.size()); ++b) {
      const int scene_index = batch[b];
      const SyntheticScene& scene = train[scene_index];
      Rng srng = root.derive(0x100 + uint64_t(step), uint64_t(b));

      std::vector<RegionProposal> props = ctx.proposals[scene_index];
      if (cfg.sampling.cache_enabled || cfg.use_proposal_cache) {
        const size_t mix =
            size_t(std::ceil(props.size() * cfg.sampling.cache_mix_fraction));
        for (auto& p : cache.draw(mix, cache_rng)) props.push_back(p);
      }
      std::vector<RegionProposal> filtered = filter_proposals(props, ext, cfg.sampling);
      if (cfg.sampling.cache_enabled || cfg.use_proposal_cache) cache.update(filtered);
      if (filtered.empty()) continue;

      // classification boxes: filtered proposals plus a few low-objectness
      // boxes so the background embedding sees real negatives
      std::vector<Box> cls_boxes;
      for (const auto& p : filtered) cls_boxes.push_back(p.box);
      int bg_added = 0;
      for (const auto& p : ctx.proposals[scene_index]) {
        if (bg_added >= cfg.bg_boxes_per_scene) break;
        if (p.objectness < cfg.sampling.objectness_min && p.box.valid()) {
          cls_boxes.push_back(p.box);
          ++bg_added;
        }
      }
      const int n_cls = int(cls_boxes.size());
      const auto targets = assign_cls_targets(cls_boxes, scene, catalog,
                                              ctx.base_slot_of_category, cfg.pos_iou,
                                              cfg.bg_iou);
      for (const auto& t : targets) {
        // novel-category firewall: labels may only point at base slots or bg
        if (t.label > n_base)
          throw std::logic_error("novel category leaked into classification targets");
      }

      // bags
      std::vector<RegionBag> bags;
      if (!caption_mode && cfg.use_bag_loss) {
        for (const auto& p : filtered) {
          for (int g = 0; g < cfg.sampling.bags_per_proposal; ++g) {
            if (int(bags.size()) >= cfg.max_bags_per_scene) break;
            bags.push_back(sample_bag(p, ext, cfg.sampling, srng));
          }
        }
      } else if (caption_mode) {
        // random subsets of the filtered proposals, no neighborhood constraint
        for (int g = 0; g < cfg.caption_bags_per_image; ++g) {
          std::vector<int> idx(filtered.size());
          std::iota(idx.begin(), idx.end(), 0);
          srng.shuffle(idx);
          const int k = std::min<int>(cfg.caption_bag_size, int(idx.size()));
          RegionBag bag;
          for (int i = 0; i < k; ++i) bag.regions.push_back(filtered[idx[i]].box);
          bag.enclosing = enclosing_box(bag.regions);
          bags.push_back(std::move(bag));
        }
      }

      std::vector<Box> all_boxes = cls_boxes;
      std::vector<int> bag_region_base;
      for (const auto& bag : bags) {
        bag_region_base.push_back(int(all_boxes.size()));
        for (const Box& r : bag.regions) all_boxes.push_back(r);
      }

      const auto fm = ctx.student->backbone(tctx, scene.image);
      Val feats = ctx.student->region_features(tctx, fm, all_boxes);
      Val words_rows = ctx.student->project_to_pseudo_words(tctx, feats);
      Val deltas = ctx.student->box_deltas(tctx, ad::slice_rows(feats, 0, n_cls));

      for (const auto& t : targets) {
        if (t.label < 0) continue;  // ignore band
        Val words = ctx.student->region_words(tctx, words_rows, t.box_index);
        Val logits = classify_region_logits(tctx, *ctx.vlm, words, ctx.base_cat_embs,
                                            tape.param(ctx.student->background_embedding()),
                                            cfg.student.tau_cls);
        cls_terms.push_back(cross_entropy_from_logits(tctx, logits, t.label));
        if (t.regress) {
          Val d = ad::slice_rows(deltas, t.box_index, 1);
          Val diff = ad::sub(d, tape.constant(t.reg_target));
          reg_terms.push_back(ad::mean_all(ad::cmul(diff, diff)));
        }
      }

      auto region_words_reduced = [&](int box_index, Rng& drop_rng) {
        Val words = ctx.student->region_words(tctx, words_rows, box_index);
        if (cfg.use_word_dropout) {
          const std::vector<int> kept = ctx.student->word_dropout_keep(drop_rng);
          if (int(kept.size()) < cfg.student.words_per_region)
            words = ad::select_rows(words, kept);
        }
        return words;
      };

      if (!caption_mode && cfg.use_individual_loss) {
        const Matrix& grid = teacher_grid(ctx, scene_index);
        const int cap = std::min<int>(cfg.individual_regions_cap, int(filtered.size()));
        for (int i = 0; i < cap; ++i) {
          const Box box = clip_to_image(filtered[i].box, ext);
          if (box.width() < 1.0 || box.height() < 1.0) continue;
          Val g_t = individual_student_embedding(tctx, *ctx.vlm,
                                                 region_words_reduced(i, srng));
          ind_gt.push_back(g_t);
          ind_gv.push_back(ctx.vlm->roi_region_embedding(grid, box, ext));
        }
      }

      for (size_t bi = 0; bi < bags.size(); ++bi) {
        const RegionBag& bag = bags[bi];
        std::vector<Val> words;
        std::vector<Eigen::RowVectorXd> pes;
        for (size_t r = 0; r < bag.regions.size(); ++r) {
          words.push_back(region_words_reduced(bag_region_base[bi] + int(r), srng));
          if (cfg.use_spatial_pe)
            pes.push_back(
                ctx.student->spatial_positional_embedding(bag.regions[r], bag.enclosing));
        }
        Val f_t = bag_student_embedding(tctx, *ctx.vlm, words, pes);
        if (!caption_mode) {
          bag_ft.push_back(f_t);
          bag_fv.push_back(teacher_bag_embedding(ctx, scene_index, bag));
        } else {
          cap_ft.push_back(f_t);
          cap_bag_scene_slot.push_back(b);
        }
      }

      if (caption_mode) {
        auto& slot = ctx.caption_embs[scene_index];
        if (!slot) {
          Matrix embs(int(scene.captions.size()), E);
          for (size_t m = 0; m < scene.captions.size(); ++m)
            embs.row(int(m)) =
                ctx.vlm->encode_text(scene.captions[m], TextLayer::kFinal).transpose();
          slot = std::move(embs);
        }
        cap_embs_batch[b] = *slot;
      }
    }

    StepLosses losses;
    losses.step = step;
    std::vector<Val> total_terms;
    if (!cls_terms.empty()) {
      Val l = ad::scale(mean_of_terms(cls_terms), cfg.loss.lambda_cls);
      losses.cls = val_of(tape, l);
      total_terms.push_back(l);
    }
    if (!reg_terms.empty()) {
      Val l = ad::scale(mean_of_terms(reg_terms), cfg.loss.lambda_reg);
      losses.reg = val_of(tape, l);
      total_terms.push_back(l);
    }
    if (!caption_mode && cfg.use_bag_loss && !bag_ft.empty()) {
      Matrix fv(int(bag_fv.size()), E);
      for (size_t i = 0; i < bag_fv.size(); ++i) fv.row(int(i)) = bag_fv[i].transpose();
      Val l = ad::scale(bag_infonce(tctx, ad::concat_rows(bag_ft), tape.constant(fv),
                                    q_bag_t.negatives(), q_bag_v.negatives(),
                                    cfg.loss.tau_bag),
                        cfg.loss.lambda_bag);
      losses.bag = val_of(tape, l);
      total_terms.push_back(l);
      // enqueue detached values for later steps
      Matrix ft(int(bag_ft.size()), E);
      for (size_t i = 0; i < bag_ft.size(); ++i) ft.row(int(i)) = tape.value(bag_ft[i]).row(0);
      q_bag_t.push(ft);
      q_bag_v.push(fv);
    }
    if (!caption_mode && cfg.use_individual_loss && !ind_gt.empty()) {
      Matrix gv(int(ind_gv.size()), E);
      for (size_t i = 0; i < ind_gv.size(); ++i) gv.row(int(i)) = ind_gv[i].transpose();
      Val l = ad::scale(
          individual_infonce(tctx, ad::concat_rows(ind_gt), tape.constant(gv),
                             q_ind_t.negatives(), q_ind_v.negatives(),
                             cfg.loss.tau_individual),
          cfg.loss.lambda_ind);
      losses.individual = val_of(tape, l);
      total_terms.push_back(l);
      Matrix gt(int(ind_gt.size()), E);
      for (size_t i = 0; i < ind_gt.size(); ++i) gt.row(int(i)) = tape.value(ind_gt[i]).row(0);
      q_ind_t.push(gt);
      q_ind_v.push(gv);
    }
    if (caption_mode && !cap_ft.empty()) {
      // stack caption embeddings of the batch scenes; targets are uniform
      // over each bag's own scene captions
      std::vector<int> caption_offset(cap_embs_batch.size(), -1);
      int m_total = 0;
      for (size_t b = 0; b < cap_embs_batch.size(); ++b) {
        if (cap_embs_batch[b].size() == 0) continue;
        caption_offset[b] = m_total;
        m_total += int(cap_embs_batch[b].rows());
      }
      Matrix caps(m_total, E);
      for (size_t b = 0; b < cap_embs_batch.size(); ++b)
        if (caption_offset[b] >= 0)
          caps.middleRows(caption_offset[b], cap_embs_batch[b].rows()) = cap_embs_batch[b];
      Matrix targets = Matrix::Zero(int(cap_ft.size()), m_total);
      for (size_t g = 0; g < cap_ft.size(); ++g) {
        const int b = cap_bag_scene_slot[g];
        const int off = caption_offset[b];
        const int m = int(cap_embs_batch[b].rows());
        for (int j = 0; j < m; ++j) targets(int(g), off + j) = 1.0 / m;
      }
      Val l = ad::scale(caption_soft_ce(tctx, ad::concat_rows(cap_ft), tape.constant(caps),
                                        targets, cfg.loss.tau_bag),
                        cfg.loss.lambda_caption);
      losses.caption = val_of(tape, l);
      total_terms.push_back(l);
    }

    if (total_terms.empty()) {
      rec.steps.push_back(losses);
      continue;
    }
    Val total = ad::add_n(total_terms);
    losses.total = val_of(tape, total);
    check_finite(losses.total, "total", step);

    ctx.student->params().zero_grad();
    tape.backward(total);
    opt.step(ctx.student->params());
    rec.steps.push_back(losses);
  }

  // evaluation on the test split
  EvalResult eval;
  if (ctx.dataset.splits.count("test"))
    eval = evaluate_ap50(*ctx.vlm, *ctx.student, catalog, ctx.dataset.splits.at("test"), cfg);
  rec.eval = eval;
  rec.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!cfg.out_dir.empty()) {
    fs::create_directories(cfg.out_dir);
    ctx.student->save(cfg.out_dir + "/student.ckpt");
    rec.write_jsonl(cfg.out_dir + "/run.jsonl");
    cfg.save_file(cfg.out_dir + "/config.json");
  }
  return rec;
}

}  // namespace

std::vector<RegionProposal> proposals_for_scene(const SyntheticScene& scene,
                                                const ProposalGenConfig& cfg) {
  Rng rng = Rng(kProposalSalt).derive(scene.id);
  return generate_proposals(scene, cfg, rng);
}

EvalResult evaluate_ap50(const FrozenVLM& vlm, StudentDetector& det, const Catalog& catalog,
                         const std::vector<SyntheticScene>& scenes,
                         const ExperimentConfig& cfg) {
  const auto names = catalog.names();
  const Matrix cat_embs = vlm.category_embeddings(names, cfg.prompt);
  Eigen::VectorXd bg = det.background_embedding().value.row(0).transpose();
  const int C = int(names.size());

  std::vector<std::vector<Prediction>> preds(C);
  std::vector<std::map<uint64_t, std::vector<Box>>> gts(C);
  for (const auto& scene : scenes)
    for (const auto& o : scene.objects) gts[o.category][scene.id].push_back(o.box);

  for (const auto& scene : scenes) {
    const ImageExtent ext{double(scene.image.width), double(scene.image.height)};
    const auto props = proposals_for_scene(scene, cfg.proposals);
    const auto filtered = filter_proposals(props, ext, cfg.sampling);
    if (filtered.empty()) continue;
    std::vector<Box> boxes;
    for (const auto& p : filtered) boxes.push_back(p.box);

    ad::Tape tape;
    Ctx tctx{tape, false};
    const auto fm = det.backbone(tctx, scene.image);
    Val feats = det.region_features(tctx, fm, boxes);
    Val words_rows = det.project_to_pseudo_words(tctx, feats);
    Val deltas = det.box_deltas(tctx, feats);
    Matrix bg_row(1, bg.size());
    bg_row.row(0) = bg.transpose();
    for (size_t i = 0; i < boxes.size(); ++i) {
      Val words = det.region_words(tctx, words_rows, int(i));
      Val logits = classify_region_logits(tctx, vlm, words, cat_embs,
                                          tape.constant(bg_row), cfg.student.tau_cls);
      Val probs = ad::softmax_rows(logits);
      const Matrix& p = tape.value(probs);
      const Box refined =
          clip_to_image(apply_box_deltas(boxes[i], tape.value(deltas).row(int(i))), ext);
      if (!refined.valid()) continue;
      for (int c = 0; c < C; ++c)
        preds[c].push_back({scene.id, refined, p(0, c)});  // background prob excluded
    }
  }

  EvalResult out;
  double sum_novel = 0, sum_base = 0, sum_all = 0;
  int n_novel = 0, n_base = 0, n_all = 0;
  for (int c = 0; c < C; ++c) {
    if (gts[c].empty()) continue;  // category absent from this split
    const double ap = category_average_precision(preds[c], gts[c], 0.5);
    out.per_category[names[c]] = ap;
    sum_all += ap;
    ++n_all;
    if (catalog.categories[c].novel) {
      sum_novel += ap;
      ++n_novel;
    } else {
      sum_base += ap;
      ++n_base;
    }
  }
  out.ap50_all = n_all ? 100.0 * sum_all / n_all : 0.0;
  out.ap50_novel = n_novel ? 100.0 * sum_novel / n_novel : 0.0;
  out.ap50_base = n_base ? 100.0 * sum_base / n_base : 0.0;
  return out;
}

RunRecord train_detector(const ExperimentConfig& cfg) {
  if (cfg.supervision != "vlm")
    throw std::invalid_argument("train_detector expects supervision=vlm");
  return train_impl(cfg, /*caption_mode=*/false);
}

RunRecord train_detector_caption(const ExperimentConfig& cfg) {
  if (cfg.supervision != "caption")
    throw std::invalid_argument("train_detector_caption expects supervision=caption");
  return train_impl(cfg, /*caption_mode=*/true);
}

std::vector<AblationCell> ablation_toggle_grid(const ExperimentConfig& base) {
  std::vector<AblationCell> cells;
  auto mk = [&](const char* name, bool ind, bool bag, bool pe) {
    ExperimentConfig c = base;
    c.use_individual_loss = ind;
    c.use_bag_loss = bag;
    c.use_spatial_pe = pe;
    cells.push_back({name, c});
  };
  mk("ind_only", true, false, false);
  mk("bag_only", false, true, false);
  mk("bag_pe", false, true, true);
  mk("bag_pe_ind", true, true, true);
  return cells;
}

std::vector<AblationCell> ablation_sweep(const ExperimentConfig& base,
                                         const std::string& axis) {
  std::vector<AblationCell> cells;
  auto named = [&](const std::string& name, ExperimentConfig c) {
    cells.push_back({name, std::move(c)});
  };
  if (axis == "overlap") {
    for (double v : {-0.1, 0.0, 0.1, 0.2, 0.3}) {
      ExperimentConfig c = base;
      c.sampling.iof_overlap = v;
      named("overlap_" + std::to_string(v).substr(0, 4), c);
    }
  } else if (axis == "p_b") {
    for (double v : {0.1, 0.3, 0.5}) {
      ExperimentConfig c = base;
      c.sampling.p_b = v;
      named("p_b_" + std::to_string(v).substr(0, 3), c);
    }
  } else if (axis == "bags") {
    for (int v : {1, 3, 5}) {
      ExperimentConfig c = base;
      c.sampling.bags_per_proposal = v;
      named("bags_" + std::to_string(v), c);
    }
  } else if (axis == "words") {
    for (int v : {2, 4, 6, 8}) {
      ExperimentConfig c = base;
      c.student.words_per_region = v;
      named("words_" + std::to_string(v), c);
    }
  } else {
    throw std::invalid_argument("unknown sweep axis: " + axis);
  }
  return cells;
}

std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells,
                                      const std::vector<uint64_t>& seeds,
                                      const std::string& out_dir, int parallelism) {
  struct Job {
    const AblationCell* cell;
    uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& cell : cells)
    for (uint64_t seed : seeds) jobs.push_back({&cell, seed});
  std::vector<AblationRow> rows(jobs.size());

  if (parallelism <= 0)
    parallelism = std::max(1u, std::thread::hardware_concurrency());
  parallelism = std::min<int>(parallelism, int(jobs.size()));

  fs::create_directories(out_dir);
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      const Job& job = jobs[i];
      AblationRow row;
      row.cell = job.cell->name;
      row.seed = job.seed;
      ExperimentConfig cfg = job.cell->cfg;
      cfg.seed = job.seed;
      cfg.out_dir = out_dir + "/cells/" + job.cell->name + "_s" + std::to_string(job.seed);
      try {
        const RunRecord rec = cfg.supervision == "caption" ? train_detector_caption(cfg)
                                                           : train_detector(cfg);
        row.ap50_novel = rec.eval.ap50_novel;
        row.ap50_base = rec.eval.ap50_base;
        row.ap50_all = rec.eval.ap50_all;
        row.wall_seconds = rec.wall_seconds;
      } catch (const std::exception& e) {
        row.failed = true;
        row.error = e.what();
      }
      rows[i] = std::move(row);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < parallelism; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  write_ablation_csv(out_dir + "/ablation.csv", rows);

  // mean novel AP per cell, in cell order
  std::vector<std::string> names;
  std::vector<double> means;
  for (const auto& cell : cells) {
    double sum = 0;
    int n = 0;
    for (const auto& row : rows) {
      if (row.cell == cell.name && !row.failed) {
        sum += row.ap50_novel;
        ++n;
      }
    }
    names.push_back(cell.name);
    means.push_back(n ? sum / n : 0.0);
  }
  svg_bar_chart(out_dir + "/ablation_novel_ap50.svg", "AP50 novel by configuration", names,
                means);
  return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write csv: " + path);
  f << "cell,seed,status,ap50_novel,ap50_base,ap50_all,wall_seconds,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    f << r.cell << "," << r.seed << "," << (r.failed ? "failed" : "ok") << ","
      << r.ap50_novel << "," << r.ap50_base << "," << r.ap50_all << "," << r.wall_seconds
      << "," << err << "\n";
  }
}

std::vector<PretrainPair> build_pretrain_corpus(const Catalog& catalog, int pairs,
                                                uint64_t seed) {
  Rng rng(seed);
  std::vector<PretrainPair> corpus;
  corpus.reserve(pairs);
  // Close-up single objects match the scale of letterboxed crops the teacher
  // sees at distillation time; pair and multi-object scenes carry the
  // co-occurrence and relation structure. Single objects come as consecutive
  // same-color quads over the shape set so that the block batch sampler
  // always has hard shape negatives: color alone must not solve the batch.
  SceneGenConfig single;
  single.min_objects = 1;
  single.max_objects = 1;
  single.min_size = 36;
  single.max_size = 80;
  SceneGenConfig relational;
  relational.min_objects = 2;
  relational.max_objects = 3;
  relational.relation_caption_prob = 1.0;
  relational.min_size = 22;
  relational.max_size = 44;
  SceneGenConfig multi;
  multi.min_objects = 2;
  multi.max_objects = 5;

  std::map<std::string, std::vector<int>> by_color;
  for (size_t c = 0; c < catalog.categories.size(); ++c)
    by_color[catalog.categories[c].color].push_back(int(c));
  std::vector<std::vector<int>> color_groups;
  for (auto& [color, group] : by_color) color_groups.push_back(group);

  while (int(corpus.size()) < pairs) {
    const int r = int(corpus.size()) % 10;
    if (r < 4 && !color_groups.empty()) {
      // same-color, same-box quad across the shapes
      const auto& group = color_groups[rng.uniform_int(color_groups.size())];
      const double s = rng.uniform(single.min_size, single.max_size);
      const double x = rng.uniform(0.0, single.width - s);
      const double y = rng.uniform(0.0, single.height - s);
      const Box box{x, y, x + s, y + s};
      for (int cat : group) {
        if (int(corpus.size()) >= pairs) break;
        const SyntheticScene scene =
            render_single_object_scene(catalog, cat, box, single, rng);
        corpus.push_back({scene.image, scene.captions[0]});
      }
    } else {
      const SceneGenConfig& cfg = r < 6 ? relational : multi;
      const SyntheticScene scene = generate_scene(catalog, cfg, rng);
      corpus.push_back(
          {scene.image, scene.captions[rng.uniform_int(scene.captions.size())]});
    }
  }
  // guarantee that every category name occurs somewhere in the corpus
  for (const auto& name : catalog.names()) {
    bool found = false;
    for (const auto& pair : corpus)
      if (pair.caption.find(name) != std::string::npos) {
        found = true;
        break;
      }
    if (!found) {
      SceneGenConfig cfg = single;
      cfg.category_weights.assign(catalog.categories.size(), 0.0);
      cfg.category_weights[catalog.index_of(name)] = 1.0;
      const SyntheticScene scene = generate_scene(catalog, cfg, rng);
      corpus.push_back({scene.image, "a photo of " + name + " in the scene"});
    }
  }
  return corpus;
}

}  // namespace regionbag
