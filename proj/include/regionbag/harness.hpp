#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "regionbag/alignment.hpp"
#include "regionbag/sampling.hpp"
#include "regionbag/scenes.hpp"
#include "regionbag/student.hpp"
#include "regionbag/vlm.hpp"

namespace regionbag {

struct ExperimentConfig {
  uint64_t seed = 1;
  std::string dataset_path;
  std::string teacher_checkpoint;
  std::string out_dir;
  std::string supervision = "vlm";  // vlm | caption

  bool use_bag_loss = true;
  bool use_individual_loss = true;
  bool use_spatial_pe = true;
  bool use_word_dropout = true;
  bool use_proposal_cache = false;

  double learning_rate = 0.02;
  double momentum = 0.9;
  int steps = 2000;
  int batch_scenes = 8;
  double lr_decay_at = 0.75;  // fraction of steps after which lr drops x0.1

  // positive / background assignment for the classification head
  double pos_iou = 0.5;
  double bg_iou = 0.4;
  int bg_boxes_per_scene = 4;

  int individual_regions_cap = 8;  // regions per scene in the individual loss
  int max_bags_per_scene = 24;

  // caption-supervision variant
  int caption_bags_per_image = 3;
  int caption_bag_size = 3;

  std::string prompt = "a photo of {} in the scene";

  SamplingConfig sampling;
  LossConfig loss;
  StudentConfig student;
  ProposalGenConfig proposals;

  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load_file(const std::string& path);
  void save_file(const std::string& path) const;
};

struct StepLosses {
  int step = 0;
  double total = 0, cls = 0, reg = 0, bag = 0, individual = 0, caption = 0;
};

struct EvalResult {
  std::map<std::string, double> per_category;  // AP50 in [0,1]
  double ap50_novel = 0, ap50_base = 0, ap50_all = 0;  // mean AP x 100 (points)
};

struct RunRecord {
  nlohmann::json config_snapshot;
  std::vector<StepLosses> steps;
  EvalResult eval;
  double wall_seconds = 0;
  uint64_t seed = 0;

  void write_jsonl(const std::string& path) const;  // append-only structured lines
  static RunRecord read_jsonl(const std::string& path);
};

struct Prediction {
  uint64_t scene_id = 0;
  Box box;
  double score = 0;
};

struct ClsTarget {
  int box_index = 0;
  int label = -1;  // slot in the base list, or n_base for background; -1 = ignore band
  bool regress = false;
  Eigen::RowVectorXd reg_target;
};

// Label assignment sees base-category boxes only: novel objects are invisible
// to the classification and regression losses whether or not they are present
// in the annotation stream.
std::vector<ClsTarget> assign_cls_targets(const std::vector<Box>& boxes,
                                          const SyntheticScene& scene, const Catalog& catalog,
                                          const std::vector<int>& base_slot_of_category,
                                          double pos_iou, double bg_iou);

// VOC-2010 style AP: greedy confidence-ordered matching at iou_thresh, one
// match per ground-truth box, area under the monotone precision envelope.
double category_average_precision(std::vector<Prediction> preds,
                                  const std::map<uint64_t, std::vector<Box>>& gt_by_scene,
                                  double iou_thresh = 0.5);

// deterministic per-scene proposals shared by training and evaluation
std::vector<RegionProposal> proposals_for_scene(const SyntheticScene& scene,
                                                const ProposalGenConfig& cfg);

EvalResult evaluate_ap50(const FrozenVLM& vlm, StudentDetector& det, const Catalog& catalog,
                         const std::vector<SyntheticScene>& scenes,
                         const ExperimentConfig& cfg);

// Trains with VLM distillation (classification on base boxes + bag /
// individual InfoNCE per the toggles). Returns the record; also writes the
// checkpoint and run.jsonl into cfg.out_dir when it is non-empty.
RunRecord train_detector(const ExperimentConfig& cfg);

// Caption-supervised variant (soft cross entropy on caption embeddings; the
// individual alignment is discarded).
RunRecord train_detector_caption(const ExperimentConfig& cfg);

struct AblationCell {
  std::string name;
  ExperimentConfig cfg;
};

struct AblationRow {
  std::string cell;
  uint64_t seed = 0;
  bool failed = false;
  std::string error;
  double ap50_novel = 0, ap50_base = 0, ap50_all = 0;
  double wall_seconds = 0;
};

// The Table-4-style toggle grid plus optional parameter sweeps.
std::vector<AblationCell> ablation_toggle_grid(const ExperimentConfig& base);
std::vector<AblationCell> ablation_sweep(const ExperimentConfig& base,
                                         const std::string& axis);  // overlap|p_b|bags|words

// Executes cells x seeds (optionally in parallel processes/threads), emits
// <out_dir>/ablation.csv and SVG figures; partial failures are recorded and
// the run continues.
std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells,
                                      const std::vector<uint64_t>& seeds,
                                      const std::string& out_dir, int parallelism = 0);

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

// corpus assembly for teacher pretraining (mixed multi-object, single-object
// and relational-caption scenes over all categories)
std::vector<PretrainPair> build_pretrain_corpus(const Catalog& catalog, int pairs,
                                                uint64_t seed);

}  // namespace regionbag
