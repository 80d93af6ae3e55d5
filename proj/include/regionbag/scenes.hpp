#pragma once

#include <map>
#include <string>
#include <vector>

#include "regionbag/geometry.hpp"
#include "regionbag/image.hpp"
#include "regionbag/rng.hpp"

namespace regionbag {

struct CategorySpec {
  std::string name;   // e.g. "red square"
  std::string shape;  // square | circle | triangle | cross
  std::string color;
  bool novel = false;
  // co-occurrence partners: category name -> probability of adjacent placement
  std::vector<std::pair<std::string, double>> partners;
};

struct Catalog {
  std::vector<CategorySpec> categories;

  int index_of(const std::string& name) const;
  std::vector<int> base_indices() const;
  std::vector<int> novel_indices() const;
  std::vector<std::string> names() const;
};

// 16 categories on a 4 color x 4 shape grid; each novel category shares its
// shape with some base category and its color with another, so nothing about
// a novel category's appearance is unseen at the attribute level.
Catalog default_catalog();

struct SceneObject {
  Box box;
  int category = -1;
};

struct SyntheticScene {
  uint64_t id = 0;
  ImageU8 image;
  std::vector<SceneObject> objects;
  std::vector<std::string> captions;
};

struct SceneGenConfig {
  int width = 96;
  int height = 96;
  int min_objects = 2;
  int max_objects = 5;
  double min_size = 18.0;
  double max_size = 34.0;
  double max_place_iou = 0.25;
  int place_retries = 40;
  double partner_gap = 2.0;
  double relation_caption_prob = 0.35;
  int max_captions = 2;
  bool photo_caption_for_single = true;  // "a photo of X in the scene" style
  std::vector<double> category_weights;  // empty = uniform
};

SyntheticScene generate_scene(const Catalog& catalog, const SceneGenConfig& cfg, Rng& rng);

// Controlled variant: one object of the given category at the given box,
// captioned "a photo of <name> in the scene".
SyntheticScene render_single_object_scene(const Catalog& catalog, int category,
                                          const Box& box, const SceneGenConfig& cfg,
                                          Rng& rng);

struct RegionProposal {
  Box box;
  double objectness = 0.0;
};

struct ProposalGenConfig {
  int copies_per_gt = 2;
  double center_jitter = 0.20;  // fraction of box size, uniform +-
  double size_jitter = 0.20;    // scale factor in [1-j, 1+j]
  int background_boxes = 4;
  double bg_min_size = 10.0;
  double bg_max_size = 40.0;
  double objectness_noise = 0.05;
};

// Class-agnostic RPN stand-in: jittered copies of all ground-truth boxes
// (base and novel alike) plus random background boxes; objectness is the
// max IoU against any ground-truth box plus bounded noise, clipped to [0,1].
std::vector<RegionProposal> generate_proposals(const SyntheticScene& scene,
                                               const ProposalGenConfig& cfg, Rng& rng);

// Dataset persistence:
//   <root>/manifest.json            schema + catalog + split sizes
//   <root>/scenes/<split>/<id>.img  binary PPM pixels
//   <root>/annotations.jsonl        one JSON object per scene
using DatasetSplits = std::map<std::string, std::vector<SyntheticScene>>;

void write_dataset(const std::string& root, const Catalog& catalog,
                   const DatasetSplits& splits);
struct Dataset {
  Catalog catalog;
  DatasetSplits splits;
};
Dataset read_dataset(const std::string& root);

}  // namespace regionbag
