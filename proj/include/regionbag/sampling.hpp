#pragma once

#include <array>
#include <deque>
#include <vector>

#include "json.hpp"
#include "regionbag/geometry.hpp"
#include "regionbag/rng.hpp"
#include "regionbag/scenes.hpp"

namespace regionbag {

// The eight neighbor directions in raster order.
enum class Direction : int { kNW = 0, kN, kNE, kW, kE, kSW, kS, kSE };
constexpr int kNumDirections = 8;

// unit center offsets per direction, raster order
constexpr std::array<std::pair<int, int>, kNumDirections> kDirectionOffsets{{
    {-1, -1}, {0, -1}, {1, -1}, {-1, 0}, {1, 0}, {-1, 1}, {0, 1}, {1, 1}}};

struct SamplingConfig {
  double p_b = 0.3;
  double alpha = 3.0;
  double iof_overlap = 0.1;  // negative keeps a gap between boxes
  double objectness_min = 0.85;
  double ar_min = 0.25;
  double ar_max = 4.0;
  double area_ratio_min = 0.01;
  double nms_iou = 0.1;
  int top_k = 300;
  int bags_per_proposal = 3;  // G
  double max_out_fraction = 2.0 / 3.0;
  bool cache_enabled = false;
  int cache_capacity = 1000;
  double cache_mix_fraction = 0.25;

  nlohmann::json to_json() const;
  static SamplingConfig from_json(const nlohmann::json& j);
};

// Ordered regions sharing the seed proposal's exact width and height;
// the proposal is regions[0], sampled neighbors follow in raster order.
struct RegionBag {
  std::vector<Box> regions;
  int proposal_index = 0;
  Box enclosing;
};

// top-K by objectness, then objectness / aspect-ratio / area-ratio gates,
// then NMS
std::vector<RegionProposal> filter_proposals(const std::vector<RegionProposal>& props,
                                             const ImageExtent& ext,
                                             const SamplingConfig& cfg);

// Up to eight equal-shape boxes at center offsets +-(1-overlap)*W / H;
// candidates hanging too far out of the image are discarded. Boxes are not
// clipped: equal shape is an invariant, the teacher crop handles padding.
std::vector<std::pair<Direction, Box>> neighbor_candidates(const Box& p, double iof_overlap,
                                                           const ImageExtent& ext,
                                                           double max_out_fraction);

// left/right: p_b * min((H/W)^alpha, 1); up/down: p_b * min((W/H)^alpha, 1);
// diagonals: geometric mean of the two adjacent axis probabilities
std::array<double, kNumDirections> direction_probabilities(const Box& p,
                                                           const SamplingConfig& cfg);

RegionBag sample_bag(const RegionProposal& p, const ImageExtent& ext,
                     const SamplingConfig& cfg, Rng& rng);

// filter_proposals, then G independent bags per surviving proposal
std::vector<RegionBag> sample_bags_for_image(const std::vector<RegionProposal>& props,
                                             const ImageExtent& ext,
                                             const SamplingConfig& cfg, Rng& rng);

// FIFO cache of proposals from earlier iterations (appendix suppression
// trick); draw() returns a uniform random subset without replacement.
class ProposalCache {
 public:
  explicit ProposalCache(size_t capacity) : capacity_(capacity) {}
  void update(const std::vector<RegionProposal>& props);
  std::vector<RegionProposal> draw(size_t count, Rng& rng) const;
  size_t size() const { return entries_.size(); }

 private:
  size_t capacity_;
  std::deque<RegionProposal> entries_;
};

}  // namespace regionbag
