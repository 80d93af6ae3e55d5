#include "regionbag/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace regionbag {

using nlohmann::json;

json SamplingConfig::to_json() const {
  return json{{"p_b", p_b},
              {"alpha", alpha},
              {"iof_overlap", iof_overlap},
              {"objectness_min", objectness_min},
              {"ar_min", ar_min},
              {"ar_max", ar_max},
              {"area_ratio_min", area_ratio_min},
              {"nms_iou", nms_iou},
              {"top_k", top_k},
              {"bags_per_proposal", bags_per_proposal},
              {"max_out_fraction", max_out_fraction},
              {"cache_enabled", cache_enabled},
              {"cache_capacity", cache_capacity},
              {"cache_mix_fraction", cache_mix_fraction}};
}

SamplingConfig SamplingConfig::from_json(const json& j) {
  SamplingConfig c;
  c.p_b = j.value("p_b", c.p_b);
  c.alpha = j.value("alpha", c.alpha);
  c.iof_overlap = j.value("iof_overlap", c.iof_overlap);
  c.objectness_min = j.value("objectness_min", c.objectness_min);
  c.ar_min = j.value("ar_min", c.ar_min);
  c.ar_max = j.value("ar_max", c.ar_max);
  c.area_ratio_min = j.value("area_ratio_min", c.area_ratio_min);
  c.nms_iou = j.value("nms_iou", c.nms_iou);
  c.top_k = j.value("top_k", c.top_k);
  c.bags_per_proposal = j.value("bags_per_proposal", c.bags_per_proposal);
  c.max_out_fraction = j.value("max_out_fraction", c.max_out_fraction);
  c.cache_enabled = j.value("cache_enabled", c.cache_enabled);
  c.cache_capacity = j.value("cache_capacity", c.cache_capacity);
  c.cache_mix_fraction = j.value("cache_mix_fraction", c.cache_mix_fraction);
  return c;
}

std::vector<RegionProposal> filter_proposals(const std::vector<RegionProposal>& props,
                                             const ImageExtent& ext,
                                             const SamplingConfig& cfg) {
  std::vector<size_t> order(props.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return props[a].objectness > props[b].objectness;
  });
  if (static_cast<int>(order.size()) > cfg.top_k) order.resize(cfg.top_k);

  const double image_area = ext.width * ext.height;
  std::vector<std::pair<Box, double>> gated;
  for (size_t i : order) {
    const RegionProposal& p = props[i];
    if (p.objectness < cfg.objectness_min) continue;
    if (!p.box.valid()) continue;
    const double ar = p.box.width() / p.box.height();
    if (ar < cfg.ar_min || ar > cfg.ar_max) continue;
    if (p.box.area() / image_area < cfg.area_ratio_min) continue;
    gated.emplace_back(p.box, p.objectness);
  }
  std::vector<RegionProposal> out;
  for (const auto& [box, score] : nms(gated, cfg.nms_iou)) out.push_back({box, score});
  return out;
}

std::vector<std::pair<Direction, Box>> neighbor_candidates(const Box& p, double iof_overlap,
                                                           const ImageExtent& ext,
                                                           double max_out_fraction) {
  const double dx = (1.0 - iof_overlap) * p.width();
  const double dy = (1.0 - iof_overlap) * p.height();
  std::vector<std::pair<Direction, Box>> out;
  for (int d = 0; d < kNumDirections; ++d) {
    const auto [ox, oy] = kDirectionOffsets[d];
    const Box cand{p.x1 + ox * dx, p.y1 + oy * dy, p.x2 + ox * dx, p.y2 + oy * dy};
    if (out_of_image_fraction(cand, ext) > max_out_fraction) continue;
    out.emplace_back(static_cast<Direction>(d), cand);
  }
  return out;
}

std::array<double, kNumDirections> direction_probabilities(const Box& p,
                                                           const SamplingConfig& cfg) {
  const double h_over_w = p.height() / p.width();
  const double horiz = cfg.p_b * std::min(std::pow(h_over_w, cfg.alpha), 1.0);
  const double vert = cfg.p_b * std::min(std::pow(1.0 / h_over_w, cfg.alpha), 1.0);
  const double diag = std::sqrt(horiz * vert);
  std::array<double, kNumDirections> probs{};
  for (int d = 0; d < kNumDirections; ++d) {
    const auto [ox, oy] = kDirectionOffsets[d];
    if (oy == 0)
      probs[d] = horiz;
    else if (ox == 0)
      probs[d] = vert;
    else
      probs[d] = diag;
  }
  return probs;
}

RegionBag sample_bag(const RegionProposal& p, const ImageExtent& ext,
                     const SamplingConfig& cfg, Rng& rng) {
  RegionBag bag;
  bag.regions.push_back(p.box);
  bag.proposal_index = 0;
  const auto probs = direction_probabilities(p.box, cfg);
  for (const auto& [dir, cand] :
       neighbor_candidates(p.box, cfg.iof_overlap, ext, cfg.max_out_fraction)) {
    if (rng.bernoulli(probs[static_cast<int>(dir)])) bag.regions.push_back(cand);
  }
  bag.enclosing = enclosing_box(bag.regions);
  return bag;
}

std::vector<RegionBag> sample_bags_for_image(const std::vector<RegionProposal>& props,
                                             const ImageExtent& ext,
                                             const SamplingConfig& cfg, Rng& rng) {
  std::vector<RegionBag> bags;
  for (const RegionProposal& p : filter_proposals(props, ext, cfg)) {
    for (int g = 0; g < cfg.bags_per_proposal; ++g)
      bags.push_back(sample_bag(p, ext, cfg, rng));
  }
  return bags;
}

void ProposalCache::update(const std::vector<RegionProposal>& props) {
  for (const auto& p : props) {
    entries_.push_back(p);
    if (entries_.size() > capacity_) entries_.pop_front();
  }
}

std::vector<RegionProposal> ProposalCache::draw(size_t count, Rng& rng) const {
  std::vector<RegionProposal> out;
  if (entries_.empty() || count == 0) return out;
  count = std::min(count, entries_.size());
  std::vector<size_t> idx(entries_.size());
  std::iota(idx.begin(), idx.end(), size_t{0});
  // partial Fisher-Yates: first `count` slots are a uniform subset
  for (size_t i = 0; i < count; ++i) {
    const size_t j = i + rng.uniform_int(idx.size() - i);
    std::swap(idx[i], idx[j]);
    out.push_back(entries_[idx[i]]);
  }
  return out;
}

}  // namespace regionbag
