#include "regionbag/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace regionbag {

int Catalog::index_of(const std::string& name) const {
  for (size_t i = 0; i < categories.size(); ++i)
    if (categories[i].name == name) return static_cast<int>(i);
  return -1;
}

std::vector<int> Catalog::base_indices() const {
  std::vector<int> out;
  for (size_t i = 0; i < categories.size(); ++i)
    if (!categories[i].novel) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Catalog::novel_indices() const {
  std::vector<int> out;
  for (size_t i = 0; i < categories.size(); ++i)
    if (categories[i].novel) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<std::string> Catalog::names() const {
  std::vector<std::string> out;
  for (const auto& c : categories) out.push_back(c.name);
  return out;
}

namespace {

struct ColorDef {
  const char* name;
  uint8_t r, g, b;
};

constexpr ColorDef kColors[] = {
    {"red", 205, 45, 40},
    {"green", 45, 170, 55},
    {"blue", 45, 75, 205},
    {"yellow", 220, 200, 45},
};
constexpr const char* kShapes[] = {"square", "circle", "triangle", "cross"};

}  // namespace

Catalog default_catalog() {
  Catalog cat;
  // novel = one diagonal of the color x shape grid
  auto is_novel = [](int ci, int si) { return (ci + si) % 4 == 1; };
  for (int ci = 0; ci < 4; ++ci) {
    for (int si = 0; si < 4; ++si) {
      CategorySpec c;
      c.color = kColors[ci].name;
      c.shape = kShapes[si];
      c.name = c.color + " " + c.shape;
      c.novel = is_novel(ci, si);
      cat.categories.push_back(c);
    }
  }
  // co-occurrence partners, anchor -> partner. Each novel category is the
  // partner of some base category so novel objects show up next to base
  // proposals; base-base pairs give the teacher plain co-occurrence structure.
  auto add_partner = [&](const char* anchor, const char* partner, double p) {
    cat.categories[cat.index_of(anchor)].partners.emplace_back(partner, p);
  };
  add_partner("red square", "red circle", 0.75);      // -> novel
  add_partner("green square", "green triangle", 0.75);  // -> novel
  add_partner("blue square", "blue cross", 0.75);     // -> novel
  add_partner("yellow triangle", "yellow square", 0.75);  // -> novel
  add_partner("blue circle", "red square", 0.6);
  add_partner("green cross", "yellow circle", 0.6);
  return cat;
}

namespace {

void render_object(ImageU8& img, const Box& box, const CategorySpec& spec, Rng& rng) {
  int cr = 0, cg = 0, cb = 0;
  for (const auto& c : kColors) {
    if (spec.color == c.name) {
      cr = c.r;
      cg = c.g;
      cb = c.b;
    }
  }
  // small per-instance color jitter
  const int jr = static_cast<int>(rng.uniform(-18, 18));
  const int jg = static_cast<int>(rng.uniform(-18, 18));
  const int jb = static_cast<int>(rng.uniform(-18, 18));
  auto clamp8 = [](int v) { return static_cast<uint8_t>(std::clamp(v, 0, 255)); };
  const uint8_t R = clamp8(cr + jr), G = clamp8(cg + jg), B = clamp8(cb + jb);

  const double cx = box.cx(), cy = box.cy();
  const double hw = 0.5 * box.width(), hh = 0.5 * box.height();
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y1)));
  const int x1 = std::min(img.width, static_cast<int>(std::ceil(box.x2)));
  const int y1 = std::min(img.height, static_cast<int>(std::ceil(box.y2)));
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) {
      const double u = (x + 0.5 - cx) / hw;  // [-1,1] across the box
      const double v = (y + 0.5 - cy) / hh;
      if (u < -1 || u > 1 || v < -1 || v > 1) continue;
      bool inside = false;
      if (spec.shape == "square") {
        inside = std::abs(u) <= 0.92 && std::abs(v) <= 0.92;
      } else if (spec.shape == "circle") {
        // drawn as a ring so the hollow center separates it from the square
        // at coarse patch resolution
        const double r2 = u * u + v * v;
        inside = r2 <= 0.85 && r2 >= 0.3;
      } else if (spec.shape == "triangle") {
        // upward triangle: apex at top center
        const double vv = (v + 1.0) * 0.5;  // 0 at top, 1 at bottom
        inside = vv >= 0.08 && std::abs(u) <= vv * 0.95;
      } else if (spec.shape == "cross") {
        inside = std::abs(u) <= 0.24 || std::abs(v) <= 0.24;
      }
      if (inside) {
        img.at(x, y, 0) = R;
        img.at(x, y, 1) = G;
        img.at(x, y, 2) = B;
      }
    }
  }
}

bool try_place(const Box& cand, const std::vector<SceneObject>& placed, double max_iou,
               int w, int h) {
  if (cand.x1 < 0 || cand.y1 < 0 || cand.x2 > w || cand.y2 > h) return false;
  for (const auto& o : placed)
    if (iou(cand, o.box) > max_iou) return false;
  return true;
}

bool boxes_adjacent(const Box& a, const Box& b) {
  const double dx = std::abs(a.cx() - b.cx());
  const double dy = std::abs(a.cy() - b.cy());
  const double sx = 0.62 * (a.width() + b.width());
  const double sy = 0.62 * (a.height() + b.height());
  return dx <= sx && dy <= sy;
}

}  // namespace

SyntheticScene generate_scene(const Catalog& catalog, const SceneGenConfig& cfg, Rng& rng) {
  SyntheticScene scene;
  scene.image = ImageU8::filled(cfg.width, cfg.height, 178, 178, 178);
  // background speckle
  for (auto& v : scene.image.data) {
    const int noise = static_cast<int>(rng.uniform(-9, 9));
    v = static_cast<uint8_t>(std::clamp(int(v) + noise, 0, 255));
  }

  const int n_objects =
      cfg.min_objects + static_cast<int>(rng.uniform_int(
                            static_cast<uint64_t>(cfg.max_objects - cfg.min_objects + 1)));

  auto pick_category = [&]() -> int {
    if (cfg.category_weights.empty())
      return static_cast<int>(rng.uniform_int(catalog.categories.size()));
    double total = 0;
    for (double w : cfg.category_weights) total += w;
    double u = rng.uniform(0, total);
    for (size_t i = 0; i < cfg.category_weights.size(); ++i) {
      u -= cfg.category_weights[i];
      if (u <= 0) return static_cast<int>(i);
    }
    return static_cast<int>(cfg.category_weights.size()) - 1;
  };

  auto random_box = [&](double size_w, double size_h) -> Box {
    const double x = rng.uniform(0.0, cfg.width - size_w);
    const double y = rng.uniform(0.0, cfg.height - size_h);
    return Box{x, y, x + size_w, y + size_h};
  };

  while (static_cast<int>(scene.objects.size()) < n_objects) {
    const int cat = pick_category();
    const double s = rng.uniform(cfg.min_size, cfg.max_size);
    const double ar = rng.uniform(0.85, 1.18);
    const double w = std::min(s * ar, double(cfg.width) - 1);
    const double h = std::min(s, double(cfg.height) - 1);
    bool placed = false;
    Box anchor_box;
    for (int attempt = 0; attempt < cfg.place_retries && !placed; ++attempt) {
      const Box cand = random_box(w, h);
      if (try_place(cand, scene.objects, cfg.max_place_iou, cfg.width, cfg.height)) {
        scene.objects.push_back({cand, cat});
        anchor_box = cand;
        placed = true;
      }
    }
    if (!placed) break;  // scene too crowded

    // partner placement drives co-occurrence structure
    for (const auto& [pname, strength] : catalog.categories[cat].partners) {
      if (static_cast<int>(scene.objects.size()) >= n_objects) break;
      if (!rng.bernoulli(strength)) continue;
      const int pidx = catalog.index_of(pname);
      if (pidx < 0) continue;
      const double ps = rng.uniform(cfg.min_size, cfg.max_size);
      const double pw = std::min(ps, double(cfg.width) - 1);
      const double ph = std::min(ps, double(cfg.height) - 1);
      // try the four sides in random order
      std::vector<int> sides = {0, 1, 2, 3};
      rng.shuffle(sides);
      for (int side : sides) {
        double bx = anchor_box.cx() - pw / 2, by = anchor_box.cy() - ph / 2;
        const double gap = cfg.partner_gap;
        if (side == 0) bx = anchor_box.x2 + gap;                // right
        if (side == 1) bx = anchor_box.x1 - gap - pw;           // left
        if (side == 2) by = anchor_box.y2 + gap;                // below
        if (side == 3) by = anchor_box.y1 - gap - ph;           // above
        const Box cand{bx, by, bx + pw, by + ph};
        if (try_place(cand, scene.objects, cfg.max_place_iou, cfg.width, cfg.height)) {
          scene.objects.push_back({cand, pidx});
          break;
        }
      }
    }
  }

  for (const auto& o : scene.objects)
    render_object(scene.image, o.box, catalog.categories[o.category], rng);

  // captions: subsets of present categories, occasionally a relation phrase
  std::vector<int> present;
  for (const auto& o : scene.objects)
    if (std::find(present.begin(), present.end(), o.category) == present.end())
      present.push_back(o.category);

  const int n_caps = 1 + static_cast<int>(rng.uniform_int(
                             static_cast<uint64_t>(std::max(1, cfg.max_captions))));
  for (int ci = 0; ci < n_caps; ++ci) {
    if (cfg.photo_caption_for_single && present.size() == 1 && rng.bernoulli(0.5)) {
      scene.captions.push_back("a photo of " + catalog.categories[present[0]].name +
                               " in the scene");
      continue;
    }
    // relation caption for an adjacent pair
    if (rng.bernoulli(cfg.relation_caption_prob)) {
      std::vector<std::pair<int, int>> adj;
      for (size_t i = 0; i < scene.objects.size(); ++i)
        for (size_t j = 0; j < scene.objects.size(); ++j)
          if (i != j && boxes_adjacent(scene.objects[i].box, scene.objects[j].box))
            adj.emplace_back(static_cast<int>(i), static_cast<int>(j));
      if (!adj.empty()) {
        const auto [i, j] = adj[rng.uniform_int(adj.size())];
        const Box& a = scene.objects[i].box;
        const Box& b = scene.objects[j].box;
        std::string rel;
        if (std::abs(a.cx() - b.cx()) >= std::abs(a.cy() - b.cy()))
          rel = a.cx() < b.cx() ? "left of" : "right of";
        else
          rel = a.cy() < b.cy() ? "above" : "below";
        scene.captions.push_back("a " + catalog.categories[scene.objects[i].category].name +
                                 " " + rel + " a " +
                                 catalog.categories[scene.objects[j].category].name);
        continue;
      }
    }
    // subset caption
    std::vector<int> subset = present;
    rng.shuffle(subset);
    const size_t k = 1 + rng.uniform_int(subset.size());
    subset.resize(k);
    std::string text = "a scene with ";
    for (size_t i = 0; i < subset.size(); ++i) {
      if (i) text += " and ";
      text += catalog.categories[subset[i]].name;
    }
    scene.captions.push_back(text);
  }
  return scene;
}

SyntheticScene render_single_object_scene(const Catalog& catalog, int category,
                                          const Box& box, const SceneGenConfig& cfg,
                                          Rng& rng) {
  SyntheticScene scene;
  scene.image = ImageU8::filled(cfg.width, cfg.height, 178, 178, 178);
  for (auto& v : scene.image.data) {
    const int noise = static_cast<int>(rng.uniform(-9, 9));
    v = static_cast<uint8_t>(std::clamp(int(v) + noise, 0, 255));
  }
  scene.objects.push_back({box, category});
  render_object(scene.image, box, catalog.categories[category], rng);
  scene.captions.push_back("a photo of " + catalog.categories[category].name +
                           " in the scene");
  return scene;
}

std::vector<RegionProposal> generate_proposals(const SyntheticScene& scene,
                                               const ProposalGenConfig& cfg, Rng& rng) {
  const ImageExtent ext{double(scene.image.width), double(scene.image.height)};
  std::vector<RegionProposal> out;
  auto max_iou_with_gt = [&](const Box& b) {
    double best = 0.0;
    for (const auto& o : scene.objects) best = std::max(best, iou(b, o.box));
    return best;
  };
  auto push = [&](Box b) {
    b = clip_to_image(b, ext);
    if (!b.valid()) return;
    const double noisy =
        max_iou_with_gt(b) + rng.uniform(-cfg.objectness_noise, cfg.objectness_noise);
    out.push_back({b, std::clamp(noisy, 0.0, 1.0)});
  };
  for (const auto& o : scene.objects) {
    for (int k = 0; k < cfg.copies_per_gt; ++k) {
      const double w = o.box.width(), h = o.box.height();
      const double dx = rng.uniform(-cfg.center_jitter, cfg.center_jitter) * w;
      const double dy = rng.uniform(-cfg.center_jitter, cfg.center_jitter) * h;
      const double sw = w * rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter);
      const double sh = h * rng.uniform(1.0 - cfg.size_jitter, 1.0 + cfg.size_jitter);
      const double cx = o.box.cx() + dx, cy = o.box.cy() + dy;
      push(Box{cx - sw / 2, cy - sh / 2, cx + sw / 2, cy + sh / 2});
    }
  }
  for (int k = 0; k < cfg.background_boxes; ++k) {
    const double w = rng.uniform(cfg.bg_min_size, cfg.bg_max_size);
    const double h = rng.uniform(cfg.bg_min_size, cfg.bg_max_size);
    const double x = rng.uniform(0.0, std::max(1.0, ext.width - w));
    const double y = rng.uniform(0.0, std::max(1.0, ext.height - h));
    push(Box{x, y, x + w, y + h});
  }
  return out;
}

namespace {

json scene_to_json(const SyntheticScene& s, const std::string& split, const Catalog& cat) {
  json j;
  j["id"] = s.id;
  j["split"] = split;
  j["width"] = s.image.width;
  j["height"] = s.image.height;
  json objs = json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"box", {o.box.x1, o.box.y1, o.box.x2, o.box.y2}},
                    {"category", cat.categories[o.category].name}});
  }
  j["objects"] = std::move(objs);
  j["captions"] = s.captions;
  return j;
}

std::string scene_image_path(const std::string& root, const std::string& split, uint64_t id) {
  std::ostringstream name;
  name << root << "/scenes/" << split << "/" << id << ".img";
  return name.str();
}

}  // namespace

void write_dataset(const std::string& root, const Catalog& catalog,
                   const DatasetSplits& splits) {
  fs::create_directories(root);
  json manifest;
  manifest["schema_version"] = 1;
  manifest["image_format"] = "ppm";
  json jcats = json::array();
  for (const auto& c : catalog.categories) {
    json p = json::array();
    for (const auto& [n, s] : c.partners) p.push_back({{"name", n}, {"strength", s}});
    jcats.push_back({{"name", c.name},
                     {"shape", c.shape},
                     {"color", c.color},
                     {"novel", c.novel},
                     {"partners", std::move(p)}});
  }
  manifest["categories"] = std::move(jcats);
  json jsplits;
  for (const auto& [split, scenes] : splits) jsplits[split] = scenes.size();
  manifest["splits"] = std::move(jsplits);
  {
    std::ofstream f(root + "/manifest.json");
    f << manifest.dump(2) << "\n";
  }
  std::ofstream ann(root + "/annotations.jsonl");
  for (const auto& [split, scenes] : splits) {
    fs::create_directories(root + "/scenes/" + split);
    for (const auto& s : scenes) {
      ann << scene_to_json(s, split, catalog).dump() << "\n";
      write_ppm_file(scene_image_path(root, split, s.id), s.image);
    }
  }
}

Dataset read_dataset(const std::string& root) {
  Dataset ds;
  json manifest;
  {
    std::ifstream f(root + "/manifest.json");
    if (!f) throw CorruptFileError("dataset: missing manifest.json");
    try {
      f >> manifest;
    } catch (const json::exception& e) {
      throw CorruptFileError(std::string("dataset: bad manifest: ") + e.what());
    }
  }
  if (!manifest.contains("schema_version") || manifest["schema_version"].get<int>() != 1)
    throw CorruptFileError("dataset: unsupported schema version");
  for (const auto& jc : manifest["categories"]) {
    CategorySpec c;
    c.name = jc["name"].get<std::string>();
    c.shape = jc["shape"].get<std::string>();
    c.color = jc["color"].get<std::string>();
    c.novel = jc["novel"].get<bool>();
    for (const auto& jp : jc["partners"])
      c.partners.emplace_back(jp["name"].get<std::string>(), jp["strength"].get<double>());
    ds.catalog.categories.push_back(std::move(c));
  }
  std::ifstream ann(root + "/annotations.jsonl");
  if (!ann) throw CorruptFileError("dataset: missing annotations.jsonl");
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw CorruptFileError(std::string("dataset: bad annotation line: ") + e.what());
    }
    SyntheticScene s;
    s.id = j["id"].get<uint64_t>();
    const std::string split = j["split"].get<std::string>();
    for (const auto& jo : j["objects"]) {
      SceneObject o;
      const auto& b = jo["box"];
      o.box = Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                  b[3].get<double>()};
      o.category = ds.catalog.index_of(jo["category"].get<std::string>());
      if (o.category < 0) throw CorruptFileError("dataset: unknown category");
      s.objects.push_back(o);
    }
    for (const auto& jc : j["captions"]) s.captions.push_back(jc.get<std::string>());
    s.image = read_ppm_file(scene_image_path(root, split, s.id));
    if (s.image.width != j["width"].get<int>() || s.image.height != j["height"].get<int>())
      throw CorruptFileError("dataset: image size mismatch");
    ds.splits[split].push_back(std::move(s));
  }
  for (const auto& [split, count] : manifest["splits"].items()) {
    if (ds.splits[split].size() != count.get<size_t>())
      throw CorruptFileError("dataset: split size mismatch vs manifest");
  }
  return ds;
}

}  // namespace regionbag
