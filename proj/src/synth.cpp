#include "corrcount/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "corrcount/error.hpp"
#include "corrcount/f32r.hpp"

namespace corrcount {

using nlohmann::json;

ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "disk") return ShapeKind::Disk;
  if (s == "square") return ShapeKind::Square;
  if (s == "bar") return ShapeKind::Bar;
  throw ConfigError("unknown shape kind: " + s);
}

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::Disk: return "disk";
    case ShapeKind::Square: return "square";
    case ShapeKind::Bar: return "bar";
  }
  return "disk";
}

namespace {

struct Extents {
  double r, c;
};

Extents extents_for(ShapeKind shape, double size) {
  switch (shape) {
    case ShapeKind::Disk: return {size, size};
    case ShapeKind::Square: return {size, size};
    case ShapeKind::Bar: return {std::max(1.0, size * 0.45), size * 1.4};
  }
  return {size, size};
}

bool inside_shape(ShapeKind shape, const SceneObject& obj, double y, double x) {
  const double dy = y - obj.row;
  const double dx = x - obj.col;
  switch (shape) {
    case ShapeKind::Disk: return dy * dy + dx * dx <= obj.ext_r * obj.ext_r;
    case ShapeKind::Square:
    case ShapeKind::Bar: return std::fabs(dy) <= obj.ext_r && std::fabs(dx) <= obj.ext_c;
  }
  return false;
}

// Anti-aliased paint via a 4x4 subpixel grid; overlaps compose by max, which
// keeps the raster independent of paint order.
void paint_object(std::vector<double>& img, std::int64_t n, ShapeKind shape, const SceneObject& obj,
                  double intensity) {
  const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(obj.row - obj.ext_r)) - 1);
  const auto y1 = std::min<std::int64_t>(n - 1, static_cast<std::int64_t>(std::ceil(obj.row + obj.ext_r)) + 1);
  const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(obj.col - obj.ext_c)) - 1);
  const auto x1 = std::min<std::int64_t>(n - 1, static_cast<std::int64_t>(std::ceil(obj.col + obj.ext_c)) + 1);
  for (std::int64_t y = y0; y <= y1; ++y) {
    for (std::int64_t x = x0; x <= x1; ++x) {
      int hit = 0;
      for (int sy = 0; sy < 4; ++sy) {
        for (int sx = 0; sx < 4; ++sx) {
          const double py = static_cast<double>(y) + (sy + 0.5) / 4.0;
          const double px = static_cast<double>(x) + (sx + 0.5) / 4.0;
          if (inside_shape(shape, obj, py, px)) ++hit;
        }
      }
      if (hit == 0) continue;
      const double v = intensity * (static_cast<double>(hit) / 16.0);
      auto& cell = img[static_cast<std::size_t>(y * n + x)];
      cell = std::max(cell, v);
    }
  }
}

struct PlacedObject {
  SceneObject obj;
  ShapeKind shape;
  double intensity;
};

PlacedObject place_object(Rng& rng, const CategorySpec& cat, std::int64_t n, double min_dist,
                          const std::vector<PlacedObject>& existing) {
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const double size = rng.uniform(cat.size_lo, cat.size_hi);
    const Extents ext = extents_for(cat.shape, size);
    const double margin_r = ext.r + 1.5;
    const double margin_c = ext.c + 1.5;
    if (2 * margin_r >= static_cast<double>(n) || 2 * margin_c >= static_cast<double>(n)) {
      throw ConfigError("synth: object extent does not fit the image");
    }
    const double row = rng.uniform(margin_r, static_cast<double>(n) - margin_r);
    const double col = rng.uniform(margin_c, static_cast<double>(n) - margin_c);
    bool ok = true;
    for (const auto& e : existing) {
      const double dr = row - e.obj.row;
      const double dc = col - e.obj.col;
      if (dr * dr + dc * dc < min_dist * min_dist) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    PlacedObject p;
    p.obj = {row, col, ext.r, ext.c, cat.id};
    p.shape = cat.shape;
    p.intensity = rng.uniform(cat.intensity_lo, cat.intensity_hi);
    return p;
  }
  throw NumericalError("synth: rejection sampling exceeded 10000 attempts; lower the object density");
}

}  // namespace

Scene generate_scene(const SceneSpec& spec, std::uint64_t index) {
  if (spec.target_count_lo < 0 || spec.target_count_hi < spec.target_count_lo) {
    throw ConfigError("synth: bad target count range");
  }
  if (spec.min_center_distance < 1.0) throw ConfigError("synth: min center distance must be >= 1 pixel");
  Rng rng(Rng::derive_stream(spec.seed, index));
  const std::int64_t n = spec.image_size;

  const std::int64_t n_targets =
      spec.target_count_lo +
      static_cast<std::int64_t>(rng.uniform_index(static_cast<std::uint64_t>(spec.target_count_hi - spec.target_count_lo + 1)));
  const std::int64_t n_distract =
      spec.distractors.empty()
          ? 0
          : spec.distractor_count_lo +
                static_cast<std::int64_t>(rng.uniform_index(
                    static_cast<std::uint64_t>(spec.distractor_count_hi - spec.distractor_count_lo + 1)));

  std::vector<PlacedObject> placed;
  placed.reserve(static_cast<std::size_t>(n_targets + n_distract));
  for (std::int64_t i = 0; i < n_targets; ++i) {
    placed.push_back(place_object(rng, spec.target, n, spec.min_center_distance, placed));
  }
  for (std::int64_t i = 0; i < n_distract; ++i) {
    const auto& cat = spec.distractors[rng.uniform_index(spec.distractors.size())];
    placed.push_back(place_object(rng, cat, n, spec.min_center_distance, placed));
  }

  std::vector<double> img(static_cast<std::size_t>(n * n), 0.0);
  for (const auto& p : placed) paint_object(img, n, p.shape, p.obj, p.intensity);
  if (spec.noise > 0) {
    for (auto& v : img) v = std::clamp(v + spec.noise * rng.uniform(-1.0, 1.0), 0.0, 1.0);
  }

  Scene scene;
  for (std::int64_t i = 0; i < n_targets; ++i) {
    scene.targets.push_back(placed[static_cast<std::size_t>(i)].obj);
    scene.sample.dots.push_back({placed[static_cast<std::size_t>(i)].obj.row,
                                 placed[static_cast<std::size_t>(i)].obj.col});
  }
  for (std::int64_t i = n_targets; i < n_targets + n_distract; ++i) {
    scene.distractors.push_back(placed[static_cast<std::size_t>(i)].obj);
  }

  // Exemplars: targets whose tight box contains exactly one target center.
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < scene.targets.size(); ++i) {
    const auto& t = scene.targets[i];
    int inside = 0;
    for (const auto& o : scene.targets) {
      if (std::fabs(o.row - t.row) <= t.ext_r && std::fabs(o.col - t.col) <= t.ext_c) ++inside;
    }
    if (inside == 1) candidates.push_back(i);
  }
  if (candidates.size() < static_cast<std::size_t>(spec.k_exemplars)) {
    throw NumericalError("synth: fewer than K isolated targets for exemplar boxes; increase spacing");
  }
  for (std::size_t i = 0; i + 1 < candidates.size(); ++i) {  // partial Fisher-Yates
    const std::size_t j = i + rng.uniform_index(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
  }
  for (int k = 0; k < spec.k_exemplars; ++k) {
    const auto& t = scene.targets[candidates[static_cast<std::size_t>(k)]];
    scene.sample.exemplar_boxes.push_back({t.row - t.ext_r, t.col - t.ext_c, t.row + t.ext_r, t.col + t.ext_c});
  }

  scene.sample.image = Tensor::from_data({1, n, n}, std::move(img));
  scene.sample.category_id = spec.target.id;
  validate_sample(scene.sample);
  return scene;
}

// ---- dataset spec & manifest --------------------------------------------------

DatasetSpec DatasetSpec::defaults() {
  DatasetSpec s;
  s.categories = {
      {{0, ShapeKind::Disk, 0.72, 0.95, 3.2, 5.0}, false},
      {{1, ShapeKind::Square, 0.45, 0.65, 3.0, 4.6}, false},
      {{2, ShapeKind::Bar, 0.80, 1.00, 3.2, 5.2}, false},
      {{3, ShapeKind::Square, 0.78, 0.98, 3.2, 5.0}, true},
      {{4, ShapeKind::Disk, 0.48, 0.68, 3.0, 4.8}, true},
  };
  return s;
}

namespace {

CategorySpec category_from_json(const json& j) {
  CategorySpec c;
  c.id = j.at("id").get<int>();
  c.shape = shape_kind_from_string(j.at("shape").get<std::string>());
  c.intensity_lo = j.at("intensity").at(0).get<double>();
  c.intensity_hi = j.at("intensity").at(1).get<double>();
  c.size_lo = j.at("size").at(0).get<double>();
  c.size_hi = j.at("size").at(1).get<double>();
  return c;
}

json category_to_json(const CategorySpec& c, bool novel) {
  return json{{"id", c.id},
              {"shape", to_string(c.shape)},
              {"intensity", {c.intensity_lo, c.intensity_hi}},
              {"size", {c.size_lo, c.size_hi}},
              {"split", novel ? "novel" : "train"}};
}

}  // namespace

DatasetSpec DatasetSpec::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset spec: invalid JSON: ") + e.what());
  }
  DatasetSpec s = defaults();
  try {
    if (j.contains("seed")) s.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("image_size")) s.image_size = j["image_size"].get<std::int64_t>();
    if (j.contains("k_exemplars")) s.k_exemplars = j["k_exemplars"].get<int>();
    if (j.contains("sizes")) {
      s.train_size = j["sizes"].value("train", s.train_size);
      s.val_size = j["sizes"].value("val", s.val_size);
      s.test_size = j["sizes"].value("test", s.test_size);
    }
    if (j.contains("split_by_category")) s.split_by_category = j["split_by_category"].get<bool>();
    if (j.contains("target_count")) {
      s.target_count_lo = j["target_count"].at(0).get<std::int64_t>();
      s.target_count_hi = j["target_count"].at(1).get<std::int64_t>();
    }
    if (j.contains("distractor_count")) {
      s.distractor_count_lo = j["distractor_count"].at(0).get<std::int64_t>();
      s.distractor_count_hi = j["distractor_count"].at(1).get<std::int64_t>();
    }
    if (j.contains("min_center_distance")) s.min_center_distance = j["min_center_distance"].get<double>();
    if (j.contains("noise")) s.noise = j["noise"].get<double>();
    if (j.contains("categories")) {
      s.categories.clear();
      for (const auto& jc : j["categories"]) {
        s.categories.push_back({category_from_json(jc), jc.value("split", "train") == "novel"});
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset spec: ") + e.what());
  }
  if (s.categories.empty()) throw ConfigError("dataset spec: needs at least one category");
  return s;
}

DatasetSpec DatasetSpec::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset spec: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

std::string DatasetSpec::to_json_text() const {
  json cats = json::array();
  for (const auto& c : categories) cats.push_back(category_to_json(c.category, c.novel));
  const json j{{"seed", seed},
               {"image_size", image_size},
               {"k_exemplars", k_exemplars},
               {"sizes", {{"train", train_size}, {"val", val_size}, {"test", test_size}}},
               {"split_by_category", split_by_category},
               {"target_count", {target_count_lo, target_count_hi}},
               {"distractor_count", {distractor_count_lo, distractor_count_hi}},
               {"min_center_distance", min_center_distance},
               {"noise", noise},
               {"categories", cats}};
  return j.dump(2);
}

std::vector<const ManifestRecord*> DatasetManifest::split(const std::string& name) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records) {
    if (r.split == name) out.push_back(&r);
  }
  return out;
}

namespace {

json objects_to_json(const std::vector<SceneObject>& objs) {
  json arr = json::array();
  for (const auto& o : objs) arr.push_back({o.row, o.col, o.ext_r, o.ext_c});
  return arr;
}

std::vector<SceneObject> objects_from_json(const json& arr) {
  std::vector<SceneObject> out;
  for (const auto& jo : arr) {
    out.push_back({jo.at(0).get<double>(), jo.at(1).get<double>(), jo.at(2).get<double>(),
                   jo.at(3).get<double>(), 0});
  }
  return out;
}

}  // namespace

DatasetManifest build_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create dataset directory " + (out_dir / "images").string() + ": " + ec.message());

  std::vector<const CategorySpec*> train_cats, novel_cats, all_cats;
  for (const auto& c : spec.categories) {
    all_cats.push_back(&c.category);
    (c.novel ? novel_cats : train_cats).push_back(&c.category);
  }
  if (spec.split_by_category && (train_cats.empty() || novel_cats.empty())) {
    throw ConfigError("dataset spec: split-by-category needs both train and novel categories");
  }

  DatasetManifest manifest;
  manifest.root = out_dir;

  const std::vector<std::pair<std::string, std::int64_t>> splits{
      {"train", spec.train_size}, {"val", spec.val_size}, {"test", spec.test_size}};
  std::uint64_t global_index = 0;
  for (const auto& [split_name, size] : splits) {
    const bool train_split = split_name == "train";
    const auto& target_pool = spec.split_by_category ? (train_split ? train_cats : novel_cats) : all_cats;
    // Training images must not contain novel-category objects at all.
    const auto& distractor_pool = spec.split_by_category && train_split ? train_cats : all_cats;
    for (std::int64_t i = 0; i < size; ++i, ++global_index) {
      Rng pick(Rng::derive_stream(spec.seed ^ 0x5eedULL, global_index));
      const CategorySpec& target = *target_pool[pick.uniform_index(target_pool.size())];

      SceneSpec scene_spec;
      scene_spec.image_size = spec.image_size;
      scene_spec.target = target;
      for (const auto* c : distractor_pool) {
        if (c->id != target.id) scene_spec.distractors.push_back(*c);
      }
      scene_spec.target_count_lo = spec.target_count_lo;
      scene_spec.target_count_hi = spec.target_count_hi;
      scene_spec.distractor_count_lo = spec.distractor_count_lo;
      scene_spec.distractor_count_hi = spec.distractor_count_hi;
      scene_spec.min_center_distance = spec.min_center_distance;
      scene_spec.noise = spec.noise;
      scene_spec.k_exemplars = spec.k_exemplars;
      scene_spec.seed = spec.seed;

      Scene scene = generate_scene(scene_spec, global_index);

      char name[32];
      std::snprintf(name, sizeof(name), "images/%05llu.f32r", static_cast<unsigned long long>(global_index));
      write_f32r(out_dir / name, scene.sample.image);

      ManifestRecord rec;
      rec.image = name;
      rec.dots = scene.sample.dots;
      rec.boxes = scene.sample.exemplar_boxes;
      rec.count = static_cast<double>(scene.sample.dots.size());
      rec.category = target.id;
      rec.split = split_name;
      rec.targets = scene.targets;
      rec.distractors = scene.distractors;
      manifest.records.push_back(std::move(rec));
    }
  }

  std::ofstream out(out_dir / "manifest.jsonl", std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + (out_dir / "manifest.jsonl").string());
  for (const auto& r : manifest.records) {
    json dots = json::array();
    for (const auto& d : r.dots) dots.push_back({d[0], d[1]});
    json boxes = json::array();
    for (const auto& b : r.boxes) boxes.push_back({b.top, b.left, b.bottom, b.right});
    const json line{{"image", r.image},
                    {"dots", dots},
                    {"boxes", boxes},
                    {"count", r.count},
                    {"category", r.category},
                    {"split", r.split},
                    {"targets", objects_to_json(r.targets)},
                    {"distractors", objects_to_json(r.distractors)}};
    out << line.dump() << "\n";
  }
  if (!out) throw IoError("manifest write failed: " + (out_dir / "manifest.jsonl").string());
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& dir) {
  const auto path = std::filesystem::is_directory(dir) ? dir / "manifest.jsonl" : dir;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());

  DatasetManifest manifest;
  manifest.root = path.parent_path();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      ManifestRecord rec;
      rec.image = j.at("image").get<std::string>();
      for (const auto& jd : j.at("dots")) rec.dots.push_back({jd.at(0).get<double>(), jd.at(1).get<double>()});
      for (const auto& jb : j.at("boxes")) {
        rec.boxes.push_back({jb.at(0).get<double>(), jb.at(1).get<double>(), jb.at(2).get<double>(),
                             jb.at(3).get<double>()});
      }
      rec.count = j.at("count").get<double>();
      rec.category = j.at("category").get<int>();
      rec.split = j.at("split").get<std::string>();
      if (j.contains("targets")) rec.targets = objects_from_json(j["targets"]);
      if (j.contains("distractors")) rec.distractors = objects_from_json(j["distractors"]);
      manifest.records.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": bad manifest record: " + e.what());
    }
  }
  return manifest;
}

ImageSample load_sample(const DatasetManifest& manifest, const ManifestRecord& record) {
  ImageSample sample;
  sample.image = read_f32r(manifest.root / record.image);
  sample.dots = record.dots;
  sample.exemplar_boxes = record.boxes;
  sample.category_id = record.category;
  validate_sample(sample);
  return sample;
}

}  // namespace corrcount
