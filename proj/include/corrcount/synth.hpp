#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "corrcount/backbone.hpp"
#include "corrcount/tensor.hpp"

namespace corrcount {

enum class ShapeKind { Disk, Square, Bar };

ShapeKind shape_kind_from_string(const std::string& s);
std::string to_string(ShapeKind k);

struct CategorySpec {
  int id = 0;
  ShapeKind shape = ShapeKind::Disk;
  double intensity_lo = 0.7, intensity_hi = 0.95;
  double size_lo = 3.0, size_hi = 5.0;
};

/// Deterministic recipe for one scene: one target category plus distractor
/// categories, rendered with anti-aliased shapes onto a dark background.
struct SceneSpec {
  std::int64_t image_size = 128;
  CategorySpec target;
  std::vector<CategorySpec> distractors;
  std::int64_t target_count_lo = 15, target_count_hi = 35;
  std::int64_t distractor_count_lo = 8, distractor_count_hi = 20;
  double min_center_distance = 12.0;
  double noise = 0.02;
  int k_exemplars = 3;
  std::uint64_t seed = 0;
};

/// Rendered object: exact center plus half-extents of its tight box.
struct SceneObject {
  double row = 0, col = 0;
  double ext_r = 0, ext_c = 0;
  int category = 0;
};

struct Scene {
  ImageSample sample;
  std::vector<SceneObject> targets;
  std::vector<SceneObject> distractors;
};

/// Pure function of (spec.seed, index). Places objects by rejection sampling
/// under the min-center-distance policy, renders with 4x supersampling,
/// records exact centers as dots, and picks K exemplar boxes among targets
/// whose tight box contains exactly one target center.
Scene generate_scene(const SceneSpec& spec, std::uint64_t index);

struct DatasetCategory {
  CategorySpec category;
  bool novel = false;  // usable for val/test targets only when split-by-category is on
};

struct DatasetSpec {
  std::uint64_t seed = 0;
  std::int64_t image_size = 128;
  int k_exemplars = 3;
  std::int64_t train_size = 200, val_size = 50, test_size = 50;
  bool split_by_category = true;
  std::int64_t target_count_lo = 15, target_count_hi = 35;
  std::int64_t distractor_count_lo = 8, distractor_count_hi = 20;
  double min_center_distance = 12.0;
  double noise = 0.02;
  std::vector<DatasetCategory> categories;

  static DatasetSpec defaults();
  static DatasetSpec from_json_file(const std::filesystem::path& path);
  static DatasetSpec from_json_text(const std::string& text);
  std::string to_json_text() const;
};

struct ManifestRecord {
  std::string image;  // path relative to the manifest directory
  std::vector<std::array<double, 2>> dots;
  std::vector<Box> boxes;
  double count = 0;
  int category = -1;
  std::string split;
  std::vector<SceneObject> targets;
  std::vector<SceneObject> distractors;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;

  std::vector<const ManifestRecord*> split(const std::string& name) const;
};

/// Writes images (F32R) plus manifest.jsonl under out_dir. With
/// split-by-category on, val/test target categories are the novel ones and
/// never appear in training images.
DatasetManifest build_dataset(const DatasetSpec& spec, const std::filesystem::path& out_dir);

DatasetManifest load_manifest(const std::filesystem::path& dir);

ImageSample load_sample(const DatasetManifest& manifest, const ManifestRecord& record);

}  // namespace corrcount
