#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "corrcount/tensor.hpp"

namespace corrcount {

/// Axis-aligned box in image coordinates.
struct Box {
  double top = 0, left = 0, bottom = 0, right = 0;
  double height() const { return bottom - top; }
  double width() const { return right - left; }
};

/// One raster with its dot annotations and exemplar boxes.
struct ImageSample {
  Tensor image;  // [C_I, H_I, W_I], values in [0,1]
  std::vector<std::array<double, 2>> dots;  // (row, col)
  std::vector<Box> exemplar_boxes;          // K >= 1
  int category_id = -1;
};

/// Throws ContractViolation if dots/boxes fall outside the image or the box
/// set is empty or degenerate.
void validate_sample(const ImageSample& sample);

struct BackboneConfig {
  std::vector<std::int64_t> stage_channels{8, 16, 32};
  std::int64_t input_channels = 1;
  std::int64_t image_size = 128;    // H_I = W_I
  std::int64_t feature_size = 32;   // H = W of the concatenated map
  std::int64_t exemplar_h = 3, exemplar_w = 3;
  std::uint64_t seed = 0;
};

/// Frozen multi-scale feature extractor standing in for a pretrained CNN.
/// Each stage is a bias-free 3x3 correlation with seeded fan-in-scaled
/// uniform weights, ReLU, and a 2x2 average-pool downsample. Stage outputs
/// are resized to feature_size and concatenated along channels.
class Backbone {
 public:
  explicit Backbone(BackboneConfig cfg);

  /// Raw per-stage outputs (after ReLU+pool), highest resolution first.
  std::vector<Tensor> stage_outputs(const Tensor& image) const;

  /// The multi-layer feature map f_I: [C, H, W] with C = sum of stage channels.
  Tensor extract_image_features(const Tensor& image) const;

  std::int64_t feature_channels() const;
  const BackboneConfig& config() const { return cfg_; }
  const std::vector<Tensor>& stage_weights() const { return weights_; }

 private:
  BackboneConfig cfg_;
  std::vector<Tensor> weights_;  // per stage [C_out, C_in, 3, 3], non-trainable
};

/// ROI max pooling of exemplar boxes (image coordinates) into [K, C, He, We].
/// Boxes are scaled into feature coordinates by feature_size/image_size; each
/// box is partitioned into an He x We grid of near-equal cells (integer
/// rounding). A box collapsing below one feature cell is expanded to a 1x1
/// cell with a warning.
Tensor pool_exemplar_features(const Tensor& f_I, const std::vector<Box>& boxes,
                              std::int64_t image_h, std::int64_t image_w, std::int64_t He,
                              std::int64_t We);

/// Loads an externally produced feature map (F32R, rank 3).
Tensor import_external_features(const std::filesystem::path& path);
void export_features(const std::filesystem::path& path, const Tensor& features);

}  // namespace corrcount
