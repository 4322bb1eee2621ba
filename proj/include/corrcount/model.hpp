#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "corrcount/backbone.hpp"
#include "corrcount/density.hpp"
#include "corrcount/distill.hpp"
#include "corrcount/refine.hpp"
#include "corrcount/synth.hpp"

namespace corrcount {

struct ModelConfig {
  BackboneConfig backbone;
  int iterations = 4;
  bool exemplar_norm = true;
  bool spatial_norm = true;
  bool flip = true;
  bool per_iteration_params = false;
  bool repool = false;
  std::uint64_t seed = 0;  // init stream for trainable parameters

  std::string to_json_text() const;
  static ModelConfig from_json_text(const std::string& text);

  /// Re-seeds both the backbone and the trainable-parameter init.
  ModelConfig with_seed(std::uint64_t s) const;
};

/// The full counting pipeline: frozen backbone, correlation distillation,
/// N-step feature refinement, density regression head.
class CountingModel {
 public:
  explicit CountingModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const Backbone& backbone() const { return backbone_; }

  /// Trainable parameters in a stable order (with parallel names()).
  std::vector<Tensor> parameters() const;
  std::vector<std::string> parameter_names() const;

  /// Deep copy; `trainable` selects whether the copied parameters track
  /// gradients. The frozen backbone is shared.
  CountingModel clone(bool trainable) const;

  Tensor image_features(const Tensor& image) const;
  Tensor exemplar_features(const Tensor& f_I, const std::vector<Box>& boxes) const;

  /// Refinement + density regression on precomputed features. `boxes` is only
  /// needed when repool is enabled.
  Tensor forward_density(const Tensor& f_I, const Tensor& f_e, IterationTrace* trace = nullptr,
                         const std::vector<Box>* boxes = nullptr) const;

  struct Prediction {
    Tensor density;  // [H_I, W_I]
    double count = 0;
    IterationTrace trace;
  };
  Prediction predict(const ImageSample& sample, bool want_trace = false) const;

  /// Versioned checkpoint: one JSON index line plus concatenated F32R blobs.
  void save(const std::filesystem::path& path) const;
  static CountingModel load(const std::filesystem::path& path);

  DistillationParams& distillation() { return distill_; }
  std::vector<RefinementParams>& refinement() { return refine_; }
  HeadParams& head() { return head_; }
  const DistillationParams& distillation() const { return distill_; }
  const std::vector<RefinementParams>& refinement() const { return refine_; }
  const HeadParams& head() const { return head_; }

 private:
  ModelConfig cfg_;
  Backbone backbone_;
  DistillationParams distill_;
  std::vector<RefinementParams> refine_;
  HeadParams head_;
};

}  // namespace corrcount
