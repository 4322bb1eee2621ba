#include "corrcount/backbone.hpp"

#include <cmath>
#include <iostream>

#include "corrcount/error.hpp"
#include "corrcount/f32r.hpp"
#include "corrcount/ops.hpp"

namespace corrcount {

void validate_sample(const ImageSample& sample) {
  if (!sample.image.defined() || sample.image.rank() != 3) {
    throw ContractViolation("sample image must be [C,H,W]");
  }
  const double h = static_cast<double>(sample.image.dim(1));
  const double w = static_cast<double>(sample.image.dim(2));
  for (const auto& d : sample.dots) {
    if (d[0] < 0 || d[0] >= h || d[1] < 0 || d[1] >= w) {
      throw ContractViolation("dot (" + std::to_string(d[0]) + "," + std::to_string(d[1]) +
                              ") lies outside the image");
    }
  }
  if (sample.exemplar_boxes.empty()) throw ContractViolation("sample needs at least one exemplar box");
  for (const auto& b : sample.exemplar_boxes) {
    if (b.height() <= 0 || b.width() <= 0 || b.top < 0 || b.left < 0 || b.bottom > h || b.right > w) {
      throw ContractViolation("exemplar box must have positive area inside the image");
    }
  }
}

Backbone::Backbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.stage_channels.empty()) throw ConfigError("backbone: at least one stage required");
  if (cfg_.exemplar_h % 2 == 0 || cfg_.exemplar_w % 2 == 0 || cfg_.exemplar_h < 1 || cfg_.exemplar_w < 1) {
    throw ConfigError("backbone: exemplar extents must be odd and positive");
  }
  std::int64_t side = cfg_.image_size;
  for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
    if (side % 2 != 0) throw ConfigError("backbone: image size not divisible through stage " + std::to_string(s));
    side /= 2;
  }
  if (cfg_.feature_size < 1) throw ConfigError("backbone: feature size must be positive");

  std::int64_t in_c = cfg_.input_channels;
  for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
    const std::int64_t out_c = cfg_.stage_channels[s];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_c * 9));
    Rng rng(Rng::derive_stream(cfg_.seed, s));
    weights_.push_back(Tensor::uniform({out_c, in_c, 3, 3}, rng, -bound, bound, /*requires_grad=*/false));
    in_c = out_c;
  }
}

std::int64_t Backbone::feature_channels() const {
  std::int64_t c = 0;
  for (auto s : cfg_.stage_channels) c += s;
  return c;
}

std::vector<Tensor> Backbone::stage_outputs(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != cfg_.input_channels || image.dim(1) != cfg_.image_size ||
      image.dim(2) != cfg_.image_size) {
    throw ContractViolation("backbone: image " + shape_str(image.shape()) + " does not match configured size [" +
                            std::to_string(cfg_.input_channels) + "," + std::to_string(cfg_.image_size) + "," +
                            std::to_string(cfg_.image_size) + "]");
  }
  std::vector<Tensor> outs;
  Tensor x = image;
  for (const auto& w : weights_) {
    x = avg_pool_2x2(relu(cross_correlate_2d(x, w)));
    outs.push_back(x);
  }
  return outs;
}

Tensor Backbone::extract_image_features(const Tensor& image) const {
  std::vector<Tensor> resized;
  for (const auto& stage : stage_outputs(image)) {
    resized.push_back(bilinear_resize(stage, cfg_.feature_size, cfg_.feature_size));
  }
  return concat_channels(resized);
}

Tensor pool_exemplar_features(const Tensor& f_I, const std::vector<Box>& boxes, std::int64_t image_h,
                              std::int64_t image_w, std::int64_t He, std::int64_t We) {
  if (f_I.rank() != 3) throw ContractViolation("pool_exemplar_features: features must be [C,H,W]");
  if (boxes.empty()) throw ContractViolation("pool_exemplar_features: need at least one box");
  const std::int64_t H = f_I.dim(1), W = f_I.dim(2);
  const double sh = static_cast<double>(H) / static_cast<double>(image_h);
  const double sw = static_cast<double>(W) / static_cast<double>(image_w);

  // Partition [i0, i1) into n near-equal integer cells; degenerate spans pool
  // the nearest valid cell so tiny boxes replicate instead of failing.
  auto grid = [](double f0, double f1, std::int64_t limit, std::int64_t n) {
    auto i0 = static_cast<std::int64_t>(std::floor(f0));
    auto i1 = static_cast<std::int64_t>(std::ceil(f1));
    i0 = std::clamp<std::int64_t>(i0, 0, limit - 1);
    i1 = std::clamp<std::int64_t>(i1, i0 + 1, limit);
    const std::int64_t span = i1 - i0;
    std::vector<CellRange> cells(static_cast<std::size_t>(n));
    for (std::int64_t g = 0; g < n; ++g) {
      std::int64_t a = i0 + (g * span) / n;
      std::int64_t b = i0 + ((g + 1) * span) / n;
      if (b <= a) b = a + 1;
      if (b > i1) {
        b = i1;
        a = i1 - 1;
      }
      cells[static_cast<std::size_t>(g)] = {a, b};
    }
    return cells;
  };

  std::vector<Tensor> pooled;
  pooled.reserve(boxes.size());
  for (const auto& box : boxes) {
    const double ft = box.top * sh, fb = box.bottom * sh;
    const double fl = box.left * sw, fr = box.right * sw;
    if (fb - ft < 1.0 || fr - fl < 1.0) {
      std::cerr << "pool_exemplar_features: box collapses below one feature cell, expanding to 1x1\n";
    }
    Tensor cell = max_pool_cells(f_I, grid(ft, fb, H, He), grid(fl, fr, W, We));
    pooled.push_back(reshape(cell, {1, f_I.dim(0), He, We}));
  }
  return concat_channels(pooled);
}

Tensor import_external_features(const std::filesystem::path& path) {
  Tensor t = read_f32r(path);
  if (t.rank() != 3) {
    throw IoError(path.string() + ": feature map must be rank 3, got " + shape_str(t.shape()));
  }
  return t;
}

void export_features(const std::filesystem::path& path, const Tensor& features) {
  write_f32r(path, features);
}

}  // namespace corrcount
