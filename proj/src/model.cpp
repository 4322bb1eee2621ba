#include "corrcount/model.hpp"

#include <fstream>

#include <json.hpp>

#include "corrcount/error.hpp"
#include "corrcount/f32r.hpp"
#include "corrcount/ops.hpp"

namespace corrcount {

using nlohmann::json;

std::string ModelConfig::to_json_text() const {
  const json j{{"backbone",
                {{"stage_channels", backbone.stage_channels},
                 {"input_channels", backbone.input_channels},
                 {"image_size", backbone.image_size},
                 {"feature_size", backbone.feature_size},
                 {"exemplar_h", backbone.exemplar_h},
                 {"exemplar_w", backbone.exemplar_w},
                 {"seed", backbone.seed}}},
               {"iterations", iterations},
               {"exemplar_norm", exemplar_norm},
               {"spatial_norm", spatial_norm},
               {"flip", flip},
               {"per_iteration_params", per_iteration_params},
               {"repool", repool},
               {"seed", seed}};
  return j.dump();
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
  ModelConfig cfg;
  try {
    const json j = json::parse(text);
    if (j.contains("backbone")) {
      const auto& b = j["backbone"];
      if (b.contains("stage_channels")) cfg.backbone.stage_channels = b["stage_channels"].get<std::vector<std::int64_t>>();
      cfg.backbone.input_channels = b.value("input_channels", cfg.backbone.input_channels);
      cfg.backbone.image_size = b.value("image_size", cfg.backbone.image_size);
      cfg.backbone.feature_size = b.value("feature_size", cfg.backbone.feature_size);
      cfg.backbone.exemplar_h = b.value("exemplar_h", cfg.backbone.exemplar_h);
      cfg.backbone.exemplar_w = b.value("exemplar_w", cfg.backbone.exemplar_w);
      cfg.backbone.seed = b.value("seed", cfg.backbone.seed);
    }
    cfg.iterations = j.value("iterations", cfg.iterations);
    cfg.exemplar_norm = j.value("exemplar_norm", cfg.exemplar_norm);
    cfg.spatial_norm = j.value("spatial_norm", cfg.spatial_norm);
    cfg.flip = j.value("flip", cfg.flip);
    cfg.per_iteration_params = j.value("per_iteration_params", cfg.per_iteration_params);
    cfg.repool = j.value("repool", cfg.repool);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return cfg;
}

ModelConfig ModelConfig::with_seed(std::uint64_t s) const {
  ModelConfig c = *this;
  c.seed = s;
  c.backbone.seed = s;
  return c;
}

CountingModel::CountingModel(const ModelConfig& cfg) : cfg_(cfg), backbone_(cfg.backbone) {
  if (cfg_.iterations < 1) throw ConfigError("model: iterations must be >= 1");
  const std::int64_t C = backbone_.feature_channels();
  distill_ = DistillationParams::init(C);
  const int n_refine = cfg_.per_iteration_params ? cfg_.iterations : 1;
  for (int i = 0; i < n_refine; ++i) {
    Rng rng(Rng::derive_stream(cfg_.seed, 1000 + static_cast<std::uint64_t>(i)));
    refine_.push_back(RefinementParams::init(C, rng));
  }
  Rng head_rng(Rng::derive_stream(cfg_.seed, 2000));
  head_ = HeadParams::init({C, cfg_.backbone.feature_size, cfg_.backbone.image_size, 4}, head_rng);
}

std::vector<Tensor> CountingModel::parameters() const {
  std::vector<Tensor> ps{distill_.gamma, distill_.beta};
  for (const auto& r : refine_) {
    ps.push_back(r.fusion_weight);
    ps.push_back(r.fusion_bias);
    ps.push_back(r.ln_gamma);
    ps.push_back(r.ln_beta);
  }
  for (std::size_t b = 0; b < head_.block_weights.size(); ++b) {
    ps.push_back(head_.block_weights[b]);
    ps.push_back(head_.block_biases[b]);
  }
  ps.push_back(head_.final_weight);
  ps.push_back(head_.final_bias);
  return ps;
}

std::vector<std::string> CountingModel::parameter_names() const {
  std::vector<std::string> names{"distill.gamma", "distill.beta"};
  for (std::size_t i = 0; i < refine_.size(); ++i) {
    const std::string p = "refine" + std::to_string(i) + ".";
    names.push_back(p + "fusion_weight");
    names.push_back(p + "fusion_bias");
    names.push_back(p + "ln_gamma");
    names.push_back(p + "ln_beta");
  }
  for (std::size_t b = 0; b < head_.block_weights.size(); ++b) {
    const std::string p = "head.block" + std::to_string(b) + ".";
    names.push_back(p + "weight");
    names.push_back(p + "bias");
  }
  names.push_back("head.final_weight");
  names.push_back("head.final_bias");
  return names;
}

CountingModel CountingModel::clone(bool trainable) const {
  CountingModel m = *this;  // shares backbone weights (frozen, read-only)
  m.distill_.gamma = distill_.gamma.detach(trainable);
  m.distill_.beta = distill_.beta.detach(trainable);
  for (std::size_t i = 0; i < refine_.size(); ++i) {
    m.refine_[i].fusion_weight = refine_[i].fusion_weight.detach(trainable);
    m.refine_[i].fusion_bias = refine_[i].fusion_bias.detach(trainable);
    m.refine_[i].ln_gamma = refine_[i].ln_gamma.detach(trainable);
    m.refine_[i].ln_beta = refine_[i].ln_beta.detach(trainable);
  }
  for (std::size_t b = 0; b < head_.block_weights.size(); ++b) {
    m.head_.block_weights[b] = head_.block_weights[b].detach(trainable);
    m.head_.block_biases[b] = head_.block_biases[b].detach(trainable);
  }
  m.head_.final_weight = head_.final_weight.detach(trainable);
  m.head_.final_bias = head_.final_bias.detach(trainable);
  return m;
}

Tensor CountingModel::image_features(const Tensor& image) const {
  return backbone_.extract_image_features(image);
}

Tensor CountingModel::exemplar_features(const Tensor& f_I, const std::vector<Box>& boxes) const {
  return pool_exemplar_features(f_I, boxes, cfg_.backbone.image_size, cfg_.backbone.image_size,
                                cfg_.backbone.exemplar_h, cfg_.backbone.exemplar_w);
}

Tensor CountingModel::forward_density(const Tensor& f_I, const Tensor& f_e, IterationTrace* trace,
                                      const std::vector<Box>* boxes) const {
  RefinementOptions opt;
  opt.iterations = cfg_.iterations;
  opt.exemplar_norm = cfg_.exemplar_norm;
  opt.spatial_norm = cfg_.spatial_norm;
  opt.flip = cfg_.flip;
  opt.repool = cfg_.repool;
  RepoolContext repool;
  const RepoolContext* repool_ptr = nullptr;
  if (cfg_.repool) {
    if (boxes == nullptr) throw ContractViolation("forward_density: repool needs exemplar boxes");
    repool = {*boxes, cfg_.backbone.image_size, cfg_.backbone.image_size};
    repool_ptr = &repool;
  }
  Tensor refined = refine_iteratively(f_I, f_e, refine_, distill_, opt, trace, repool_ptr);
  return regress_density(refined, head_);
}

CountingModel::Prediction CountingModel::predict(const ImageSample& sample, bool want_trace) const {
  validate_sample(sample);
  Prediction out;
  Tensor f_I = image_features(sample.image);
  Tensor f_e = exemplar_features(f_I, sample.exemplar_boxes);
  out.density = forward_density(f_I, f_e, want_trace ? &out.trace : nullptr, &sample.exemplar_boxes);
  out.count = count_from_density(out.density);
  return out;
}

void CountingModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  const auto params = parameters();
  const auto names = parameter_names();
  json index{{"format", "CCKPT"}, {"version", 1}, {"config", json::parse(cfg_.to_json_text())}};
  json jp = json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    jp.push_back({{"name", names[i]}, {"shape", params[i].shape()}});
  }
  index["params"] = jp;
  out << "CCKPT 1\n" << index.dump() << "\n";
  for (const auto& p : params) write_f32r_stream(out, p);
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

CountingModel CountingModel::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::string magic_line, index_line;
  if (!std::getline(in, magic_line) || magic_line != "CCKPT 1") {
    throw IoError(path.string() + ": not a version-1 CCKPT checkpoint");
  }
  if (!std::getline(in, index_line)) throw IoError(path.string() + ": missing checkpoint index");
  json index;
  try {
    index = json::parse(index_line);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad checkpoint index: " + e.what());
  }
  CountingModel model(ModelConfig::from_json_text(index.at("config").dump()));

  auto params = model.parameters();
  const auto names = model.parameter_names();
  const auto& jp = index.at("params");
  if (jp.size() != params.size()) {
    throw IoError(path.string() + ": checkpoint has " + std::to_string(jp.size()) + " parameters, model needs " +
                  std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (jp[i].at("name").get<std::string>() != names[i]) {
      throw IoError(path.string() + ": parameter order mismatch at " + names[i]);
    }
    Tensor blob = read_f32r_stream(in, path.string() + "#" + names[i]);
    if (blob.shape() != params[i].shape()) {
      throw IoError(path.string() + ": shape mismatch for " + names[i] + ": " + shape_str(blob.shape()) +
                    " vs " + shape_str(params[i].shape()));
    }
    auto dst = params[i].mutable_values();
    const auto src = blob.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return model;
}

}  // namespace corrcount
