#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "corrcount/error.hpp"
#include "corrcount/f32r.hpp"
#include "corrcount/model.hpp"
#include "corrcount/ops.hpp"
#include "corrcount/synth.hpp"
#include "corrcount/train.hpp"

namespace {

using namespace corrcount;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;

std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

RunConfig parse_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (j.contains("model")) rc.model = ModelConfig::from_json_text(j["model"].dump());
  if (j.contains("train")) rc.train = TrainConfig::from_json_text(j["train"].dump());
  return rc;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
  DatasetSpec spec = spec_path.empty() ? DatasetSpec::defaults() : DatasetSpec::from_json_file(spec_path);
  if (auto s = seed_override_from_env()) spec.seed = *s;
  const DatasetManifest manifest = build_dataset(spec, out_dir);
  std::cout << "wrote " << manifest.records.size() << " samples to " << out_dir << "\n";
  return kExitOk;
}

int cmd_train(const std::string& data_dir, const std::string& config_path, const std::string& out_path) {
  RunConfig rc = parse_run_config(config_path);
  if (auto s = seed_override_from_env()) {
    rc.model = rc.model.with_seed(*s);
    rc.train.seed = *s;
  }
  const DatasetManifest data = load_manifest(data_dir);
  CountingModel model(rc.model);
  try {
    const TrainResult result = train(model, data, rc.train);
    model.save(out_path);
    json curve = json::array();
    for (const auto& p : result.curve) curve.push_back({{"step", p.step}, {"loss", p.loss}});
    std::ofstream curve_out(out_path + ".loss.json", std::ios::trunc);
    curve_out << json{{"steps", result.steps}, {"wall_seconds", result.wall_seconds}, {"curve", curve}}.dump(2)
              << "\n";
    std::cout << "trained " << result.steps << " steps in " << result.wall_seconds << "s, checkpoint " << out_path
              << "\n";
    return kExitOk;
  } catch (const NumericalError& e) {
    // The trainer restored the last completed epoch; keep it for inspection.
    model.save(out_path);
    std::cerr << "error: " << e.what() << " (last-good checkpoint written to " << out_path << ")\n";
    return kExitNumerical;
  }
}

int cmd_eval(const std::string& data_dir, const std::string& ckpt, const std::string& split,
             const std::string& out_path) {
  const DatasetManifest data = load_manifest(data_dir);
  const CountingModel model = CountingModel::load(ckpt);
  const EvalReport report = evaluate(model, data, split);
  std::cout << split << ": MAE " << report.mae << "  RMSE " << report.rmse << "  (" << report.images
            << " images, " << report.wall_seconds << "s)\n";
  if (!out_path.empty()) {
    json pairs = json::array();
    for (const auto& [pred, truth] : report.pairs) pairs.push_back({{"predicted", pred}, {"true", truth}});
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw IoError("cannot write report: " + out_path);
    out << json{{"split", split},
                {"mae", report.mae},
                {"rmse", report.rmse},
                {"images", report.images},
                {"wall_seconds", report.wall_seconds},
                {"pairs", pairs}}
               .dump(2)
        << "\n";
  }
  return kExitOk;
}

int cmd_predict(const std::string& ckpt, const std::string& image_path, const std::string& boxes_path,
                const std::string& out_path, const std::string& trace_dir) {
  const CountingModel model = CountingModel::load(ckpt);
  ImageSample sample;
  sample.image = read_f32r(image_path);
  json jb;
  try {
    jb = json::parse(read_text_file(boxes_path));
    for (const auto& b : jb) {
      sample.exemplar_boxes.push_back(
          {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()});
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("boxes: expected [[top,left,bottom,right],...]: ") + e.what());
  }
  validate_sample(sample);

  const auto pred = model.predict(sample, !trace_dir.empty());
  std::cout << "count " << pred.count << "\n";
  if (!out_path.empty()) {
    write_f32r(out_path, pred.density);
    write_pgm(out_path + ".pgm", pred.density.dim(0), pred.density.dim(1), pred.density.values());
  }
  if (!trace_dir.empty()) export_trace(trace_dir, pred.trace);
  return kExitOk;
}

int cmd_ablate(const std::string& data_dir, const std::string& config_path, const std::string& out_path) {
  RunConfig rc = parse_run_config(config_path);
  if (auto s = seed_override_from_env()) {
    rc.model = rc.model.with_seed(*s);
    rc.train.seed = *s;
  }
  const DatasetManifest data = load_manifest(data_dir);
  const AblationTable table = run_ablation(data, rc.model, rc.train);
  std::cout << table.to_text();
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw IoError("cannot write table: " + out_path);
    out << table.to_json_text() << "\n";
  }
  for (const auto& c : table.cells) {
    if (!c.ok) return kExitNumerical;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"corrcount: iterative correlation-based few-shot counting at desk scale"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--spec", spec_path, "dataset spec JSON (defaults used when omitted)");
  synth->add_option("--out", out_dir, "output directory")->required();

  std::string data_dir, config_path, ckpt_path;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--data", data_dir, "dataset directory")->required();
  train_cmd->add_option("--config", config_path, "run config JSON {model:{...},train:{...}}");
  train_cmd->add_option("--out", ckpt_path, "checkpoint output path")->required();

  std::string split = "test", report_path;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval_cmd->add_option("--split", split, "split name (train/val/test)");
  eval_cmd->add_option("--out", report_path, "write the report JSON here");

  std::string image_path, boxes_path, density_out, trace_dir;
  auto* predict_cmd = app.add_subcommand("predict", "predict a density map for one image");
  predict_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  predict_cmd->add_option("--image", image_path, "input image (F32R)")->required();
  predict_cmd->add_option("--boxes", boxes_path, "exemplar boxes JSON [[t,l,b,r],...]")->required();
  predict_cmd->add_option("--out", density_out, "density map output (F32R; a PGM is written alongside)");
  predict_cmd->add_option("--trace", trace_dir, "export per-iteration correlation rasters here");

  std::string table_path;
  auto* ablate_cmd = app.add_subcommand("ablate", "run the iteration/normalization/flip ablation grid");
  ablate_cmd->add_option("--data", data_dir, "dataset directory")->required();
  ablate_cmd->add_option("--config", config_path, "run config JSON");
  ablate_cmd->add_option("--out", table_path, "write the table JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInput;
  }

  try {
    if (synth->parsed()) return cmd_synth(spec_path, out_dir);
    if (train_cmd->parsed()) return cmd_train(data_dir, config_path, ckpt_path);
    if (eval_cmd->parsed()) return cmd_eval(data_dir, ckpt_path, split, report_path);
    if (predict_cmd->parsed()) return cmd_predict(ckpt_path, image_path, boxes_path, density_out, trace_dir);
    if (ablate_cmd->parsed()) return cmd_ablate(data_dir, config_path, table_path);
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  }
  return kExitInput;
}
