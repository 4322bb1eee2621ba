#include "corrcount/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "corrcount/adam.hpp"
#include "corrcount/error.hpp"
#include "corrcount/ops.hpp"

namespace corrcount {

using nlohmann::json;

std::string TrainConfig::to_json_text() const {
  const json j{{"epochs", epochs},
               {"batch_size", batch_size},
               {"lr", lr},
               {"lr_decay_factor", lr_decay_factor},
               {"lr_decay_every", lr_decay_every},
               {"adam_beta1", adam_beta1},
               {"adam_beta2", adam_beta2},
               {"adam_eps", adam_eps},
               {"seed", seed},
               {"threads", threads}};
  return j.dump();
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  TrainConfig cfg;
  try {
    const json j = json::parse(text);
    cfg.epochs = j.value("epochs", cfg.epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.lr = j.value("lr", cfg.lr);
    cfg.lr_decay_factor = j.value("lr_decay_factor", cfg.lr_decay_factor);
    cfg.lr_decay_every = j.value("lr_decay_every", cfg.lr_decay_every);
    cfg.adam_beta1 = j.value("adam_beta1", cfg.adam_beta1);
    cfg.adam_beta2 = j.value("adam_beta2", cfg.adam_beta2);
    cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.threads = j.value("threads", cfg.threads);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  return cfg;
}

namespace {

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// Fixed-tree pairwise summation.
double pairwise_sum(const double* v, std::size_t n) {
  if (n == 0) return 0.0;
  if (n <= 8) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += v[i];
    return s;
  }
  const std::size_t half = n / 2;
  return pairwise_sum(v, half) + pairwise_sum(v + half, n - half);
}

struct CachedSample {
  Tensor f_I;  // [C,H,W], untracked
  Tensor f_e;  // [K,C,He,We], untracked
  Tensor gt;   // [H_I,W_I]
  std::vector<Box> boxes;
};

std::vector<CachedSample> build_cache(const CountingModel& model, const DatasetManifest& data,
                                      const std::vector<const ManifestRecord*>& records) {
  std::vector<CachedSample> cache(records.size());
  const auto h = model.config().backbone.image_size;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const ImageSample sample = load_sample(data, *records[i]);
    CachedSample& c = cache[i];
    c.f_I = model.image_features(sample.image);
    c.f_e = model.exemplar_features(c.f_I, sample.exemplar_boxes);
    c.gt = generate_gt_density(sample.dots, h, h);
    c.boxes = sample.exemplar_boxes;
  }
  return cache;
}

struct SampleGrad {
  double loss = 0;
  bool finite = true;
  std::string error;  // non-empty when the forward/backward pass itself threw
  std::vector<std::vector<double>> grads;  // parameter order
};

SampleGrad sample_gradient(const CountingModel& model, const CachedSample& s) {
  // Fresh trainable parameter clones per sample keep graphs disjoint across
  // worker threads and make the reduction order the only order that matters.
  SampleGrad out;
  try {
    CountingModel local = model.clone(/*trainable=*/true);
    Tensor loss = mse_loss(local.forward_density(s.f_I, s.f_e, nullptr, &s.boxes), s.gt);
    out.loss = loss.item();
    if (!std::isfinite(out.loss)) {
      out.finite = false;
      return out;
    }
    backward(loss);
    for (auto& p : local.parameters()) {
      out.grads.emplace_back(p.grad().begin(), p.grad().end());
    }
  } catch (const std::exception& e) {
    out.finite = false;
    out.error = e.what();
  }
  return out;
}

}  // namespace

TrainResult train(CountingModel& model, const DatasetManifest& data, const TrainConfig& cfg) {
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ConfigError("train: epochs and batch size must be >= 1");
  const auto records = data.split("train");
  if (records.empty()) throw ContractViolation("train: empty train split");

  const auto t0 = std::chrono::steady_clock::now();
  const auto cache = build_cache(model, data, records);

  auto params = model.parameters();
  AdamOptimizer adam({cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps}, params,
                     model.parameter_names());
  const int threads = std::min<int>(resolve_threads(cfg.threads), cfg.batch_size);

  // Last completed epoch's parameter values, for the non-finite-loss abort.
  auto snapshot = [&params]() {
    std::vector<std::vector<double>> snap;
    for (auto& p : params) snap.emplace_back(p.values().begin(), p.values().end());
    return snap;
  };
  auto restore = [&params](const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < snap.size(); ++i) {
      auto dst = params[i].mutable_values();
      std::copy(snap[i].begin(), snap[i].end(), dst.begin());
    }
  };
  auto last_good = snapshot();

  TrainResult result;
  std::vector<std::size_t> order(cache.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.set_lr(cfg.lr * std::pow(cfg.lr_decay_factor, epoch / cfg.lr_decay_every));

    Rng shuffle_rng(Rng::derive_stream(cfg.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = 0; i + 1 < order.size(); ++i) {
      const std::size_t j = i + shuffle_rng.uniform_index(order.size() - i);
      std::swap(order[i], order[j]);
    }

    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t batch = std::min<std::size_t>(cfg.batch_size, order.size() - at);
      std::vector<SampleGrad> results(batch);
      auto worker = [&](int tid) {
        for (std::size_t b = static_cast<std::size_t>(tid); b < batch; b += static_cast<std::size_t>(threads)) {
          results[b] = sample_gradient(model, cache[order[at + b]]);
        }
      };
      if (threads <= 1 || batch <= 1) {
        worker(0);
      } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
        for (auto& t : pool) t.join();
      }

      ++step;
      for (std::size_t b = 0; b < batch; ++b) {
        if (!results[b].finite) {
          restore(last_good);
          std::string detail = results[b].error.empty() ? "non-finite loss" : results[b].error;
          throw NumericalError("train: " + detail + " at step " + std::to_string(step) +
                               "; parameters restored to the last completed epoch");
        }
      }

      // Reduce per-sample gradients in sample order, then average.
      std::vector<std::vector<double>> grads = std::move(results[0].grads);
      for (std::size_t b = 1; b < batch; ++b) {
        for (std::size_t p = 0; p < grads.size(); ++p) {
          const auto& g = results[b].grads[p];
          for (std::size_t j = 0; j < g.size(); ++j) grads[p][j] += g[j];
        }
      }
      const double inv = 1.0 / static_cast<double>(batch);
      double loss_mean = 0;
      for (std::size_t b = 0; b < batch; ++b) loss_mean += results[b].loss;
      loss_mean *= inv;
      for (auto& g : grads) {
        for (auto& v : g) v *= inv;
      }
      try {
        adam.step(params, grads);
      } catch (const NumericalError& e) {
        restore(last_good);
        throw NumericalError("train: " + std::string(e.what()) + " at step " + std::to_string(step) +
                             "; parameters restored to the last completed epoch");
      }
      result.curve.push_back({step, loss_mean});
    }
    last_good = snapshot();
  }

  result.steps = step;
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

std::pair<double, double> mae_rmse(const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.empty()) throw ContractViolation("mae_rmse: no samples");
  // Sorted before pairwise summation so sample order cannot perturb the sums.
  std::vector<double> abs_err(pairs.size()), sq_err(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double e = pairs[i].first - pairs[i].second;
    abs_err[i] = std::fabs(e);
    sq_err[i] = e * e;
  }
  std::sort(abs_err.begin(), abs_err.end());
  std::sort(sq_err.begin(), sq_err.end());
  const double n = static_cast<double>(pairs.size());
  return {pairwise_sum(abs_err.data(), abs_err.size()) / n,
          std::sqrt(pairwise_sum(sq_err.data(), sq_err.size()) / n)};
}

std::optional<std::uint64_t> seed_override_from_env() {
  const char* s = std::getenv("CORRCOUNT_SEED");
  if (s == nullptr || *s == '\0') return std::nullopt;
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw ConfigError("CORRCOUNT_SEED must be an unsigned integer, got '" + std::string(s) + "'");
  }
}

EvalReport evaluate(const CountingModel& model, const DatasetManifest& data, const std::string& split,
                    int threads) {
  const auto records = data.split(split);
  if (records.empty()) throw ContractViolation("evaluate: empty split '" + split + "'");
  const auto t0 = std::chrono::steady_clock::now();

  const CountingModel frozen = model.clone(/*trainable=*/false);
  std::vector<std::pair<double, double>> pairs(records.size());
  const int t_count = std::min<int>(resolve_threads(threads), static_cast<int>(records.size()));
  auto worker = [&](int tid) {
    for (std::size_t i = static_cast<std::size_t>(tid); i < records.size();
         i += static_cast<std::size_t>(t_count)) {
      const ImageSample sample = load_sample(data, *records[i]);
      const auto pred = frozen.predict(sample);
      pairs[i] = {pred.count, records[i]->count};
    }
  };
  if (t_count <= 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < t_count; ++t) pool.emplace_back(worker, t);
    for (auto& t : pool) t.join();
  }

  EvalReport report;
  report.images = static_cast<std::int64_t>(pairs.size());
  std::tie(report.mae, report.rmse) = mae_rmse(pairs);
  report.pairs = std::move(pairs);
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (report.rmse < report.mae - 1e-9) {
    throw NumericalError("evaluate: RMSE " + std::to_string(report.rmse) + " fell below MAE " +
                         std::to_string(report.mae));
  }
  return report;
}

double constant_predictor_mae(const DatasetManifest& data, const std::string& fit_split,
                              const std::string& eval_split) {
  const auto fit = data.split(fit_split);
  const auto eval = data.split(eval_split);
  if (fit.empty() || eval.empty()) throw ContractViolation("constant_predictor_mae: empty split");
  double mean = 0;
  for (const auto* r : fit) mean += r->count;
  mean /= static_cast<double>(fit.size());
  double mae = 0;
  for (const auto* r : eval) mae += std::fabs(mean - r->count);
  return mae / static_cast<double>(eval.size());
}

std::string AblationTable::to_json_text() const {
  json arr = json::array();
  for (const auto& c : cells) {
    arr.push_back({{"name", c.name},
                   {"iterations", c.iterations},
                   {"exemplar_norm", c.exemplar_norm},
                   {"spatial_norm", c.spatial_norm},
                   {"flip", c.flip},
                   {"ok", c.ok},
                   {"error", c.error},
                   {"val_mae", c.val_mae},
                   {"val_rmse", c.val_rmse},
                   {"train_seconds", c.train_seconds}});
  }
  return json{{"cells", arr}}.dump(2);
}

std::string AblationTable::to_text() const {
  std::ostringstream os;
  os << "cell              N  EN SN flip   val MAE   val RMSE\n";
  for (const auto& c : cells) {
    char line[160];
    if (c.ok) {
      std::snprintf(line, sizeof(line), "%-16s %2d   %c  %c  %c   %9.3f  %9.3f\n", c.name.c_str(),
                    c.iterations, c.exemplar_norm ? 'x' : '-', c.spatial_norm ? 'x' : '-',
                    c.flip ? 'x' : '-', c.val_mae, c.val_rmse);
    } else {
      std::snprintf(line, sizeof(line), "%-16s %2d   %c  %c  %c   failed: %s\n", c.name.c_str(), c.iterations,
                    c.exemplar_norm ? 'x' : '-', c.spatial_norm ? 'x' : '-', c.flip ? 'x' : '-',
                    c.error.c_str());
    }
    os << line;
  }
  return os.str();
}

AblationTable run_ablation(const DatasetManifest& data, const ModelConfig& base_model,
                           const TrainConfig& base_train) {
  struct CellSpec {
    std::string name;
    int iterations;
    bool en, sn, flip;
  };
  std::vector<CellSpec> grid;
  for (int n = 1; n <= 4; ++n) {
    grid.push_back({"iter" + std::to_string(n), n, true, true, true});
  }
  grid.push_back({"no_norm", 4, false, false, true});
  grid.push_back({"en_only", 4, true, false, true});
  grid.push_back({"sn_only", 4, false, true, true});
  grid.push_back({"no_flip", 4, true, true, false});
  grid.push_back({"full", 4, true, true, true});

  AblationTable table;
  for (const auto& spec : grid) {
    AblationCell cell;
    cell.name = spec.name;
    cell.iterations = spec.iterations;
    cell.exemplar_norm = spec.en;
    cell.spatial_norm = spec.sn;
    cell.flip = spec.flip;
    try {
      ModelConfig mcfg = base_model;
      mcfg.iterations = spec.iterations;
      mcfg.exemplar_norm = spec.en;
      mcfg.spatial_norm = spec.sn;
      mcfg.flip = spec.flip;
      CountingModel model(mcfg);
      const TrainResult tr = train(model, data, base_train);
      const EvalReport ev = evaluate(model, data, "val", base_train.threads);
      cell.ok = true;
      cell.val_mae = ev.mae;
      cell.val_rmse = ev.rmse;
      cell.train_seconds = tr.wall_seconds;
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
    table.cells.push_back(std::move(cell));
  }
  return table;
}

SuppressionStats measure_suppression(const CountingModel& model, const DatasetManifest& data,
                                     const std::string& split) {
  const auto records = data.split(split);
  if (records.empty()) throw ContractViolation("measure_suppression: empty split '" + split + "'");
  const CountingModel frozen = model.clone(/*trainable=*/false);
  const auto& bc = frozen.config().backbone;
  const double cell = static_cast<double>(bc.image_size) / static_cast<double>(bc.feature_size);

  SuppressionStats stats;
  double tgt_acc = 0, dis_acc = 0;
  for (const auto* rec : records) {
    const ImageSample sample = load_sample(data, *rec);
    IterationTrace trace;
    Tensor f_I = frozen.image_features(sample.image);
    Tensor f_e = frozen.exemplar_features(f_I, sample.exemplar_boxes);
    (void)frozen.forward_density(f_I, f_e, &trace, &sample.exemplar_boxes);
    const Tensor& a_n = trace.stacks.back().fused;  // [K,H,W] at the final iteration
    const std::int64_t K = a_n.dim(0), H = a_n.dim(1), W = a_n.dim(2);

    auto covered = [&](const std::vector<SceneObject>& objs, std::int64_t fy, std::int64_t fx) {
      const double iy = (static_cast<double>(fy) + 0.5) * cell - 0.5;
      const double ix = (static_cast<double>(fx) + 0.5) * cell - 0.5;
      for (const auto& o : objs) {
        if (std::fabs(iy - o.row) <= o.ext_r && std::fabs(ix - o.col) <= o.ext_c) return true;
      }
      return false;
    };

    double tgt_sum = 0, dis_sum = 0;
    std::int64_t tgt_n = 0, dis_n = 0;
    const double* av = a_n.values().data();
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        double mean_k = 0;
        for (std::int64_t k = 0; k < K; ++k) mean_k += av[(k * H + y) * W + x];
        mean_k /= static_cast<double>(K);
        if (covered(rec->targets, y, x)) {
          tgt_sum += mean_k;
          ++tgt_n;
        } else if (covered(rec->distractors, y, x)) {
          dis_sum += mean_k;
          ++dis_n;
        }
      }
    }
    if (tgt_n == 0 || dis_n == 0) continue;  // nothing to compare on this image
    const double tgt_mean = tgt_sum / static_cast<double>(tgt_n);
    const double dis_mean = dis_sum / static_cast<double>(dis_n);
    ++stats.images;
    if (dis_mean < tgt_mean) ++stats.separated;
    tgt_acc += tgt_mean;
    dis_acc += dis_mean;
  }
  if (stats.images > 0) {
    stats.fraction = static_cast<double>(stats.separated) / static_cast<double>(stats.images);
    stats.mean_target = tgt_acc / static_cast<double>(stats.images);
    stats.mean_distractor = dis_acc / static_cast<double>(stats.images);
  }
  return stats;
}

}  // namespace corrcount
