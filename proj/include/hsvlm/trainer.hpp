#pragma once

// Training loop: seeded batches → masked encode → contrastive loss →
// reverse pass → Adam, plus evaluation and the multi-seed protocol.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "hsvlm/adam.hpp"
#include "hsvlm/autodiff.hpp"
#include "hsvlm/contrast.hpp"
#include "hsvlm/encoder.hpp"
#include "hsvlm/error.hpp"
#include "hsvlm/evalkit.hpp"
#include "hsvlm/hsio.hpp"
#include "hsvlm/prompts.hpp"
#include "hsvlm/split.hpp"

namespace hsvlm {

enum class TrainVariant { Full, NoHard, NoSemiHard, VisionOnly };

inline std::string_view to_string(TrainVariant v) {
  switch (v) {
    case TrainVariant::Full: return "full";
    case TrainVariant::NoHard: return "no_hard";
    case TrainVariant::NoSemiHard: return "no_semi_hard";
    case TrainVariant::VisionOnly: return "vision_only";
  }
  return "full";
}

inline TrainVariant parse_train_variant(std::string_view s) {
  if (s == "full") return TrainVariant::Full;
  if (s == "no_hard" || s == "no-hard") return TrainVariant::NoHard;
  if (s == "no_semi_hard" || s == "no-semi-hard") return TrainVariant::NoSemiHard;
  if (s == "vision_only" || s == "vision-only") return TrainVariant::VisionOnly;
  fail(ErrorCode::InvalidConfig, "unknown variant '" + std::string(s) + "'");
}

inline LossVariant loss_variant(TrainVariant v) {
  switch (v) {
    case TrainVariant::NoHard: return LossVariant::NoHard;
    case TrainVariant::NoSemiHard: return LossVariant::NoSemiHard;
    default: return LossVariant::Full;
  }
}

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4};
  NegativeSpec negatives{};
  TrainVariant variant = TrainVariant::Full;
  double fraction = 0.1;
  std::size_t eval_batch = 256;

  void validate() const {
    if (epochs < 1) fail(ErrorCode::InvalidConfig, "epochs must be >= 1");
    if (batch_size < 1) fail(ErrorCode::InvalidConfig, "batch size must be >= 1");
    if (!(learning_rate > 0)) fail(ErrorCode::InvalidConfig, "learning rate must be positive");
    if (seeds.empty()) fail(ErrorCode::InvalidConfig, "at least one seed is required");
    if (!(fraction > 0 && fraction < 1)) fail(ErrorCode::InvalidConfig, "train fraction must lie in (0, 1)");
  }
};

struct TrainHistory {
  std::vector<double> epoch_loss;     // sample-weighted mean per epoch
  std::vector<double> epoch_seconds;  // wall time; not part of any determinism contract
  double final_tau = 0;
  std::uint64_t seed = 0;
};

struct FitResult {
  VisionModel<float> model;
  TrainHistory history;
  PrototypeSet prototypes;  // the anchors used for retrieval (learned for vision_only)
};

/// Scene, labels and the padded view used for patch extraction.
struct Dataset {
  SceneCube scene;
  LabelMap labels;
  PaddedScene padded;

  Dataset(SceneCube cube, LabelMap map, std::size_t window) : scene(std::move(cube)), labels(std::move(map)) {
    if (scene.height() != labels.height() || scene.width() != labels.width()) {
      fail(ErrorCode::ShapeMismatch, "scene and label map sizes differ");
    }
    padded = PaddedScene(scene, (window - 1) / 2);
  }

  [[nodiscard]] std::size_t classes() const { return labels.num_classes(); }
};

namespace detail {
inline std::vector<std::size_t> zero_based(const std::vector<std::uint16_t>& labels) {
  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = static_cast<std::size_t>(labels[i]) - 1;
  return out;
}

inline void check_prototypes(const PrototypeSet& p, const VisionConfig& vc, std::size_t classes) {
  if (p.dim() != vc.projection_dim) {
    fail(ErrorCode::PrototypeDimMismatch, "prototype dimension " + std::to_string(p.dim()) +
                                              " != projection dimension " + std::to_string(vc.projection_dim));
  }
  if (p.classes() != classes) {
    fail(ErrorCode::DimMismatch, "prototype set has " + std::to_string(p.classes()) + " classes, labels have " +
                                     std::to_string(classes));
  }
}
}  // namespace detail

/// Mean contrastive loss of `model` on one batch, without updating anything.
inline double batch_loss(const VisionModel<float>& model, const PatchBatch& batch, const Tensor& prototypes,
                         NegativeSpec spec, LossVariant variant, Rng& rng) {
  Tape<float> tape;
  auto vars = bind_parameters(tape, model);
  Var z = encode(tape, vars, model.config, batch.patches, true, &rng);
  const auto labels = detail::zero_based(batch.labels);
  return batch_contrastive_loss(tape.value(z), prototypes, labels, spec, model.logit_scale[0], rng, variant).loss;
}

/// Trains one model. `prototypes` is required unless the variant is
/// VisionOnly, which learns its own C×d anchors instead.
inline FitResult fit(const TrainConfig& config, const VisionConfig& vision, const Dataset& data, const SplitIndex& split,
                     const std::optional<PrototypeSet>& prototypes, std::uint64_t seed,
                     const std::function<void(std::size_t, double)>& on_epoch = {}) {
  config.validate();
  vision.validate();
  if (data.scene.depth() != vision.input_depth) {
    fail(ErrorCode::ShapeMismatch, "scene depth " + std::to_string(data.scene.depth()) + " != model input depth " +
                                       std::to_string(vision.input_depth));
  }
  if (split.train.empty()) fail(ErrorCode::EmptyBatch, "split has no training pixels");
  const std::size_t C = data.classes();
  const bool learned = config.variant == TrainVariant::VisionOnly;
  if (!learned) {
    if (!prototypes) fail(ErrorCode::InvalidConfig, "a prototype set is required for this variant");
    detail::check_prototypes(*prototypes, vision, C);
  }

  FitResult result{init_model<float>(vision, seed), {}, {}};
  auto& model = result.model;
  Tensor learned_raw;
  if (learned) {
    result.prototypes = synth_prototypes(C, vision.projection_dim, seed);
    learned_raw = result.prototypes.matrix;
  } else {
    result.prototypes = *prototypes;
  }

  auto named = model.named_parameters();
  std::vector<Tensor*> params;
  for (auto& [_, p] : named) params.push_back(p);
  if (learned) params.push_back(&learned_raw);
  AdamState<float> adam(params);

  Rng train_rng(seed, streams::kTraining);
  const auto loss_kind = loss_variant(config.variant);
  result.history.seed = seed;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    double loss_sum = 0;
    std::size_t seen = 0;
    for (const auto& coords : epoch_batches(split.train, config.batch_size, seed, epoch)) {
      const PatchBatch batch = make_patch_batch(data.padded, data.labels, coords, vision.window);
      Tape<float> tape;
      auto vars = bind_parameters(tape, model);
      Var z = encode(tape, vars, vision, batch.patches, true, &train_rng);
      Var p_raw{}, p_unit{};
      if (learned) {
        p_raw = tape.parameter(learned_raw);
        p_unit = tape.l2_normalize_rows(p_raw);
      }
      const Tensor& anchors = learned ? tape.value(p_unit) : result.prototypes.matrix;
      const auto labels = detail::zero_based(batch.labels);
      auto loss = batch_contrastive_loss(tape.value(z), anchors, labels, config.negatives, model.logit_scale[0],
                                         train_rng, loss_kind);
      if (!std::isfinite(loss.loss)) {
        fail(ErrorCode::DivergedLoss, "non-finite loss at epoch " + std::to_string(epoch) + " (seed " +
                                          std::to_string(seed) + ", tau " + std::to_string(model.tau()) + ")");
      }
      std::vector<std::pair<Var, Tensor>> seeds{{z, std::move(loss.grad_embeddings)}};
      if (learned) seeds.emplace_back(p_unit, std::move(loss.grad_prototypes));
      const auto grads = differentiate(tape, seeds);

      std::vector<Tensor> g;
      g.reserve(params.size());
      for (std::size_t k = 0; k + 1 < vars.ordered.size(); ++k) g.push_back(grads.of(vars.ordered[k]));
      g.emplace_back(Shape{1}, std::vector<float>{static_cast<float>(loss.grad_logit_scale)});
      if (learned) g.push_back(grads.of(p_raw));
      adam_step<float>(params, g, adam, config.learning_rate);
      model.logit_scale[0] = std::min(model.logit_scale[0], static_cast<float>(kMaxLogitScale));

      loss_sum += loss.loss * static_cast<double>(coords.size());
      seen += coords.size();
    }
    const double mean = loss_sum / static_cast<double>(seen);
    if (!std::isfinite(mean)) fail(ErrorCode::DivergedLoss, "non-finite epoch loss");
    result.history.epoch_loss.push_back(mean);
    result.history.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    if (on_epoch) on_epoch(epoch, mean);
  }
  result.history.final_tau = model.tau();
  if (learned) result.prototypes = make_prototypes(result.prototypes.names, learned_raw);
  return result;
}

/// Nearest-prototype labels (1..C) for every coordinate, in input order.
inline std::vector<std::uint16_t> predict_coords(const VisionModel<float>& model, const Tensor& prototypes,
                                                 const Dataset& data, const std::vector<Coord>& coords,
                                                 std::size_t batch_size = 256, Tensor* embeddings = nullptr) {
  std::vector<std::uint16_t> out;
  out.reserve(coords.size());
  std::vector<float> all;
  for (std::size_t i = 0; i < coords.size(); i += batch_size) {
    const std::vector<Coord> chunk(coords.begin() + static_cast<std::ptrdiff_t>(i),
                                   coords.begin() + static_cast<std::ptrdiff_t>(std::min(coords.size(), i + batch_size)));
    const auto batch = make_patch_batch(data.padded, data.labels, chunk, model.config.window);
    const Tensor z = encode_batch(model, batch.patches, false);
    for (auto j : nearest_prototype(z, prototypes)) out.push_back(static_cast<std::uint16_t>(j + 1));
    if (embeddings) all.insert(all.end(), z.values().begin(), z.values().end());
  }
  if (embeddings && !coords.empty()) *embeddings = Tensor({coords.size(), model.config.projection_dim}, std::move(all));
  return out;
}

inline ConfusionMatrix evaluate(const VisionModel<float>& model, const PrototypeSet& prototypes, const Dataset& data,
                                const std::vector<Coord>& coords, std::size_t batch_size = 256) {
  if (prototypes.dim() != model.config.projection_dim) {
    fail(ErrorCode::DimMismatch, "prototype dimension " + std::to_string(prototypes.dim()) +
                                     " does not match checkpoint projection dimension " +
                                     std::to_string(model.config.projection_dim));
  }
  const auto predicted = predict_coords(model, prototypes.matrix, data, coords, batch_size);
  std::vector<std::uint16_t> truth;
  truth.reserve(coords.size());
  for (const auto& c : coords) truth.push_back(data.labels.at(c.h, c.w));
  return confusion_accumulate(std::max(data.classes(), prototypes.classes()), truth, predicted);
}

struct ProtocolReport {
  std::vector<EvalReport> runs;  // sorted by seed
  std::vector<TrainHistory> histories;
  double mean_oa = 0, std_oa = 0;
  double mean_kappa = 0, std_kappa = 0;
  double best_oa = 0, best_kappa = 0;
  std::uint64_t best_seed = 0;
};

/// Mean and population standard deviation over runs ordered by seed.
inline void aggregate(ProtocolReport& report) {
  std::vector<std::size_t> order(report.runs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return report.runs[a].seed < report.runs[b].seed; });
  std::vector<EvalReport> runs;
  std::vector<TrainHistory> hist;
  for (auto i : order) {
    runs.push_back(report.runs[i]);
    if (i < report.histories.size()) hist.push_back(report.histories[i]);
  }
  report.runs = std::move(runs);
  report.histories = std::move(hist);
  const double n = static_cast<double>(report.runs.size());
  double so = 0, sk = 0;
  for (const auto& r : report.runs) {
    so += r.overall_accuracy;
    sk += r.kappa;
  }
  report.mean_oa = so / n;
  report.mean_kappa = sk / n;
  double vo = 0, vk = 0;
  for (const auto& r : report.runs) {
    vo += (r.overall_accuracy - report.mean_oa) * (r.overall_accuracy - report.mean_oa);
    vk += (r.kappa - report.mean_kappa) * (r.kappa - report.mean_kappa);
  }
  report.std_oa = std::sqrt(vo / n);
  report.std_kappa = std::sqrt(vk / n);
  const auto best = std::max_element(report.runs.begin(), report.runs.end(), [](const auto& a, const auto& b) {
    return a.overall_accuracy < b.overall_accuracy;
  });
  report.best_oa = best->overall_accuracy;
  report.best_kappa = best->kappa;
  report.best_seed = best->seed;
}

/// Trains and evaluates once per configured seed; `on_run` sees each fitted
/// model (for checkpointing) before it is discarded.
inline ProtocolReport run_protocol(const TrainConfig& config, const VisionConfig& vision, const Dataset& data,
                                   const SplitIndex& split, const std::optional<PrototypeSet>& prototypes,
                                   const std::string& digest,
                                   const std::function<void(const FitResult&)>& on_run = {}) {
  config.validate();
  ProtocolReport report;
  for (auto seed : config.seeds) {
    auto fitted = fit(config, vision, data, split, prototypes, seed);
    const auto cm = evaluate(fitted.model, fitted.prototypes, data, split.test, config.eval_batch);
    report.runs.push_back(make_report(cm, seed, std::string(to_string(config.variant)), digest));
    report.histories.push_back(fitted.history);
    if (on_run) on_run(fitted);
  }
  aggregate(report);
  return report;
}

inline nlohmann::json protocol_to_json(const ProtocolReport& p) {
  nlohmann::json j;
  auto runs = nlohmann::json::array();
  for (const auto& r : p.runs) runs.push_back(report_to_json(r));
  j["runs"] = runs;
  j["mean_oa"] = p.mean_oa;
  j["std_oa"] = p.std_oa;
  j["mean_kappa"] = p.mean_kappa;
  j["std_kappa"] = p.std_kappa;
  j["best_oa"] = p.best_oa;
  j["best_kappa"] = p.best_kappa;
  j["best_seed"] = p.best_seed;
  return j;
}

/// Loss curve and final temperature. Wall times are left out so the file is
/// byte-identical across reruns.
inline nlohmann::json history_to_json(const TrainHistory& h) {
  nlohmann::json j;
  j["seed"] = h.seed;
  j["epoch_loss"] = h.epoch_loss;
  j["final_tau"] = h.final_tau;
  return j;
}

}  // namespace hsvlm
