#pragma once

// `hsvlm` command line: prepare → split → train → eval → ablate, plus
// synth-prototypes, gradcheck and params.
//
// Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
// failure (diverged loss, non-finite values, failed gradient check).

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hsvlm/checkpoint.hpp"
#include "hsvlm/config.hpp"
#include "hsvlm/encoder.hpp"
#include "hsvlm/error.hpp"
#include "hsvlm/evalkit.hpp"
#include "hsvlm/gradcheck.hpp"
#include "hsvlm/hsio.hpp"
#include "hsvlm/parallel.hpp"
#include "hsvlm/pca.hpp"
#include "hsvlm/prompts.hpp"
#include "hsvlm/split.hpp"
#include "hsvlm/trainer.hpp"

namespace hsvlm::cli {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

inline int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig:
      return kUsage;
    case ErrorCode::DivergedLoss:
    case ErrorCode::NonFinite:
      return kNumeric;
    default:
      return kData;
  }
}

/// Parses "0.1,0.2" or an inclusive range "0.1..0.5" (step 0.1).
inline std::vector<double> parse_fractions(const std::string& text) {
  std::vector<double> out;
  if (const auto dots = text.find(".."); dots != std::string::npos) {
    const double lo = std::stod(text.substr(0, dots));
    const double hi = std::stod(text.substr(dots + 2));
    for (int i = static_cast<int>(std::lround(lo * 10)); i <= static_cast<int>(std::lround(hi * 10)); ++i) {
      out.push_back(i / 10.0);
    }
  } else {
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) out.push_back(std::stod(item));
  }
  if (out.empty()) fail(ErrorCode::InvalidConfig, "no fractions in '" + text + "'");
  return out;
}

inline std::filesystem::path with_suffix(const std::filesystem::path& p, const std::string& suffix) {
  return p.parent_path() / (p.stem().string() + suffix + p.extension().string());
}

/// Scene after the configured preprocessing (min-max scaling, then PCA).
inline SceneCube preprocess(SceneCube cube, bool scale, std::optional<std::size_t> pca) {
  if (scale) cube = minmax_scale_bands(cube);
  if (pca && *pca > 0) cube = pca_transform(cube, pca_fit(cube, *pca));
  return cube;
}

struct Prepared {
  RunConfig config;
  std::string digest;
  Dataset data;
  SplitIndex split;
  std::optional<PrototypeSet> prototypes;
};

inline Prepared prepare_run(const std::filesystem::path& config_path, std::ostream& out) {
  RunConfig rc = load_run_config(config_path);
  const std::string digest = config_digest(rc.source);
  out << "config digest " << digest << "\n";
  auto cube = preprocess(load_cube(rc.cube), rc.scale, rc.pca);
  auto labels = load_labels(rc.labels);
  rc.vision.input_depth = cube.depth();
  rc.vision.validate();

  SplitIndex split;
  if (rc.split && std::filesystem::exists(*rc.split)) {
    split = load_split(*rc.split, labels);
  } else {
    split = stratified_split(labels, rc.train.fraction, rc.split_seed);
    if (rc.split) save_split(split, *rc.split);
  }

  std::optional<PrototypeSet> protos;
  if (rc.prototypes_path) {
    protos = load_prototypes(*rc.prototypes_path);
  } else if (rc.synth) {
    const std::size_t C = rc.synth->classes ? rc.synth->classes : labels.num_classes();
    protos = synth_prototypes(C, rc.synth->dim, rc.synth->seed);
  }
  Dataset data(std::move(cube), std::move(labels), rc.vision.window);
  return Prepared{std::move(rc), digest, std::move(data), std::move(split), std::move(protos)};
}

inline void print_protocol(const ProtocolReport& p, std::ostream& out) {
  for (const auto& r : p.runs) {
    out << "seed " << r.seed << ": OA " << std::fixed << std::setprecision(2) << r.overall_accuracy << "  AA "
        << r.average_accuracy << "  kappa " << std::setprecision(4) << r.kappa << "\n";
  }
  out << "mean OA " << std::setprecision(2) << p.mean_oa << " ± " << p.std_oa << "  mean kappa "
      << std::setprecision(4) << p.mean_kappa << " ± " << p.std_kappa << "\n";
  out.unsetf(std::ios::floatfield);
}

inline int cmd_prepare(const std::string& cube_path, const std::string& labels_path, std::size_t pca, bool scale,
                       const std::string& out_path, std::ostream& out) {
  nlohmann::json args{{"cmd", "prepare"}, {"pca", pca}, {"scale", scale}};
  out << "config digest " << config_digest(args) << "\n";
  auto cube = load_cube(cube_path);
  if (!labels_path.empty()) {
    const auto labels = load_labels(labels_path);
    if (labels.height() != cube.height() || labels.width() != cube.width()) {
      fail(ErrorCode::ShapeMismatch, "label map does not match the cube's spatial size");
    }
  }
  cube = preprocess(std::move(cube), scale, pca ? std::optional<std::size_t>(pca) : std::nullopt);
  save_cube(cube, out_path);
  out << "wrote " << out_path << " (" << cube.height() << "x" << cube.width() << "x" << cube.depth() << ")\n";
  return kOk;
}

inline int cmd_split(const std::string& labels_path, double fraction, std::uint64_t seed, const std::string& out_path,
                     std::ostream& out) {
  nlohmann::json args{{"cmd", "split"}, {"fraction", fraction}, {"seed", seed}};
  out << "config digest " << config_digest(args) << "\n";
  const auto split = stratified_split(load_labels(labels_path), fraction, seed);
  save_split(split, out_path);
  out << "train " << split.train.size() << "  test " << split.test.size() << "\n";
  return kOk;
}

inline int cmd_synth(std::size_t classes, std::size_t dim, std::uint64_t seed, const std::string& out_path,
                     std::ostream& out) {
  nlohmann::json args{{"cmd", "synth-prototypes"}, {"classes", classes}, {"dim", dim}, {"seed", seed}};
  out << "config digest " << config_digest(args) << "\n";
  save_prototypes(synth_prototypes(classes, dim, seed), out_path);
  out << "wrote " << out_path << "\n";
  return kOk;
}

inline int cmd_train(const std::string& config_path, std::ostream& out) {
  auto run = prepare_run(config_path, out);
  const auto& rc = run.config;
  const bool multi = rc.train.seeds.size() > 1;
  auto histories = nlohmann::json::array();
  auto report = run_protocol(rc.train, rc.vision, run.data, run.split, run.prototypes, run.digest,
                             [&](const FitResult& fitted) {
                               histories.push_back(history_to_json(fitted.history));
                               if (!rc.out_checkpoint) return;
                               const auto path = multi ? with_suffix(*rc.out_checkpoint,
                                                                     "_seed" + std::to_string(fitted.history.seed))
                                                       : *rc.out_checkpoint;
                               save_checkpoint(fitted.model, path);
                               if (rc.train.variant == TrainVariant::VisionOnly) {
                                 save_prototypes(fitted.prototypes, with_suffix(path, "_prototypes").replace_extension(".hsp"));
                               }
                               out << "seed " << fitted.history.seed << ": final loss "
                                   << fitted.history.epoch_loss.back() << ", tau " << fitted.history.final_tau << "\n";
                             });
  print_protocol(report, out);
  if (rc.out_history) write_json_file(histories, *rc.out_history);
  if (rc.out_report) write_json_file(protocol_to_json(report), *rc.out_report);
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, prototypes, split, cube, labels, config, report, map, embeddings;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out) {
  SceneCube cube;
  LabelMap labels;
  nlohmann::json args{{"cmd", "eval"}};
  if (!a.config.empty()) {
    const auto rc = load_run_config(a.config);
    args["config"] = rc.source;
    cube = preprocess(load_cube(rc.cube), rc.scale, rc.pca);
    labels = load_labels(rc.labels);
  } else {
    if (a.cube.empty() || a.labels.empty()) fail(ErrorCode::InvalidConfig, "eval needs --config or --cube and --labels");
    cube = load_cube(a.cube);
    labels = load_labels(a.labels);
  }
  const std::string digest = config_digest(args);
  out << "config digest " << digest << "\n";

  const auto model = load_checkpoint(a.checkpoint);
  const auto protos = load_prototypes(a.prototypes);
  if (protos.dim() != model.config.projection_dim) {
    fail(ErrorCode::DimMismatch, "prototype dimension " + std::to_string(protos.dim()) +
                                     " does not match the checkpoint's projection dimension " +
                                     std::to_string(model.config.projection_dim));
  }
  if (labels.num_classes() > protos.classes()) {
    fail(ErrorCode::PrototypeDimMismatch, "label map has more classes than the prototype set");
  }
  const auto split = load_split(a.split, labels);
  Dataset data(std::move(cube), std::move(labels), model.config.window);
  if (data.scene.depth() != model.config.input_depth) {
    fail(ErrorCode::ShapeMismatch, "cube depth " + std::to_string(data.scene.depth()) + " does not match the model");
  }

  Tensor z;
  const auto predicted = predict_coords(model, protos.matrix, data, split.test, 256, a.embeddings.empty() ? nullptr : &z);
  std::vector<std::uint16_t> truth;
  for (const auto& c : split.test) truth.push_back(data.labels.at(c.h, c.w));
  const auto cm = confusion_accumulate(protos.classes(), truth, predicted);
  const auto report = make_report(cm, split.seed, "eval", digest);
  out << "OA " << std::fixed << std::setprecision(2) << report.overall_accuracy << "  AA " << report.average_accuracy
      << "  kappa " << std::setprecision(4) << report.kappa << "\n";
  out.unsetf(std::ios::floatfield);
  if (!a.report.empty()) write_report(report, a.report);
  if (!a.embeddings.empty()) write_embeddings(z, truth, a.embeddings);
  if (!a.map.empty()) {
    std::vector<Coord> labeled;
    for (std::uint32_t h = 0; h < data.labels.height(); ++h) {
      for (std::uint32_t w = 0; w < data.labels.width(); ++w) {
        if (data.labels.at(h, w) != 0) labeled.push_back({h, w});
      }
    }
    std::vector<std::uint16_t> pred_map(data.labels.height() * data.labels.width(), 0);
    if (!labeled.empty()) {
      const auto p = predict_coords(model, protos.matrix, data, labeled);
      for (std::size_t i = 0; i < labeled.size(); ++i) pred_map[labeled[i].h * data.labels.width() + labeled[i].w] = p[i];
    }
    export_map(data.labels, LabelMap(data.labels.height(), data.labels.width(), std::move(pred_map)), default_palette(),
               a.map);
  }
  return kOk;
}

struct AblateArgs {
  std::string config, variant, batch_sizes, fractions, out_dir = ".";
};

inline int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  const int chosen = !a.variant.empty() + !a.batch_sizes.empty() + !a.fractions.empty();
  if (chosen != 1) fail(ErrorCode::InvalidConfig, "ablate needs exactly one of --variant, --batch-sizes, --fractions");
  auto run = prepare_run(a.config, out);
  std::filesystem::create_directories(a.out_dir);
  const std::filesystem::path dir(a.out_dir);

  auto emit = [&](const std::string& tag, TrainConfig tc, const SplitIndex& split) {
    out << "== " << tag << "\n";
    const std::string digest = config_digest(nlohmann::json{{"config", run.config.source}, {"ablation", tag}});
    auto report = run_protocol(tc, run.config.vision, run.data, split, run.prototypes, digest);
    print_protocol(report, out);
    write_json_file(protocol_to_json(report), dir / ("ablate_" + tag + ".json"));
  };

  if (!a.variant.empty()) {
    std::stringstream ss(a.variant);
    for (std::string v; std::getline(ss, v, ',');) {
      TrainConfig tc = run.config.train;
      tc.variant = parse_train_variant(v);
      if (tc.variant != TrainVariant::VisionOnly && !run.prototypes) {
        fail(ErrorCode::InvalidConfig, "variant " + v + " needs a prototype source");
      }
      emit("variant_" + std::string(to_string(tc.variant)), tc, run.split);
    }
  } else if (!a.batch_sizes.empty()) {
    std::stringstream ss(a.batch_sizes);
    for (std::string b; std::getline(ss, b, ',');) {
      TrainConfig tc = run.config.train;
      tc.batch_size = std::stoul(b);
      emit("batch_" + std::to_string(tc.batch_size), tc, run.split);
    }
  } else {
    for (double f : parse_fractions(a.fractions)) {
      TrainConfig tc = run.config.train;
      tc.fraction = f;
      const auto split = stratified_split(run.data.labels, f, run.config.split_seed);
      std::ostringstream tag;
      tag << "fraction_" << std::fixed << std::setprecision(1) << f;
      emit(tag.str(), tc, split);
    }
  }
  return kOk;
}

inline int cmd_gradcheck(std::uint64_t seed, std::ostream& out) {
  constexpr double kTolerance = 1e-3;
  auto results = check_kernels<long double>(seed);
  results.push_back(check_contrastive<long double>(seed));
  results.push_back(check_tiny_encoder<long double>(seed));
  bool ok = true;
  for (const auto& r : results) {
    const bool pass = r.max_relative_error < kTolerance;
    ok = ok && pass;
    out << (pass ? "PASS " : "FAIL ") << std::left << std::setw(20) << r.name << " max rel err "
        << std::scientific << std::setprecision(3) << r.max_relative_error << "  (" << r.checked << " entries)\n";
    out.unsetf(std::ios::floatfield);
  }
  return ok ? kOk : kNumeric;
}

inline int cmd_params(const std::string& config_path, std::ostream& out) {
  VisionConfig vc;
  if (!config_path.empty()) {
    const auto rc = load_run_config(config_path);
    out << "config digest " << config_digest(rc.source) << "\n";
    vc = rc.vision;
    if (rc.pca && *rc.pca > 0) vc.input_depth = *rc.pca;
  }
  const auto counts = count_params(vc);
  for (const auto& [name, n] : counts.sections) out << std::left << std::setw(16) << name << n << "\n";
  out << std::left << std::setw(16) << "total" << counts.total << "\n";
  return kOk;
}

/// Entry point shared by the executable and the tests.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Hyperspectral vision-language classifier"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: HSVLM_THREADS or 1)")->check(CLI::NonNegativeNumber);

  std::string cube, labels, out_path, config;
  std::size_t pca = 25;
  bool scale = false;
  auto* prepare = app.add_subcommand("prepare", "Scale and PCA-reduce a cube");
  prepare->add_option("--cube", cube, "Input .hsc")->required();
  prepare->add_option("--labels", labels, "Label map to check dimensions against");
  prepare->add_option("--pca", pca, "Principal components to keep (0 = none)")->capture_default_str();
  prepare->add_flag("--scale", scale, "Min-max scale every band to [0,1] first");
  prepare->add_option("--out", out_path, "Output .hsc")->required();

  double fraction = 0.1;
  std::uint64_t seed = 1;
  auto* split = app.add_subcommand("split", "Stratified train/test split");
  split->add_option("--labels", labels, "Label map .hsl")->required();
  split->add_option("--fraction", fraction, "Training fraction per class")->capture_default_str();
  split->add_option("--seed", seed, "Shuffle seed")->capture_default_str();
  split->add_option("--out", out_path, "Output split .json")->required();

  std::size_t classes = 0, dim = 1024;
  std::uint64_t proto_seed = 7;
  auto* synth = app.add_subcommand("synth-prototypes", "Random unit-norm prototypes for tests");
  synth->add_option("--classes", classes, "Number of classes")->required()->check(CLI::PositiveNumber);
  synth->add_option("--dim", dim, "Embedding dimension")->capture_default_str();
  synth->add_option("--seed", proto_seed, "Seed")->capture_default_str();
  synth->add_option("--out", out_path, "Output .hsp")->required();

  auto* train = app.add_subcommand("train", "Train one model per configured seed");
  train->add_option("--config", config, "Run config .json")->required();

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on the test split");
  eval->add_option("--checkpoint", ea.checkpoint, "Model .hsm")->required();
  eval->add_option("--prototypes", ea.prototypes, "Prototype .hsp")->required();
  eval->add_option("--split", ea.split, "Split .json")->required();
  eval->add_option("--config", ea.config, "Run config for the dataset and preprocessing");
  eval->add_option("--cube", ea.cube, "Preprocessed cube .hsc (instead of --config)");
  eval->add_option("--labels", ea.labels, "Label map .hsl (instead of --config)");
  eval->add_option("--report", ea.report, "Output report .json");
  eval->add_option("--map", ea.map, "Output classification map .ppm");
  eval->add_option("--embeddings", ea.embeddings, "Output test embeddings .hse");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "Loss-variant, batch-size or train-fraction sweeps");
  ablate->add_option("--config", aa.config, "Run config .json")->required();
  ablate->add_option("--variant", aa.variant, "full|no-hard|no-semi-hard|vision-only (comma list)");
  ablate->add_option("--batch-sizes", aa.batch_sizes, "Comma list, e.g. 4,8,16,32,64,128");
  ablate->add_option("--fractions", aa.fractions, "Comma list or range, e.g. 0.1..0.5");
  ablate->add_option("--out-dir", aa.out_dir, "Directory for the report files")->capture_default_str();

  std::uint64_t gc_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every operator and the tiny encoder");
  gradcheck->add_option("--seed", gc_seed, "Seed")->capture_default_str();

  auto* params = app.add_subcommand("params", "Parameter counts per section");
  params->add_option("--config", config, "Run config .json (defaults when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    set_num_threads(threads > 0 ? threads : threads_from_env());
    if (*prepare) return cmd_prepare(cube, labels, pca, scale, out_path, out);
    if (*split) return cmd_split(labels, fraction, seed, out_path, out);
    if (*synth) return cmd_synth(classes, dim, proto_seed, out_path, out);
    if (*train) return cmd_train(config, out);
    if (*eval) return cmd_eval(ea, out);
    if (*ablate) return cmd_ablate(aa, out);
    if (*gradcheck) return cmd_gradcheck(gc_seed, out);
    if (*params) return cmd_params(config, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace hsvlm::cli
