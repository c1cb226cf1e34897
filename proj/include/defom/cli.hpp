#pragma once

// Command-line front end: infer, eval, synth, depth-analyze.
//
// Exit codes: 0 ok, 1 internal error, 2 bad input, 3 empty evaluation.
// Configuration precedence: built-in defaults < --config file < flags.
// DEFOM_OUT_DIR sets the default output directory.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "defom/correlation.hpp"
#include "defom/dataio.hpp"
#include "defom/depth_provider.hpp"
#include "defom/evalkit.hpp"
#include "defom/scene_synth.hpp"
#include "defom/updater.hpp"

namespace defom::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kInternal = 1, kBadInput = 2, kEmptyEvaluation = 3 };

inline constexpr const char* kOutDirEnv = "DEFOM_OUT_DIR";

// Failure attributed to a pipeline stage; carries the exit code to report.
struct StageError : std::runtime_error {
  StageError(ExitCode code, const std::string& stage, const std::string& message)
      : std::runtime_error(stage + ": " + message), code(code) {}
  ExitCode code;
};

inline fs::path default_out_dir() {
  const char* env = std::getenv(kOutDirEnv);
  return env && *env ? fs::path(env) : fs::path(".");
}

inline std::vector<float> parse_float_list(const std::string& text) {
  std::vector<float> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    float v = 0.0f;
    try {
      v = std::stof(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ConfigError("cannot parse '" + item + "' as a number");
    out.push_back(v);
  }
  return out;
}

inline std::vector<double> to_doubles(const std::vector<float>& v) { return {v.begin(), v.end()}; }

// Stage wrapper: maps library exceptions to exit codes with the stage name.
template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const EmptyMaskError& e) {
    throw StageError(kEmptyEvaluation, name, e.what());
  } catch (const IoError& e) {
    throw StageError(kBadInput, name, e.what());
  } catch (const FormatError& e) {
    throw StageError(kBadInput, name, e.what());
  } catch (const std::invalid_argument& e) {
    throw StageError(kBadInput, name, e.what());
  } catch (const std::exception& e) {
    throw StageError(kInternal, name, e.what());
  }
}

inline Bytes read_input(const std::string& what, const fs::path& path) {
  if (!fs::exists(path)) throw StageError(kBadInput, "read " + what, "no such file: " + path.string());
  return stage("read " + what, [&] { return read_file(path); });
}

// ---------------------------------------------------------------------------
// Engine configuration <-> JSON. The same object appears in --config files and
// in run manifests.

inline json config_to_json(const EngineConfig& cfg, std::uint64_t seed, Mode mode) {
  return {{"iters", cfg.total_iters},
          {"su_iters", cfg.su_iters},
          {"radius", cfg.lookup.radius},
          {"levels", cfg.lookup.num_levels},
          {"eta", cfg.eta},
          {"eps", cfg.eps},
          {"scale_factors", cfg.lookup.scale_factors},
          {"seed", seed},
          {"mode", to_string(mode)},
          {"feature_channels", cfg.encoder.feature_channels},
          {"hidden_channels", cfg.encoder.hidden_channels},
          {"stem_channels", {cfg.encoder.stem1_channels, cfg.encoder.stem2_channels}},
          {"aux", cfg.encoder.use_aux},
          {"aux_channels", cfg.encoder.aux_channels},
          {"corr_channels", cfg.corr_channels},
          {"disp_channels", cfg.disp_channels}};
}

inline Mode parse_mode(const std::string& s) {
  if (s == "learned") return Mode::Learned;
  if (s == "oracle") return Mode::Oracle;
  throw ConfigError("unknown mode '" + s + "' (expected learned or oracle)");
}

inline void apply_config_json(const json& j, EngineConfig& cfg, std::uint64_t& seed, Mode& mode) {
  const json& c = j.contains("config") ? j.at("config") : j;
  auto get = [&](const char* key, auto& field) {
    if (c.contains(key)) field = c.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("iters", cfg.total_iters);
  get("su_iters", cfg.su_iters);
  get("radius", cfg.lookup.radius);
  get("levels", cfg.lookup.num_levels);
  get("eta", cfg.eta);
  get("eps", cfg.eps);
  get("scale_factors", cfg.lookup.scale_factors);
  get("seed", seed);
  get("feature_channels", cfg.encoder.feature_channels);
  get("hidden_channels", cfg.encoder.hidden_channels);
  get("aux", cfg.encoder.use_aux);
  get("aux_channels", cfg.encoder.aux_channels);
  get("corr_channels", cfg.corr_channels);
  get("disp_channels", cfg.disp_channels);
  if (c.contains("stem_channels")) {
    const auto stems = c.at("stem_channels").get<std::vector<std::size_t>>();
    if (stems.size() != 2) throw ConfigError("stem_channels needs two entries");
    cfg.encoder.stem1_channels = stems[0];
    cfg.encoder.stem2_channels = stems[1];
  }
  if (c.contains("mode")) mode = parse_mode(c.at("mode").get<std::string>());
}

// ---------------------------------------------------------------------------
// infer

struct InferOptions {
  std::string left, right, depth, gt, weights;
  std::string config_file;
  fs::path out_dir;
  EngineConfig engine;
  std::uint64_t seed = 0;
  Mode mode = Mode::Learned;
  bool save_iterations = false;
};

struct PairOutcome {
  json manifest;
  std::vector<std::string> log;
};

inline Tensor read_image(const std::string& what, const std::string& path) {
  const Bytes bytes = read_input(what, path);
  return stage("decode " + what, [&] { return read_png_rgb(bytes); });
}

inline std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// Runs one stereo pair and writes its outputs into opts.out_dir.
inline PairOutcome infer_pair(const InferOptions& opts) {
  PairOutcome outcome;
  const EngineConfig& cfg = opts.engine;
  stage("config", [&] { cfg.validate(); });
  const Tensor left = read_image("left image", opts.left);
  const Tensor right = read_image("right image", opts.right);
  stage("check images", [&] {
    check_image(left, "left image");
    check_image(right, "right image");
    if (left.shape() != right.shape()) throw std::invalid_argument("left and right images differ in size");
  });
  const std::size_t h = left.dim(1) / 4, w = left.dim(2) / 4;

  DepthEstimate depth;
  if (!opts.depth.empty()) {
    const Bytes bytes = read_input("depth", opts.depth);
    depth = stage("load depth", [&] { return load_external_depth(bytes, h, w); });
  } else {
    depth.z = Tensor({h, w}, 0.0f);
    outcome.log.push_back("no --depth given: initialising with the constant eps map");
  }

  WeightBundle weights;
  json weight_info;
  if (opts.mode == Mode::Learned) {
    if (!opts.weights.empty()) {
      const Bytes bytes = read_input("weights", opts.weights);
      weights = stage("load weights", [&] { return load_weights(bytes); });
      weight_info = {{"source", "file"}, {"path", opts.weights}};
      if (weights.seed != WeightBundle::kNoSeed) weight_info["seed"] = weights.seed;
    } else {
      weights = stage("generate weights", [&] { return generate_model_weights(cfg, opts.seed); });
      weight_info = {{"source", "seed"}, {"seed", opts.seed}};
    }
  } else {
    weight_info = {{"source", "none"}};
  }

  std::optional<DisparityMap> gt;
  if (!opts.gt.empty()) {
    const Bytes bytes = read_input("ground truth", opts.gt);
    gt = stage("load ground truth", [&] { return read_disparity(bytes); });
    if (gt->disparity.shape() != Shape{left.dim(1), left.dim(2)}) {
      throw StageError(kBadInput, "load ground truth", "ground truth is " + to_string(gt->disparity.shape()) +
                                                           ", expected the image size");
    }
  }

  const InferenceResult result =
      stage("inference", [&] { return run_inference(left, right, depth, weights, cfg, opts.mode); });

  json iterations = json::array();
  for (std::size_t n = 0; n < result.full_res.size(); ++n) {
    const Tensor& d = result.full_res[n];
    double mean = 0.0;
    for (float v : d.values()) mean += v;
    mean /= static_cast<double>(d.size());
    json entry = {{"index", n + 1}, {"phase", to_string(result.phases[n])}, {"mean_disparity", mean}};
    std::string line = "iter " + std::to_string(n + 1) + "/" + std::to_string(result.full_res.size()) + " " +
                       to_string(result.phases[n]) + " mean=" + fixed(mean, 4);
    if (gt) {
      const MetricReport r = stage("metrics", [&] { return compute_metrics(d, gt->disparity, gt->valid); });
      entry["metrics"] = to_json(r);
      line += " epe=" + fixed(r.epe, 4);
    }
    iterations.push_back(entry);
    outcome.log.push_back(line);
  }

  json outputs = json::object();
  stage("write outputs", [&] {
    fs::create_directories(opts.out_dir);
    const Tensor& final_map = result.full_res.back();
    const fs::path pfm = opts.out_dir / "disparity.pfm";
    write_file(pfm, write_pfm(final_map));
    outputs["disparity_pfm"] = pfm.string();
    const float peak = *std::max_element(final_map.values().begin(), final_map.values().end());
    if (peak <= 65535.0f / 256.0f) {
      const fs::path png = opts.out_dir / "disparity.png";
      write_file(png, write_disp_png16(final_map));
      outputs["disparity_png16"] = png.string();
    } else {
      outcome.log.push_back("disparity exceeds the 16-bit PNG range; wrote PFM only");
    }
    if (opts.save_iterations) {
      json per_iter = json::array();
      for (std::size_t n = 0; n < result.full_res.size(); ++n) {
        std::ostringstream name;
        name << "iter_" << std::setw(3) << std::setfill('0') << n + 1 << ".pfm";
        const fs::path p = opts.out_dir / name.str();
        write_file(p, write_pfm(result.full_res[n]));
        per_iter.push_back(p.string());
      }
      outputs["iterations"] = per_iter;
    }
  });

  json inputs = {{"left", opts.left}, {"right", opts.right}};
  if (!opts.depth.empty()) inputs["depth"] = opts.depth;
  if (!opts.gt.empty()) inputs["gt"] = opts.gt;
  if (!opts.weights.empty()) inputs["weights"] = opts.weights;

  outcome.manifest = {{"command", "infer"},
                      {"config", config_to_json(cfg, opts.seed, opts.mode)},
                      {"inputs", inputs},
                      {"weights", weight_info},
                      {"outputs", outputs},
                      {"iterations", iterations}};
  stage("write manifest", [&] {
    const std::string text = outcome.manifest.dump(2) + "\n";
    write_file(opts.out_dir / "manifest.json", Bytes(text.begin(), text.end()));
  });
  return outcome;
}

// ---------------------------------------------------------------------------
// Argument parsing shared by all commands

inline std::vector<std::size_t> parse_index_list(const std::string& text, std::size_t count, const char* what) {
  std::vector<std::size_t> out;
  for (float v : parse_float_list(text)) {
    if (v < 0.0f || v != std::floor(v)) throw ConfigError(std::string(what) + " entries must be nonnegative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.size() != count) {
    throw ConfigError(std::string(what) + " '" + text + "' needs " + std::to_string(count) + " values");
  }
  return out;
}


struct EngineFlags {
  int iters = 32, su_iters = 8, radius = 4, levels = 2;
  float eta = 0.5f, eps = 0.05f;
  std::string scale_factors = "0.125,0.25,0.5,0.75,1,1.25,1.5,2";
  std::uint64_t seed = 0;
  std::string mode = "learned";
  std::size_t hidden = 64, feature = 64, aux_channels = 32, corr = 64, disp = 16;
  std::string stems = "32,48";
  bool no_aux = false;
  std::string config_file;
  std::vector<CLI::Option*> options;

  void add_to(CLI::App& app) {
    options = {
        app.add_option("--iters", iters, "Total update iterations (SU + DU)")->capture_default_str(),
        app.add_option("--su-iters", su_iters, "Scale-update iterations run first")->capture_default_str(),
        app.add_option("--radius", radius, "Pyramid lookup radius")->capture_default_str(),
        app.add_option("--levels", levels, "Correlation pyramid levels")->capture_default_str(),
        app.add_option("--eta", eta, "Depth initialisation ratio")->capture_default_str(),
        app.add_option("--eps", eps, "Disparity floor / initialisation bias")->capture_default_str(),
        app.add_option("--scale-factors", scale_factors, "Comma-separated scale lookup factors")
            ->capture_default_str(),
        app.add_option("--seed", seed, "Seed for generated weights")->capture_default_str(),
        app.add_option("--mode", mode, "learned | oracle")->capture_default_str(),
        app.add_option("--hidden", hidden, "GRU hidden channels")->capture_default_str(),
        app.add_option("--feature-channels", feature, "Matching feature channels")->capture_default_str(),
        app.add_option("--stem-channels", stems, "Encoder stem widths, two comma-separated values")
            ->capture_default_str(),
        app.add_option("--aux-channels", aux_channels, "Auxiliary encoder channels")->capture_default_str(),
        app.add_flag("--no-aux", no_aux, "Drop the auxiliary encoder and its fusion"),
        app.add_option("--corr-channels", corr, "Encoded lookup feature channels")->capture_default_str(),
        app.add_option("--disp-channels", disp, "Encoded disparity channels")->capture_default_str(),
    };
    app.add_option("--config", config_file, "JSON config or run manifest");
  }

  // defaults < config file < explicitly given flags
  void resolve(EngineConfig& cfg, std::uint64_t& out_seed, Mode& out_mode) const {
    out_seed = 0;
    out_mode = Mode::Learned;
    if (!config_file.empty()) {
      const Bytes bytes = read_input("config", config_file);
      stage("parse config", [&] {
        try {
          apply_config_json(json::parse(bytes.begin(), bytes.end()), cfg, out_seed, out_mode);
        } catch (const json::exception& e) {
          throw ConfigError(e.what());
        }
      });
    }
    auto given = [&](std::size_t i) { return options[i]->count() > 0; };
    stage("flags", [&] {
      if (given(0)) cfg.total_iters = iters;
      if (given(1)) cfg.su_iters = su_iters;
      if (given(2)) cfg.lookup.radius = radius;
      if (given(3)) cfg.lookup.num_levels = levels;
      if (given(4)) cfg.eta = eta;
      if (given(5)) cfg.eps = eps;
      if (given(6)) cfg.lookup.scale_factors = parse_float_list(scale_factors);
      if (given(7)) out_seed = seed;
      if (given(8)) out_mode = parse_mode(mode);
      if (given(9)) cfg.encoder.hidden_channels = hidden;
      if (given(10)) cfg.encoder.feature_channels = feature;
      if (given(11)) {
        const auto widths = parse_index_list(stems, 2, "--stem-channels");
        cfg.encoder.stem1_channels = widths[0];
        cfg.encoder.stem2_channels = widths[1];
      }
      if (given(12)) cfg.encoder.aux_channels = aux_channels;
      if (given(13)) cfg.encoder.use_aux = false;
      if (given(14)) cfg.corr_channels = corr;
      if (given(15)) cfg.disp_channels = disp;
      cfg.validate();
    });
  }
};

inline json read_manifest_inputs(const std::string& config_file) {
  if (config_file.empty()) return json::object();
  const Bytes bytes = read_input("config", config_file);
  try {
    const json j = json::parse(bytes.begin(), bytes.end());
    return j.contains("inputs") ? j.at("inputs") : json::object();
  } catch (const json::exception& e) {
    throw StageError(kBadInput, "parse config", e.what());
  }
}

// Lines of "left right [depth]"; blank lines and #-comments skipped.
inline std::vector<InferOptions> read_batch(const std::string& path, const InferOptions& base) {
  const Bytes bytes = read_input("batch list", path);
  std::stringstream ss(std::string(bytes.begin(), bytes.end()));
  std::vector<InferOptions> jobs;
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream fields(line);
    InferOptions job = base;
    job.depth.clear();
    job.gt.clear();
    if (!(fields >> job.left >> job.right)) {
      throw StageError(kBadInput, "read batch list", "malformed line '" + line + "'");
    }
    fields >> job.depth;
    job.out_dir = base.out_dir / ("pair_" + std::to_string(jobs.size()));
    jobs.push_back(std::move(job));
  }
  return jobs;
}

inline int report_stage_error(const StageError& e, std::ostream& err) {
  err << "error: " << e.what() << '\n';
  return e.code;
}

inline int cmd_infer(const InferOptions& opts, const std::string& batch, int jobs, std::ostream& out,
                     std::ostream& err) {
  try {
    if (batch.empty()) {
      const PairOutcome outcome = infer_pair(opts);
      for (const auto& line : outcome.log) out << line << '\n';
      out << "wrote " << (opts.out_dir / "manifest.json").string() << '\n';
      return kOk;
    }
    const std::vector<InferOptions> pairs = read_batch(batch, opts);
    std::vector<PairOutcome> outcomes(pairs.size());
    std::vector<std::optional<StageError>> failures(pairs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < pairs.size(); i = next++) {
        try {
          outcomes[i] = infer_pair(pairs[i]);
        } catch (const StageError& e) {
          failures[i] = e;
        } catch (const std::exception& e) {
          failures[i] = StageError(kInternal, "pair " + std::to_string(i), e.what());
        }
      }
    };
    std::vector<std::thread> threads;
    const auto workers = static_cast<std::size_t>(std::max(1, jobs));
    for (std::size_t t = 0; t < std::min(workers, pairs.size()); ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    int code = kOk;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (failures[i]) {
        err << "pair " << i << ": ";
        code = std::max(code, report_stage_error(*failures[i], err));
        continue;
      }
      out << "pair " << i << ":\n";
      for (const auto& line : outcomes[i].log) out << "  " << line << '\n';
    }
    return code;
  } catch (const StageError& e) {
    return report_stage_error(e, err);
  }
}

// ---------------------------------------------------------------------------
// eval

inline int cmd_eval(const std::string& pred_path, const std::string& gt_path, const std::vector<double>& thresholds,
                    const std::string& json_path, std::ostream& out, std::ostream& err) {
  try {
    const Bytes pred_bytes = read_input("prediction", pred_path);
    const Bytes gt_bytes = read_input("ground truth", gt_path);
    const DisparityMap pred = stage("decode prediction", [&] { return read_disparity(pred_bytes); });
    const DisparityMap gt = stage("decode ground truth", [&] { return read_disparity(gt_bytes); });
    const MetricReport report =
        stage("evaluate", [&] { return compute_metrics(pred.disparity, gt.disparity, gt.valid, thresholds); });
    out << to_key_value(report);
    if (!json_path.empty()) {
      stage("write report", [&] {
        const std::string text = to_json(report).dump(2) + "\n";
        write_file(json_path, Bytes(text.begin(), text.end()));
      });
    }
    return kOk;
  } catch (const StageError& e) {
    return report_stage_error(e, err);
  }
}

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
  SceneSpec scene;
  std::vector<PerturbSpec::Region> perturb_regions;  // quarter-res coordinates
  double shift = 0.0;
  double normalization = 1.0;
  fs::path out_dir;
};

inline int cmd_synth(const SynthOptions& opts, std::ostream& out, std::ostream& err) {
  try {
    const StereoSample sample = stage("synthesise", [&] { return synth_scene(opts.scene); });
    stage("write outputs", [&] {
      fs::create_directories(opts.out_dir);
      write_file(opts.out_dir / "left.png", write_png_rgb(sample.left));
      write_file(opts.out_dir / "right.png", write_png_rgb(sample.right));
      write_file(opts.out_dir / "disparity.pfm", write_pfm(sample.disparity, &sample.valid));
    });
    const auto [quarter, quarter_valid] = quarter_ground_truth(sample.disparity, sample.valid);
    stage("write outputs", [&] {
      write_file(opts.out_dir / "disparity_quarter.pfm", write_pfm(quarter, &quarter_valid));
    });
    if (!opts.perturb_regions.empty()) {
      PerturbSpec spec;
      spec.regions = opts.perturb_regions;
      spec.shift = opts.shift;
      spec.normalization = opts.normalization;
      const DepthEstimate depth = stage("perturb depth", [&] { return perturb_depth(quarter, spec); });
      stage("write outputs", [&] { write_file(opts.out_dir / "depth.pfm", write_pfm(depth.z)); });
    }
    std::size_t valid = count_valid(sample.valid);
    out << "synthesised " << opts.scene.height << "x" << opts.scene.width << " pair, " << valid << "/"
        << sample.valid.size() << " valid pixels -> " << opts.out_dir.string() << '\n';
    return kOk;
  } catch (const StageError& e) {
    return report_stage_error(e, err);
  }
}

// ---------------------------------------------------------------------------
// depth-analyze

inline int cmd_depth_analyze(const std::string& depth_path, const std::string& gt_path, double clamp_min,
                             std::ostream& out, std::ostream& err) {
  try {
    const Bytes depth_bytes = read_input("depth", depth_path);
    const Bytes gt_bytes = read_input("ground truth", gt_path);
    const DisparityMap depth = stage("decode depth", [&] { return read_disparity(depth_bytes); });
    const DisparityMap gt = stage("decode ground truth", [&] { return read_disparity(gt_bytes); });
    if (depth.disparity.shape() != gt.disparity.shape()) {
      throw StageError(kBadInput, "analyze", "depth " + to_string(depth.disparity.shape()) +
                                                 " and ground truth " + to_string(gt.disparity.shape()) +
                                                 " differ in size");
    }
    Mask mask = gt.valid;
    for (std::size_t p = 0; p < mask.size(); ++p) mask[p] = mask[p] && depth.valid[p];
    const TensorD z = tensor_cast<double>(depth.disparity);
    const TensorD d_gt = tensor_cast<double>(gt.disparity);
    const AffineFit fit = stage("affine alignment", [&] {
      if (count_valid(mask) == 0) throw EmptyMaskError("no valid pixels");
      return affine_align(z, d_gt, mask);
    });
    const auto ratio = stage("ratio map", [&] { return ratio_map_std(d_gt, apply_affine(z, fit), mask, clamp_min); });
    out << "EPE\tSTD\n" << fixed(fit.epe, 2) << '\t' << fixed(ratio.std, 2) << '\n';
    out << "scale=" << fit.scale << " shift=" << fit.shift << (fit.degenerate ? " degenerate=1" : "") << '\n';
    return kOk;
  } catch (const StageError& e) {
    return report_stage_error(e, err);
  }
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Monocular-depth-initialised recurrent stereo matching"};
  app.require_subcommand(1);

  // infer
  auto* infer = app.add_subcommand("infer", "Estimate disparity for a rectified pair");
  InferOptions infer_opts;
  EngineFlags engine_flags;
  std::string out_dir, batch;
  int jobs = 1;
  infer->add_option("--left", infer_opts.left, "Left image (PNG)");
  infer->add_option("--right", infer_opts.right, "Right image (PNG)");
  infer->add_option("--depth", infer_opts.depth, "Relative inverse depth (PFM / PNG16), quarter or full resolution");
  infer->add_option("--gt", infer_opts.gt, "Ground truth for per-iteration metrics");
  infer->add_option("--weights", infer_opts.weights, "Weight bundle; generated from --seed when omitted");
  infer->add_option("--out", out_dir, "Output directory (default $DEFOM_OUT_DIR or .)");
  infer->add_flag("--save-iters", infer_opts.save_iterations, "Write every iteration's full-res map");
  infer->add_option("--batch", batch, "File listing 'left right [depth]' per line");
  infer->add_option("--jobs", jobs, "Parallel pairs in --batch mode")->capture_default_str();
  engine_flags.add_to(*infer);

  // eval
  auto* eval = app.add_subcommand("eval", "Compare a disparity map with ground truth");
  std::string pred_path, gt_path, json_path, thresholds = "1,2,3";
  eval->add_option("--pred", pred_path, "Predicted disparity (PFM / PNG16)")->required();
  eval->add_option("--gt", gt_path, "Ground-truth disparity (PFM / PNG16)")->required();
  eval->add_option("--thresholds", thresholds, "Comma-separated Bad-N thresholds")->capture_default_str();
  eval->add_option("--json", json_path, "Also write the report as JSON");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a layered stereo pair with ground truth");
  SynthOptions synth_opts;
  std::vector<std::string> layers, perturbs;
  std::uint64_t synth_seed = 0;
  synth->add_option("--height", synth_opts.scene.height)->capture_default_str();
  synth->add_option("--width", synth_opts.scene.width)->capture_default_str();
  synth->add_option("--bg-disp", synth_opts.scene.background_disparity, "Background disparity")->capture_default_str();
  synth->add_option("--layer", layers, "x0,y0,x1,y1,disparity (repeatable)");
  synth->add_option("--perturb", perturbs, "Quarter-res region x0,y0,x1,y1,scale for depth.pfm (repeatable)");
  synth->add_option("--shift", synth_opts.shift, "Depth perturbation shift")->capture_default_str();
  synth->add_option("--normalization", synth_opts.normalization, "Depth output rescale")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Texture seed")->capture_default_str();
  synth->add_option("--out", out_dir, "Output directory (default $DEFOM_OUT_DIR or .)");

  // depth-analyze
  auto* analyze = app.add_subcommand("depth-analyze", "Affine-align relative depth to ground truth; report EPE/STD");
  std::string depth_path;
  double clamp_min = 0.05;
  analyze->add_option("--depth", depth_path, "Relative inverse depth (PFM / PNG16)")->required();
  analyze->add_option("--gt", gt_path, "Ground-truth disparity (PFM / PNG16)")->required();
  analyze->add_option("--clamp-min", clamp_min, "Lower clamp on the aligned map")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kBadInput;
  }

  const fs::path out_path = out_dir.empty() ? default_out_dir() : fs::path(out_dir);
  try {
    if (*infer) {
      infer_opts.out_dir = out_path;
      engine_flags.resolve(infer_opts.engine, infer_opts.seed, infer_opts.mode);
      const json inputs = read_manifest_inputs(engine_flags.config_file);
      auto fallback = [&](std::string& field, const char* key) {
        if (field.empty() && inputs.contains(key)) field = inputs.at(key).get<std::string>();
      };
      fallback(infer_opts.left, "left");
      fallback(infer_opts.right, "right");
      fallback(infer_opts.depth, "depth");
      fallback(infer_opts.gt, "gt");
      fallback(infer_opts.weights, "weights");
      if (batch.empty() && (infer_opts.left.empty() || infer_opts.right.empty())) {
        throw StageError(kBadInput, "infer", "--left and --right are required");
      }
      return cmd_infer(infer_opts, batch, jobs, out, err);
    }
    if (*eval) {
      const auto list = stage("flags", [&] { return to_doubles(parse_float_list(thresholds)); });
      return cmd_eval(pred_path, gt_path, list, json_path, out, err);
    }
    if (*synth) {
      synth_opts.out_dir = out_path;
      stage("flags", [&] {
        Rng rng(synth_seed);
        synth_opts.scene.background_seed = rng.next();
        for (const auto& spec : layers) {
          const auto v = parse_float_list(spec);
          if (v.size() != 5) throw ConfigError("--layer '" + spec + "' needs x0,y0,x1,y1,disparity");
          const auto box = parse_index_list(spec.substr(0, spec.rfind(',')), 4, "--layer");
          synth_opts.scene.layers.push_back({box[0], box[1], box[2], box[3], static_cast<int>(v[4]), rng.next()});
        }
        for (const auto& spec : perturbs) {
          const auto v = parse_float_list(spec);
          if (v.size() != 5) throw ConfigError("--perturb '" + spec + "' needs x0,y0,x1,y1,scale");
          const auto box = parse_index_list(spec.substr(0, spec.rfind(',')), 4, "--perturb");
          synth_opts.perturb_regions.push_back({box[0], box[1], box[2], box[3], static_cast<double>(v[4])});
        }
      });
      return cmd_synth(synth_opts, out, err);
    }
    if (*analyze) return cmd_depth_analyze(depth_path, gt_path, clamp_min, out, err);
  } catch (const StageError& e) {
    return report_stage_error(e, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}

}  // namespace defom::cli
