#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "attnet/checkpoint.hpp"
#include "attnet/config.hpp"
#include "attnet/errors.hpp"
#include "attnet/frontend.hpp"
#include "attnet/gradcheck.hpp"
#include "attnet/metrics.hpp"
#include "attnet/model.hpp"
#include "attnet/pgm.hpp"
#include "attnet/random.hpp"
#include "attnet/taskgen.hpp"
#include "attnet/trainer.hpp"

namespace attnet {

// Further sub-seed streams (see kModelInitStream).
inline constexpr std::uint64_t kTrainDataStream = 3;
inline constexpr std::uint64_t kEvalDataStream = 4;
inline constexpr std::uint64_t kGradcheckStream = 5;

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitConfig = 2, kExitNumeric = 3 };

struct CommandArgs {
  RunConfig config;  // resolved
  std::string out_dir = ".";
  std::optional<std::string> checkpoint;
  std::optional<std::string> human_csv;
  std::optional<int> display_id;
};

namespace detail {

inline std::filesystem::path prepare_out(const std::string& dir) {
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

inline void echo_config(const std::filesystem::path& out, const RunConfig& cfg) {
  write_text(out / "config.txt", config_text(cfg));
}

inline std::string display_file_name(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "display_%05d.pgm", id);
  return buf;
}

inline std::vector<SearchDisplay> load_manifest_dir(const std::string& dir) {
  const std::filesystem::path root(dir);
  std::ifstream in(root / "manifest.csv");
  if (!in) throw ConfigError("cannot open " + (root / "manifest.csv").string());
  std::vector<SearchDisplay> out;
  for (const auto& e : parse_manifest_csv(in)) {
    SearchDisplay d;
    d.id = e.display_id;
    d.label = e.label;
    d.target = e.target;
    d.image = load_pgm((root / e.path).string());
    out.push_back(std::move(d));
  }
  return out;
}

inline std::vector<Trial> to_trials(const std::vector<SearchDisplay>& displays, const FrontendParams& frontend) {
  std::vector<Trial> out;
  out.reserve(displays.size());
  for (const auto& d : displays) out.push_back({extract_features(d.image, frontend), d.label});
  return out;
}

inline std::string train_log_csv(const std::vector<EpochLog>& log) {
  std::string s = "epoch,train_loss,train_acc,val_acc,mean_reward,baseline\n";
  for (const auto& r : log) {
    s += std::to_string(r.epoch) + "," + format_real(r.train_loss) + "," + format_real(r.train_acc) + "," +
         format_real(r.val_acc) + "," + format_real(r.mean_reward) + "," + format_real(r.baseline) + "\n";
  }
  return s;
}

// Priority map as PPC2 sees it at one fixation: cells outside the dorsal
// window or already inhibited are shown at the admissible minimum.
inline std::vector<double> visible_priority(const PriorityMap& p, const InhibitionMap& inh) {
  const CellMask ex = excluded_cells(p, inh);
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ex.size(); ++i) {
    if (!ex[i]) lo = std::min(lo, p.values[i]);
  }
  if (!std::isfinite(lo)) lo = 0.0;
  std::vector<double> out(p.values.data().begin(), p.values.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (ex[i]) out[i] = lo;
  }
  return out;
}

}  // namespace detail

// Training displays for a config: the manifest in data_dir, or generated.
inline std::vector<SearchDisplay> training_displays(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return detail::load_manifest_dir(cfg.data_dir);
  Rng rng(derive_seed(cfg.seed, kTrainDataStream));
  return make_dataset(rng, cfg.train_size, cfg.display_spec());
}

// Held-out split, drawn from its own seed stream.
inline std::vector<SearchDisplay> generated_validation(const RunConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, kEvalDataStream));
  return make_dataset(rng, cfg.val_size, cfg.display_spec());
}

// Displays for eval/rollout: the manifest in data_dir, or the held-out split.
inline std::vector<SearchDisplay> evaluation_displays(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return detail::load_manifest_dir(cfg.data_dir);
  return generated_validation(cfg);
}

// Writes the training split as PGMs plus manifest.csv.
inline int cmd_gen_data(const CommandArgs& args, std::ostream& log) {
  const auto out = detail::prepare_out(args.out_dir);
  RunConfig cfg = args.config;
  cfg.data_dir.clear();
  const auto displays = training_displays(cfg);
  std::vector<ManifestEntry> entries;
  for (const auto& d : displays) {
    const std::string name = detail::display_file_name(d.id);
    export_pgm(d.image, (out / name).string());
    entries.push_back({d.id, d.label, d.target, name});
  }
  detail::write_text(out / "manifest.csv", manifest_csv(entries));
  detail::echo_config(out, args.config);
  log << "wrote " << displays.size() << " displays to " << out.string() << "\n";
  return kExitOk;
}

struct TrainOutcome {
  TrainResult result;
  FrontendParams frontend;
};

inline TrainOutcome run_training(const RunConfig& cfg, const Checkpoint* resume = nullptr,
                                 const std::function<void(const EpochLog&)>& on_epoch = {}) {
  FrontendParams frontend = resume ? frontend_from_checkpoint(*resume, cfg.frontend_config())
                                   : build_frontend(cfg.frontend_seed, cfg.frontend_config());
  const auto train_trials = detail::to_trials(training_displays(cfg), frontend);
  const auto val_trials = detail::to_trials(generated_validation(cfg), frontend);
  TrainResult r = train(cfg.trainer_config(), cfg.model_config(), frontend, train_trials, val_trials, resume, on_epoch);
  return {std::move(r), std::move(frontend)};
}

inline int cmd_train(const CommandArgs& args, std::ostream& log) {
  const auto out = detail::prepare_out(args.out_dir);
  detail::echo_config(out, args.config);
  std::optional<Checkpoint> resume;
  if (args.checkpoint) resume = load_checkpoint(*args.checkpoint);
  auto outcome = run_training(args.config, resume ? &*resume : nullptr, [&](const EpochLog& r) {
    log << "epoch " << r.epoch << " loss " << r.train_loss << " train_acc " << r.train_acc << " val_acc " << r.val_acc
        << " baseline " << r.baseline << "\n";
  });
  save_checkpoint(outcome.result.checkpoint, (out / "checkpoint.bin").string());
  detail::write_text(out / "train_log.csv", detail::train_log_csv(outcome.result.log));
  log << "wrote " << (out / "checkpoint.bin").string() << "\n";
  return kExitOk;
}

// Parameters for eval/rollout: from a checkpoint, or the untrained
// initialization the same seed would start training from.
struct LoadedModel {
  FrontendParams frontend;
  ModelParams params;
};

inline LoadedModel load_model(const RunConfig& cfg, const std::optional<std::string>& checkpoint) {
  if (checkpoint) {
    const Checkpoint ck = load_checkpoint(*checkpoint);
    return {frontend_from_checkpoint(ck, cfg.frontend_config()), model_from_checkpoint(ck, cfg.model_config())};
  }
  return {build_frontend(cfg.frontend_seed, cfg.frontend_config()),
          ModelParams::init(derive_seed(cfg.seed, kModelInitStream), cfg.model_config())};
}

inline EpisodeOptions greedy_options(const RunConfig& cfg) {
  EpisodeOptions opt;
  opt.mode = SelectMode::argmax;
  opt.temperature = cfg.temperature;
  opt.dorsal_window = cfg.dorsal_window;
  return opt;
}

struct EvalResult {
  double accuracy = 0.0;
  GuidanceCurve guidance;
  std::optional<GuidanceCurve> human_guidance;
  std::vector<EpisodeRecord> episodes;
};

// Argmax rollouts over the evaluation displays.
inline EvalResult evaluate_model(const RunConfig& cfg, const LoadedModel& model,
                                 const std::vector<SearchDisplay>& displays) {
  EvalResult r;
  const EpisodeOptions opt = greedy_options(cfg);
  Rng unused(0);
  std::vector<TrialFixations> present;
  std::size_t correct = 0;
  for (const auto& d : displays) {
    Tape tape = Tape::inference();
    EpisodeRecord ep = run_episode(tape, d.image, model.frontend, model.params, opt, unused);
    score_episode(ep, d.label);
    correct += ep.reward > 0.5 ? 1 : 0;
    if (d.target) present.push_back({ep.locations(), *d.target});
    r.episodes.push_back(std::move(ep));
  }
  r.accuracy = displays.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(displays.size());
  r.guidance = guidance_curve(present, cfg.geometry());
  return r;
}

inline int cmd_eval(const CommandArgs& args, std::ostream& log) {
  const RunConfig& cfg = args.config;
  const auto out = detail::prepare_out(args.out_dir);
  detail::echo_config(out, cfg);
  const LoadedModel model = load_model(cfg, args.checkpoint);
  const auto displays = evaluation_displays(cfg);
  EvalResult r = evaluate_model(cfg, model, displays);
  const std::size_t h = cfg.map_size(), w = cfg.map_size();

  detail::write_text(out / "guidance.csv", guidance_csv(r.guidance));
  std::vector<TraceRow> rows;
  std::vector<std::vector<Location>> traces;
  for (std::size_t i = 0; i < displays.size(); ++i) {
    rows.push_back({displays[i].id, &r.episodes[i]});
    traces.push_back(r.episodes[i].locations());
  }
  detail::write_text(out / "traces.csv", trace_csv(rows));
  const DensityMap density = fixation_density(traces, h, w, cfg.density_sigma);
  export_pgm_heatmap(density.values, h, w, (out / "density.pgm").string());

  // Mean first-fixation priority over all displays.
  std::vector<double> mean_priority(h * w, 0.0);
  for (const auto& d : displays) {
    Tape tape = Tape::inference();
    const V4Map v4 = extract_features(d.image, model.frontend);
    const auto p = finite_priority(ppc1_priority(tape, v4, map_center(h, w), model.params, cfg.dorsal_window));
    for (std::size_t i = 0; i < p.size(); ++i) mean_priority[i] += p[i] / static_cast<double>(displays.size());
  }
  export_pgm_heatmap(mean_priority, h, w, (out / "priority.pgm").string());

  nlohmann::ordered_json summary;
  summary["displays"] = displays.size();
  summary["accuracy"] = r.accuracy;
  summary["present_trials"] = r.guidance.trials;
  summary["cumulative"] = r.guidance.cumulative;
  summary["per_fixation"] = r.guidance.per_fixation;

  if (args.human_csv) {
    const auto paths = load_scanpaths_csv(*args.human_csv, static_cast<int>(cfg.image_size),
                                          static_cast<int>(cfg.image_size));
    std::map<int, BBox> targets;
    for (const auto& d : displays) {
      if (d.target) targets[d.id] = *d.target;
    }
    const MapGeometry g = cfg.geometry();
    std::vector<std::vector<Location>> human_traces;
    for (const auto& p : paths) {
      std::vector<Location> t;
      for (const auto& f : p.fixations) t.push_back(bin_pixel(f, g));
      human_traces.push_back(std::move(t));
    }
    const auto trials = trials_from_scanpaths(paths, targets, g);
    if (!trials.empty()) {
      r.human_guidance = guidance_curve(trials, g);
      detail::write_text(out / "human_guidance.csv", guidance_csv(*r.human_guidance));
      summary["human_cumulative"] = r.human_guidance->cumulative;
    } else {
      log << "no human scanpaths fall on target-present displays; human guidance skipped\n";
    }
    const DensityMap hd = fixation_density(human_traces, h, w, cfg.density_sigma);
    export_pgm_heatmap(hd.values, h, w, (out / "human_density.pgm").string());
  }
  detail::write_text(out / "summary.json", summary.dump(2) + "\n");

  log << "accuracy " << r.accuracy << " cumulative guidance";
  for (double c : r.guidance.cumulative) log << " " << c;
  log << "\n";
  return kExitOk;
}

struct RolloutStep {
  Location loc;
  Location window;
  double ventral_logit = 0.0;
  std::vector<double> priority;  // visible priority at this fixation
};

// Argmax episode on one display, with the priority map PPC2 faces after each
// fixation. The first map is computed at the forced center fixation, before
// any policy selection.
inline std::vector<RolloutStep> rollout_steps(const RunConfig& cfg, const LoadedModel& model,
                                              const SearchDisplay& display) {
  const V4Map v4 = extract_features(display.image, model.frontend);
  Rng unused(0);
  Tape tape = Tape::inference();
  const EpisodeRecord ep = run_episode(tape, v4, model.params, greedy_options(cfg), unused);
  InhibitionMap inh(v4.height, v4.width);
  std::vector<RolloutStep> steps;
  for (const auto& f : ep.fixations) {
    inh.inhibit_window(f.loc);
    Tape t = Tape::inference();
    const PriorityMap p = ppc1_priority(t, v4, f.loc, model.params, cfg.dorsal_window);
    steps.push_back({f.loc, routed_window_origin(f.loc, v4.height, v4.width), f.ventral_logit,
                     detail::visible_priority(p, inh)});
  }
  return steps;
}

inline int cmd_rollout(const CommandArgs& args, std::ostream& log) {
  const RunConfig& cfg = args.config;
  if (!args.display_id) throw ConfigError("rollout needs --display ID");
  const auto displays = evaluation_displays(cfg);
  auto it = std::find_if(displays.begin(), displays.end(), [&](const auto& d) { return d.id == *args.display_id; });
  if (it == displays.end()) throw ConfigError("unknown display id " + std::to_string(*args.display_id));
  const auto out = detail::prepare_out(args.out_dir);
  detail::echo_config(out, cfg);
  const LoadedModel model = load_model(cfg, args.checkpoint);
  const auto steps = rollout_steps(cfg, model, *it);
  const std::size_t n = cfg.map_size();
  std::string csv = "display_id,fix_index,row,col,window_row,window_col,ventral_logit\n";
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const auto& s = steps[t];
    export_pgm_heatmap(s.priority, n, n, (out / ("priority_fix" + std::to_string(t + 1) + ".pgm")).string());
    csv += std::to_string(it->id) + "," + std::to_string(t + 1) + "," + std::to_string(s.loc.row) + "," +
           std::to_string(s.loc.col) + "," + std::to_string(s.window.row) + "," + std::to_string(s.window.col) + "," +
           format_real(s.ventral_logit) + "\n";
  }
  detail::write_text(out / "rollout.csv", csv);
  export_pgm(it->image, (out / "display.pgm").string());
  log << "display " << it->id << " (" << label_name(it->label) << "): " << steps.size() << " fixations\n";
  return kExitOk;
}

// Finite-difference check of the full episode loss w.r.t. every trainable
// block. Selections are sampled once, then frozen by replay; the reward is
// held at its sampled value so the loss is smooth in the parameters.
inline GradcheckReport model_gradcheck(const RunConfig& cfg) {
  const FrontendParams frontend = build_frontend(cfg.frontend_seed, cfg.frontend_config());
  ModelParams params = ModelParams::init(derive_seed(cfg.seed, kModelInitStream), cfg.model_config());
  Rng rng(derive_seed(cfg.seed, kGradcheckStream));

  // Small maps can run out of admissible centers (and small images out of
  // room for patterns); draw until an episode completes.
  constexpr int kMaxDraws = 100;
  for (int draw = 0; draw < kMaxDraws; ++draw) {
    const Label label = draw % 2 == 0 ? Label::present : Label::absent;
    SearchDisplay display;
    try {
      display = generate_display(rng, cfg.display_spec(), label);
    } catch (const PlacementError&) {
      continue;
    }
    const V4Map v4 = extract_features(display.image, frontend);
    EpisodeOptions opt;
    opt.mode = SelectMode::sample;
    opt.temperature = cfg.temperature;
    opt.dorsal_window = cfg.dorsal_window;
    opt.track_entropy = cfg.entropy_weight != 0.0;
    EpisodeRecord sampled;
    try {
      Tape tape = Tape::inference();
      sampled = run_episode(tape, v4, params, opt, rng);
    } catch (const ExhaustedLocationsError&) {
      continue;
    }
    score_episode(sampled, label);
    opt.mode = SelectMode::replay;
    opt.replay = sampled.locations();
    const double reward = sampled.reward;
    auto loss_fn = [&](Tape& tape) {
      Rng none(0);
      EpisodeRecord ep = run_episode(tape, v4, params, opt, none);
      ep.label = label;
      ep.reward = reward;
      return compute_loss(tape, ep, kInitialBaseline, cfg.policy_weight, cfg.entropy_weight);
    };
    GradcheckOptions gopt;
    gopt.h = cfg.gradcheck_h;
    gopt.tolerance = cfg.gradcheck_tolerance;
    gopt.denominator_floor = cfg.gradcheck_floor;
    std::function<void(Tape&)> configure;
    if (cfg.gradcheck_inject_fault) configure = [](Tape& t) { t.corrupt_sigmoid_gradient(1.01); };
    return gradcheck(loss_fn, params.blocks(), gopt, configure);
  }
  throw ConfigError("gradcheck: every sampled episode exhausted the admissible locations; enlarge the map");
}

inline std::string gradcheck_text(const GradcheckReport& r) {
  std::ostringstream os;
  for (const auto& b : r.blocks) {
    os << b.name << " coords " << b.coordinates << " max_rel_err " << format_real(b.max_rel_error) << " "
       << (b.passed ? "PASS" : "FAIL") << "\n";
  }
  os << "gradcheck " << (r.passed ? "PASS" : "FAIL") << " max_rel_err " << format_real(r.max_rel_error)
     << " kink_shifts " << r.kink_shifts << "\n";
  return os.str();
}

inline int cmd_gradcheck(const CommandArgs& args, std::ostream& log) {
  const GradcheckReport r = model_gradcheck(args.config);
  const std::string text = gradcheck_text(r);
  log << text;
  const auto out = detail::prepare_out(args.out_dir);
  detail::echo_config(out, args.config);
  detail::write_text(out / "gradcheck.txt", text);
  return r.passed ? kExitOk : kExitCheckFailed;
}

// Runs a subcommand and maps failures onto exit codes.
inline int run_command(const std::string& name, const CommandArgs& args, std::ostream& log, std::ostream& err) {
  try {
    if (name == "gen-data") return cmd_gen_data(args, log);
    if (name == "train") return cmd_train(args, log);
    if (name == "eval") return cmd_eval(args, log);
    if (name == "rollout") return cmd_rollout(args, log);
    if (name == "gradcheck") return cmd_gradcheck(args, log);
    err << "unknown command " << name << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric abort: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ExhaustedLocationsError& e) {
    err << "config error: " << e.what() << " (maps smaller than 9x9 can run out of fixation centers)\n";
    return kExitConfig;
  } catch (const PlacementError& e) {
    err << "placement error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DimensionError& e) {
    err << "shape error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
}

}  // namespace attnet
