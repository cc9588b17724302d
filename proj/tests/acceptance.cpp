// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
// failure.

#include <chrono>
#include <cstdio>
#include <functional>
#include <sstream>

#include "test_util.hpp"

namespace attnet {
namespace {

namespace fs = std::filesystem;

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

RunConfig source_config(const std::string& name) {
  RunConfig cfg = load_config(std::string(ATTNET_SOURCE_DIR) + "/configs/" + name);
  cfg.resolve();
  return cfg;
}

Verdict a1_gradient_integrity() {
  Verdict v;
  const RunConfig cfg = source_config("tiny.cfg");
  v.require(cfg.map_size() == 6 && cfg.channels == 2, "tiny config is 6x6 with C=2");
  v.require(cfg.gradcheck_h == 1e-5, "h = 1e-5");
  const auto t0 = std::chrono::steady_clock::now();
  const GradcheckReport r = model_gradcheck(cfg);
  const double elapsed = seconds_since(t0);
  v.require(r.blocks.size() == 8, "all 8 trainable blocks checked");
  for (const auto& b : r.blocks) v.require(b.max_rel_error < 1e-5, b.name + " rel err " + fmt(b.max_rel_error));
  v.require(elapsed < 60.0, "runtime " + fmt(elapsed) + " s < 60 s");
  v.note("max rel err " + fmt(r.max_rel_error) + ", " + fmt(elapsed) + " s");
  return v;
}

Verdict a2_selection_semantics() {
  Verdict v;
  Rng rng(2);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Tensor logits = testing::random_tensor(rng, {14, 14}, -30.0, 30.0);
    CellMask mask(196, 0);
    for (auto& m : mask) m = rng.below(4) == 0;
    mask[rng.below(196)] = 0;
    const auto p = Tape::softmax_values(logits, mask, rng.uniform(0.1, 5.0));
    double sum = 0.0;
    for (std::size_t k = 0; k < 196; ++k) {
      sum += p[k];
      if (mask[k] && p[k] != 0.0) v.require(false, "excluded cell has mass");
    }
    worst = std::max(worst, std::abs(sum - 1.0));
  }
  v.require(worst <= 1e-12, "softmax sums within 1e-12 (worst " + fmt(worst) + ")");

  auto priority = [](std::vector<double> values) {
    PriorityMap p;
    p.values = Tensor::from({14, 14}, std::move(values));
    p.height = p.width = 14;
    p.outside.assign(196, 0);
    return p;
  };
  int argmax_violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto values = testing::uniform_values(rng, 196, -3.0, 3.0);
    std::vector<double> cubed(values), affine(values);
    const double a = rng.uniform(0.01, 100.0), b = rng.uniform(-50.0, 50.0);
    for (double& x : cubed) x = x * x * x + std::exp(x);
    for (double& x : affine) x = a * x + b;
    InhibitionMap inh(14, 14);
    inh.inhibit_window({rng.below(14), rng.below(14)});
    Tape tape = Tape::inference();
    const Location l0 = ppc2_select(tape, priority(values), inh, SelectMode::argmax, 1.0, rng).loc;
    argmax_violations += !(ppc2_select(tape, priority(cubed), inh, SelectMode::argmax, 1.0, rng).loc == l0);
    argmax_violations += !(ppc2_select(tape, priority(affine), inh, SelectMode::argmax, 1.0, rng).loc == l0);
  }
  v.require(argmax_violations == 0, "argmax invariance (" + std::to_string(argmax_violations) + " violations)");

  int revisits = 0;
  for (int i = 0; i < 1000; ++i) {
    ModelParams params = ModelParams::init(rng.next_u64(), {});
    for (auto& blk : params.blocks())
      for (double& x : blk.tensor.mutable_data()) x = rng.uniform(-0.5, 0.5);
    EpisodeOptions opt;
    opt.mode = i % 2 ? SelectMode::sample : SelectMode::argmax;
    Tape tape = Tape::inference();
    const auto locs = run_episode(tape, testing::random_v4(rng, 14, 14, 16), params, opt, rng).locations();
    for (std::size_t t = 1; t < locs.size(); ++t)
      for (std::size_t s = 0; s < t; ++s) {
        const Location o = routed_window_origin(locs[s], 14, 14);
        revisits += locs[t].row >= o.row && locs[t].row < o.row + 4 && locs[t].col >= o.col && locs[t].col < o.col + 4;
      }
  }
  v.require(revisits == 0, "no revisits over 1000 rollouts (" + std::to_string(revisits) + ")");

  std::vector<double> ties(196, 0.0);
  ties[1 * 14 + 1] = ties[2 * 14 + 2] = ties[9 * 14 + 3] = 1.0;
  bool tie_ok = true;
  for (int i = 0; i < 100; ++i) {
    Tape tape = Tape::inference();
    tie_ok = tie_ok &&
             ppc2_select(tape, priority(ties), InhibitionMap(14, 14), SelectMode::argmax, 1.0, rng).loc == Location{1, 1};
  }
  v.require(tie_ok, "ties resolve to the lowest row-major index");
  v.note("softmax worst " + fmt(worst) + ", 0 argmax violations, 0 revisits");
  return v;
}

// Holds the first default training run for reuse by A5.
struct DefaultRun {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  double seconds = 0.0;
};

Verdict a3_learning_to_attend(const RunConfig& cfg, DefaultRun& run) {
  Verdict v;
  v.require(cfg.train_size == 2000 && cfg.epochs == 50 && cfg.seed == 1 && cfg.val_size == 200,
            "default config (2000 displays, 50 epochs, seed 1, 200 held out)");
  const auto t0 = std::chrono::steady_clock::now();
  TrainOutcome out = run_training(cfg);
  run.seconds = seconds_since(t0);
  run.checkpoint = out.result.checkpoint;
  run.log = out.result.log;

  const auto displays = evaluation_displays(cfg);
  const LoadedModel trained{out.frontend, out.result.params};
  const LoadedModel untrained = load_model(cfg, std::nullopt);
  const EvalResult t = evaluate_model(cfg, trained, displays);
  const EvalResult u = evaluate_model(cfg, untrained, displays);
  const double tc3 = t.guidance.cumulative[2], uc3 = u.guidance.cumulative[2];
  v.require(displays.size() == 200, "200 held-out displays");
  v.require(t.accuracy >= 0.85, "accuracy " + fmt(t.accuracy) + " >= 0.85");
  v.require(tc3 >= 2.0 * uc3, "trained cum[3] " + fmt(tc3) + " >= 2 x untrained " + fmt(uc3));
  v.require(uc3 >= 0.05 && uc3 <= 0.5, "untrained cum[3] " + fmt(uc3) + " in [0.05, 0.5]");
  v.require(run.seconds < 600.0, "training " + fmt(run.seconds) + " s < 600 s");
  v.note("accuracy " + fmt(t.accuracy) + ", cum[3] trained " + fmt(tc3) + " vs untrained " + fmt(uc3) + ", train " +
         fmt(run.seconds) + " s");
  return v;
}

// Independent scan over pixel rectangles; see the metrics unit tests.
Verdict a4_guidance_oracle() {
  Verdict v;
  Rng rng(4);
  const MapGeometry g;
  std::vector<EpisodeRecord> episodes;
  std::vector<BBox> targets;
  std::array<int, 5> first{};
  for (int i = 0; i < 200; ++i) {
    EpisodeRecord ep;
    const BBox b{rng.between(0, 48), rng.between(0, 48), rng.between(1, 8), rng.between(1, 8)};
    int hit = -1;
    for (int t = 0; t < 5; ++t) {
      const Location loc{rng.below(14), rng.below(14)};
      ep.fixations.push_back({loc, std::nullopt, 0.0});
      const long r0 = std::clamp(static_cast<long>(loc.row) - 1, 0L, 10L) * 4;
      const long c0 = std::clamp(static_cast<long>(loc.col) - 1, 0L, 10L) * 4;
      const bool meets = r0 < b.y + b.h && b.y < r0 + 16 && c0 < b.x + b.w && b.x < c0 + 16;
      if (meets && hit < 0) hit = t;
    }
    if (hit >= 0) ++first[hit];
    episodes.push_back(ep);
    targets.push_back(b);
  }
  const GuidanceCurve c = guidance_curve(trials_from_episodes(episodes, targets), g);
  int running = 0;
  for (int t = 0; t < 5; ++t) {
    running += first[t];
    v.require(c.per_fixation[t] == first[t] / 200.0, "per_fixation[" + std::to_string(t + 1) + "] exact");
    v.require(c.cumulative[t] == running / 200.0, "cumulative[" + std::to_string(t + 1) + "] exact");
  }
  v.note("200 episodes, cumulative[5] " + fmt(c.cumulative[4]));
  return v;
}

std::string log_text(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  for (const auto& r : log) {
    os << format_real(r.train_loss) << ',' << format_real(r.train_acc) << ',' << format_real(r.val_acc) << ','
       << format_real(r.mean_reward) << ',' << format_real(r.baseline) << '\n';
  }
  return os.str();
}

Verdict a5_determinism(const RunConfig& cfg, const DefaultRun& first) {
  Verdict v;
  const TrainOutcome second = run_training(cfg);
  const auto bytes = serialize_checkpoint(first.checkpoint);
  v.require(bytes == serialize_checkpoint(second.result.checkpoint), "checkpoints bit-identical");
  v.require(log_text(first.log) == log_text(second.result.log), "epoch logs identical");

  const fs::path dir = testing::scratch_dir("acceptance_a5");
  save_checkpoint(first.checkpoint, (dir / "a.bin").string());
  save_checkpoint(load_checkpoint((dir / "a.bin").string()), (dir / "b.bin").string());
  v.require(read_file_bytes((dir / "a.bin").string()) == read_file_bytes((dir / "b.bin").string()),
            "save -> load -> save byte-identical");
  v.note(std::to_string(bytes.size()) + " checkpoint bytes, " + std::to_string(first.log.size()) + " epochs");
  return v;
}

Verdict a6_bandit() {
  Verdict v;
  double lowest = 1.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const double p = testing::run_bandit(seed, 500).prob_a;
    lowest = std::min(lowest, p);
    v.require(p >= 0.95, "seed " + std::to_string(seed) + " pi(A) " + fmt(p));
  }
  v.note("10/10 seeds, lowest pi(A) " + fmt(lowest));
  return v;
}

Verdict a7_formats() {
  Verdict v;
  using Kind = FormatError::Kind;
  const fs::path dir = testing::scratch_dir("acceptance_a7");
  Rng rng(7);
  Image img(31, 29);
  for (double& x : img.values) x = static_cast<double>(rng.below(256)) / 255.0;
  export_pgm(img, (dir / "a.pgm").string());
  const Image back = load_pgm((dir / "a.pgm").string());
  export_pgm(back, (dir / "b.pgm").string());
  v.require(back.values == img.values, "PGM values round-trip exactly");
  v.require(read_file_bytes((dir / "a.pgm").string()) == read_file_bytes((dir / "b.pgm").string()),
            "PGM bytes round-trip exactly");

  auto pgm_kind = [](const std::string& s) -> std::optional<Kind> {
    try {
      parse_pgm(std::vector<std::uint8_t>(s.begin(), s.end()));
    } catch (const FormatError& e) {
      return e.kind();
    }
    return std::nullopt;
  };
  v.require(pgm_kind("P2\n1 1\n255\n0\n") == Kind::unsupported_variant, "P2 rejected as unsupported variant");
  v.require(pgm_kind("P5\n2 2\n255\n\x01") == Kind::truncated, "short PGM payload rejected as truncated");
  v.require(pgm_kind("XY\n2 2\n255\n") == Kind::bad_magic, "foreign PGM magic rejected");
  v.require(pgm_kind("P5\n0 2\n255\n") == Kind::bad_dims, "zero PGM width rejected");

  try {
    const auto paths = load_scanpaths_csv(std::string(ATTNET_TEST_DATA) + "/scanpaths.csv", 56, 56);
    v.require(paths.size() == 3 && paths[0].fixations.size() == 3, "fixture parses into 3 scanpaths");
  } catch (const std::exception& e) {
    v.require(false, std::string("fixture rejected: ") + e.what());
  }
  const std::string header = "trial_id,display_id,fix_index,x,y\n";
  auto csv_error = [&](const std::string& body) -> std::pair<std::optional<Kind>, std::size_t> {
    std::istringstream in(header + body);
    try {
      parse_scanpaths_csv(in, 56, 56);
    } catch (const FormatError& e) {
      return {e.kind(), e.row()};
    }
    return {std::nullopt, 0};
  };
  std::istringstream empty(header);
  v.require(parse_scanpaths_csv(empty, 56, 56).empty(), "header-only CSV gives no scanpaths");
  v.require(csv_error("t,0,1,1,1\nt,0,3,1,1\n") == std::pair<std::optional<Kind>, std::size_t>{Kind::malformed, 3},
            "fix_index jump names row 3");
  v.require(csv_error("t,0,1,1,1\nt,0,2,60,1\n") == std::pair<std::optional<Kind>, std::size_t>{Kind::bad_dims, 3},
            "out-of-bounds coordinate names row 3");
  v.require(csv_error("t,0,1,x,1\n").first == Kind::malformed, "non-numeric field rejected");
  v.require(csv_error("t,0,1,1\n").first == Kind::malformed, "short row rejected");
  v.note("PGM and scanpath CSV checks");
  return v;
}

}  // namespace
}  // namespace attnet

int main() {
  using namespace attnet;
  bool all = true;
  auto report = [&](const char* id, const char* name, const std::function<Verdict()>& check) {
    Verdict v;
    try {
      v = check();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("exception: ") + e.what();
    }
    all = all && v.pass;
    std::printf("%s %s %s: %s\n", id, v.pass ? "PASS" : "FAIL", name, v.detail.c_str());
    std::fflush(stdout);
  };

  RunConfig defaults;
  defaults.resolve();
  DefaultRun run;
  report("A1", "gradient integrity", a1_gradient_integrity);
  report("A2", "selection semantics", a2_selection_semantics);
  report("A3", "learning to attend", [&] { return a3_learning_to_attend(defaults, run); });
  report("A4", "guidance oracle", a4_guidance_oracle);
  report("A5", "determinism", [&] {
    if (run.log.empty()) return Verdict{false, "no default training run to compare"};
    return a5_determinism(defaults, run);
  });
  report("A6", "bandit sanity", a6_bandit);
  report("A7", "format conformance", a7_formats);
  std::printf("acceptance %s\n", all ? "PASS" : "FAIL");
  return all ? 0 : 1;
}
