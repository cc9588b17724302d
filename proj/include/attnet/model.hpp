#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnet/errors.hpp"
#include "attnet/frontend.hpp"
#include "attnet/random.hpp"
#include "attnet/tape.hpp"
#include "attnet/tensor.hpp"

namespace attnet {

inline constexpr std::size_t kRoutedWindow = 4;
inline constexpr std::size_t kFixations = 5;

struct Location {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const Location&, const Location&) = default;
};

enum class Label { absent = 0, present = 1 };

inline const char* label_name(Label l) { return l == Label::present ? "present" : "absent"; }

enum class SelectMode { sample, argmax, replay };

inline Location map_center(std::size_t height, std::size_t width) { return {height / 2, width / 2}; }

// Top-left corner of a size×size window "centered" on loc: the attended cell
// sits at offset (size-1)/2 and the window is clamped inside the map.
inline Location window_origin(Location loc, std::size_t size, std::size_t height, std::size_t width) {
  const long offset = static_cast<long>((size - 1) / 2);
  auto place = [&](std::size_t coord, std::size_t extent) {
    const long hi = static_cast<long>(extent) - static_cast<long>(size);
    return static_cast<std::size_t>(std::clamp(static_cast<long>(coord) - offset, 0L, std::max(hi, 0L)));
  };
  return {place(loc.row, height), place(loc.col, width)};
}

inline Location routed_window_origin(Location loc, std::size_t height, std::size_t width) {
  return window_origin(loc, kRoutedWindow, height, width);
}

// Footprints of previously routed windows. Cells are only ever added.
class InhibitionMap {
 public:
  InhibitionMap(std::size_t height, std::size_t width) : height_(height), width_(width), cells_(height * width, 0) {}

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  const CellMask& cells() const noexcept { return cells_; }

  bool inhibited(Location loc) const { return cells_[loc.row * width_ + loc.col] != 0; }

  void inhibit(Location loc) { cells_[loc.row * width_ + loc.col] = 1; }

  void inhibit_window(Location loc) {
    const Location o = routed_window_origin(loc, height_, width_);
    for (std::size_t r = o.row; r < std::min(o.row + kRoutedWindow, height_); ++r) {
      for (std::size_t c = o.col; c < std::min(o.col + kRoutedWindow, width_); ++c) cells_[r * width_ + c] = 1;
    }
  }

  std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(cells_.begin(), cells_.end(), [](auto v) { return v != 0; }));
  }

 private:
  std::size_t height_;
  std::size_t width_;
  CellMask cells_;
};

// Dorsal priority over the map. Cells outside the dorsal window have
// priority −∞ and are never selected; `values` stays finite everywhere.
struct PriorityMap {
  Tensor values;        // [H, W]
  CellMask outside;     // 1 = outside the dorsal window
  std::size_t height = 0;
  std::size_t width = 0;

  double at(Location loc) const {
    const std::size_t i = loc.row * width + loc.col;
    return outside[i] ? -std::numeric_limits<double>::infinity() : values[i];
  }
};

struct ModelConfig {
  std::size_t map_size = 14;
  std::size_t channels = 16;
  std::size_t it1_hidden = 128;
  std::size_t it2_hidden = 32;
  // Side of the PPC1 input window in map cells; 0 means the whole map.
  std::size_t dorsal_window = 0;

  std::size_t resolved_dorsal_window() const { return dorsal_window == 0 ? map_size : dorsal_window; }

  void validate() const {
    if (map_size < kRoutedWindow) {
      throw ConfigError("map_size must be at least " + std::to_string(kRoutedWindow));
    }
    const std::size_t w = resolved_dorsal_window();
    if (w < kRoutedWindow || w > map_size) {
      throw ConfigError("dorsal_window must lie in [4, map_size], got " + std::to_string(w));
    }
    if (channels == 0 || it1_hidden == 0 || it2_hidden == 0) throw ConfigError("layer sizes must be positive");
  }
};

inline constexpr double kPpc1InitBias = 1.0;

// Trainable dorsal (PPC1) and ventral (IT1, IT2, PFC) weights.
struct ModelParams {
  Tensor ppc1_weight;  // [C, 1]
  Tensor ppc1_bias;    // [1]
  Tensor it1_weight;   // [4·4·C, h1]
  Tensor it1_bias;     // [h1]
  Tensor it2_weight;   // [h1, h2]
  Tensor it2_bias;     // [h2]
  Tensor pfc_weight;   // [h2, 1]
  Tensor pfc_bias;     // [1]

  static ModelParams init(std::uint64_t seed, const ModelConfig& cfg) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t c = cfg.channels, in = kRoutedWindow * kRoutedWindow * c;
    const std::size_t h1 = cfg.it1_hidden, h2 = cfg.it2_hidden;
    ModelParams p;
    // Zero channel weights give a flat priority map, so the untrained policy
    // is uniform over in-window cells. The positive bias keeps every cell
    // above the relu kink while the weights move away from zero.
    p.ppc1_weight = Tensor::parameter({c, 1}, std::vector<double>(c, 0.0));
    p.ppc1_bias = Tensor::parameter({1}, {kPpc1InitBias});
    p.it1_weight = Tensor::parameter({in, h1}, glorot_uniform(rng, in * h1, in, h1));
    p.it1_bias = Tensor::parameter({h1}, std::vector<double>(h1, 0.0));
    p.it2_weight = Tensor::parameter({h1, h2}, glorot_uniform(rng, h1 * h2, h1, h2));
    p.it2_bias = Tensor::parameter({h2}, std::vector<double>(h2, 0.0));
    p.pfc_weight = Tensor::parameter({h2, 1}, glorot_uniform(rng, h2, h2, 1));
    p.pfc_bias = Tensor::parameter({1}, {0.0});
    return p;
  }

  std::vector<NamedTensor> blocks() const {
    return {{"ppc1.weight", ppc1_weight}, {"ppc1.bias", ppc1_bias}, {"it1.weight", it1_weight},
            {"it1.bias", it1_bias},       {"it2.weight", it2_weight}, {"it2.bias", it2_bias},
            {"pfc.weight", pfc_weight},   {"pfc.bias", pfc_bias}};
  }

  ModelParams clone() const {
    return {ppc1_weight.clone(), ppc1_bias.clone(), it1_weight.clone(), it1_bias.clone(),
            it2_weight.clone(),  it2_bias.clone(),  pfc_weight.clone(), pfc_bias.clone()};
  }

  void zero_grad() {
    for (auto& b : blocks()) b.tensor.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks()) n += b.tensor.size();
    return n;
  }
};

// PPC1: a shared per-cell channel weighting plus relu (a 1×1 convolution),
// restricted to the dorsal window around `fix`.
inline PriorityMap ppc1_priority(Tape& tape, const V4Map& v4, Location fix, const ModelParams& params,
                                 std::size_t dorsal_window) {
  const std::size_t h = v4.height, w = v4.width, c = v4.channels;
  if (fix.row >= h || fix.col >= w) throw ContractError("ppc1_priority: fixation out of bounds");
  if (dorsal_window < kRoutedWindow || dorsal_window > std::min(h, w)) {
    throw ContractError("ppc1_priority: dorsal window " + std::to_string(dorsal_window) + " outside [4, map size]");
  }
  if (params.ppc1_weight.dim(0) != c) {
    throw DimensionError("ppc1_priority: weight " + shape_str(params.ppc1_weight.shape()) + " vs map channels " +
                         std::to_string(c));
  }
  Tensor cells = tape.reshape(v4.values, {h * w, c});
  Tensor prio = tape.relu(tape.add_bias(tape.matmul(cells, params.ppc1_weight), params.ppc1_bias));
  PriorityMap pm;
  pm.values = tape.reshape(prio, {h, w});
  pm.height = h;
  pm.width = w;
  pm.outside.assign(h * w, 1);
  const Location o = window_origin(fix, dorsal_window, h, w);
  for (std::size_t r = o.row; r < o.row + dorsal_window; ++r) {
    for (std::size_t col = o.col; col < o.col + dorsal_window; ++col) pm.outside[r * w + col] = 0;
  }
  return pm;
}

// Cells that cannot be selected: outside the dorsal window or inhibited.
inline CellMask excluded_cells(const PriorityMap& p, const InhibitionMap& inh) {
  if (inh.height() != p.height || inh.width() != p.width) {
    throw DimensionError("inhibition map and priority map differ in size");
  }
  CellMask ex(p.outside.size());
  for (std::size_t i = 0; i < ex.size(); ++i) ex[i] = (p.outside[i] || inh.cells()[i]) ? 1 : 0;
  return ex;
}

struct Selection {
  Location loc;
  Tensor log_prob;  // scalar, differentiable w.r.t. the priority map
};

// Log-probability of choosing `loc` under the masked softmax policy.
inline Tensor selection_log_prob(Tape& tape, const PriorityMap& p, const CellMask& excluded, Location loc,
                                 double temperature) {
  const std::size_t idx = loc.row * p.width + loc.col;
  if (excluded.at(idx)) throw ContractError("selection_log_prob: location is not admissible");
  return tape.pick(tape.masked_log_softmax(p.values, excluded, temperature), idx);
}

// PPC2: combines priority with inhibition of return and picks the next
// location, either greedily (ties → lowest row-major index) or by sampling
// softmax(priority / temperature) over admissible cells.
inline Selection ppc2_select(Tape& tape, const PriorityMap& p, const InhibitionMap& inh, SelectMode mode,
                             double temperature, Rng& rng) {
  const CellMask ex = excluded_cells(p, inh);
  std::size_t chosen = ex.size();
  if (mode == SelectMode::argmax) {
    for (std::size_t i = 0; i < ex.size(); ++i) {
      if (!ex[i] && (chosen == ex.size() || p.values[i] > p.values[chosen])) chosen = i;
    }
    if (chosen == ex.size()) throw ExhaustedLocationsError("ppc2_select: no admissible location left");
  } else if (mode == SelectMode::sample) {
    const std::vector<double> probs = Tape::softmax_values(p.values, ex, temperature);
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (ex[i]) continue;
      chosen = i;
      acc += probs[i];
      if (u < acc) break;
    }
  } else {
    throw ContractError("ppc2_select: replay mode has no selection rule");
  }
  const Location loc{chosen / p.width, chosen % p.width};
  return {loc, selection_log_prob(tape, p, ex, loc, temperature)};
}

// Selective routing: the 4×4×C block of the map around loc.
inline Tensor route_window(Tape& tape, const V4Map& v4, Location loc) {
  if (loc.row >= v4.height || loc.col >= v4.width) throw ContractError("route_window: location out of bounds");
  const Location o = routed_window_origin(loc, v4.height, v4.width);
  return tape.crop(v4.values, o.row, o.col, kRoutedWindow, kRoutedWindow);
}

// IT1 (relu) → IT2 (relu) → PFC linear readout, giving one scalar logit.
inline Tensor ventral_classify(Tape& tape, const Tensor& window, const ModelParams& params) {
  if (window.size() != params.it1_weight.dim(0)) {
    throw DimensionError("ventral_classify: window " + shape_str(window.shape()) + " does not match IT1 weight " +
                         shape_str(params.it1_weight.shape()));
  }
  Tensor x = tape.reshape(window, {1, window.size()});
  x = tape.relu(tape.add_bias(tape.matmul(x, params.it1_weight), params.it1_bias));
  x = tape.relu(tape.add_bias(tape.matmul(x, params.it2_weight), params.it2_bias));
  x = tape.add_bias(tape.matmul(x, params.pfc_weight), params.pfc_bias);
  return tape.reshape(x, {1});
}

// PFC accumulator: sigmoid of the summed ventral logits.
inline double pfc_decide(std::span<const double> logits) {
  if (logits.size() != kFixations) {
    throw ContractError("pfc_decide: expected " + std::to_string(kFixations) + " logits, got " +
                        std::to_string(logits.size()));
  }
  double total = 0.0;
  for (double l : logits) total += l;
  return Tape::sigmoid(total);
}

inline bool decide_present(double decision_prob) { return decision_prob >= 0.5; }

struct Fixation {
  Location loc;
  std::optional<double> log_prob;  // none for the forced first fixation
  double ventral_logit = 0.0;
};

struct EpisodeRecord {
  std::vector<Fixation> fixations;
  double decision_prob = 0.5;
  Label label = Label::absent;
  double reward = 0.0;

  // Differentiable handles into the tape the episode was recorded on.
  Tensor decision;                // sigmoid(Σ ventral logits)
  std::vector<Tensor> log_probs;  // one per policy-selected fixation
  Tensor entropy;                 // Σ selection entropies, when tracked

  std::vector<Location> locations() const {
    std::vector<Location> out;
    for (const auto& f : fixations) out.push_back(f.loc);
    return out;
  }
  std::vector<double> ventral_logits() const {
    std::vector<double> out;
    for (const auto& f : fixations) out.push_back(f.ventral_logit);
    return out;
  }
};

// Reward 1 when the present/absent decision matches the label, else 0.
inline void score_episode(EpisodeRecord& ep, Label label) {
  ep.label = label;
  ep.reward = decide_present(ep.decision_prob) == (label == Label::present) ? 1.0 : 0.0;
}

struct EpisodeOptions {
  SelectMode mode = SelectMode::argmax;
  double temperature = 1.0;
  std::size_t dorsal_window = 0;  // 0 = whole map
  // Fixation sequence to re-run in replay mode (all 5, center first).
  std::vector<Location> replay;
  bool track_entropy = false;
};

// One search trial: a forced center fixation followed by four
// prioritize → select → route → classify cycles, then the PFC decision.
inline EpisodeRecord run_episode(Tape& tape, const V4Map& v4, const ModelParams& params, const EpisodeOptions& opt,
                                 Rng& rng) {
  const std::size_t h = v4.height, w = v4.width;
  const std::size_t dorsal = opt.dorsal_window == 0 ? std::min(h, w) : opt.dorsal_window;
  if (opt.mode == SelectMode::replay) {
    if (opt.replay.size() != kFixations) throw ContractError("run_episode: replay needs exactly 5 locations");
    if (opt.replay.front() != map_center(h, w)) throw ContractError("run_episode: replay must start at the map center");
  }

  InhibitionMap inh(h, w);
  EpisodeRecord ep;
  std::vector<Tensor> logits;
  Location loc = map_center(h, w);
  for (std::size_t t = 0; t < kFixations; ++t) {
    Fixation fx;
    if (t > 0) {
      PriorityMap pm = ppc1_priority(tape, v4, loc, params, dorsal);
      Selection sel;
      if (opt.mode == SelectMode::replay) {
        const CellMask ex = excluded_cells(pm, inh);
        sel.loc = opt.replay[t];
        sel.log_prob = selection_log_prob(tape, pm, ex, sel.loc, opt.temperature);
      } else {
        sel = ppc2_select(tape, pm, inh, opt.mode, opt.temperature, rng);
      }
      if (opt.track_entropy) {
        const CellMask ex = excluded_cells(pm, inh);
        Tensor probs = tape.masked_softmax(pm.values, ex, opt.temperature);
        Tensor logp = tape.masked_log_softmax(pm.values, ex, opt.temperature);
        Tensor ent = tape.scale(tape.sum(tape.mul(probs, logp)), -1.0);
        ep.entropy = ep.entropy.defined() ? tape.add(ep.entropy, ent) : ent;
      }
      loc = sel.loc;
      fx.log_prob = sel.log_prob.item();
      ep.log_probs.push_back(sel.log_prob);
    }
    fx.loc = loc;
    Tensor logit = ventral_classify(tape, route_window(tape, v4, loc), params);
    fx.ventral_logit = logit.item();
    logits.push_back(logit);
    inh.inhibit_window(loc);
    ep.fixations.push_back(fx);
  }

  Tensor total = logits.front();
  for (std::size_t t = 1; t < logits.size(); ++t) total = tape.add(total, logits[t]);
  ep.decision = tape.sigmoid(total);
  ep.decision_prob = ep.decision.item();
  return ep;
}

inline EpisodeRecord run_episode(Tape& tape, const Image& img, const FrontendParams& frontend,
                                 const ModelParams& params, const EpisodeOptions& opt, Rng& rng) {
  return run_episode(tape, extract_features(img, frontend), params, opt, rng);
}

}  // namespace attnet
