#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "attnet/errors.hpp"
#include "attnet/model.hpp"
#include "attnet/pgm.hpp"
#include "attnet/taskgen.hpp"

namespace attnet {

// Image ↔ map coordinate frame.
struct MapGeometry {
  int image_height = 56;
  int image_width = 56;
  std::size_t map_height = 14;
  std::size_t map_width = 14;
};

struct CellRect {
  std::size_t row0 = 0, row1 = 0;  // inclusive
  std::size_t col0 = 0, col1 = 0;  // inclusive
};

// Map cells whose pixel extent intersects the bbox.
inline CellRect bbox_cells(const BBox& b, const MapGeometry& g) {
  auto cell = [](long pixel, long image_extent, std::size_t map_extent) {
    const long c = pixel * static_cast<long>(map_extent) / image_extent;
    return static_cast<std::size_t>(std::clamp(c, 0L, static_cast<long>(map_extent) - 1));
  };
  return {cell(b.y, g.image_height, g.map_height), cell(b.y + b.h - 1, g.image_height, g.map_height),
          cell(b.x, g.image_width, g.map_width), cell(b.x + b.w - 1, g.image_width, g.map_width)};
}

// True iff the routed 4×4 window at loc shares a map cell with the target.
inline bool target_fixated(Location loc, const BBox& bbox, const MapGeometry& g) {
  const Location o = routed_window_origin(loc, g.map_height, g.map_width);
  const CellRect t = bbox_cells(bbox, g);
  const std::size_t r1 = o.row + kRoutedWindow - 1, c1 = o.col + kRoutedWindow - 1;
  return o.row <= t.row1 && t.row0 <= r1 && o.col <= t.col1 && t.col0 <= c1;
}

inline Location bin_pixel(const PixelPoint& p, const MapGeometry& g) {
  auto bin = [](double v, int image_extent, std::size_t map_extent) {
    const long c = static_cast<long>(std::floor(v * static_cast<double>(map_extent) / image_extent));
    return static_cast<std::size_t>(std::clamp(c, 0L, static_cast<long>(map_extent) - 1));
  };
  return {bin(p.y, g.image_height, g.map_height), bin(p.x, g.image_width, g.map_width)};
}

// One target-present trial in map coordinates, from any source.
struct TrialFixations {
  std::vector<Location> fixations;
  BBox target;
};

struct GuidanceCurve {
  // Share of trials whose target was first fixated at exactly fixation t.
  std::array<double, kFixations> per_fixation{};
  // Share first fixated at or before fixation t.
  std::array<double, kFixations> cumulative{};
  std::size_t trials = 0;
};

inline GuidanceCurve guidance_curve(std::span<const TrialFixations> trials, const MapGeometry& g) {
  if (trials.empty()) throw ContractError("guidance_curve: no target-present trials");
  std::array<std::size_t, kFixations> first{};
  for (const auto& trial : trials) {
    const std::size_t n = std::min(trial.fixations.size(), kFixations);
    for (std::size_t t = 0; t < n; ++t) {
      if (target_fixated(trial.fixations[t], trial.target, g)) {
        ++first[t];
        break;
      }
    }
  }
  GuidanceCurve c;
  c.trials = trials.size();
  const double total = static_cast<double>(trials.size());
  std::size_t running = 0;
  for (std::size_t t = 0; t < kFixations; ++t) {
    running += first[t];
    c.per_fixation[t] = static_cast<double>(first[t]) / total;
    c.cumulative[t] = static_cast<double>(running) / total;
  }
  return c;
}

// Adapter for model rollouts. `targets[i]` is the bbox of episodes[i];
// episodes without a target must be filtered out by the caller.
inline std::vector<TrialFixations> trials_from_episodes(std::span<const EpisodeRecord> episodes,
                                                        std::span<const BBox> targets) {
  if (episodes.size() != targets.size()) throw ContractError("trials_from_episodes: one bbox per episode required");
  std::vector<TrialFixations> out;
  for (std::size_t i = 0; i < episodes.size(); ++i) out.push_back({episodes[i].locations(), targets[i]});
  return out;
}

// Adapter for human scanpaths: pixel fixations are binned to map cells.
// Scanpaths on displays without a target bbox are skipped.
inline std::vector<TrialFixations> trials_from_scanpaths(std::span<const HumanScanpath> paths,
                                                         const std::map<int, BBox>& targets, const MapGeometry& g) {
  std::vector<TrialFixations> out;
  for (const auto& p : paths) {
    auto it = targets.find(p.display_id);
    if (it == targets.end()) continue;
    TrialFixations t{{}, it->second};
    for (const auto& f : p.fixations) t.fixations.push_back(bin_pixel(f, g));
    out.push_back(std::move(t));
  }
  return out;
}

struct DensityMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  bool empty = true;  // no fixations: values are all zero
};

inline std::vector<double> gaussian_kernel(double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
  return k;
}

// Normalized fixation histogram, optionally blurred by a truncated Gaussian
// (radius ⌈3σ⌉, zero outside the map) and renormalized.
inline DensityMap fixation_density(std::span<const std::vector<Location>> traces, std::size_t height, std::size_t width,
                                   double sigma = 0.0) {
  if (sigma < 0.0) throw ContractError("fixation_density: sigma must be non-negative");
  DensityMap d{height, width, std::vector<double>(height * width, 0.0), true};
  double total = 0.0;
  for (const auto& trace : traces) {
    for (const auto& loc : trace) {
      if (loc.row >= height || loc.col >= width) throw ContractError("fixation_density: fixation outside the map");
      d.values[loc.row * width + loc.col] += 1.0;
      total += 1.0;
    }
  }
  if (total == 0.0) return d;
  d.empty = false;
  if (sigma > 0.0) {
    const auto k = gaussian_kernel(sigma);
    const long radius = static_cast<long>(k.size() / 2);
    std::vector<double> tmp(d.values.size(), 0.0);
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        double acc = 0.0;
        for (long o = -radius; o <= radius; ++o) {
          const long cc = static_cast<long>(c) + o;
          if (cc >= 0 && cc < static_cast<long>(width)) acc += k[o + radius] * d.values[r * width + cc];
        }
        tmp[r * width + c] = acc;
      }
    }
    for (std::size_t r = 0; r < height; ++r) {
      for (std::size_t c = 0; c < width; ++c) {
        double acc = 0.0;
        for (long o = -radius; o <= radius; ++o) {
          const long rr = static_cast<long>(r) + o;
          if (rr >= 0 && rr < static_cast<long>(height)) acc += k[o + radius] * tmp[rr * width + c];
        }
        d.values[r * width + c] = acc;
      }
    }
    total = 0.0;
    for (double v : d.values) total += v;
  }
  for (double& v : d.values) v /= total;
  return d;
}

// Min-max normalization to 0..255; a constant map becomes all 128.
inline std::vector<std::uint8_t> heatmap_pixels(std::span<const double> values) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double v : values) {
    if (!std::isfinite(v)) throw ContractError("heatmap: non-finite value");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<std::uint8_t> px(values.size(), 128);
  if (values.empty() || hi == lo) return px;
  for (std::size_t i = 0; i < values.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::lround((values[i] - lo) / (hi - lo) * 255.0));
  }
  return px;
}

inline void export_pgm_heatmap(std::span<const double> values, std::size_t height, std::size_t width,
                               const std::string& path) {
  if (values.size() != height * width) throw DimensionError("heatmap: value count does not match dimensions");
  write_bytes(path, encode_pgm(height, width, heatmap_pixels(values)));
}

// Priority map with out-of-window cells replaced by the in-window minimum.
inline std::vector<double> finite_priority(const PriorityMap& p) {
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < p.outside.size(); ++i) {
    if (!p.outside[i]) lo = std::min(lo, p.values[i]);
  }
  std::vector<double> out(p.values.data().begin(), p.values.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (p.outside[i]) out[i] = lo;
  }
  return out;
}

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string guidance_csv(const GuidanceCurve& c) {
  std::string s = "fix_index,per_fixation,cumulative\n";
  for (std::size_t t = 0; t < kFixations; ++t) {
    s += std::to_string(t + 1) + "," + format_real(c.per_fixation[t]) + "," + format_real(c.cumulative[t]) + "\n";
  }
  return s;
}

struct TraceRow {
  int display_id = 0;
  const EpisodeRecord* episode = nullptr;
};

inline std::string trace_csv(std::span<const TraceRow> rows) {
  std::string s = "display_id,fix_index,row,col,ventral_logit\n";
  for (const auto& r : rows) {
    for (std::size_t t = 0; t < r.episode->fixations.size(); ++t) {
      const auto& f = r.episode->fixations[t];
      s += std::to_string(r.display_id) + "," + std::to_string(t + 1) + "," + std::to_string(f.loc.row) + "," +
           std::to_string(f.loc.col) + "," + format_real(f.ventral_logit) + "\n";
    }
  }
  return s;
}

}  // namespace attnet
