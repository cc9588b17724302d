#pragma once

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "attnet/errors.hpp"
#include "attnet/frontend.hpp"
#include "attnet/model.hpp"
#include "attnet/random.hpp"

namespace attnet {

// Pixel rectangle; x is the column, y the row of the top-left corner.
struct BBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
  friend bool operator==(const BBox&, const BBox&) = default;
};

inline constexpr int kPatternSize = 8;
using Pattern = std::array<std::array<std::uint8_t, kPatternSize>, kPatternSize>;

enum class PatternKind { plus, l_junction, t_junction };

// 2-px strokes on an 8×8 grid.
inline Pattern make_pattern(PatternKind kind, int rotation = 0) {
  Pattern p{};
  for (int r = 0; r < kPatternSize; ++r) {
    for (int c = 0; c < kPatternSize; ++c) {
      bool on = false;
      switch (kind) {
        case PatternKind::plus: on = (r == 3 || r == 4 || c == 3 || c == 4); break;
        case PatternKind::l_junction: on = (c <= 1 || r >= 6); break;
        case PatternKind::t_junction: on = (r <= 1 || c == 3 || c == 4); break;
      }
      p[r][c] = on ? 1 : 0;
    }
  }
  for (int k = 0; k < ((rotation % 4) + 4) % 4; ++k) {
    Pattern q{};
    for (int r = 0; r < kPatternSize; ++r) {
      for (int c = 0; c < kPatternSize; ++c) q[c][kPatternSize - 1 - r] = p[r][c];
    }
    p = q;
  }
  return p;
}

struct DisplaySpec {
  int image_size = 56;
  int margin = 2;
  double target_intensity = 1.0;
  double distractor_intensity = 0.8;
  double noise_max = 0.2;
  int min_distractors = 4;
  int max_distractors = 7;
  int max_attempts = 1000;

  // Inclusive range of admissible top-left coordinates for a pattern.
  int min_origin() const { return margin; }
  int max_origin() const { return image_size - kPatternSize - margin; }

  void validate() const {
    if (max_origin() < min_origin()) throw ConfigError("image_size too small for an 8x8 pattern with margins");
    if (min_distractors < 0 || max_distractors < min_distractors) throw ConfigError("bad distractor count range");
    if (!(noise_max >= 0.0 && noise_max <= 1.0)) throw ConfigError("noise_max must lie in [0, 1]");
  }
};

struct SearchDisplay {
  int id = 0;
  Image image;
  Label label = Label::absent;
  std::optional<BBox> target;
  std::vector<BBox> distractors;
};

// Uniform noise background, then (if `label` is present) one plus-shaped
// target, then 4–7 L/T junction distractors. Patterns keep `margin` pixels
// from the border and from each other.
inline SearchDisplay generate_display(Rng& rng, const DisplaySpec& spec, Label label) {
  spec.validate();
  SearchDisplay d;
  d.label = label;
  d.image = Image(spec.image_size, spec.image_size);
  for (double& v : d.image.values) v = rng.uniform(0.0, spec.noise_max);

  std::vector<BBox> placed;
  auto place = [&](const char* what) {
    for (int attempt = 0; attempt < spec.max_attempts; ++attempt) {
      BBox b{rng.between(spec.min_origin(), spec.max_origin()), rng.between(spec.min_origin(), spec.max_origin()),
             kPatternSize, kPatternSize};
      bool clear = true;
      for (const auto& o : placed) {
        if (b.x < o.x + o.w + spec.margin && o.x < b.x + b.w + spec.margin && b.y < o.y + o.h + spec.margin &&
            o.y < b.y + b.h + spec.margin) {
          clear = false;
          break;
        }
      }
      if (clear) {
        placed.push_back(b);
        return b;
      }
    }
    throw PlacementError(std::string("could not place ") + what + " without overlap after " +
                         std::to_string(spec.max_attempts) + " attempts");
  };
  auto paint = [&](const BBox& b, const Pattern& p, double intensity) {
    for (int r = 0; r < kPatternSize; ++r) {
      for (int c = 0; c < kPatternSize; ++c) {
        if (p[r][c]) d.image.at(b.y + r, b.x + c) = intensity;
      }
    }
  };

  if (label == Label::present) {
    d.target = place("target");
    paint(*d.target, make_pattern(PatternKind::plus), spec.target_intensity);
  }
  const int count = rng.between(spec.min_distractors, spec.max_distractors);
  for (int i = 0; i < count; ++i) {
    const BBox b = place("distractor");
    const auto kind = rng.below(2) == 0 ? PatternKind::l_junction : PatternKind::t_junction;
    paint(b, make_pattern(kind, static_cast<int>(rng.below(4))), spec.distractor_intensity);
    d.distractors.push_back(b);
  }
  d.image.clamp();
  return d;
}

// n displays, exactly half target-present, in seeded random order.
inline std::vector<SearchDisplay> make_dataset(Rng& rng, std::size_t n, const DisplaySpec& spec = {}) {
  if (n % 2 != 0) throw ConfigError("dataset size must be even, got " + std::to_string(n));
  std::vector<Label> labels(n, Label::absent);
  std::fill(labels.begin(), labels.begin() + static_cast<long>(n / 2), Label::present);
  rng.shuffle(labels);
  std::vector<SearchDisplay> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(generate_display(rng, spec, labels[i]));
    out.back().id = static_cast<int>(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV helpers

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  for (auto& f : out) {
    while (!f.empty() && (f.back() == '\r' || f.back() == ' ')) f.pop_back();
    while (!f.empty() && f.front() == ' ') f.erase(f.begin());
  }
  return out;
}

template <class T>
std::optional<T> parse_number(const std::string& s) {
  T v{};
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return v;
}

inline std::vector<std::string> read_lines(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Human scanpaths: `trial_id,display_id,fix_index,x,y`, pixel coordinates.

struct PixelPoint {
  double x = 0.0;
  double y = 0.0;
};

struct HumanScanpath {
  std::string trial_id;
  int display_id = 0;
  std::vector<PixelPoint> fixations;
};

inline std::vector<HumanScanpath> parse_scanpaths_csv(std::istream& in, int image_width, int image_height) {
  using Kind = FormatError::Kind;
  const auto lines = detail::read_lines(in);
  if (lines.empty()) throw FormatError(Kind::malformed, "scanpath CSV row 1: missing header", 1);
  if (detail::split_csv_line(lines[0]) != std::vector<std::string>{"trial_id", "display_id", "fix_index", "x", "y"}) {
    throw FormatError(Kind::malformed, "scanpath CSV row 1: header must be trial_id,display_id,fix_index,x,y", 1);
  }
  std::vector<HumanScanpath> out;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t row = i + 1;
    if (lines[i].empty() || lines[i] == "\r") continue;
    const auto f = detail::split_csv_line(lines[i]);
    auto fail = [&](const std::string& msg) {
      throw FormatError(Kind::malformed, "scanpath CSV row " + std::to_string(row) + ": " + msg, row);
    };
    if (f.size() != 5) fail("expected 5 fields, got " + std::to_string(f.size()));
    if (f[0].empty()) fail("empty trial_id");
    const auto display = detail::parse_number<int>(f[1]);
    const auto fix = detail::parse_number<int>(f[2]);
    const auto x = detail::parse_number<double>(f[3]);
    const auto y = detail::parse_number<double>(f[4]);
    if (!display || !fix || !x || !y) fail("non-numeric field");
    if (!(*x >= 0.0 && *x < image_width && *y >= 0.0 && *y < image_height)) {
      throw FormatError(Kind::bad_dims,
                        "scanpath CSV row " + std::to_string(row) + ": fixation (" + f[3] + "," + f[4] + ") out of bounds",
                        row);
    }
    auto [it, inserted] = index.try_emplace(f[0], out.size());
    if (inserted) out.push_back({f[0], *display, {}});
    auto& path = out[it->second];
    if (path.display_id != *display) fail("display_id changes within trial " + f[0]);
    if (*fix != static_cast<int>(path.fixations.size()) + 1) {
      fail("fix_index " + f[2] + " in trial " + f[0] + " is not contiguous (expected " +
           std::to_string(path.fixations.size() + 1) + ")");
    }
    path.fixations.push_back({*x, *y});
  }
  return out;
}

inline std::vector<HumanScanpath> load_scanpaths_csv(const std::string& path, int image_width, int image_height) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return parse_scanpaths_csv(in, image_width, image_height);
}

// ---------------------------------------------------------------------------
// Dataset manifest: `display_id,label,bbox_x,bbox_y,bbox_w,bbox_h,path`.
// Absent displays leave the bbox fields empty.

struct ManifestEntry {
  int display_id = 0;
  Label label = Label::absent;
  std::optional<BBox> target;
  std::string path;
};

inline std::string manifest_csv(const std::vector<ManifestEntry>& entries) {
  std::ostringstream os;
  os << "display_id,label,bbox_x,bbox_y,bbox_w,bbox_h,path\n";
  for (const auto& e : entries) {
    os << e.display_id << ',' << label_name(e.label) << ',';
    if (e.target) {
      os << e.target->x << ',' << e.target->y << ',' << e.target->w << ',' << e.target->h;
    } else {
      os << ",,,";
    }
    os << ',' << e.path << '\n';
  }
  return os.str();
}

inline std::vector<ManifestEntry> parse_manifest_csv(std::istream& in) {
  using Kind = FormatError::Kind;
  const auto lines = detail::read_lines(in);
  if (lines.empty() || detail::split_csv_line(lines[0]) !=
                           std::vector<std::string>{"display_id", "label", "bbox_x", "bbox_y", "bbox_w", "bbox_h", "path"}) {
    throw FormatError(Kind::malformed, "manifest row 1: header must be display_id,label,bbox_x,bbox_y,bbox_w,bbox_h,path", 1);
  }
  std::vector<ManifestEntry> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t row = i + 1;
    if (lines[i].empty()) continue;
    const auto f = detail::split_csv_line(lines[i]);
    auto fail = [&](const std::string& msg) {
      throw FormatError(Kind::malformed, "manifest row " + std::to_string(row) + ": " + msg, row);
    };
    if (f.size() != 7) fail("expected 7 fields");
    ManifestEntry e;
    const auto id = detail::parse_number<int>(f[0]);
    if (!id) fail("bad display_id");
    e.display_id = *id;
    if (f[1] == "present") {
      e.label = Label::present;
      const auto x = detail::parse_number<int>(f[2]), y = detail::parse_number<int>(f[3]);
      const auto w = detail::parse_number<int>(f[4]), h = detail::parse_number<int>(f[5]);
      if (!x || !y || !w || !h) fail("present display needs a bbox");
      e.target = BBox{*x, *y, *w, *h};
    } else if (f[1] == "absent") {
      if (!(f[2].empty() && f[3].empty() && f[4].empty() && f[5].empty())) fail("absent display must not have a bbox");
    } else {
      fail("label must be present or absent");
    }
    e.path = f[6];
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace attnet
