#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "attnet/errors.hpp"
#include "attnet/random.hpp"
#include "attnet/tape.hpp"
#include "attnet/tensor.hpp"

namespace attnet {

// Grayscale image, row-major, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}

  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }
  double& at(std::size_t row, std::size_t col) { return values[row * width + col]; }

  void clamp() {
    for (double& v : values) v = std::clamp(v, 0.0, 1.0);
  }

  friend bool operator==(const Image&, const Image&) = default;
};

// Coarse H×W×C activation map produced by the frontend.
struct V4Map {
  Tensor values;  // [H, W, C]
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  static V4Map wrap(Tensor t) {
    if (t.rank() != 3) throw DimensionError("V4Map expects an H×W×C tensor, got " + shape_str(t.shape()));
    return V4Map{t, t.dim(0), t.dim(1), t.dim(2)};
  }
};

struct FrontendConfig {
  std::size_t image_size = 56;
  std::size_t channels = 16;

  // Two 2×2 pools.
  static constexpr std::size_t reduction = 4;

  std::size_t map_size() const { return image_size / reduction; }

  void validate() const {
    if (image_size == 0 || image_size % reduction != 0) {
      throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by the frontend reduction factor " +
                        std::to_string(reduction));
    }
    if (channels < 2 || channels % 2 != 0) {
      throw ConfigError("channels must be an even number >= 2, got " + std::to_string(channels));
    }
  }
};

// Glorot-style uniform init: U[-a, a] with a = sqrt(6 / (fan_in + fan_out)).
// Conv kernels count fan_in as kh·kw·Cin and fan_out as Cout.
inline std::vector<double> glorot_uniform(Rng& rng, std::size_t count, std::size_t fan_in, std::size_t fan_out) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(count);
  for (double& x : v) x = rng.uniform(-a, a);
  return v;
}

// Frozen two-stage conv net standing in for a pretrained backbone.
struct FrontendParams {
  FrontendConfig config;
  Tensor conv1_weight;  // [3, 3, 1, C/2]
  Tensor conv1_bias;    // [C/2]
  Tensor conv2_weight;  // [3, 3, C/2, C]
  Tensor conv2_bias;    // [C]
  bool frozen = true;

  std::vector<NamedTensor> blocks() const {
    return {{"frontend.conv1.weight", conv1_weight},
            {"frontend.conv1.bias", conv1_bias},
            {"frontend.conv2.weight", conv2_weight},
            {"frontend.conv2.bias", conv2_bias}};
  }
};

inline FrontendParams build_frontend(std::uint64_t seed, const FrontendConfig& cfg = {}) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t mid = cfg.channels / 2;
  FrontendParams p;
  p.config = cfg;
  p.conv1_weight = Tensor::from({3, 3, 1, mid}, glorot_uniform(rng, 9 * mid, 9, mid));
  p.conv1_bias = Tensor::zeros({mid});
  p.conv2_weight = Tensor::from({3, 3, mid, cfg.channels},
                                glorot_uniform(rng, 9 * mid * cfg.channels, 9 * mid, cfg.channels));
  p.conv2_bias = Tensor::zeros({cfg.channels});
  return p;
}

// conv3×3 → bias → relu → pool2, twice.
inline V4Map extract_features(const Image& img, const FrontendParams& params) {
  const auto& cfg = params.config;
  if (img.height != cfg.image_size || img.width != cfg.image_size || img.values.size() != img.height * img.width) {
    throw DimensionError("frontend expects a " + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_size) + " image, got " + std::to_string(img.height) + "x" +
                         std::to_string(img.width));
  }
  Tape tape = Tape::inference();
  Tensor x = Tensor::from({img.height, img.width, 1}, img.values);
  x = tape.max_pool2d(tape.relu(tape.add_bias(tape.conv2d(x, params.conv1_weight, Padding::same), params.conv1_bias)));
  x = tape.max_pool2d(tape.relu(tape.add_bias(tape.conv2d(x, params.conv2_weight, Padding::same), params.conv2_bias)));
  return V4Map::wrap(x);
}

}  // namespace attnet
