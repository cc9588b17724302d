#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "attnet/errors.hpp"
#include "attnet/tensor.hpp"

namespace attnet {

enum class Padding { same, valid };

enum class OpKind {
  matmul,
  conv2d,
  max_pool2d,
  relu,
  sigmoid,
  add,
  mul,
  scale,
  add_bias,
  sum,
  reshape,
  crop,
  masked_softmax,
  masked_log_softmax,
  pick,
  bce,
};

// Nonzero entries mark cells excluded from a masked softmax.
using CellMask = std::vector<std::uint8_t>;

// Define-by-run recorder for reverse-mode differentiation.
//
// Every op computes its value eagerly. When at least one operand requires a
// gradient the op is appended to the tape together with its backward rule;
// records are therefore in topological order by construction. backward()
// walks them once in reverse and then clears the tape.
//
// A tape is single-threaded. Parameter gradients accumulate additively into
// the leaf tensors, so several tapes may be run and backpropagated in
// sequence to sum per-episode gradients.
class Tape {
 public:
  Tape() = default;
  explicit Tape(bool record) : record_(record) {}

  // A tape that never records; ops only compute values.
  static Tape inference() { return Tape(false); }

  bool recording() const noexcept { return record_; }
  std::size_t size() const noexcept { return records_.size(); }

  std::vector<OpKind> kinds() const {
    std::vector<OpKind> out;
    out.reserve(records_.size());
    for (const auto& r : records_) out.push_back(r.kind);
    return out;
  }

  // Smallest |pre-activation| seen by a recorded relu (infinity if none).
  double min_relu_margin() const noexcept { return min_relu_margin_; }

  // Negative-control hook for gradient checking: multiplies the sigmoid
  // backward rule by `factor`.
  void corrupt_sigmoid_gradient(double factor) noexcept { sigmoid_fault_ = factor; }

  // ---------------------------------------------------------------------
  // Linear algebra

  Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
      throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) +
                           " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
      double* row = out.data() + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        if (av == 0.0) continue;
        const double* brow = pb + p * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
      }
    }
    auto na = a.node_, nb = b.node_;
    return emit(OpKind::matmul, {m, n}, std::move(out), {na, nb},
                [na, nb, m, k, n](const detail::TensorNode& o) {
                  const double* g = o.grad.data();
                  if (na->requires_grad) {
                    double* ga = na->grad.data();
                    const double* pb = nb->data.data();
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* brow = pb + p * n;
                        const double* grow = g + i * n;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[i * k + p] += acc;
                      }
                    }
                  }
                  if (nb->requires_grad) {
                    double* gb = nb->grad.data();
                    const double* pa = na->data.data();
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t p = 0; p < k; ++p) {
                        const double av = pa[i * k + p];
                        if (av == 0.0) continue;
                        const double* grow = g + i * n;
                        double* gbrow = gb + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                      }
                    }
                  }
                });
  }

  // Cross-correlation of an H×W×Cin map with a kh×kw×Cin×Cout kernel.
  Tensor conv2d(const Tensor& x, const Tensor& k, Padding padding, std::size_t stride = 1) {
    if (x.rank() != 3 || k.rank() != 4) {
      throw DimensionError("conv2d: expected H×W×Cin input and kh×kw×Cin×Cout kernel, got " +
                           shape_str(x.shape()) + " and " + shape_str(k.shape()));
    }
    if (x.dim(2) != k.dim(2)) {
      throw DimensionError("conv2d: channel mismatch between input " + shape_str(x.shape()) +
                           " and kernel " + shape_str(k.shape()));
    }
    if (stride == 0) throw ContractError("conv2d: stride must be >= 1");
    const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
    const std::size_t kh = k.dim(0), kw = k.dim(1), cout = k.dim(3);
    std::size_t oh, ow;
    long pad_top = 0, pad_left = 0;
    if (padding == Padding::same) {
      if (kh % 2 == 0 || kw % 2 == 0) {
        throw ContractError("conv2d: same padding needs odd kernel sizes, got " +
                            shape_str(k.shape()));
      }
      oh = (h + stride - 1) / stride;
      ow = (w + stride - 1) / stride;
      const long pad_h = std::max<long>(0, static_cast<long>((oh - 1) * stride + kh) - static_cast<long>(h));
      const long pad_w = std::max<long>(0, static_cast<long>((ow - 1) * stride + kw) - static_cast<long>(w));
      pad_top = pad_h / 2;
      pad_left = pad_w / 2;
    } else {
      if (h < kh || w < kw) {
        throw DimensionError("conv2d: kernel " + shape_str(k.shape()) + " larger than input " +
                             shape_str(x.shape()));
      }
      oh = (h - kh) / stride + 1;
      ow = (w - kw) / stride + 1;
    }

    // Visits every (output cell, kernel tap) pair that lands inside the input.
    auto for_each_tap = [=](auto&& fn) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - pad_top;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) - pad_left;
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              fn((oy * ow + ox) * cout, (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin,
                 (ky * kw + kx) * cin * cout);
            }
          }
        }
      }
    };

    std::vector<double> out(oh * ow * cout, 0.0);
    const double* px = x.data().data();
    const double* pk = k.data().data();
    for_each_tap([&](std::size_t obase, std::size_t ibase, std::size_t kbase) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double xv = px[ibase + ci];
        if (xv == 0.0) continue;
        const double* krow = pk + kbase + ci * cout;
        double* orow = out.data() + obase;
        for (std::size_t co = 0; co < cout; ++co) orow[co] += xv * krow[co];
      }
    });

    auto nx = x.node_, nk = k.node_;
    return emit(OpKind::conv2d, {oh, ow, cout}, std::move(out), {nx, nk},
                [nx, nk, cin, cout, for_each_tap](const detail::TensorNode& o) {
                  const double* g = o.grad.data();
                  const double* px = nx->data.data();
                  const double* pk = nk->data.data();
                  double* gx = nx->requires_grad ? nx->grad.data() : nullptr;
                  double* gk = nk->requires_grad ? nk->grad.data() : nullptr;
                  for_each_tap([&](std::size_t obase, std::size_t ibase, std::size_t kbase) {
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                      const std::size_t krow = kbase + ci * cout;
                      if (gx) {
                        double acc = 0.0;
                        for (std::size_t co = 0; co < cout; ++co) acc += g[obase + co] * pk[krow + co];
                        gx[ibase + ci] += acc;
                      }
                      if (gk) {
                        const double xv = px[ibase + ci];
                        for (std::size_t co = 0; co < cout; ++co) gk[krow + co] += xv * g[obase + co];
                      }
                    }
                  });
                });
  }

  // Non-overlapping size×size max pooling of an H×W×C map. Ties resolve to
  // the first cell in row-major window order.
  Tensor max_pool2d(const Tensor& x, std::size_t size = 2) {
    if (x.rank() != 3 || size == 0 || x.dim(0) % size != 0 || x.dim(1) % size != 0) {
      throw DimensionError("max_pool2d: input " + shape_str(x.shape()) +
                           " not divisible by pool size " + std::to_string(size));
    }
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const std::size_t oh = h / size, ow = w / size;
    std::vector<double> out(oh * ow * c);
    std::vector<std::size_t> arg(out.size());
    const double* px = x.data().data();
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          std::size_t best = ((oy * size) * w + ox * size) * c + ch;
          for (std::size_t dy = 0; dy < size; ++dy) {
            for (std::size_t dx = 0; dx < size; ++dx) {
              const std::size_t idx = ((oy * size + dy) * w + ox * size + dx) * c + ch;
              if (px[idx] > px[best]) best = idx;
            }
          }
          const std::size_t o = (oy * ow + ox) * c + ch;
          out[o] = px[best];
          arg[o] = best;
        }
      }
    }
    auto nx = x.node_;
    return emit(OpKind::max_pool2d, {oh, ow, c}, std::move(out), {nx},
                [nx, arg = std::move(arg)](const detail::TensorNode& o) {
                  for (std::size_t i = 0; i < arg.size(); ++i) nx->grad[arg[i]] += o.grad[i];
                });
  }

  // ---------------------------------------------------------------------
  // Elementwise

  Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
    auto nx = x.node_;
    if (record_ && nx->requires_grad) {
      for (double v : in) min_relu_margin_ = std::min(min_relu_margin_, std::abs(v));
    }
    // relu'(0) = 0
    return emit(OpKind::relu, x.shape(), std::move(out), {nx}, [nx](const detail::TensorNode& o) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) {
        if (nx->data[i] > 0.0) nx->grad[i] += o.grad[i];
      }
    });
  }

  Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(in[i]);
    auto nx = x.node_;
    const double fault = sigmoid_fault_;
    return emit(OpKind::sigmoid, x.shape(), std::move(out), {nx},
                [nx, fault](const detail::TensorNode& o) {
                  for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    const double s = o.data[i];
                    nx->grad[i] += fault * o.grad[i] * s * (1.0 - s);
                  }
                });
  }

  Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    auto na = a.node_, nb = b.node_;
    return emit(OpKind::add, a.shape(), std::move(out), {na, nb},
                [na, nb](const detail::TensorNode& o) {
                  for (auto* n : {na.get(), nb.get()}) {
                    if (!n->requires_grad) continue;
                    for (std::size_t i = 0; i < o.grad.size(); ++i) n->grad[i] += o.grad[i];
                  }
                });
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    auto na = a.node_, nb = b.node_;
    return emit(OpKind::mul, a.shape(), std::move(out), {na, nb},
                [na, nb](const detail::TensorNode& o) {
                  for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    if (na->requires_grad) na->grad[i] += o.grad[i] * nb->data[i];
                    if (nb->requires_grad) nb->grad[i] += o.grad[i] * na->data[i];
                  }
                });
  }

  Tensor scale(const Tensor& x, double s) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * x[i];
    auto nx = x.node_;
    return emit(OpKind::scale, x.shape(), std::move(out), {nx}, [nx, s](const detail::TensorNode& o) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) nx->grad[i] += s * o.grad[i];
    });
  }

  // Adds a vector along the last axis of x.
  Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || x.rank() == 0 || bias.dim(0) != x.shape().back()) {
      throw DimensionError("add_bias: bias " + shape_str(bias.shape()) +
                           " does not match last axis of " + shape_str(x.shape()));
    }
    const std::size_t n = bias.dim(0);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % n];
    auto nx = x.node_, nb = bias.node_;
    return emit(OpKind::add_bias, x.shape(), std::move(out), {nx, nb},
                [nx, nb, n](const detail::TensorNode& o) {
                  for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    if (nx->requires_grad) nx->grad[i] += o.grad[i];
                    if (nb->requires_grad) nb->grad[i % n] += o.grad[i];
                  }
                });
  }

  // ---------------------------------------------------------------------
  // Structural

  Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    auto nx = x.node_;
    return emit(OpKind::sum, {1}, {acc}, {nx}, [nx](const detail::TensorNode& o) {
      for (double& g : nx->grad) g += o.grad[0];
    });
  }

  Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
      throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.data().begin(), x.data().end());
    auto nx = x.node_;
    return emit(OpKind::reshape, std::move(shape), std::move(out), {nx},
                [nx](const detail::TensorNode& o) {
                  for (std::size_t i = 0; i < o.grad.size(); ++i) nx->grad[i] += o.grad[i];
                });
  }

  // rows × cols × C sub-block of an H×W×C map starting at (row0, col0).
  Tensor crop(const Tensor& x, std::size_t row0, std::size_t col0, std::size_t rows, std::size_t cols) {
    if (x.rank() != 3 || row0 + rows > x.dim(0) || col0 + cols > x.dim(1)) {
      throw DimensionError("crop: window at (" + std::to_string(row0) + "," + std::to_string(col0) +
                           ") of size " + std::to_string(rows) + "x" + std::to_string(cols) +
                           " exceeds " + shape_str(x.shape()));
    }
    const std::size_t w = x.dim(1), c = x.dim(2);
    std::vector<double> out;
    out.reserve(rows * cols * c);
    const double* px = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = px + ((row0 + r) * w + col0) * c;
      out.insert(out.end(), src, src + cols * c);
    }
    auto nx = x.node_;
    return emit(OpKind::crop, {rows, cols, c}, std::move(out), {nx},
                [nx, row0, col0, rows, cols, w, c](const detail::TensorNode& o) {
                  for (std::size_t r = 0; r < rows; ++r) {
                    double* dst = nx->grad.data() + ((row0 + r) * w + col0) * c;
                    const double* src = o.grad.data() + r * cols * c;
                    for (std::size_t i = 0; i < cols * c; ++i) dst[i] += src[i];
                  }
                });
  }

  // Scalar view of element `index`.
  Tensor pick(const Tensor& x, std::size_t index) {
    if (index >= x.size()) {
      throw DimensionError("pick: index " + std::to_string(index) + " out of range for " +
                           shape_str(x.shape()));
    }
    auto nx = x.node_;
    return emit(OpKind::pick, {1}, {x[index]}, {nx}, [nx, index](const detail::TensorNode& o) {
      nx->grad[index] += o.grad[0];
    });
  }

  // ---------------------------------------------------------------------
  // Selection distributions

  // softmax(logits / temperature) over cells whose mask entry is zero;
  // excluded cells get probability exactly 0.
  Tensor masked_softmax(const Tensor& logits, const CellMask& excluded, double temperature) {
    auto probs = softmax_values(logits, excluded, temperature);
    auto nx = logits.node_;
    return emit(OpKind::masked_softmax, logits.shape(), std::move(probs), {nx},
                [nx, excluded, temperature](const detail::TensorNode& o) {
                  double dot = 0.0;
                  for (std::size_t i = 0; i < o.data.size(); ++i) {
                    if (!excluded[i]) dot += o.data[i] * o.grad[i];
                  }
                  for (std::size_t i = 0; i < o.data.size(); ++i) {
                    if (!excluded[i]) nx->grad[i] += o.data[i] * (o.grad[i] - dot) / temperature;
                  }
                });
  }

  // log of masked_softmax, computed without forming the probabilities.
  // Excluded cells hold 0 and receive no gradient.
  Tensor masked_log_softmax(const Tensor& logits, const CellMask& excluded, double temperature) {
    const auto [shift, log_z] = log_partition(logits, excluded, temperature);
    std::vector<double> out(logits.size(), 0.0);
    std::vector<double> probs(logits.size(), 0.0);
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (excluded[i]) continue;
      out[i] = logits[i] / temperature - shift - log_z;
      probs[i] = std::exp(out[i]);
    }
    auto nx = logits.node_;
    return emit(OpKind::masked_log_softmax, logits.shape(), std::move(out), {nx},
                [nx, excluded, temperature, probs = std::move(probs)](const detail::TensorNode& o) {
                  double total = 0.0;
                  for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    if (!excluded[i]) total += o.grad[i];
                  }
                  for (std::size_t i = 0; i < o.grad.size(); ++i) {
                    if (!excluded[i]) nx->grad[i] += (o.grad[i] - probs[i] * total) / temperature;
                  }
                });
  }

  // ---------------------------------------------------------------------
  // Loss

  // Binary cross-entropy of a probability against a 0/1 label, with the
  // probability clamped to [1e-12, 1 - 1e-12]. Clamped inputs get no gradient.
  Tensor bce(const Tensor& prob, double label) {
    if (prob.size() != 1) throw ContractError("bce: expected a scalar probability, got " + shape_str(prob.shape()));
    constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
    const double p = prob[0];
    const double pc = std::clamp(p, lo, hi);
    const double loss = -(label * std::log(pc) + (1.0 - label) * std::log(1.0 - pc));
    auto np = prob.node_;
    return emit(OpKind::bce, {1}, {loss}, {np}, [np, p, label](const detail::TensorNode& o) {
      if (p < lo || p > hi) return;
      np->grad[0] += o.grad[0] * (-label / p + (1.0 - label) / (1.0 - p));
    });
  }

  // ---------------------------------------------------------------------

  // Populates gradients of every requires_grad tensor reachable from `loss`,
  // then clears the tape.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward: loss must be a scalar, got " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (records_.empty()) throw ContractError("backward: tape is empty");
    if (!loss.requires_grad()) throw ContractError("backward: loss does not depend on any parameter");
    loss.node_->ensure_grad();
    loss.node_->grad[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      for (auto& in : it->inputs) {
        if (in->requires_grad) in->ensure_grad();
      }
      it->backprop(*it->output);
    }
    records_.clear();
  }

  void clear() noexcept { records_.clear(); }

  static double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
  }

  static std::vector<double> softmax_values(const Tensor& logits, const CellMask& excluded,
                                            double temperature) {
    const auto [shift, log_z] = log_partition(logits, excluded, temperature);
    std::vector<double> probs(logits.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (excluded[i]) continue;
      probs[i] = std::exp(logits[i] / temperature - shift);
      total += probs[i];
    }
    for (double& p : probs) p /= total;
    return probs;
  }

 private:
  using NodePtr = std::shared_ptr<detail::TensorNode>;

  struct Record {
    OpKind kind;
    std::vector<NodePtr> inputs;
    NodePtr output;
    std::function<void(const detail::TensorNode&)> backprop;
  };

  Tensor emit(OpKind kind, Shape shape, std::vector<double> data, std::vector<NodePtr> inputs,
              std::function<void(const detail::TensorNode&)> backprop) {
    Tensor out(std::move(shape), std::move(data), false);
    if (!record_) return out;
    const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                   [](const NodePtr& n) { return n->requires_grad; });
    if (!needs) return out;
    out.node_->requires_grad = true;
    records_.push_back(Record{kind, std::move(inputs), out.node_, std::move(backprop)});
    return out;
  }

  static void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
      throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
    }
  }

  // Returns (max scaled logit, log Σ exp(scaled logit − max)) over admissible cells.
  static std::pair<double, double> log_partition(const Tensor& logits, const CellMask& excluded,
                                                 double temperature) {
    if (excluded.size() != logits.size()) {
      throw DimensionError("masked softmax: mask has " + std::to_string(excluded.size()) +
                           " cells, logits " + shape_str(logits.shape()));
    }
    if (!(temperature > 0.0)) throw ContractError("masked softmax: temperature must be positive");
    double shift = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < logits.size(); ++i) {
      if (!excluded[i]) shift = std::max(shift, logits[i] / temperature);
    }
    if (shift == -std::numeric_limits<double>::infinity()) {
      throw ExhaustedLocationsError("masked softmax: every cell is masked");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      if (!excluded[i]) total += std::exp(logits[i] / temperature - shift);
    }
    return {shift, std::log(total)};
  }

  bool record_ = true;
  double sigmoid_fault_ = 1.0;
  double min_relu_margin_ = std::numeric_limits<double>::infinity();
  std::vector<Record> records_;
};

}  // namespace attnet
