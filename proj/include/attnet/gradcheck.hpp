#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "attnet/tape.hpp"
#include "attnet/tensor.hpp"

namespace attnet {

struct GradcheckOptions {
  double h = 1e-5;
  double tolerance = 1e-6;
  // Denominator floor of the relative error, so coordinates whose true
  // gradient is ~0 are judged on absolute error instead.
  double denominator_floor = 1e-6;
  // Inputs are shifted by kink_shift while any relu pre-activation lies
  // within kink_margin of 0, at most max_kink_shifts times.
  double kink_margin = 1e-4;
  double kink_shift = 1e-3;
  int max_kink_shifts = 25;
};

struct GradcheckBlock {
  std::string name;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = true;
};

struct GradcheckReport {
  std::vector<GradcheckBlock> blocks;
  double max_rel_error = 0.0;
  int kink_shifts = 0;
  bool passed = true;
};

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Compares the tape gradient of the scalar `loss_fn` against central
// differences for every coordinate of every input. `loss_fn` must rebuild the
// computation on the tape it is handed. Inputs are restored afterwards.
// `configure` is applied to the tape used for the analytic pass.
inline GradcheckReport gradcheck(const std::function<Tensor(Tape&)>& loss_fn,
                                 std::vector<NamedTensor> inputs,
                                 const GradcheckOptions& opt = {},
                                 const std::function<void(Tape&)>& configure = {}) {
  std::vector<std::vector<double>> original;
  for (auto& in : inputs) original.emplace_back(in.tensor.data().begin(), in.tensor.data().end());

  GradcheckReport report;
  for (;;) {
    Tape probe;
    loss_fn(probe);
    if (probe.min_relu_margin() >= opt.kink_margin || report.kink_shifts >= opt.max_kink_shifts) break;
    for (auto& in : inputs) {
      for (double& v : in.tensor.mutable_data()) v += opt.kink_shift;
    }
    ++report.kink_shifts;
  }

  for (auto& in : inputs) in.tensor.zero_grad();
  {
    Tape tape;
    if (configure) configure(tape);
    Tensor loss = loss_fn(tape);
    tape.backward(loss);
  }

  auto evaluate = [&] {
    Tape tape = Tape::inference();
    return loss_fn(tape).item();
  };

  for (auto& in : inputs) {
    GradcheckBlock block;
    block.name = in.name;
    block.coordinates = in.tensor.size();
    std::vector<double> analytic(in.tensor.size(), 0.0);
    if (in.tensor.has_grad()) analytic.assign(in.tensor.grad().begin(), in.tensor.grad().end());
    auto values = in.tensor.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opt.h;
      const double up = evaluate();
      values[i] = saved - opt.h;
      const double down = evaluate();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * opt.h);
      double err = relative_error(analytic[i], numeric, opt.denominator_floor);
      if (std::isnan(err)) err = std::numeric_limits<double>::infinity();
      if (err > block.max_rel_error) {
        block.max_rel_error = err;
        block.worst_index = i;
        block.analytic_at_worst = analytic[i];
        block.numeric_at_worst = numeric;
      }
    }
    block.passed = block.max_rel_error < opt.tolerance;
    report.max_rel_error = std::max(report.max_rel_error, block.max_rel_error);
    report.passed = report.passed && block.passed;
    report.blocks.push_back(std::move(block));
  }

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::copy(original[k].begin(), original[k].end(), inputs[k].tensor.mutable_data().begin());
  }
  return report;
}

}  // namespace attnet
