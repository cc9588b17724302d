#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "attnet/checkpoint.hpp"
#include "attnet/errors.hpp"
#include "attnet/frontend.hpp"
#include "attnet/model.hpp"
#include "attnet/random.hpp"
#include "attnet/tape.hpp"

namespace attnet {

// Sub-seed streams derived from the run seed.
inline constexpr std::uint64_t kModelInitStream = 1;
inline constexpr std::uint64_t kTrainerStream = 2;

struct TrainerConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  double temperature = 1.0;
  double baseline_decay = 0.9;
  double policy_weight = 1.0;
  double entropy_weight = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (!(baseline_decay >= 0.0 && baseline_decay < 1.0)) throw ConfigError("baseline_decay must lie in [0, 1)");
    if (!(policy_weight > 0.0)) throw ConfigError("policy_weight must be positive");
    if (!(entropy_weight >= 0.0)) throw ConfigError("entropy_weight must be non-negative");
  }
};

// A display reduced to what training needs: its frozen features and label.
struct Trial {
  V4Map features;
  Label label = Label::absent;
};

// BCE on the decision plus REINFORCE on the four location choices, with the
// baseline held constant:
//   loss = BCE(p, y) − λ·(R − b)·Σ log π(loc_t) − η·H(π)
inline Tensor compute_loss(Tape& tape, const EpisodeRecord& ep, double baseline, double policy_weight,
                           double entropy_weight = 0.0) {
  if (!ep.decision.defined() || ep.log_probs.size() != kFixations - 1) {
    throw ContractError("compute_loss: episode lacks a decision or its " + std::to_string(kFixations - 1) +
                        " selection log-probabilities");
  }
  const double y = ep.label == Label::present ? 1.0 : 0.0;
  Tensor loss = tape.bce(ep.decision, y);
  Tensor logp = ep.log_probs.front();
  for (std::size_t t = 1; t < ep.log_probs.size(); ++t) logp = tape.add(logp, ep.log_probs[t]);
  const double advantage = ep.reward - baseline;
  loss = tape.add(loss, tape.scale(logp, -policy_weight * advantage));
  if (entropy_weight != 0.0) {
    if (!ep.entropy.defined()) throw ContractError("compute_loss: entropy weight set but entropy was not tracked");
    loss = tape.add(loss, tape.scale(ep.entropy, -entropy_weight));
  }
  return loss;
}

// Exponential moving average of reward.
inline double update_baseline(double baseline, double reward, double decay) {
  return decay * baseline + (1.0 - decay) * reward;
}

inline constexpr double kInitialBaseline = 0.5;

// Adam with bias correction (β1 0.9, β2 0.999, ε 1e-8).
class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEpsilon = 1e-8;

  Adam() = default;
  Adam(const std::vector<NamedTensor>& blocks, double lr) : lr_(lr) {
    for (const auto& b : blocks) {
      names_.push_back(b.name);
      first_.emplace_back(b.tensor.size(), 0.0);
      second_.emplace_back(b.tensor.size(), 0.0);
    }
  }

  void step(std::vector<NamedTensor> blocks) {
    ++step_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < blocks.size(); ++k) {
      auto values = blocks[k].tensor.mutable_data();
      auto grad = blocks[k].tensor.grad();
      auto& m = first_[k];
      auto& v = second_[k];
      for (std::size_t i = 0; i < values.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * grad[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * grad[i] * grad[i];
        values[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEpsilon);
      }
    }
  }

  std::uint64_t steps() const noexcept { return step_; }

  void store(Checkpoint& ck) const {
    ck.optimizer_step = step_;
    for (std::size_t k = 0; k < names_.size(); ++k) ck.moments.push_back({names_[k], first_[k], second_[k]});
  }

  void restore(const Checkpoint& ck) {
    if (ck.moments.size() != names_.size()) throw ConfigError("checkpoint optimizer state does not match the model");
    for (std::size_t k = 0; k < names_.size(); ++k) {
      const auto& m = ck.moments[k];
      if (m.name != names_[k] || m.first.size() != first_[k].size()) {
        throw ConfigError("checkpoint optimizer block " + m.name + " does not match " + names_[k]);
      }
      first_[k] = m.first;
      second_[k] = m.second;
    }
    step_ = ck.optimizer_step;
  }

 private:
  double lr_ = 1e-3;
  std::uint64_t step_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

// Copies checkpoint blocks into a tensor set, matching names and shapes.
inline void load_blocks(const Checkpoint& ck, const std::vector<NamedTensor>& into) {
  for (const auto& dst : into) {
    const auto* src = ck.find(dst.name);
    if (!src) throw ConfigError("checkpoint lacks parameter block " + dst.name);
    if (src->shape != dst.tensor.shape()) {
      throw ConfigError("parameter block " + dst.name + " has shape " + shape_str(src->shape) + " in checkpoint but " +
                        shape_str(dst.tensor.shape()) + " in config");
    }
    auto values = dst.tensor;  // shared handle
    std::copy(src->values.begin(), src->values.end(), values.mutable_data().begin());
  }
}

inline ModelParams model_from_checkpoint(const Checkpoint& ck, const ModelConfig& cfg) {
  ModelParams p = ModelParams::init(0, cfg);
  load_blocks(ck, p.blocks());
  return p;
}

inline FrontendParams frontend_from_checkpoint(const Checkpoint& ck, const FrontendConfig& cfg) {
  FrontendParams f = build_frontend(0, cfg);
  load_blocks(ck, f.blocks());
  return f;
}

inline Checkpoint make_checkpoint(const FrontendParams& frontend, const ModelParams& params, const Adam& adam,
                                  double baseline, std::uint32_t epoch, const Rng& rng) {
  Checkpoint ck;
  ck.add_blocks(frontend.blocks());
  ck.add_blocks(params.blocks());
  adam.store(ck);
  ck.baseline = baseline;
  ck.epoch = epoch;
  ck.rng_state = rng.state();
  return ck;
}

// Fraction of trials whose argmax-mode decision matches the label.
inline double evaluate_accuracy(const ModelParams& params, std::span<const Trial> trials, const EpisodeOptions& opt) {
  if (trials.empty()) return 0.0;
  Rng unused(0);
  std::size_t correct = 0;
  for (const auto& trial : trials) {
    Tape tape = Tape::inference();
    EpisodeRecord ep = run_episode(tape, trial.features, params, opt, unused);
    score_episode(ep, trial.label);
    correct += ep.reward > 0.5 ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(trials.size());
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double mean_reward = 0.0;
  double baseline = 0.0;
};

struct TrainResult {
  ModelParams params;
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
};

// Hybrid REINFORCE + classification training. Episodes are rolled out in
// sample mode; per-episode gradients are summed in trial-index order within a
// batch, averaged, and applied with Adam. The baseline is updated after each
// episode. Fully deterministic given cfg.seed.
inline TrainResult train(const TrainerConfig& cfg, const ModelConfig& model_cfg, const FrontendParams& frontend,
                         std::span<const Trial> train_set, std::span<const Trial> val_set,
                         const Checkpoint* resume = nullptr,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  model_cfg.validate();
  if (train_set.empty()) throw ConfigError("training set is empty");

  TrainResult result;
  result.params = ModelParams::init(derive_seed(cfg.seed, kModelInitStream), model_cfg);
  ModelParams& params = result.params;
  Adam adam(params.blocks(), cfg.learning_rate);
  Rng rng(derive_seed(cfg.seed, kTrainerStream));
  double baseline = kInitialBaseline;
  std::size_t first_epoch = 0;
  if (resume) {
    load_blocks(*resume, params.blocks());
    adam.restore(*resume);
    rng.set_state(resume->rng_state);
    baseline = resume->baseline;
    first_epoch = resume->epoch;
  }

  EpisodeOptions rollout;
  rollout.mode = SelectMode::sample;
  rollout.temperature = cfg.temperature;
  rollout.dorsal_window = model_cfg.resolved_dorsal_window();
  rollout.track_entropy = cfg.entropy_weight != 0.0;
  EpisodeOptions greedy = rollout;
  greedy.mode = SelectMode::argmax;
  greedy.track_entropy = false;

  std::vector<std::size_t> order(train_set.size());
  for (std::size_t epoch = first_epoch; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    double loss_sum = 0.0, reward_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      params.zero_grad();
      for (std::size_t i = start; i < stop; ++i) {
        const Trial& trial = train_set[order[i]];
        Tape tape;
        EpisodeRecord ep = run_episode(tape, trial.features, params, rollout, rng);
        score_episode(ep, trial.label);
        Tensor loss = compute_loss(tape, ep, baseline, cfg.policy_weight, cfg.entropy_weight);
        loss_sum += loss.item();
        reward_sum += ep.reward;
        tape.backward(loss);
        baseline = update_baseline(baseline, ep.reward, cfg.baseline_decay);
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (auto& block : params.blocks()) {
        for (double& g : block.tensor.mutable_grad()) {
          g *= inv;
          if (!std::isfinite(g)) {
            throw NumericError(block.name, "non-finite gradient in parameter block " + block.name + " at epoch " +
                                               std::to_string(epoch + 1));
          }
        }
      }
      adam.step(params.blocks());
    }

    EpochLog row;
    row.epoch = epoch + 1;
    row.train_loss = loss_sum / static_cast<double>(order.size());
    row.mean_reward = reward_sum / static_cast<double>(order.size());
    row.train_acc = row.mean_reward;
    row.val_acc = evaluate_accuracy(params, val_set, greedy);
    row.baseline = baseline;
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  params.zero_grad();
  result.checkpoint = make_checkpoint(frontend, params, adam, baseline,
                                      static_cast<std::uint32_t>(std::max(first_epoch, cfg.epochs)), rng);
  return result;
}

}  // namespace attnet
