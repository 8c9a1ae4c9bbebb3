#pragma once

// Pre-training (dual-branch masked reconstruction) and fine-tuning
// (classification) loops. Every random draw of step s comes from a generator
// seeded with (seed, s), so a run resumed from a checkpoint replays exactly.

#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "femae/checkpoint.hpp"
#include "femae/config.hpp"
#include "femae/data.hpp"
#include "femae/errors.hpp"
#include "femae/network.hpp"
#include "femae/optim.hpp"
#include "femae/patchmask.hpp"

namespace femae {

/// Generator for one training step (or one evaluation item).
inline Rng step_rng(std::uint64_t seed, std::size_t step, std::uint32_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32), stream};
  return Rng(seq);
}

/// Resample to the model's point count when needed, augment, patchify.
template <typename T>
PatchSet<T> prepare(const Tensor<T>& cloud, const ModelConfig& c, Augmentation aug, Rng& rng) {
  Tensor<T> pts = cloud.dim(0) == c.points ? cloud : sample_points(cloud, c.points, rng).points;
  if (aug != Augmentation::None) pts = augment(pts, aug, rng);
  return patchify(pts, c.patches, c.group_size);
}

struct PretrainLogRow {
  std::size_t step = 0;
  std::optional<double> loss_global;
  std::optional<double> loss_local;
  double lr = 0;
  double loss() const { return loss_global.value_or(0.0) + loss_local.value_or(0.0); }
};

struct FinetuneLogRow {
  std::size_t step = 0;
  double loss = 0;
  double acc = 0;  // batch accuracy before the update
  double lr = 0;
};

namespace train_detail {

inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

template <typename T>
std::vector<Parameter<T>*> param_list(PointFemae<T>& model) {
  std::vector<Parameter<T>*> out;
  for (const auto& e : model.params().entries()) out.push_back(e.param.get());
  return out;
}

template <typename T>
std::vector<std::size_t> draw_batch(std::size_t n_items, std::size_t batch, Rng& rng) {
  if (n_items == 0) throw UsageError("training set is empty");
  std::uniform_int_distribution<std::size_t> d(0, n_items - 1);
  std::vector<std::size_t> out(batch);
  for (auto& i : out) i = d(rng);
  return out;
}

}  // namespace train_detail

inline void write_pretrain_header(std::ostream& out) { out << "step,loss_g,loss_l,lr\n"; }
inline void write_pretrain_row(std::ostream& out, const PretrainLogRow& r) {
  using train_detail::num;
  out << r.step << ',' << (r.loss_global ? num(*r.loss_global) : "") << ','
      << (r.loss_local ? num(*r.loss_local) : "") << ',' << num(r.lr) << '\n';
}
inline void write_finetune_header(std::ostream& out) { out << "step,loss,acc\n"; }
inline void write_finetune_row(std::ostream& out, const FinetuneLogRow& r) {
  using train_detail::num;
  out << r.step << ',' << num(r.loss) << ',' << num(r.acc) << '\n';
}

/// Masked-reconstruction training. The classifier head is frozen; it takes no part in the loss.
template <typename T>
class Pretrainer {
 public:
  Pretrainer(PointFemae<T>& model, std::vector<Tensor<T>> clouds, TrainConfig tc)
      : model_(model), clouds_(std::move(clouds)), tc_(tc) {
    tc_.validate();
    if (clouds_.empty()) throw UsageError("pre-training needs at least one cloud");
    for (const auto& e : model_.params().entries()) e.param->trainable = e.group != ParamGroup::Classifier;
  }

  std::size_t next_step() const { return step_; }
  bool done() const { return step_ >= tc_.steps; }
  AdamState<T>& adam() { return adam_; }

  PretrainLogRow step() {
    const std::size_t s = step_;
    Rng rng = step_rng(tc_.seed, s);
    const auto batch = train_detail::draw_batch<T>(clouds_.size(), tc_.batch_size, rng);
    model_.params().zero_grad();
    double lg = 0, ll = 0;
    bool has_g = false, has_l = false;
    const T inv = T(1) / static_cast<T>(batch.size());
    try {
      for (std::size_t i : batch) {
        PatchSet<T> ps = prepare(clouds_[i], model_.config(), tc_.augmentation, rng);
        Graph<T> g;
        auto out = model_.pretrain_forward(g, ps, rng);
        if (out.loss_global) has_g = true, lg += static_cast<double>(out.loss_global->value()[0]);
        if (out.loss_local) has_l = true, ll += static_cast<double>(out.loss_local->value()[0]);
        g.backward(scale(out.loss, inv));
      }
    } catch (const NumericError& e) {
      throw NumericError("pre-training step " + std::to_string(s) + ": " + e.what());
    }
    PretrainLogRow row;
    row.step = s;
    if (has_g) row.loss_global = lg / static_cast<double>(batch.size());
    if (has_l) row.loss_local = ll / static_cast<double>(batch.size());
    if (!std::isfinite(row.loss())) throw NumericError("pre-training step " + std::to_string(s) + ": loss is not finite");
    row.lr = lr_schedule(s, tc_.steps, tc_.warmup_steps, tc_.base_lr);
    auto params = train_detail::param_list(model_);
    adamw_step<T>(params, adam_, row.lr, AdamConfig{0.9, 0.999, 1e-8, tc_.weight_decay});
    ++step_;
    return row;
  }

  /// Runs the remaining steps, appending one metrics line per step.
  std::vector<PretrainLogRow> run(std::ostream* metrics = nullptr) {
    std::vector<PretrainLogRow> rows;
    while (!done()) {
      rows.push_back(step());
      if (metrics) write_pretrain_row(*metrics, rows.back());
    }
    return rows;
  }

  Checkpoint checkpoint() const {
    return capture(model_, &adam_, {{"kind", "pretrain"}, {"step", step_}, {"seed", tc_.seed}});
  }

  /// Restores parameters, optimizer moments and the step counter.
  void resume(const Checkpoint& ck) {
    restore(model_, ck, &adam_, RestoreScope::Full);
    step_ = ck.meta.value("step", std::size_t{0});
  }

 private:
  PointFemae<T>& model_;
  std::vector<Tensor<T>> clouds_;
  TrainConfig tc_;
  AdamState<T> adam_;
  std::size_t step_ = 0;
};

/// Applies the fine-tuning freeze pattern: decoders are always frozen; lem_and_head
/// leaves only the LEM stacks and the classifier trainable.
template <typename T>
void apply_finetune_freeze(PointFemae<T>& model, FinetuneMode mode) {
  if (mode == FinetuneMode::LemAndHead && model.lems().empty()) {
    throw ConfigError(std::string("variant ") + to_char(model.config().variant) +
                      " has no LEM; lem_and_head fine-tuning would train only the head");
  }
  for (const auto& e : model.params().entries()) {
    const bool decoder = e.group == ParamGroup::DecoderGlobal || e.group == ParamGroup::DecoderLocal;
    if (mode == FinetuneMode::Full) {
      e.param->trainable = !decoder;
    } else {
      e.param->trainable = e.group == ParamGroup::Lem || e.group == ParamGroup::Classifier;
    }
  }
}

template <typename T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t r) {
  const std::size_t n = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < n; ++j)
    if (logits.at(r, j) > logits.at(r, best)) best = j;
  return best;
}

/// Classification training on labeled clouds with cross-entropy.
template <typename T>
class Finetuner {
 public:
  Finetuner(PointFemae<T>& model, std::vector<Sample<T>> items, TrainConfig tc)
      : model_(model), items_(std::move(items)), tc_(tc) {
    tc_.validate();
    if (items_.empty()) throw UsageError("fine-tuning needs at least one labeled cloud");
    for (const auto& it : items_) {
      if (it.label < 0 || static_cast<std::size_t>(it.label) >= model_.config().num_classes) {
        throw UsageError("label " + std::to_string(it.label) + " of '" + it.id + "' is outside the model's " +
                         std::to_string(model_.config().num_classes) + " classes");
      }
    }
    apply_finetune_freeze(model_, tc_.finetune_mode);
  }

  std::size_t next_step() const { return step_; }
  bool done() const { return step_ >= tc_.steps; }
  AdamState<T>& adam() { return adam_; }

  FinetuneLogRow step() {
    const std::size_t s = step_;
    Rng rng = step_rng(tc_.seed, s);
    const auto batch = train_detail::draw_batch<T>(items_.size(), tc_.batch_size, rng);
    model_.params().zero_grad();
    double loss = 0;
    std::size_t correct = 0;
    const T inv = T(1) / static_cast<T>(batch.size());
    try {
      for (std::size_t i : batch) {
        PatchSet<T> ps = prepare(items_[i].points, model_.config(), tc_.augmentation, rng);
        Graph<T> g;
        Var<T> logits = model_.classify(g, ps);
        Var<T> l = softmax_cross_entropy(logits, {static_cast<std::size_t>(items_[i].label)});
        loss += static_cast<double>(l.value()[0]);
        correct += argmax_row(logits.value(), 0) == static_cast<std::size_t>(items_[i].label);
        g.backward(scale(l, inv));
      }
    } catch (const NumericError& e) {
      throw NumericError("fine-tuning step " + std::to_string(s) + ": " + e.what());
    }
    FinetuneLogRow row;
    row.step = s;
    row.loss = loss / static_cast<double>(batch.size());
    row.acc = static_cast<double>(correct) / static_cast<double>(batch.size());
    if (!std::isfinite(row.loss)) throw NumericError("fine-tuning step " + std::to_string(s) + ": loss is not finite");
    row.lr = lr_schedule(s, tc_.steps, tc_.warmup_steps, tc_.base_lr);
    auto params = train_detail::param_list(model_);
    adamw_step<T>(params, adam_, row.lr, AdamConfig{0.9, 0.999, 1e-8, tc_.weight_decay});
    ++step_;
    return row;
  }

  std::vector<FinetuneLogRow> run(std::ostream* metrics = nullptr) {
    std::vector<FinetuneLogRow> rows;
    while (!done()) {
      rows.push_back(step());
      if (metrics) write_finetune_row(*metrics, rows.back());
    }
    return rows;
  }

  Checkpoint checkpoint() const {
    return capture(model_, &adam_,
                   {{"kind", "finetune"}, {"step", step_}, {"seed", tc_.seed}, {"mode", to_string(tc_.finetune_mode)}});
  }

  void resume(const Checkpoint& ck) {
    restore(model_, ck, &adam_, RestoreScope::Full);
    step_ = ck.meta.value("step", std::size_t{0});
  }

 private:
  PointFemae<T>& model_;
  std::vector<Sample<T>> items_;
  TrainConfig tc_;
  AdamState<T> adam_;
  std::size_t step_ = 0;
};

template <typename T>
std::vector<PretrainLogRow> run_pretrain(PointFemae<T>& model, std::vector<Tensor<T>> clouds, const TrainConfig& tc,
                                         std::ostream* metrics = nullptr) {
  Pretrainer<T> t(model, std::move(clouds), tc);
  return t.run(metrics);
}

template <typename T>
std::vector<FinetuneLogRow> run_finetune(PointFemae<T>& model, std::vector<Sample<T>> items, const TrainConfig& tc,
                                         std::ostream* metrics = nullptr) {
  Finetuner<T> t(model, std::move(items), tc);
  return t.run(metrics);
}

}  // namespace femae
