#pragma once

// Epsilon-prediction training under condition dropout.
//
// Per iteration the training stream is consumed in a fixed order: batch
// indices, timesteps, dropout flags (text then image per sample), noise.
// That order together with the checkpointed stream state makes resumed runs
// bit-identical to uninterrupted ones.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <optional>

#include "mcdiff/adam.hpp"
#include "mcdiff/checkpoint.hpp"

namespace mcdiff {

template <typename T>
struct TrainBatch {
  Tensor<T> x0;      // [B, 3, H, W]
  Tensor<T> layout;  // [B, C_cond, H, W]
  std::vector<std::vector<int>> prompts;
};

template <typename T>
TrainBatch<T> make_batch(const std::vector<DataSample<T>>& data, const std::vector<std::size_t>& idx,
                         const PromptVocab& vocab) {
  if (idx.empty()) throw ShapeError("training batch is empty");
  const Shape& ts = data.at(idx[0]).target.shape();
  const Shape& ls = data.at(idx[0]).layout.shape();
  TrainBatch<T> b{Tensor<T>(Shape{idx.size(), ts[0], ts[1], ts[2]}), Tensor<T>(Shape{idx.size(), ls[0], ls[1], ls[2]}),
                  {}};
  const std::size_t nt = shape_numel(ts), nl = shape_numel(ls);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& s = data.at(idx[i]);
    std::copy(s.target.vec().begin(), s.target.vec().end(), &b.x0[i * nt]);
    std::copy(s.layout.vec().begin(), s.layout.vec().end(), &b.layout[i * nl]);
    b.prompts.push_back(vocab.encode(s.prompt));
  }
  return b;
}

struct StepResult {
  double loss = 0;
  std::vector<int> t;
  std::vector<DropoutFlags> flags;
};

// One loss/gradient evaluation: draws t ~ U{1..T}, dropout flags and eps from
// `rng` (in that order), then accumulates d(loss)/d(param) into param.grad.
template <typename T>
StepResult training_step(Model<T>& m, const TrainBatch<T>& batch, const NoiseSchedule& sched, Rng& rng, double d_p,
                         double d_x) {
  const std::size_t B = batch.x0.dim(0);
  if (B == 0) throw ShapeError("training_step: empty batch");
  StepResult res;
  res.t.resize(B);
  for (auto& t : res.t) t = 1 + int(rng.uniform_int(std::uint64_t(sched.steps())));
  res.flags = draw_condition_dropout(rng, B, d_p, d_x);
  const Tensor<T> eps = gaussian<T>(rng, batch.x0.shape());

  Tensor<T> xt(batch.x0.shape());
  const std::size_t n = batch.x0.size() / B;
  for (std::size_t b = 0; b < B; ++b) {
    const double ab = sched.alpha_bar(res.t[b]);
    const T a = T(std::sqrt(ab)), s = T(std::sqrt(1.0 - ab));
    for (std::size_t i = b * n; i < (b + 1) * n; ++i) xt[i] = a * batch.x0[i] + s * eps[i];
  }

  Tape<T> tp;
  std::vector<bool> drop_t(B), drop_x(B);
  for (std::size_t b = 0; b < B; ++b) {
    drop_t[b] = res.flags[b].text;
    drop_x[b] = res.flags[b].image;
  }
  Var<T> zp = select_batch(m.encode_prompts(tp, batch.prompts), m.text_null(tp), drop_t);
  Var<T> zx = select_batch(m.encode_images(tp, tp.constant(batch.layout)), m.z_phi(tp), drop_x);
  Var<T> z = m.fuse(tp, zp, zx);
  Var<T> pred = m.predict_eps(tp, tp.constant(std::move(xt)), res.t, z);
  Var<T> loss = mse(pred, tp.constant(eps));
  res.loss = double(loss.value()[0]);
  tp.backward(loss);
  return res;
}

// Scales all trainable gradients so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Param<T>*>& params, double max_norm) {
  double sq = 0;
  for (auto* p : params)
    if (p->trainable && !p->grad.empty())
      for (auto g : p->grad.vec()) sq += double(g) * double(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T f = T(max_norm / (norm + 1e-6));
    for (auto* p : params)
      if (p->trainable && !p->grad.empty())
        for (auto& g : p->grad.vec()) g *= f;
  }
  return norm;
}

inline double warmup_lr(double lr, std::uint64_t iteration, std::uint64_t warmup) {
  if (warmup == 0 || iteration >= warmup) return lr;
  return lr * double(iteration + 1) / double(warmup);
}

struct TrainProgress {
  std::uint64_t iteration;  // completed iterations
  double loss;
  double smoothed_loss;
  double lr;
  double grad_norm;
};

// Float model training state: parameters, optimizer, stream and dataset.
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init(Rng(cfg_.seed).split("train"));
  }

  // Resumes from a checkpoint. `cfg` may only differ in iterations,
  // checkpoint/log intervals and output directory.
  Trainer(const Checkpoint& ck, std::optional<TrainConfig> cfg = std::nullopt) : cfg_(ck.config) {
    if (cfg) {
      TrainConfig a = *cfg, b = ck.config;
      a.iterations = b.iterations = 0;
      a.checkpoint_interval = b.checkpoint_interval = 0;
      a.log_interval = b.log_interval = 0;
      a.out_dir = b.out_dir = "";
      if (json(a) != json(b)) throw DomainError("resume: config differs from the checkpoint beyond run length/output");
      cfg_.iterations = cfg->iterations;
      cfg_.checkpoint_interval = cfg->checkpoint_interval;
      cfg_.log_interval = cfg->log_interval;
      cfg_.out_dir = cfg->out_dir;
    }
    cfg_.validate();
    model_ = std::make_unique<Model<float>>(model_from_checkpoint<float>(ck));
    init_common();
    rng_ = Rng::from_state(ck.rng_state);
    iteration_ = ck.iteration;
    adam_->set_steps(ck.adam_step);
    auto named = model_->named_params();
    for (std::size_t i = 0; i < named.size(); ++i) {
      const auto* m = ck.find("adam.m." + named[i].first);
      const auto* v = ck.find("adam.v." + named[i].first);
      if (!m || !v) continue;
      adam_->moments()[i].m = *m;
      adam_->moments()[i].v = *v;
    }
  }

  const TrainConfig& config() const { return cfg_; }
  Model<float>& model() { return *model_; }
  const NoiseSchedule& schedule() const { return sched_; }
  std::uint64_t iteration() const { return iteration_; }
  const Rng& rng() const { return rng_; }
  const std::vector<DataSample<float>>& dataset() const { return data_; }

  // One optimizer step.
  TrainProgress step() {
    std::vector<std::size_t> idx(cfg_.batch);
    for (auto& i : idx) i = std::size_t(rng_.uniform_int(data_.size()));
    const auto batch = make_batch(data_, idx, model_->vocab());
    model_->zero_grad();
    const StepResult r = training_step(*model_, batch, sched_, rng_, cfg_.d_p, cfg_.d_x);
    const double norm = clip_grad_norm(params_, cfg_.grad_clip);
    const double lr = warmup_lr(cfg_.lr, iteration_, cfg_.warmup);
    adam_->step(lr);
    ++iteration_;
    smoothed_ = iteration_ == 1 ? r.loss : 0.98 * smoothed_ + 0.02 * r.loss;
    return {iteration_, r.loss, smoothed_, lr, norm};
  }

  // Trains until `until` iterations (default: config) have completed, saving
  // a checkpoint every checkpoint_interval iterations and at the end when
  // `ckpt_path` is set.
  void run(std::optional<std::uint64_t> until = std::nullopt,
           const std::function<void(const TrainProgress&)>& on_progress = {},
           const std::optional<std::filesystem::path>& ckpt_path = std::nullopt) {
    const std::uint64_t end = until.value_or(cfg_.iterations);
    while (iteration_ < end) {
      const TrainProgress p = step();
      if (on_progress && cfg_.log_interval && (p.iteration % cfg_.log_interval == 0 || p.iteration == end))
        on_progress(p);
      if (ckpt_path && cfg_.checkpoint_interval && p.iteration % cfg_.checkpoint_interval == 0 && p.iteration != end)
        save_checkpoint(checkpoint(), *ckpt_path);
    }
    if (ckpt_path) save_checkpoint(checkpoint(), *ckpt_path);
  }

  Checkpoint checkpoint() {
    Checkpoint ck;
    ck.config = cfg_;
    ck.vocab = model_->vocab().tokens();
    ck.iteration = iteration_;
    ck.rng_state = rng_.state();
    ck.adam_step = adam_->steps();
    auto named = model_->named_params();
    for (const auto& [name, p] : named) ck.tensors.emplace_back(name, p->value);
    for (std::size_t i = 0; i < named.size(); ++i) {
      const auto& mo = adam_->moments()[i];
      if (mo.m.empty()) continue;
      ck.tensors.emplace_back("adam.m." + named[i].first, mo.m);
      ck.tensors.emplace_back("adam.v." + named[i].first, mo.v);
    }
    return ck;
  }

 private:
  void init(Rng train_rng) {
    model_ = std::make_unique<Model<float>>(cfg_.model, cfg_.seed);
    init_common();
    rng_ = train_rng;
  }

  void init_common() {
    sched_ = cfg_.schedule.build();
    const Canvas canvas{cfg_.dataset.canvas, cfg_.dataset.canvas};
    data_ = generate_dataset<float>(cfg_.dataset.size, canvas, cfg_.dataset.seed);
    if (cfg_.model.cond.image_channels != 1)
      throw DomainError("train config: the synthetic layouts are single-channel (model.cond.image_channels = 1)");
    params_.clear();
    for (auto& [name, p] : model_->named_params()) params_.push_back(p);
    adam_ = std::make_unique<Adam<float>>(params_);
  }

  TrainConfig cfg_;
  std::unique_ptr<Model<float>> model_;
  NoiseSchedule sched_{std::vector<double>{0.5}};
  std::vector<DataSample<float>> data_;
  std::vector<Param<float>*> params_;
  std::unique_ptr<Adam<float>> adam_;
  Rng rng_;
  std::uint64_t iteration_ = 0;
  double smoothed_ = 0;
};

}  // namespace mcdiff
