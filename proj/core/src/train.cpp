#include "ratekd/train.hpp"

#include <cmath>
#include <numbers>

RATEKD_BEGIN_NAMESPACE

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(weight_decay >= 0)) throw ConfigError("weight decay must be non-negative");
  if (timesteps < 1) throw ConfigError("timesteps must be >= 1");
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must lie in [0, 1]");
  if (lr_milestone < 1) throw ConfigError("lr milestone must be >= 1");
}

Real lr_schedule(LrScheduleKind kind, double epoch, int total_epochs, Real base_lr, int milestone) {
  switch (kind) {
    case LrScheduleKind::Cosine:
      return static_cast<Real>(static_cast<double>(base_lr) * 0.5 *
                               (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(total_epochs))));
    case LrScheduleKind::Step:
      return static_cast<Real>(static_cast<double>(base_lr) *
                               std::pow(0.1, std::floor(epoch / static_cast<double>(milestone))));
    case LrScheduleKind::Constant:
      break;
  }
  return base_lr;
}

void sgd_update(const std::vector<Parameter*>& params, const GradMap& grads, OptimizerState& state,
                Real lr, Real momentum, Real weight_decay) {
  for (Parameter* p : params) {
    if (p->frozen) continue;
    auto g = grads.find(p->name);
    if (g == grads.end()) continue;
    if (!(g->second.shape() == p->value.shape())) {
      throw ContractError("sgd_update: gradient " + g->second.shape().to_string() + " for '" + p->name +
                          "' of shape " + p->value.shape().to_string());
    }
    auto [it, fresh] = state.velocity.try_emplace(p->name, p->value.shape());
    Tensor& v = it->second;
    if (!(v.shape() == p->value.shape())) throw ContractError("sgd_update: stale momentum buffer for '" + p->name + "'");
    const Real wd = p->decay ? weight_decay : Real(0);
    Real* w = p->value.data();
    const Real* gd = g->second.data();
    for (std::int64_t i = 0; i < v.numel(); ++i) {
      v[i] = momentum * v[i] + (gd[i] + wd * w[i]);
      w[i] -= lr * v[i];
    }
  }
  ++state.step;
}

Sgd::Sgd(std::vector<Parameter*> params, Real momentum, Real weight_decay)
    : momentum_(momentum), weight_decay_(weight_decay) {
  for (Parameter* p : params)
    if (!p->frozen) params_.push_back(p);
}

void Sgd::step(const GradMap& grads, Real lr) { sgd_update(params_, grads, state_, lr, momentum_, weight_decay_); }

std::vector<Parameter*> trainable(BlockPartition& snn, std::vector<Connector>* connectors) {
  std::vector<Parameter*> out;
  for (Parameter* p : snn.parameters())
    if (!p->frozen) out.push_back(p);
  if (connectors) {
    for (auto& c : *connectors)
      for (Parameter* p : c.tables().params)
        if (!p->frozen) out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------- phases

Tensor spike_phase(const BlockPartition& snn, const EncodedBatch& input, bool training,
                   ForwardRecord& record) {
  if (snn.kind() != NetKind::Snn) throw ContractError("spike_phase needs an SNN partition");
  if (!record.empty()) throw ContractError("spike_phase: record holds state from a previous batch");
  GradGraph graph(false);
  ForwardContext ctx{graph, Pass::Spike, training, input.timesteps, &record};
  Var out = snn.forward(ctx, graph.constant(input.stacked));
  record.timesteps = input.timesteps;
  snn.require_complete(record);
  return out.value();
}

RatePassResult rate_phase(const BlockPartition& snn, GradGraph& graph, const Tensor& mean_input,
                          ForwardRecord& record, const std::vector<int>& taps) {
  if (record.timesteps < 1) throw ContractError("rate_phase: statistics were not finalized");
  snn.require_complete(record);
  for (int t : taps) {
    if (t < 0 || static_cast<std::size_t>(t) > snn.stage_count()) {
      throw ConfigError("tap position " + std::to_string(t) + " outside the partition");
    }
  }
  ForwardContext ctx{graph, Pass::Rate, false, record.timesteps, &record};
  std::vector<Var> outputs;
  RatePassResult r;
  r.logits = snn.forward(ctx, graph.constant(mean_input), &outputs);
  for (int t : taps) r.taps.push_back(outputs[static_cast<std::size_t>(t)]);
  return r;
}

TeacherOutputs teacher_forward(const BlockPartition& teacher, const Tensor& input, const std::vector<int>& taps) {
  GradGraph graph(false);
  ForwardContext ctx{graph, Pass::AnnEval, false, 1, nullptr};
  std::vector<Var> outputs;
  Var logits = teacher.forward(ctx, graph.constant(input), taps.empty() ? nullptr : &outputs);
  TeacherOutputs out;
  out.probs = ad::softmax(logits).value();
  for (int t : taps) out.taps.push_back(outputs.at(static_cast<std::size_t>(t)).value());
  return out;
}

// ----------------------------------------------------------- train steps

namespace {

LossReport ce_report(const Var& ce) {
  LossReport r;
  r.alpha = 0;
  r.ce_backbone = ce.value().item();
  r.total = r.ce_backbone;
  return r;
}

void check_labels(const Tensor& batch, const std::vector<int>& labels) {
  if (batch.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw ShapeError("batch of " + std::to_string(batch.dim(0)) + " with " + std::to_string(labels.size()) + " labels");
  }
}

}  // namespace

StepResult distill_train_step(DistillParts& parts, Sgd& opt, const Tensor& ann_input,
                              const EncodedBatch& snn_input, const std::vector<int>& labels, Real lr,
                              bool keep_grads) {
  parts.weights.validate();
  if (parts.connectors.size() != parts.weights.beta.size()) {
    throw ConfigError(std::to_string(parts.connectors.size()) + " hybrids but " +
                      std::to_string(parts.weights.beta.size()) + " beta weights");
  }
  check_labels(snn_input.mean, labels);
  const TeacherOutputs teacher = teacher_forward(parts.teacher, ann_input);

  ForwardRecord record;
  spike_phase(parts.snn, snn_input, true, record);

  GradGraph graph(true);
  std::vector<int> taps;
  for (const auto& c : parts.connectors) taps.push_back(c.tap());
  RatePassResult rate = rate_phase(parts.snn, graph, snn_input.mean, record, taps);

  const LossParts backbone = loss_parts(rate.logits, labels, teacher.probs);
  ForwardRecord connector_record;
  ForwardContext cctx{graph, Pass::AnnTrain, true, 1, &connector_record};
  std::vector<LossParts> blocks;
  for (std::size_t k = 0; k < parts.connectors.size(); ++k) {
    const HybridModel hybrid(parts.teacher, parts.connectors[k]);
    blocks.push_back(loss_parts(hybrid.logits(cctx, rate.taps[k]), labels, teacher.probs));
  }
  TotalLoss total = total_loss(backbone, blocks, parts.weights);
  GradMap grads = graph.backward(total.loss);
  opt.step(grads, lr);
  parts.snn.update_running_stats(record);
  for (auto& c : parts.connectors) c.update_running_stats(connector_record);

  StepResult out{std::move(total.report), {}};
  if (keep_grads) out.grads = std::move(grads);
  return out;
}

StepResult rate_train_step(BlockPartition& snn, Sgd& opt, const EncodedBatch& input,
                           const std::vector<int>& labels, Real lr, bool keep_grads) {
  check_labels(input.mean, labels);
  ForwardRecord record;
  spike_phase(snn, input, true, record);
  GradGraph graph(true);
  RatePassResult rate = rate_phase(snn, graph, input.mean, record);
  Var ce = ce_loss(rate.logits, labels);
  GradMap grads = graph.backward(ce);
  opt.step(grads, lr);
  snn.update_running_stats(record);
  StepResult out{ce_report(ce), {}};
  if (keep_grads) out.grads = std::move(grads);
  return out;
}

StepResult bptt_train_step(BlockPartition& snn, Sgd& opt, const EncodedBatch& input,
                           const std::vector<int>& labels, Real lr, bool keep_grads) {
  check_labels(input.mean, labels);
  ForwardRecord record;
  GradGraph graph(true);
  ForwardContext ctx{graph, Pass::Bptt, true, input.timesteps, &record};
  Var logits = snn.forward(ctx, graph.constant(input.stacked));
  Var ce = ce_loss(logits, labels);
  GradMap grads = graph.backward(ce);
  opt.step(grads, lr);
  snn.update_running_stats(record);
  StepResult out{ce_report(ce), {}};
  if (keep_grads) out.grads = std::move(grads);
  return out;
}

StepResult ann_train_step(BlockPartition& ann, Sgd& opt, const Tensor& input, const std::vector<int>& labels,
                          Real lr, bool keep_grads) {
  check_labels(input, labels);
  ForwardRecord record;
  GradGraph graph(true);
  ForwardContext ctx{graph, Pass::AnnTrain, true, 1, &record};
  Var ce = ce_loss(ann.forward(ctx, graph.constant(input)), labels);
  GradMap grads = graph.backward(ce);
  opt.step(grads, lr);
  ann.update_running_stats(record);
  StepResult out{ce_report(ce), {}};
  if (keep_grads) out.grads = std::move(grads);
  return out;
}

GradMap rate_gradients(const BlockPartition& snn, const EncodedBatch& input, const std::vector<int>& labels) {
  ForwardRecord record;
  spike_phase(snn, input, true, record);
  GradGraph graph(true);
  RatePassResult rate = rate_phase(snn, graph, input.mean, record);
  return graph.backward(ce_loss(rate.logits, labels));
}

GradMap bptt_gradients(const BlockPartition& snn, const EncodedBatch& input, const std::vector<int>& labels) {
  ForwardRecord record;
  GradGraph graph(true);
  ForwardContext ctx{graph, Pass::Bptt, true, input.timesteps, &record};
  Var logits = snn.forward(ctx, graph.constant(input.stacked));
  return graph.backward(ce_loss(logits, labels));
}

// ------------------------------------------------------------- inference

Tensor ann_logits(const BlockPartition& ann, const Tensor& input) {
  GradGraph graph(false);
  ForwardContext ctx{graph, Pass::AnnEval, false, 1, nullptr};
  return ann.forward(ctx, graph.constant(input)).value();
}

Tensor snn_logits(const BlockPartition& snn, const EncodedBatch& input) {
  ForwardRecord record;
  spike_phase(snn, input, false, record);
  GradGraph graph(false);
  return rate_phase(snn, graph, input.mean, record).logits.value();
}

Tensor hybrid_logits(const BlockPartition& snn, const HybridModel& hybrid, const EncodedBatch& input) {
  ForwardRecord record;
  spike_phase(snn, input, false, record);
  GradGraph graph(false);
  RatePassResult rate = rate_phase(snn, graph, input.mean, record, {hybrid.tap()});
  ForwardContext cctx{graph, Pass::AnnEval, false, 1, nullptr};
  return hybrid.logits(cctx, rate.taps[0]).value();
}

RATEKD_END_NAMESPACE
