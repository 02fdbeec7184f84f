#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ratekd/data.hpp"
#include "ratekd/distill.hpp"
#include "ratekd/model.hpp"

RATEKD_BEGIN_NAMESPACE

enum class TrainMode { Rate, Bptt };
enum class LrScheduleKind { Cosine, Step, Constant };

struct TrainConfig {
  int epochs = 5;
  int batch_size = 64;
  Real lr = Real(0.1);
  Real momentum = Real(0.9);
  Real weight_decay = Real(5e-4);
  int timesteps = 4;
  TrainMode mode = TrainMode::Rate;
  AlphaSchedule alpha_schedule = AlphaSchedule::Constant;
  Real alpha = Real(0.5);
  BetaScheme beta_scheme = BetaScheme::Uniform;
  std::uint64_t seed = 1;
  LrScheduleKind lr_schedule = LrScheduleKind::Cosine;
  int lr_milestone = 30;  ///< epochs per x0.1 decay for the step schedule

  void validate() const;
};

/// base * 0.5 * (1 + cos(pi * epoch / total)) for cosine,
/// base * 0.1^floor(epoch / milestone) for step. `epoch` may be fractional.
Real lr_schedule(LrScheduleKind kind, double epoch, int total_epochs, Real base_lr, int milestone = 30);

struct OptimizerState {
  std::map<std::string, Tensor> velocity;
  std::int64_t step = 0;
};

/// v <- momentum * v + (g + wd * w); w <- w - lr * v. Weight decay is
/// skipped for parameters with decay == false; frozen parameters and
/// parameters without a gradient entry are left untouched.
void sgd_update(const std::vector<Parameter*>& params, const GradMap& grads, OptimizerState& state,
                Real lr, Real momentum, Real weight_decay);

class Sgd {
 public:
  Sgd(std::vector<Parameter*> params, Real momentum, Real weight_decay);

  void step(const GradMap& grads, Real lr);
  /// Trainable (non-frozen) parameters managed by this optimizer.
  const std::vector<Parameter*>& parameters() const noexcept { return params_; }
  OptimizerState& state() noexcept { return state_; }
  const OptimizerState& state() const noexcept { return state_; }

 private:
  std::vector<Parameter*> params_;
  Real momentum_;
  Real weight_decay_;
  OptimizerState state_;
};

/// All trainable parameters of an SNN plus its connectors.
std::vector<Parameter*> trainable(BlockPartition& snn, std::vector<Connector>* connectors = nullptr);

// ---------------------------------------------------------------- phases

/// T spike-based forward passes without a gradient graph. `record` must be
/// empty; it receives the normalization statistics and finalized neuron
/// statistics of every site. Returns the time-averaged readout logits.
Tensor spike_phase(const BlockPartition& snn, const EncodedBatch& input, bool training,
                   ForwardRecord& record);

struct RatePassResult {
  Var logits;
  std::vector<Var> taps;  ///< rate features at the requested tap positions
};

/// One pass on time-averaged inputs in `graph`, using the statistics from
/// spike_phase. Spiking sites emit their recorded rates and scale upstream
/// gradients by g_T.
RatePassResult rate_phase(const BlockPartition& snn, GradGraph& graph, const Tensor& mean_input,
                          ForwardRecord& record, const std::vector<int>& taps = {});

struct TeacherOutputs {
  Tensor probs;
  std::vector<Tensor> taps;
};

/// Frozen teacher in inference mode, detached from any gradient graph.
TeacherOutputs teacher_forward(const BlockPartition& teacher, const Tensor& input,
                               const std::vector<int>& taps = {});

// ----------------------------------------------------------- train steps

struct StepResult {
  LossReport report;
  GradMap grads;  ///< filled only when requested
};

struct DistillParts {
  BlockPartition& snn;
  const BlockPartition& teacher;
  std::vector<Connector>& connectors;
  LossWeights weights;
};

/// Teacher forward, spike phase, rate phase, hybrid heads, total loss,
/// one backward pass and one optimizer step over SNN + connectors.
StepResult distill_train_step(DistillParts& parts, Sgd& opt, const Tensor& ann_input,
                              const EncodedBatch& snn_input, const std::vector<int>& labels, Real lr,
                              bool keep_grads = false);

/// Plain rate-based CE step (no teacher).
StepResult rate_train_step(BlockPartition& snn, Sgd& opt, const EncodedBatch& input,
                           const std::vector<int>& labels, Real lr, bool keep_grads = false);

/// Backpropagation through time over all T steps.
StepResult bptt_train_step(BlockPartition& snn, Sgd& opt, const EncodedBatch& input,
                           const std::vector<int>& labels, Real lr, bool keep_grads = false);

/// CE step on the ANN with batch-statistic normalization.
StepResult ann_train_step(BlockPartition& ann, Sgd& opt, const Tensor& input,
                          const std::vector<int>& labels, Real lr, bool keep_grads = false);

/// Gradients only (no optimizer step, no running-stat update).
GradMap rate_gradients(const BlockPartition& snn, const EncodedBatch& input, const std::vector<int>& labels);
GradMap bptt_gradients(const BlockPartition& snn, const EncodedBatch& input, const std::vector<int>& labels);

// ------------------------------------------------------------- inference

Tensor ann_logits(const BlockPartition& ann, const Tensor& input);
/// Spike phase followed by a gradient-free rate readout.
Tensor snn_logits(const BlockPartition& snn, const EncodedBatch& input);
/// SNN blocks up to the connector's tap, then C_k and the teacher tail.
Tensor hybrid_logits(const BlockPartition& snn, const HybridModel& hybrid, const EncodedBatch& input);

RATEKD_END_NAMESPACE
