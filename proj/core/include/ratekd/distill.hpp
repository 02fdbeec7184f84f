#pragma once

#include <vector>

#include "ratekd/autodiff.hpp"
#include "ratekd/model.hpp"

RATEKD_BEGIN_NAMESPACE

/// Probability floor used inside the KL divergence.
inline constexpr Real kProbabilityFloor = Real(1e-9);

enum class AlphaSchedule { Constant, Increase, Decrease };
enum class BetaScheme { Uniform, Decay, Zero };

struct LossWeights {
  Real alpha = Real(0.5);
  std::vector<Real> beta;

  void validate() const;
};

/// Alpha for `epoch` (0-based). Increase/decrease interpolate linearly
/// between 0 and 1 over the run.
Real alpha_at(AlphaSchedule schedule, Real base_alpha, int epoch, int total_epochs);
/// Uniform: 1/n_b. Decay: 1/2^(n_b-k) for k = 1..n_b. Zero: all 0.
std::vector<Real> beta_weights(BetaScheme scheme, std::size_t n_b);

/// Batch-mean KL(teacher || student) over probability rows.
Var kd_loss(const Var& student_probs, const Tensor& teacher_probs);
/// Same divergence taken from student logits; the logits gradient is
/// (softmax(logits) - teacher) / N.
Var kd_loss_from_logits(const Var& student_logits, const Tensor& teacher_probs);
/// Batch-mean cross-entropy of integer labels.
Var ce_loss(const Var& logits, const std::vector<int>& labels);

struct LossParts {
  Var ce;
  Var kd;
};

/// Cross-entropy and KL terms of one output head.
LossParts loss_parts(const Var& logits, const std::vector<int>& labels, const Tensor& teacher_probs);

/// (1 - alpha) * ce + alpha * kd
Var block_loss(const LossParts& parts, Real alpha);

struct BlockTerms {
  Real ce = 0;
  Real kd = 0;
  Real blk = 0;
};

struct LossReport {
  Real alpha = 0;
  std::vector<Real> beta;
  Real ce_backbone = 0;
  Real kd_backbone = 0;
  std::vector<BlockTerms> blocks;
  Real total = 0;

  /// Total recomposed from the stored parts.
  Real recompose() const;
};

struct TotalLoss {
  Var loss;
  LossReport report;
};

/// (1 - alpha) ce(y_S) + alpha kd(y_S) + sum_k beta_k blk_k.
TotalLoss total_loss(const LossParts& backbone, const std::vector<LossParts>& blocks,
                     const LossWeights& weights);

/// Hybrid M_k: connector C_k followed by the frozen teacher blocks after
/// tap k (evaluated with running statistics).
class HybridModel {
 public:
  HybridModel(const BlockPartition& teacher, const Connector& connector);

  int tap() const noexcept { return connector_->tap(); }
  const Connector& connector() const noexcept { return *connector_; }

  /// `connector_ctx` selects connector normalization behaviour; the tail
  /// always runs in inference mode on the same graph.
  Var logits(ForwardContext& connector_ctx, const Var& rate_tap) const;
  Var probabilities(ForwardContext& connector_ctx, const Var& rate_tap) const;

 private:
  const BlockPartition* teacher_;
  const Connector* connector_;
};

std::vector<HybridModel> build_hybrids(const BlockPartition& teacher,
                                       const std::vector<Connector>& connectors);

/// L2 norm of the difference; a diagnostic, never part of the objective.
Real conversion_error(const Tensor& mapped_snn, const Tensor& ann);

RATEKD_END_NAMESPACE
