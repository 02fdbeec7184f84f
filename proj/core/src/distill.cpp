#include "ratekd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <string>

RATEKD_BEGIN_NAMESPACE

namespace {

void check_distribution_rows(const Tensor& p, const char* what) {
  if (p.rank() != 2) throw ShapeError(std::string(what) + ": expected [N, classes], got " + p.shape().to_string());
  const auto rows = p.dim(0), cols = p.dim(1);
  for (std::int64_t i = 0; i < rows; ++i) {
    double s = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      const Real v = p[i * cols + j];
      if (v < Real(-1e-6)) throw ContractError(std::string(what) + ": negative probability");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-4) {
      throw ContractError(std::string(what) + ": row " + std::to_string(i) + " sums to " + std::to_string(s));
    }
  }
}

Real clamp_log(Real p) { return std::log(std::max(p, kProbabilityFloor)); }

}  // namespace

void LossWeights::validate() const {
  if (!(alpha >= 0 && alpha <= 1)) throw ConfigError("alpha must lie in [0, 1]");
  for (Real b : beta)
    if (!(b >= 0)) throw ConfigError("beta weights must be non-negative");
}

Real alpha_at(AlphaSchedule schedule, Real base_alpha, int epoch, int total_epochs) {
  if (schedule == AlphaSchedule::Constant) return base_alpha;
  const Real frac = total_epochs > 1 ? static_cast<Real>(epoch) / static_cast<Real>(total_epochs - 1) : Real(1);
  const Real up = std::clamp(frac, Real(0), Real(1));
  return schedule == AlphaSchedule::Increase ? up : Real(1) - up;
}

std::vector<Real> beta_weights(BetaScheme scheme, std::size_t n_b) {
  std::vector<Real> beta(n_b, Real(0));
  if (n_b == 0) return beta;
  for (std::size_t k = 1; k <= n_b; ++k) {
    switch (scheme) {
      case BetaScheme::Uniform: beta[k - 1] = Real(1) / static_cast<Real>(n_b); break;
      case BetaScheme::Decay: beta[k - 1] = static_cast<Real>(std::ldexp(1.0, -static_cast<int>(n_b - k))); break;
      case BetaScheme::Zero: break;
    }
  }
  return beta;
}

Var kd_loss(const Var& student_probs, const Tensor& teacher_probs) {
  expect_same_shape(student_probs.value(), teacher_probs, "kd_loss");
  check_distribution_rows(teacher_probs, "kd_loss teacher");
  check_distribution_rows(student_probs.value(), "kd_loss student");
  const auto& x = student_probs.value();
  const auto n = x.dim(0);
  double acc = 0;
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const Real y = teacher_probs[i];
    if (y > 0) acc += y * (clamp_log(y) - clamp_log(x[i]));
  }
  const Real inv_n = Real(1) / static_cast<Real>(n);
  return make_op(Tensor::scalar(static_cast<Real>(acc) * inv_n), {student_probs},
                 [y = teacher_probs, inv_n](Node& self) {
                   const auto& xv = self.inputs[0]->value;
                   Tensor gx(xv.shape());
                   for (std::int64_t i = 0; i < xv.numel(); ++i) {
                     if (xv[i] >= kProbabilityFloor) gx[i] = -self.grad[0] * y[i] * inv_n / xv[i];
                   }
                   self.inputs[0]->accumulate(std::move(gx));
                 });
}

Var kd_loss_from_logits(const Var& student_logits, const Tensor& teacher_probs) {
  expect_same_shape(student_logits.value(), teacher_probs, "kd_loss_from_logits");
  check_distribution_rows(teacher_probs, "kd_loss teacher");
  const auto& z = student_logits.value();
  const auto rows = z.dim(0), cols = z.dim(1);
  Tensor probs(z.shape());
  double acc = 0;
  for (std::int64_t i = 0; i < rows; ++i) {
    const Real* p = z.data() + i * cols;
    const Real mx = *std::max_element(p, p + cols);
    Real s = 0;
    for (std::int64_t j = 0; j < cols; ++j) s += (probs[i * cols + j] = std::exp(p[j] - mx));
    const Real lse = mx + std::log(s);
    for (std::int64_t j = 0; j < cols; ++j) {
      probs[i * cols + j] /= s;
      const Real y = teacher_probs[i * cols + j];
      // log q is floored like the probability form so both agree.
      if (y > 0) acc += y * (clamp_log(y) - std::max(p[j] - lse, std::log(kProbabilityFloor)));
    }
  }
  const Real inv_n = Real(1) / static_cast<Real>(rows);
  return make_op(Tensor::scalar(static_cast<Real>(acc) * inv_n), {student_logits},
                 [y = teacher_probs, q = std::move(probs), inv_n, rows, cols](Node& self) {
                   Tensor gz(q.shape());
                   const Real g = self.grad[0] * inv_n;
                   for (std::int64_t i = 0; i < rows; ++i) {
                     Real mass = 0;
                     for (std::int64_t j = 0; j < cols; ++j) mass += y[i * cols + j];
                     for (std::int64_t j = 0; j < cols; ++j) {
                       const auto k = i * cols + j;
                       gz[k] = g * (q[k] * mass - y[k]);
                     }
                   }
                   self.inputs[0]->accumulate(std::move(gz));
                 });
}

Var ce_loss(const Var& logits, const std::vector<int>& labels) {
  const auto& z = logits.value();
  if (z.rank() != 2) throw ShapeError("ce_loss: expected [N, classes], got " + z.shape().to_string());
  const auto rows = z.dim(0), cols = z.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != rows) {
    throw ShapeError("ce_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  }
  Tensor probs(z.shape());
  double acc = 0;
  for (std::int64_t i = 0; i < rows; ++i) {
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= cols) {
      throw ContractError("ce_loss: label " + std::to_string(label) + " outside [0, " + std::to_string(cols) + ")");
    }
    const Real* p = z.data() + i * cols;
    const auto top = std::max_element(p, p + cols) - p;
    const Real mx = p[top];
    // sum of the non-max terms; log1p keeps tiny losses of confident rows
    Real rest = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
      probs[i * cols + j] = j == top ? Real(1) : std::exp(p[j] - mx);
      if (j != top) rest += probs[i * cols + j];
    }
    const Real s = Real(1) + rest;
    for (std::int64_t j = 0; j < cols; ++j) probs[i * cols + j] /= s;
    acc += std::log1p(rest) - (p[label] - mx);
  }
  const Real inv_n = Real(1) / static_cast<Real>(rows);
  return make_op(Tensor::scalar(static_cast<Real>(acc) * inv_n), {logits},
                 [labels, q = std::move(probs), inv_n, cols](Node& self) {
                   Tensor gz = q;
                   const Real g = self.grad[0] * inv_n;
                   for (std::size_t i = 0; i < labels.size(); ++i) {
                     gz[static_cast<std::int64_t>(i) * cols + labels[i]] -= 1;
                   }
                   gz *= g;
                   self.inputs[0]->accumulate(std::move(gz));
                 });
}

LossParts loss_parts(const Var& logits, const std::vector<int>& labels, const Tensor& teacher_probs) {
  return LossParts{ce_loss(logits, labels), kd_loss_from_logits(logits, teacher_probs)};
}

Var block_loss(const LossParts& parts, Real alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw ContractError("block_loss: alpha outside [0, 1]");
  return ad::add(ad::scale(parts.ce, Real(1) - alpha), ad::scale(parts.kd, alpha));
}

Real LossReport::recompose() const {
  Real t = (Real(1) - alpha) * ce_backbone + alpha * kd_backbone;
  for (std::size_t k = 0; k < blocks.size(); ++k) t += beta[k] * blocks[k].blk;
  return t;
}

TotalLoss total_loss(const LossParts& backbone, const std::vector<LossParts>& blocks,
                     const LossWeights& weights) {
  weights.validate();
  if (blocks.size() != weights.beta.size()) {
    throw ContractError("total_loss: " + std::to_string(blocks.size()) + " block losses but " +
                        std::to_string(weights.beta.size()) + " beta weights");
  }
  TotalLoss out;
  out.report.alpha = weights.alpha;
  out.report.beta = weights.beta;
  out.report.ce_backbone = backbone.ce.value().item();
  out.report.kd_backbone = backbone.kd.value().item();
  out.loss = block_loss(backbone, weights.alpha);
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    Var blk = block_loss(blocks[k], weights.alpha);
    out.report.blocks.push_back({blocks[k].ce.value().item(), blocks[k].kd.value().item(), blk.value().item()});
    out.loss = ad::add(out.loss, ad::scale(blk, weights.beta[k]));
  }
  out.report.total = out.loss.value().item();
  return out;
}

HybridModel::HybridModel(const BlockPartition& teacher, const Connector& connector)
    : teacher_(&teacher), connector_(&connector) {
  if (teacher.kind() != NetKind::Ann) throw ContractError("hybrid tail must be an ANN partition");
  if (connector.tap() < 0 || static_cast<std::size_t>(connector.tap()) > teacher.stage_count()) {
    throw ConfigError("hybrid tap " + std::to_string(connector.tap()) + " outside the teacher partition");
  }
}

Var HybridModel::logits(ForwardContext& connector_ctx, const Var& rate_tap) const {
  const auto expected = teacher_->spec().feature_shape(static_cast<std::size_t>(tap()));
  const auto& s = rate_tap.shape();
  if (s.rank() != 4 || s[1] != expected[0] || s[2] != expected[1] || s[3] != expected[2]) {
    throw ShapeError("hybrid " + std::to_string(tap()) + ": tap feature " + s.to_string() +
                     " does not match the tail input");
  }
  Var mapped = connector_->forward(connector_ctx, rate_tap);
  ForwardContext tail{connector_ctx.graph, Pass::AnnEval, false, 1, nullptr};
  return teacher_->forward_range(tail, mapped, static_cast<std::size_t>(tap()) + 1, teacher_->size());
}

Var HybridModel::probabilities(ForwardContext& connector_ctx, const Var& rate_tap) const {
  return ad::softmax(logits(connector_ctx, rate_tap));
}

std::vector<HybridModel> build_hybrids(const BlockPartition& teacher,
                                       const std::vector<Connector>& connectors) {
  std::vector<HybridModel> out;
  out.reserve(connectors.size());
  for (const auto& c : connectors) out.emplace_back(teacher, c);
  return out;
}

Real conversion_error(const Tensor& mapped_snn, const Tensor& ann) {
  expect_same_shape(mapped_snn, ann, "conversion_error");
  double s = 0;
  for (std::int64_t i = 0; i < ann.numel(); ++i) {
    const double d = static_cast<double>(mapped_snn[i]) - static_cast<double>(ann[i]);
    s += d * d;
  }
  return static_cast<Real>(std::sqrt(s));
}

RATEKD_END_NAMESPACE
