#pragma once

#include <cstdint>
#include <utility>

#include "ratekd/autodiff.hpp"
#include "ratekd/tensor.hpp"

RATEKD_BEGIN_NAMESPACE

enum class SurrogateKind { Rectangular, SigmoidDerivative };

/// Leaky integrate-and-fire parameters.
///
/// Dynamics per step: u' = leak * (u - threshold * s) + I, s' = H(u' - threshold).
/// The Heaviside derivative is replaced by the configured surrogate.
struct LifConfig {
  Real leak = Real(0.5);
  Real threshold = Real(1.0);
  SurrogateKind surrogate = SurrogateKind::Rectangular;
  Real surrogate_width = Real(1.0);      ///< rectangular window width
  Real surrogate_steepness = Real(4.0);  ///< sigmoid-derivative steepness

  void validate() const;
};

/// Membrane potentials and last-step spikes of one neuron layer.
struct LifState {
  Tensor u;
  Tensor s;

  static LifState zeros(const Shape& shape) { return {Tensor(shape), Tensor(shape)}; }
};

Real surrogate_derivative(Real u, const LifConfig& cfg);
Tensor surrogate_derivative(const Tensor& u, const LifConfig& cfg);

/// One simulation step. Returns the new state and its spikes.
std::pair<LifState, Tensor> lif_step(const LifState& state, const Tensor& input_current,
                                     const LifConfig& cfg);

/// Running statistics for rate-based backpropagation of one neuron layer.
///
/// rho_t = 1 + rho_{t-1} * leak * (1 - threshold * sigma'(u_{t-1})),
/// g_t   = ((t-1) g_{t-1} + sigma'(u_t) rho_t) / t.
struct RateStats {
  Tensor rho;
  Tensor g;
  Tensor spike_sum;
  Tensor input_sum;
  int t = 0;
  int total_steps = 0;

  static RateStats create(const Shape& shape, int total_steps);
};

/// Folds step `step` (1-based) into the statistics. `prev` is the state
/// before lif_step, `curr` the state after, `input_current` the step input.
void update_rate_stats(RateStats& stats, const LifState& prev, const LifState& curr,
                       const Tensor& input_current, int step, const LifConfig& cfg);

/// Finalized per-neuron quantities consumed by the rate pass.
struct RateSummary {
  Tensor rate;        ///< r = spike_sum / T
  Tensor g;           ///< g_T, the straight-through multiplier
  Tensor mean_input;  ///< c = input_sum / T
};

RateSummary finalize_stats(const RateStats& stats);

/// Simulates a layer over T steps on time-major stacked currents
/// [T*N, ...] (step t occupies rows [t*N, (t+1)*N)). Returns stacked spikes
/// and writes the finalized statistics.
Tensor lif_simulate(const Tensor& currents, int timesteps, const LifConfig& cfg,
                    RateSummary* summary);

/// Differentiable T-step LIF layer for backpropagation through time. Input
/// and output are time-major stacked [T*N, ...]; the backward pass unrolls
/// the membrane recurrence including the reset path.
Var lif_sequence(const Var& currents, int timesteps, const LifConfig& cfg);

RATEKD_END_NAMESPACE
