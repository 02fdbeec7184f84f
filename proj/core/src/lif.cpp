#include "ratekd/lif.hpp"

#include <cmath>
#include <string>

RATEKD_BEGIN_NAMESPACE

void LifConfig::validate() const {
  if (!(leak > 0 && leak <= 1)) throw ConfigError("LIF leak must lie in (0, 1], got " + std::to_string(leak));
  if (!(threshold > 0)) throw ConfigError("LIF threshold must be positive");
  if (surrogate == SurrogateKind::Rectangular && !(surrogate_width > 0))
    throw ConfigError("rectangular surrogate width must be positive");
  if (surrogate == SurrogateKind::SigmoidDerivative && !(surrogate_steepness > 0))
    throw ConfigError("sigmoid surrogate steepness must be positive");
}

Real surrogate_derivative(Real u, const LifConfig& cfg) {
  const Real x = u - cfg.threshold;
  if (cfg.surrogate == SurrogateKind::Rectangular) {
    return std::abs(x) <= cfg.surrogate_width / 2 ? Real(1) / cfg.surrogate_width : Real(0);
  }
  const Real a = cfg.surrogate_steepness;
  const Real sig = Real(1) / (Real(1) + std::exp(-a * x));
  return a * sig * (Real(1) - sig);
}

Tensor surrogate_derivative(const Tensor& u, const LifConfig& cfg) {
  Tensor out(u.shape());
  for (std::int64_t i = 0; i < u.numel(); ++i) out[i] = surrogate_derivative(u[i], cfg);
  return out;
}

std::pair<LifState, Tensor> lif_step(const LifState& state, const Tensor& input_current,
                                     const LifConfig& cfg) {
  expect_same_shape(state.u, input_current, "lif_step");
  expect_same_shape(state.u, state.s, "lif_step state");
  LifState next{Tensor(state.u.shape()), Tensor(state.u.shape())};
  for (std::int64_t i = 0; i < input_current.numel(); ++i) {
    const Real u = cfg.leak * (state.u[i] - cfg.threshold * state.s[i]) + input_current[i];
    next.u[i] = u;
    next.s[i] = u >= cfg.threshold ? Real(1) : Real(0);
  }
  Tensor spikes = next.s;
  return {std::move(next), std::move(spikes)};
}

RateStats RateStats::create(const Shape& shape, int total_steps) {
  if (total_steps < 1) throw ContractError("RateStats needs at least one timestep");
  return RateStats{Tensor(shape), Tensor(shape), Tensor(shape), Tensor(shape), 0, total_steps};
}

void update_rate_stats(RateStats& stats, const LifState& prev, const LifState& curr,
                       const Tensor& input_current, int step, const LifConfig& cfg) {
  if (step != stats.t + 1 || step > stats.total_steps) {
    throw ContractError("update_rate_stats: step " + std::to_string(step) + " after step " +
                        std::to_string(stats.t) + " of " + std::to_string(stats.total_steps));
  }
  expect_same_shape(stats.rho, curr.u, "update_rate_stats");
  expect_same_shape(prev.u, curr.u, "update_rate_stats");
  const Real t = static_cast<Real>(step);
  for (std::int64_t i = 0; i < curr.u.numel(); ++i) {
    const Real rho = Real(1) + stats.rho[i] * cfg.leak *
                                   (Real(1) - cfg.threshold * surrogate_derivative(prev.u[i], cfg));
    stats.rho[i] = rho;
    stats.g[i] = ((t - 1) * stats.g[i] + surrogate_derivative(curr.u[i], cfg) * rho) / t;
    stats.spike_sum[i] += curr.s[i];
    stats.input_sum[i] += input_current[i];
  }
  stats.t = step;
}

RateSummary finalize_stats(const RateStats& stats) {
  if (stats.t != stats.total_steps) {
    throw ContractError("finalize_stats: " + std::to_string(stats.t) + " of " +
                        std::to_string(stats.total_steps) + " steps recorded");
  }
  const Real inv_t = Real(1) / static_cast<Real>(stats.total_steps);
  RateSummary out{stats.spike_sum, stats.g, stats.input_sum};
  out.rate *= inv_t;
  out.mean_input *= inv_t;
  return out;
}

namespace {

std::int64_t per_step_count(const Shape& stacked, int timesteps) {
  if (timesteps < 1 || stacked.rank() < 1 || stacked[0] % timesteps != 0) {
    throw ShapeError("time-stacked tensor " + stacked.to_string() + " is not divisible into " +
                     std::to_string(timesteps) + " steps");
  }
  return stacked.numel() / timesteps;
}

}  // namespace

namespace {

// Elementwise surrogate, specialised per kind so the step loops vectorize.
// Results are identical to surrogate_derivative(Real, cfg).
template <SurrogateKind K>
struct Surrogate {
  Real threshold, a, b;
  explicit Surrogate(const LifConfig& cfg)
      : threshold(cfg.threshold),
        a(K == SurrogateKind::Rectangular ? cfg.surrogate_width / 2 : cfg.surrogate_steepness),
        b(K == SurrogateKind::Rectangular ? Real(1) / cfg.surrogate_width : Real(0)) {}
  Real operator()(Real u) const {
    const Real x = u - threshold;
    if constexpr (K == SurrogateKind::Rectangular) {
      return std::abs(x) <= a ? b : Real(0);
    } else {
      const Real sig = Real(1) / (Real(1) + std::exp(-a * x));
      return a * sig * (Real(1) - sig);
    }
  }
};

template <SurrogateKind K>
void simulate(const Real* in, Real* sp, std::int64_t m, int timesteps, const LifConfig& cfg,
              RateSummary& out) {
  const Surrogate<K> sd(cfg);
  const Real leak = cfg.leak, th = cfg.threshold;
  Tensor u(out.rate.shape()), s(out.rate.shape()), rho(out.rate.shape());
  Real* ur = u.data();
  Real* sr = s.data();
  Real* rr = rho.data();
  Real* gr = out.g.data();
  Real* ssum = out.rate.data();
  Real* isum = out.mean_input.data();
  for (int t = 1; t <= timesteps; ++t) {
    const Real tr = static_cast<Real>(t);
    const Real* cur = in + (t - 1) * m;
    Real* spk = sp + (t - 1) * m;
    for (std::int64_t j = 0; j < m; ++j) {
      const Real rho_j = Real(1) + rr[j] * leak * (Real(1) - th * sd(ur[j]));
      const Real uj = leak * (ur[j] - th * sr[j]) + cur[j];
      const Real sj = uj >= th ? Real(1) : Real(0);
      gr[j] = ((tr - 1) * gr[j] + sd(uj) * rho_j) / tr;
      rr[j] = rho_j;
      ur[j] = uj;
      sr[j] = sj;
      spk[j] = sj;
      ssum[j] += sj;
      isum[j] += cur[j];
    }
  }
  const Real inv_t = Real(1) / static_cast<Real>(timesteps);
  for (std::int64_t j = 0; j < m; ++j) {
    ssum[j] *= inv_t;
    isum[j] *= inv_t;
  }
}

}  // namespace

Tensor lif_simulate(const Tensor& currents, int timesteps, const LifConfig& cfg,
                    RateSummary* summary) {
  const auto m = per_step_count(currents.shape(), timesteps);
  const Shape step_shape = currents.shape().with_dim(0, currents.dim(0) / timesteps);
  Tensor spikes(currents.shape());
  RateSummary local;
  RateSummary& out = summary ? *summary : local;
  out.rate = Tensor(step_shape);
  out.g = Tensor(step_shape);
  out.mean_input = Tensor(step_shape);
  // Same arithmetic as lif_step + update_rate_stats applied step by step;
  // rate and mean_input hold running sums until the final scaling.
  if (cfg.surrogate == SurrogateKind::Rectangular) {
    simulate<SurrogateKind::Rectangular>(currents.data(), spikes.data(), m, timesteps, cfg, out);
  } else {
    simulate<SurrogateKind::SigmoidDerivative>(currents.data(), spikes.data(), m, timesteps, cfg, out);
  }
  return spikes;
}

Var lif_sequence(const Var& currents, int timesteps, const LifConfig& cfg) {
  const auto m = per_step_count(currents.shape(), timesteps);
  Tensor spikes(currents.shape());
  Tensor potentials(currents.shape());
  const Real* in = currents.value().data();
  for (int t = 0; t < timesteps; ++t) {
    const Real* cur = in + t * m;
    const Real* prev_u = t > 0 ? potentials.data() + (t - 1) * m : nullptr;
    const Real* prev_s = t > 0 ? spikes.data() + (t - 1) * m : nullptr;
    Real* u = potentials.data() + t * m;
    Real* s = spikes.data() + t * m;
    for (std::int64_t j = 0; j < m; ++j) {
      const Real up = prev_u ? prev_u[j] : Real(0);
      const Real sp = prev_s ? prev_s[j] : Real(0);
      u[j] = cfg.leak * (up - cfg.threshold * sp) + cur[j];
      s[j] = u[j] >= cfg.threshold ? Real(1) : Real(0);
    }
  }
  return make_op(std::move(spikes), {currents},
                 [u = std::move(potentials), timesteps, m, cfg](Node& self) {
                   Tensor gi(self.value.shape());
                   Tensor du_next(Shape{m});
                   const Real reset = -cfg.leak * cfg.threshold;
                   for (int t = timesteps - 1; t >= 0; --t) {
                     const Real* gs = self.grad.data() + t * m;
                     const Real* ut = u.data() + t * m;
                     Real* g = gi.data() + t * m;
                     for (std::int64_t j = 0; j < m; ++j) {
                       const Real ds = gs[j] + du_next[j] * reset;
                       const Real du = ds * surrogate_derivative(ut[j], cfg) + du_next[j] * cfg.leak;
                       g[j] = du;
                       du_next[j] = du;
                     }
                   }
                   self.inputs[0]->accumulate(std::move(gi));
                 });
}

RATEKD_END_NAMESPACE
