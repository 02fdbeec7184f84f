#include "ratekd/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "ratekd/memory.hpp"

RATEKD_BEGIN_NAMESPACE

Real cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel() || a.numel() == 0) throw ShapeError("cosine_similarity: length mismatch");
  const std::int64_t rows = a.rank() > 1 ? a.dim(0) : 1;
  if (b.rank() > 1 && b.dim(0) != rows) throw ShapeError("cosine_similarity: sample count mismatch");
  const auto per = a.numel() / rows;
  double total = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    double dot = 0, na = 0, nb = 0;
    for (std::int64_t j = 0; j < per; ++j) {
      const double x = a[r * per + j], y = b[r * per + j];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    if (na == 0 || nb == 0) throw ContractError("cosine_similarity: zero-norm sample " + std::to_string(r));
    total += std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
  }
  return static_cast<Real>(total / static_cast<double>(rows));
}

Real top1_accuracy(const Tensor& logits, const std::vector<int>& labels) {
  if (labels.empty()) throw ContractError("accuracy of an empty set");
  const auto rows = logits.dim(0), cols = logits.dim(1);
  if (rows != static_cast<std::int64_t>(labels.size())) throw ShapeError("accuracy: label count mismatch");
  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < rows; ++i) {
    const Real* p = logits.data() + i * cols;
    if (std::max_element(p, p + cols) - p == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<Real>(hits) / static_cast<Real>(rows);
}

namespace {

template <typename F>
Real batched_accuracy(const Dataset& data, int batch_size, F logits_of) {
  if (data.size() == 0) throw ContractError("evaluation on an empty dataset");
  std::int64_t hits = 0;
  for (const auto& idx : epoch_batches(data.size(), batch_size, false, 0, 0)) {
    Batch b = make_batch(data, idx);
    const Tensor logits = logits_of(b.images);
    hits += static_cast<std::int64_t>(std::lround(top1_accuracy(logits, b.labels) * static_cast<Real>(b.labels.size())));
  }
  return static_cast<Real>(static_cast<double>(hits) / static_cast<double>(data.size()));
}

bool all_zero(const Tensor& t) {
  for (Real v : t.values())
    if (v != 0) return false;
  return true;
}

}  // namespace

Real eval_accuracy_ann(const BlockPartition& ann, const Dataset& data, const InputPipeline& pipe, int batch_size) {
  return batched_accuracy(data, batch_size, [&](const Tensor& raw) {
    return ann_logits(ann, pipe.ann_input(raw, false, 0));
  });
}

Real eval_accuracy_snn(const BlockPartition& snn, const Dataset& data, const InputPipeline& pipe, int timesteps,
                       int batch_size) {
  return batched_accuracy(data, batch_size, [&](const Tensor& raw) {
    return snn_logits(snn, pipe.snn_input(raw, timesteps, false, 0));
  });
}

Real eval_accuracy_hybrid(const BlockPartition& snn, const HybridModel& hybrid, const Dataset& data,
                          const InputPipeline& pipe, int timesteps, int batch_size) {
  return batched_accuracy(data, batch_size, [&](const Tensor& raw) {
    return hybrid_logits(snn, hybrid, pipe.snn_input(raw, timesteps, false, 0));
  });
}

std::vector<ProbeEntry> feature_probe(const BlockPartition& snn, const BlockPartition& ann,
                                      const std::vector<Connector>& connectors, const Tensor& probe_raw,
                                      const InputPipeline& pipe, int timesteps) {
  std::vector<int> taps;
  for (const auto& c : connectors) taps.push_back(c.tap());
  const TeacherOutputs teacher = teacher_forward(ann, pipe.ann_input(probe_raw, false, 0), taps);

  const EncodedBatch enc = pipe.snn_input(probe_raw, timesteps, false, 0);
  ForwardRecord record;
  spike_phase(snn, enc, false, record);
  GradGraph graph(false);
  RatePassResult rate = rate_phase(snn, graph, enc.mean, record, taps);
  ForwardContext cctx{graph, Pass::AnnEval, false, 1, nullptr};

  std::vector<ProbeEntry> out;
  for (std::size_t k = 0; k < connectors.size(); ++k) {
    const Tensor mapped = connectors[k].forward(cctx, rate.taps[k]).value();
    const Tensor& target = teacher.taps[k];
    if (!(mapped.shape() == target.shape())) {
      throw ShapeError("feature_probe: tap " + std::to_string(taps[k]) + " mapped " + mapped.shape().to_string() +
                       " vs ANN " + target.shape().to_string());
    }
    const auto n = mapped.dim(0);
    double err = 0, cos = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const Tensor a = mapped.slice_rows(i, 1), b = target.slice_rows(i, 1);
      err += conversion_error(a, b);
      // a silent sample (no spikes reach the tap) counts as unaligned
      if (!all_zero(a) && !all_zero(b)) cos += cosine_similarity(a, b);
    }
    out.push_back({taps[k], static_cast<Real>(cos / static_cast<double>(n)), static_cast<Real>(err / static_cast<double>(n))});
  }
  return out;
}

std::vector<OverheadRow> profile_overhead(const ProfileOptions& opts, const std::vector<int>& timesteps,
                                          const std::vector<std::string>& modes) {
  const auto& a = opts.arch;
  const Dataset batch_data =
      make_synthetic(opts.batch_size, a.num_classes, a.in_channels, a.height, a.width, opts.seed, "profile");
  const InputPipeline pipe{Normalization::identity(a.in_channels), Encoding::Direct, Augment::None};
  std::vector<OverheadRow> rows;
  for (const auto& mode : modes) {
    if (mode != "rate" && mode != "bptt" && mode != "distill") {
      throw ConfigError("unknown profile mode '" + mode + "' (expected rate, distill or bptt)");
    }
    for (int t : timesteps) {
      if (t < 1) throw ConfigError("profile timesteps must be >= 1");
      auto snn = build_snn(a, opts.lif, derive_seed(opts.seed, 1));
      auto teacher = build_ann(a, derive_seed(opts.seed, 2));
      freeze(*teacher);
      auto connectors = build_connectors(a, interior_taps(a), derive_seed(opts.seed, 3));
      Sgd opt(trainable(*snn, mode == "distill" ? &connectors : nullptr), Real(0.9), Real(5e-4));
      DistillParts parts{*snn, *teacher, connectors,
                         LossWeights{Real(0.5), beta_weights(BetaScheme::Uniform, connectors.size())}};

      auto run_step = [&] {
        if (mode == "distill") {
          const Tensor ann_in = pipe.ann_input(batch_data.images, false, 0);
          const EncodedBatch enc = pipe.snn_input(batch_data.images, t, false, 0);
          distill_train_step(parts, opt, ann_in, enc, batch_data.labels, opts.lr);
        } else {
          const EncodedBatch enc = pipe.snn_input(batch_data.images, t, false, 0);
          if (mode == "rate") {
            rate_train_step(*snn, opt, enc, batch_data.labels, opts.lr);
          } else {
            bptt_train_step(*snn, opt, enc, batch_data.labels, opts.lr);
          }
        }
      };

      for (int w = 0; w < opts.warmup_batches; ++w) run_step();
      std::size_t peak = 0;
      double ms = 0;
      for (int m = 0; m < opts.measured_batches; ++m) {
        PeakMemoryScope scope;
        const auto t0 = std::chrono::steady_clock::now();
        run_step();
        ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        peak = std::max(peak, scope.peak_above_baseline());
      }
      rows.push_back({mode, t, ms / std::max(1, opts.measured_batches), static_cast<std::int64_t>(peak)});
    }
  }
  return rows;
}

std::string overhead_csv(const std::vector<OverheadRow>& rows) {
  std::ostringstream os;
  os << "mode,timesteps,ms_per_batch,peak_bytes\n";
  for (const auto& r : rows) os << r.mode << ',' << r.timesteps << ',' << r.ms_per_batch << ',' << r.peak_bytes << '\n';
  return os.str();
}

RATEKD_END_NAMESPACE
