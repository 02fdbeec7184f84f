#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ratekd/data.hpp"
#include "ratekd/distill.hpp"
#include "ratekd/model.hpp"
#include "ratekd/train.hpp"

RATEKD_BEGIN_NAMESPACE

/// <a,b> / (|a| |b|) per leading-axis sample, averaged over samples.
/// Throws ContractError for a zero-norm sample.
Real cosine_similarity(const Tensor& a, const Tensor& b);

/// Fraction of rows whose argmax equals the label.
Real top1_accuracy(const Tensor& logits, const std::vector<int>& labels);

Real eval_accuracy_ann(const BlockPartition& ann, const Dataset& data, const InputPipeline& pipe,
                       int batch_size = 256);
Real eval_accuracy_snn(const BlockPartition& snn, const Dataset& data, const InputPipeline& pipe,
                       int timesteps, int batch_size = 256);
Real eval_accuracy_hybrid(const BlockPartition& snn, const HybridModel& hybrid, const Dataset& data,
                          const InputPipeline& pipe, int timesteps, int batch_size = 256);

struct ProbeEntry {
  int tap = 0;
  Real cosine = 0;
  Real conversion_error = 0;  ///< per-sample L2 distance, batch-averaged
};

/// Compares mapped SNN rate features C_k(F_rate) with ANN features at every
/// connector tap on a fixed probe batch (both networks in inference mode).
/// Samples where either feature is all zero contribute cosine 0.
std::vector<ProbeEntry> feature_probe(const BlockPartition& snn, const BlockPartition& ann,
                                      const std::vector<Connector>& connectors, const Tensor& probe_raw,
                                      const InputPipeline& pipe, int timesteps);

struct OverheadRow {
  std::string mode;
  int timesteps = 0;
  double ms_per_batch = 0;
  std::int64_t peak_bytes = 0;
};

struct ProfileOptions {
  ArchSpec arch;
  LifConfig lif;
  int batch_size = 64;
  int warmup_batches = 1;
  int measured_batches = 3;
  std::uint64_t seed = 1;
  Real lr = Real(1e-3);
};

/// One row per (mode, T). Modes: "rate", "distill", "bptt". Memory is the
/// engine allocation high-water mark above the pre-step baseline, covering
/// input encoding, graphs, neuron states and statistics.
std::vector<OverheadRow> profile_overhead(const ProfileOptions& opts, const std::vector<int>& timesteps,
                                          const std::vector<std::string>& modes);

std::string overhead_csv(const std::vector<OverheadRow>& rows);

RATEKD_END_NAMESPACE
