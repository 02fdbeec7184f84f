#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "ratekd/autodiff.hpp"
#include "ratekd/lif.hpp"

RATEKD_BEGIN_NAMESPACE

enum class ArchFamily { Residual, Plain };

struct StageSpec {
  int channels = 16;
  int blocks = 1;
  int stride = 1;
};

/// Architecture shared by the ANN teacher and the SNN student.
struct ArchSpec {
  std::string name = "custom";
  ArchFamily family = ArchFamily::Residual;
  int in_channels = 1;
  int height = 28;
  int width = 28;
  int stem_channels = 16;
  int stem_stride = 1;
  std::vector<StageSpec> stages;
  int num_classes = 10;
  bool batch_norm = true;

  /// Throws ConfigError when the spec is inconsistent.
  void validate() const;
  /// Per-sample [C,H,W] after the stem (index 0) or after stage `i` (1..n).
  std::vector<std::int64_t> feature_shape(std::size_t position) const;

  static ArchSpec resnet_mini(int in_channels, int height, int width, int num_classes);
  static ArchSpec plain3(int in_channels, int height, int width, int num_classes);
  /// Channel profile of ResNet-18 for 32x32 inputs.
  static ArchSpec resnet18(int in_channels, int height, int width, int num_classes);
  static ArchSpec preset(const std::string& name, int in_channels, int height, int width,
                         int num_classes);
};

enum class NetKind { Ann, Snn };

/// How a forward invocation treats normalization and activation sites.
///  AnnTrain: batch-statistic normalization (differentiated), ReLU.
///  AnnEval:  running-statistic normalization, ReLU.
///  Spike:    time-stacked input [T*N,...], LIF simulation, no gradient graph.
///  Rate:     one pass on rates using statistics recorded by Spike.
///  Bptt:     time-stacked input, differentiable LIF unrolled through time.
enum class Pass { AnnTrain, AnnEval, Spike, Rate, Bptt };

class BatchNorm;
class Activation;

struct NormStats {
  Tensor mean;
  Tensor var;
  std::int64_t count = 0;  ///< elements per channel behind the statistics
};

/// Quantities produced by one forward invocation: the normalization
/// statistics each site used and the finalized neuron statistics of each
/// spiking site. The rate pass consumes what the spike pass recorded.
struct ForwardRecord {
  int timesteps = 0;
  std::unordered_map<const BatchNorm*, NormStats> norm;
  std::unordered_map<const Activation*, RateSummary> neurons;

  bool empty() const noexcept { return norm.empty() && neurons.empty(); }
};

struct ForwardContext {
  GradGraph& graph;
  Pass pass;
  bool training = false;
  int timesteps = 1;
  ForwardRecord* record = nullptr;
};

using ParamInit = std::mt19937_64;

class Conv2d {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int pad,
         bool bias, ParamInit& rng);
  Var forward(ForwardContext& ctx, const Var& x) const;
  void collect(std::vector<Parameter*>& out);
  void set_identity();

  Parameter weight;
  std::optional<Parameter> bias;
  int stride;
  int pad;
};

class Linear {
 public:
  Linear(std::string name, int in_features, int out_features, ParamInit& rng);
  Var forward(ForwardContext& ctx, const Var& x) const;
  void collect(std::vector<Parameter*>& out);

  Parameter weight;
  Parameter bias;
};

class BatchNorm {
 public:
  BatchNorm(std::string name, int channels);
  Var forward(ForwardContext& ctx, const Var& x) const;
  void collect(std::vector<Parameter*>& out);
  /// running = (1 - momentum) * running + momentum * batch (variance unbiased).
  void update_running(const NormStats& batch);

  std::string name;
  Parameter gamma;
  Parameter beta;
  Tensor running_mean;
  Tensor running_var;
  Real momentum = Real(0.1);
  Real eps = Real(1e-5);
};

/// ReLU in an ANN, LIF neuron layer in an SNN.
class Activation {
 public:
  Activation(std::string name, NetKind kind, LifConfig lif) : name(std::move(name)), kind(kind), lif(lif) {}
  Var forward(ForwardContext& ctx, const Var& x) const;

  std::string name;
  NetKind kind;
  LifConfig lif;
};

struct ModuleTables {
  std::vector<Parameter*> params;
  std::vector<BatchNorm*> norms;
  std::vector<const Activation*> neurons;
  std::vector<std::pair<std::string, Tensor*>> buffers;
};

/// One element of a block partition (stem, stage, or classifier head).
class Block {
 public:
  explicit Block(std::string name) : name_(std::move(name)) {}
  virtual ~Block() = default;
  Block(const Block&) = delete;
  Block& operator=(const Block&) = delete;

  virtual Var forward(ForwardContext& ctx, const Var& x) const = 0;
  virtual void collect(ModuleTables& tables) = 0;
  const std::string& name() const noexcept { return name_; }

 private:
  std::string name_;
};

/// Ordered blocks {B_0 (stem), B_1..B_n (stages), B_{n+1} (head)}.
/// Tap position p in [0, n] exposes the output of block p.
class BlockPartition {
 public:
  BlockPartition(NetKind kind, ArchSpec spec, std::string prefix,
                 std::vector<std::unique_ptr<Block>> blocks, LifConfig lif);

  NetKind kind() const noexcept { return kind_; }
  const ArchSpec& spec() const noexcept { return spec_; }
  const std::string& prefix() const noexcept { return prefix_; }
  const LifConfig& lif() const noexcept { return lif_; }
  std::size_t size() const noexcept { return blocks_.size(); }
  std::size_t stage_count() const noexcept { return spec_.stages.size(); }
  const Block& block(std::size_t i) const { return *blocks_.at(i); }

  /// Runs blocks [first, last); appends every block output when `outputs`
  /// is given.
  Var forward_range(ForwardContext& ctx, Var x, std::size_t first, std::size_t last,
                    std::vector<Var>* outputs = nullptr) const;
  Var forward(ForwardContext& ctx, const Var& x, std::vector<Var>* outputs = nullptr) const;

  const std::vector<Parameter*>& parameters() const noexcept { return tables_.params; }
  const std::vector<BatchNorm*>& norms() const noexcept { return tables_.norms; }
  const std::vector<const Activation*>& neurons() const noexcept { return tables_.neurons; }
  /// Non-trainable persistent tensors (normalization running statistics).
  const std::vector<std::pair<std::string, Tensor*>>& buffers() const noexcept { return tables_.buffers; }

  /// Folds the batch statistics in `record` into the running statistics.
  void update_running_stats(const ForwardRecord& record);
  /// Throws ContractError unless `record` holds statistics for every site.
  void require_complete(const ForwardRecord& record) const;

  /// Copies every parameter and buffer from `other` (matching structure).
  void copy_state_from(const BlockPartition& other);

 private:
  NetKind kind_;
  ArchSpec spec_;
  std::string prefix_;
  LifConfig lif_;
  std::vector<std::unique_ptr<Block>> blocks_;
  ModuleTables tables_;
};

std::unique_ptr<BlockPartition> build_ann(const ArchSpec& spec, std::uint64_t seed,
                                          const std::string& prefix = "ann");
std::unique_ptr<BlockPartition> build_snn(const ArchSpec& spec, const LifConfig& cfg,
                                          std::uint64_t seed, const std::string& prefix = "snn");

/// Marks every parameter frozen: excluded from optimization, still
/// differentiable with respect to its inputs.
void freeze(BlockPartition& partition);

/// C_k: 1x1 conv -> normalization -> ReLU -> 1x1 conv, mapping SNN rate
/// features at one tap into the ANN feature space at the same tap.
class Connector {
 public:
  Connector(std::string name, int tap, int in_channels, int out_channels, ParamInit& rng);
  Connector(Connector&& other) noexcept;
  Connector& operator=(Connector&& other) noexcept;
  Connector(const Connector&) = delete;
  Connector& operator=(const Connector&) = delete;

  /// ctx.pass must be AnnTrain (batch statistics) or AnnEval (running).
  Var forward(ForwardContext& ctx, const Var& rate_features) const;

  int tap() const noexcept { return tap_; }
  const std::string& name() const noexcept { return name_; }
  const ModuleTables& tables() const noexcept { return tables_; }
  void update_running_stats(const ForwardRecord& record);

 private:
  void rebuild_tables();

  std::string name_;
  int tap_;
  Conv2d expand_;
  BatchNorm norm_;
  Conv2d project_;
  ModuleTables tables_;
};

std::vector<Connector> build_connectors(const ArchSpec& spec, const std::vector<int>& taps,
                                        std::uint64_t seed, const std::string& prefix = "connector");

/// Exact count of trainable scalars.
std::int64_t count_parameters(const BlockPartition& partition);
std::int64_t count_parameters(const std::vector<Connector>& connectors);

/// Tap positions after every interior stage (1..n-1).
std::vector<int> interior_taps(const ArchSpec& spec);

RATEKD_END_NAMESPACE
