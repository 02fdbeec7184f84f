#include "ratekd/model.hpp"

#include <cmath>
#include <unordered_set>

#include "ratekd/kernels.hpp"

RATEKD_BEGIN_NAMESPACE

namespace {

std::int64_t conv_out(std::int64_t in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

bool time_stacked(Pass p) { return p == Pass::Spike || p == Pass::Bptt; }

Tensor kaiming_normal(Shape shape, std::int64_t fan_in, ParamInit& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<Real>(dist(rng));
  return t;
}

Tensor uniform_fan_in(Shape shape, std::int64_t fan_in, ParamInit& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<Real>(dist(rng));
  return t;
}

}  // namespace

// ---------------------------------------------------------------- ArchSpec

void ArchSpec::validate() const {
  auto fail = [this](const std::string& what) { throw ConfigError("arch '" + name + "': " + what); };
  if (stages.empty()) fail("at least one stage is required");
  if (in_channels < 1 || height < 1 || width < 1) fail("input shape must be positive");
  if (stem_channels < 1) fail("stem channels must be positive");
  if (stem_stride < 1) fail("stem stride must be positive");
  if (num_classes < 2) fail("need at least two classes");
  std::int64_t h = conv_out(height, 3, stem_stride, 1), w = conv_out(width, 3, stem_stride, 1);
  if (h < 1 || w < 1) fail("input too small for the stem");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.channels < 1) fail("stage " + std::to_string(i + 1) + " channels must be positive");
    if (s.blocks < 1) fail("stage " + std::to_string(i + 1) + " needs at least one block");
    if (s.stride < 1) fail("stage " + std::to_string(i + 1) + " stride must be positive");
    h = conv_out(h, 3, s.stride, 1);
    w = conv_out(w, 3, s.stride, 1);
    if (h < 1 || w < 1) fail("feature map vanishes at stage " + std::to_string(i + 1));
  }
}

std::vector<std::int64_t> ArchSpec::feature_shape(std::size_t position) const {
  if (position > stages.size()) {
    throw ConfigError("tap position " + std::to_string(position) + " exceeds stage count " +
                      std::to_string(stages.size()));
  }
  std::int64_t c = stem_channels;
  std::int64_t h = conv_out(height, 3, stem_stride, 1), w = conv_out(width, 3, stem_stride, 1);
  for (std::size_t i = 0; i < position; ++i) {
    c = stages[i].channels;
    h = conv_out(h, 3, stages[i].stride, 1);
    w = conv_out(w, 3, stages[i].stride, 1);
  }
  return {c, h, w};
}

ArchSpec ArchSpec::resnet_mini(int in_channels, int height, int width, int num_classes) {
  ArchSpec s;
  s.name = "resnet-mini";
  s.family = ArchFamily::Residual;
  s.in_channels = in_channels;
  s.height = height;
  s.width = width;
  s.stem_channels = 16;
  s.stem_stride = 2;
  s.stages = {{16, 1, 1}, {32, 1, 2}, {64, 1, 2}, {128, 1, 2}};
  s.num_classes = num_classes;
  return s;
}

ArchSpec ArchSpec::plain3(int in_channels, int height, int width, int num_classes) {
  ArchSpec s;
  s.name = "plain3";
  s.family = ArchFamily::Plain;
  s.in_channels = in_channels;
  s.height = height;
  s.width = width;
  s.stem_channels = 16;
  s.stem_stride = 1;
  s.stages = {{32, 1, 2}, {64, 1, 2}};
  s.num_classes = num_classes;
  return s;
}

ArchSpec ArchSpec::resnet18(int in_channels, int height, int width, int num_classes) {
  ArchSpec s;
  s.name = "resnet18";
  s.family = ArchFamily::Residual;
  s.in_channels = in_channels;
  s.height = height;
  s.width = width;
  s.stem_channels = 64;
  s.stem_stride = 1;
  s.stages = {{64, 2, 1}, {128, 2, 2}, {256, 2, 2}, {512, 2, 2}};
  s.num_classes = num_classes;
  return s;
}

ArchSpec ArchSpec::preset(const std::string& name, int in_channels, int height, int width,
                          int num_classes) {
  if (name == "resnet-mini") return resnet_mini(in_channels, height, width, num_classes);
  if (name == "plain3") return plain3(in_channels, height, width, num_classes);
  if (name == "resnet18") return resnet18(in_channels, height, width, num_classes);
  throw ConfigError("unknown architecture preset '" + name + "'");
}

// ------------------------------------------------------------------ layers

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride_,
               int pad_, bool with_bias, ParamInit& rng)
    : weight{name + ".weight",
             kaiming_normal(Shape{out_channels, in_channels, kernel, kernel},
                            static_cast<std::int64_t>(in_channels) * kernel * kernel, rng)},
      stride(stride_),
      pad(pad_) {
  if (with_bias) {
    bias = Parameter{name + ".bias",
                     uniform_fan_in(Shape{out_channels},
                                    static_cast<std::int64_t>(in_channels) * kernel * kernel, rng)};
  }
}

Var Conv2d::forward(ForwardContext& ctx, const Var& x) const {
  const Var w = ctx.graph.param(weight);
  if (bias) {
    const Var b = ctx.graph.param(*bias);
    return ad::conv2d(x, w, &b, stride, pad);
  }
  return ad::conv2d(x, w, nullptr, stride, pad);
}

void Conv2d::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  if (bias) out.push_back(&*bias);
}

void Conv2d::set_identity() {
  const auto o = weight.value.dim(0), i = weight.value.dim(1);
  if (o != i || weight.value.dim(2) != 1 || weight.value.dim(3) != 1) {
    throw ContractError("identity init needs a square 1x1 convolution");
  }
  weight.value.fill(0);
  for (std::int64_t c = 0; c < o; ++c) weight.value[c * i + c] = 1;
  if (bias) bias->value.fill(0);
}

Linear::Linear(std::string name, int in_features, int out_features, ParamInit& rng)
    : weight{name + ".weight", uniform_fan_in(Shape{out_features, in_features}, in_features, rng)},
      bias{name + ".bias", uniform_fan_in(Shape{out_features}, in_features, rng)} {}

Var Linear::forward(ForwardContext& ctx, const Var& x) const {
  return ad::linear(x, ctx.graph.param(weight), ctx.graph.param(bias));
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

BatchNorm::BatchNorm(std::string name_, int channels)
    : name(std::move(name_)),
      gamma{name + ".gamma", Tensor(Shape{channels}, Real(1)), false, false},
      beta{name + ".beta", Tensor(Shape{channels}), false, false},
      running_mean(Shape{channels}),
      running_var(Shape{channels}, Real(1)) {}

Var BatchNorm::forward(ForwardContext& ctx, const Var& x) const {
  const Var g = ctx.graph.param(gamma);
  const Var b = ctx.graph.param(beta);
  switch (ctx.pass) {
    case Pass::AnnTrain: {
      if (!ctx.training) break;
      NormStats used;
      used.count = x.value().numel() / x.value().dim(1);
      auto y = ad::batch_norm_train(x, g, b, eps, &used.mean, &used.var);
      if (ctx.record) ctx.record->norm[this] = std::move(used);
      return y;
    }
    case Pass::AnnEval:
      break;
    case Pass::Spike:
    case Pass::Bptt: {
      if (!ctx.training) {
        if (ctx.record) ctx.record->norm[this] = NormStats{running_mean, running_var, 0};
        break;
      }
      // Statistics over the whole time-stacked batch, held constant.
      auto stats = kernels::channel_stats(x.value());
      auto y = ad::batch_norm_fixed(x, stats.mean, stats.var, g, b, eps);
      if (ctx.record) {
        ctx.record->norm[this] =
            NormStats{std::move(stats.mean), std::move(stats.var), x.value().numel() / x.value().dim(1)};
      }
      return y;
    }
    case Pass::Rate: {
      if (!ctx.record) throw ContractError("rate pass without a spike-phase record");
      auto it = ctx.record->norm.find(this);
      if (it == ctx.record->norm.end()) {
        throw ContractError("rate pass: no recorded statistics for '" + name + "'");
      }
      return ad::batch_norm_fixed(x, it->second.mean, it->second.var, g, b, eps);
    }
  }
  return ad::batch_norm_fixed(x, running_mean, running_var, g, b, eps);
}

void BatchNorm::collect(std::vector<Parameter*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
}

void BatchNorm::update_running(const NormStats& batch) {
  expect_same_shape(batch.mean, running_mean, "update_running");
  if (batch.count < 1) return;  // eval-mode record: nothing new
  const auto count = batch.count;
  const Real unbias = count > 1 ? static_cast<Real>(count) / static_cast<Real>(count - 1) : Real(1);
  for (std::int64_t c = 0; c < running_mean.numel(); ++c) {
    running_mean[c] = (1 - momentum) * running_mean[c] + momentum * batch.mean[c];
    running_var[c] = (1 - momentum) * running_var[c] + momentum * batch.var[c] * unbias;
  }
}

Var Activation::forward(ForwardContext& ctx, const Var& x) const {
  if (kind == NetKind::Ann) {
    if (ctx.pass != Pass::AnnTrain && ctx.pass != Pass::AnnEval) {
      throw ContractError("ANN activation '" + name + "' invoked in a spiking pass");
    }
    return ad::relu(x);
  }
  switch (ctx.pass) {
    case Pass::Spike: {
      if (!ctx.record) throw ContractError("spike pass requires a record");
      RateSummary summary;
      Tensor spikes = lif_simulate(x.value(), ctx.timesteps, lif, &summary);
      ctx.record->neurons[this] = std::move(summary);
      return ctx.graph.constant(std::move(spikes));
    }
    case Pass::Rate: {
      if (!ctx.record) throw ContractError("rate pass without a spike-phase record");
      auto it = ctx.record->neurons.find(this);
      if (it == ctx.record->neurons.end()) {
        throw ContractError("rate pass: no neuron statistics for '" + name + "'");
      }
      return ad::custom_node(x, it->second.rate, it->second.g);
    }
    case Pass::Bptt:
      return lif_sequence(x, ctx.timesteps, lif);
    default:
      throw ContractError("SNN activation '" + name + "' invoked in an ANN pass");
  }
}

// ------------------------------------------------------------------ blocks

namespace {

struct BuildCtx {
  NetKind kind;
  LifConfig lif;
  bool batch_norm;
  ParamInit& rng;
};

void add_norm(ModuleTables& t, BatchNorm& bn) {
  bn.collect(t.params);
  t.norms.push_back(&bn);
  t.buffers.emplace_back(bn.name + ".running_mean", &bn.running_mean);
  t.buffers.emplace_back(bn.name + ".running_var", &bn.running_var);
}

// conv 3x3 -> [bn] -> activation
class ConvUnit final : public Block {
 public:
  ConvUnit(const std::string& name, int in_c, int out_c, int stride, BuildCtx& b)
      : Block(name),
        conv_(name + ".conv", in_c, out_c, 3, stride, 1, !b.batch_norm, b.rng),
        act_(name + ".act", b.kind, b.lif) {
    if (b.batch_norm) bn_.emplace(name + ".bn", out_c);
  }

  Var forward(ForwardContext& ctx, const Var& x) const override {
    Var y = conv_.forward(ctx, x);
    if (bn_) y = bn_->forward(ctx, y);
    return act_.forward(ctx, y);
  }

  void collect(ModuleTables& t) override {
    conv_.collect(t.params);
    if (bn_) add_norm(t, *bn_);
    t.neurons.push_back(&act_);
  }

 private:
  Conv2d conv_;
  std::optional<BatchNorm> bn_;
  Activation act_;
};

// Basic residual unit: act(bn2(conv2(act(bn1(conv1 x)))) + shortcut(x)).
class ResidualUnit final : public Block {
 public:
  ResidualUnit(const std::string& name, int in_c, int out_c, int stride, BuildCtx& b)
      : Block(name),
        conv1_(name + ".conv1", in_c, out_c, 3, stride, 1, !b.batch_norm, b.rng),
        act1_(name + ".act1", b.kind, b.lif),
        conv2_(name + ".conv2", out_c, out_c, 3, 1, 1, !b.batch_norm, b.rng),
        act2_(name + ".act2", b.kind, b.lif) {
    if (b.batch_norm) {
      bn1_.emplace(name + ".bn1", out_c);
      bn2_.emplace(name + ".bn2", out_c);
    }
    if (stride != 1 || in_c != out_c) {
      down_.emplace(name + ".down", in_c, out_c, 1, stride, 0, !b.batch_norm, b.rng);
      if (b.batch_norm) down_bn_.emplace(name + ".down_bn", out_c);
    }
  }

  Var forward(ForwardContext& ctx, const Var& x) const override {
    Var y = conv1_.forward(ctx, x);
    if (bn1_) y = bn1_->forward(ctx, y);
    y = act1_.forward(ctx, y);
    y = conv2_.forward(ctx, y);
    if (bn2_) y = bn2_->forward(ctx, y);
    Var skip = x;
    if (down_) {
      skip = down_->forward(ctx, x);
      if (down_bn_) skip = down_bn_->forward(ctx, skip);
    }
    return act2_.forward(ctx, ad::add(y, skip));
  }

  void collect(ModuleTables& t) override {
    conv1_.collect(t.params);
    if (bn1_) add_norm(t, *bn1_);
    t.neurons.push_back(&act1_);
    conv2_.collect(t.params);
    if (bn2_) add_norm(t, *bn2_);
    if (down_) {
      down_->collect(t.params);
      if (down_bn_) add_norm(t, *down_bn_);
    }
    t.neurons.push_back(&act2_);
  }

 private:
  Conv2d conv1_;
  std::optional<BatchNorm> bn1_;
  Activation act1_;
  Conv2d conv2_;
  std::optional<BatchNorm> bn2_;
  std::optional<Conv2d> down_;
  std::optional<BatchNorm> down_bn_;
  Activation act2_;
};

class StageBlock final : public Block {
 public:
  StageBlock(const std::string& name, std::vector<std::unique_ptr<Block>> units)
      : Block(name), units_(std::move(units)) {}

  Var forward(ForwardContext& ctx, const Var& x) const override {
    Var y = x;
    for (const auto& u : units_) y = u->forward(ctx, y);
    return y;
  }

  void collect(ModuleTables& t) override {
    for (auto& u : units_) u->collect(t);
  }

 private:
  std::vector<std::unique_ptr<Block>> units_;
};

// Global average pool, time average for stacked passes, then the classifier.
class HeadBlock final : public Block {
 public:
  HeadBlock(const std::string& name, int in_c, int classes, BuildCtx& b)
      : Block(name), fc_(name + ".fc", in_c, classes, b.rng) {}

  Var forward(ForwardContext& ctx, const Var& x) const override {
    Var pooled = ad::global_avg_pool(x);
    if (time_stacked(ctx.pass)) {
      const auto rows = pooled.shape()[0];
      const auto c = pooled.shape()[1];
      if (rows % ctx.timesteps != 0) throw ShapeError("head: batch not divisible by timesteps");
      pooled = ad::reshape(pooled, Shape{ctx.timesteps, rows / ctx.timesteps, c});
      pooled = ad::mean_axis(pooled, 0);
    }
    return fc_.forward(ctx, pooled);
  }

  void collect(ModuleTables& t) override { fc_.collect(t.params); }

 private:
  Linear fc_;
};

std::unique_ptr<BlockPartition> build(NetKind kind, const ArchSpec& spec, const LifConfig& lif,
                                      std::uint64_t seed, const std::string& prefix) {
  spec.validate();
  if (kind == NetKind::Snn) lif.validate();
  ParamInit rng(seed);
  BuildCtx b{kind, lif, spec.batch_norm, rng};
  std::vector<std::unique_ptr<Block>> blocks;
  blocks.push_back(std::make_unique<ConvUnit>(prefix + ".stem", spec.in_channels, spec.stem_channels,
                                              spec.stem_stride, b));
  int in_c = spec.stem_channels;
  for (std::size_t s = 0; s < spec.stages.size(); ++s) {
    const auto& st = spec.stages[s];
    const std::string name = prefix + ".stage" + std::to_string(s + 1);
    std::vector<std::unique_ptr<Block>> units;
    for (int u = 0; u < st.blocks; ++u) {
      const std::string uname = name + "." + std::to_string(u);
      const int stride = u == 0 ? st.stride : 1;
      if (spec.family == ArchFamily::Residual) {
        units.push_back(std::make_unique<ResidualUnit>(uname, in_c, st.channels, stride, b));
      } else {
        units.push_back(std::make_unique<ConvUnit>(uname, in_c, st.channels, stride, b));
      }
      in_c = st.channels;
    }
    blocks.push_back(std::make_unique<StageBlock>(name, std::move(units)));
  }
  blocks.push_back(std::make_unique<HeadBlock>(prefix + ".head", in_c, spec.num_classes, b));
  return std::make_unique<BlockPartition>(kind, spec, prefix, std::move(blocks), lif);
}

}  // namespace

// --------------------------------------------------------------- partition

BlockPartition::BlockPartition(NetKind kind, ArchSpec spec, std::string prefix,
                               std::vector<std::unique_ptr<Block>> blocks, LifConfig lif)
    : kind_(kind), spec_(std::move(spec)), prefix_(std::move(prefix)), lif_(lif), blocks_(std::move(blocks)) {
  if (blocks_.size() != spec_.stages.size() + 2) {
    throw ContractError("partition needs stem + stages + head blocks");
  }
  for (auto& b : blocks_) b->collect(tables_);
}

Var BlockPartition::forward_range(ForwardContext& ctx, Var x, std::size_t first, std::size_t last,
                                  std::vector<Var>* outputs) const {
  if (first > last || last > blocks_.size()) throw ContractError("forward_range: bad block range");
  for (std::size_t i = first; i < last; ++i) {
    x = blocks_[i]->forward(ctx, x);
    if (outputs) outputs->push_back(x);
  }
  return x;
}

Var BlockPartition::forward(ForwardContext& ctx, const Var& x, std::vector<Var>* outputs) const {
  return forward_range(ctx, x, 0, blocks_.size(), outputs);
}

void BlockPartition::update_running_stats(const ForwardRecord& record) {
  for (BatchNorm* bn : tables_.norms) {
    auto it = record.norm.find(bn);
    if (it != record.norm.end()) bn->update_running(it->second);
  }
}

void BlockPartition::require_complete(const ForwardRecord& record) const {
  for (const BatchNorm* bn : tables_.norms) {
    if (!record.norm.count(bn)) throw ContractError("record lacks statistics for '" + bn->name + "'");
  }
  if (kind_ == NetKind::Snn) {
    for (const Activation* a : tables_.neurons) {
      if (!record.neurons.count(a)) throw ContractError("record lacks neuron statistics for '" + a->name + "'");
    }
  }
}

void BlockPartition::copy_state_from(const BlockPartition& other) {
  const auto& src = other.tables_;
  if (src.params.size() != tables_.params.size() || src.buffers.size() != tables_.buffers.size()) {
    throw ShapeError("copy_state_from: partitions differ in structure");
  }
  for (std::size_t i = 0; i < src.params.size(); ++i) {
    if (!(src.params[i]->value.shape() == tables_.params[i]->value.shape())) {
      throw ShapeError("copy_state_from: shape mismatch at '" + tables_.params[i]->name + "'");
    }
    tables_.params[i]->value = src.params[i]->value;
  }
  for (std::size_t i = 0; i < src.buffers.size(); ++i) *tables_.buffers[i].second = *src.buffers[i].second;
}

std::unique_ptr<BlockPartition> build_ann(const ArchSpec& spec, std::uint64_t seed,
                                          const std::string& prefix) {
  return build(NetKind::Ann, spec, LifConfig{}, seed, prefix);
}

std::unique_ptr<BlockPartition> build_snn(const ArchSpec& spec, const LifConfig& cfg,
                                          std::uint64_t seed, const std::string& prefix) {
  return build(NetKind::Snn, spec, cfg, seed, prefix);
}

void freeze(BlockPartition& partition) {
  for (Parameter* p : partition.parameters()) p->frozen = true;
}

// --------------------------------------------------------------- connector

Connector::Connector(std::string name, int tap, int in_channels, int out_channels, ParamInit& rng)
    : name_(std::move(name)),
      tap_(tap),
      expand_(name_ + ".conv1", in_channels, out_channels, 1, 1, 0, false, rng),
      norm_(name_ + ".bn", out_channels),
      project_(name_ + ".conv2", out_channels, out_channels, 1, 1, 0, true, rng) {
  if (in_channels == out_channels) expand_.set_identity();
  project_.set_identity();
  rebuild_tables();
}

Connector::Connector(Connector&& other) noexcept
    : name_(std::move(other.name_)),
      tap_(other.tap_),
      expand_(std::move(other.expand_)),
      norm_(std::move(other.norm_)),
      project_(std::move(other.project_)) {
  rebuild_tables();
}

Connector& Connector::operator=(Connector&& other) noexcept {
  name_ = std::move(other.name_);
  tap_ = other.tap_;
  expand_ = std::move(other.expand_);
  norm_ = std::move(other.norm_);
  project_ = std::move(other.project_);
  rebuild_tables();
  return *this;
}

void Connector::rebuild_tables() {
  tables_ = ModuleTables{};
  expand_.collect(tables_.params);
  add_norm(tables_, norm_);
  project_.collect(tables_.params);
}

Var Connector::forward(ForwardContext& ctx, const Var& rate_features) const {
  if (ctx.pass != Pass::AnnTrain && ctx.pass != Pass::AnnEval) {
    throw ContractError("connector runs in an ANN-style pass");
  }
  Var y = expand_.forward(ctx, rate_features);
  y = norm_.forward(ctx, y);
  y = ad::relu(y);
  return project_.forward(ctx, y);
}

void Connector::update_running_stats(const ForwardRecord& record) {
  auto it = record.norm.find(&norm_);
  if (it != record.norm.end()) norm_.update_running(it->second);
}

std::vector<Connector> build_connectors(const ArchSpec& spec, const std::vector<int>& taps,
                                        std::uint64_t seed, const std::string& prefix) {
  spec.validate();
  ParamInit rng(seed);
  std::vector<Connector> out;
  out.reserve(taps.size());
  std::unordered_set<int> seen;
  for (std::size_t k = 0; k < taps.size(); ++k) {
    const int tap = taps[k];
    if (tap < 0 || static_cast<std::size_t>(tap) > spec.stages.size()) {
      throw ConfigError("tap position " + std::to_string(tap) + " outside [0, " +
                        std::to_string(spec.stages.size()) + "]");
    }
    if (!seen.insert(tap).second) throw ConfigError("duplicate tap position " + std::to_string(tap));
    const auto c = static_cast<int>(spec.feature_shape(static_cast<std::size_t>(tap))[0]);
    out.emplace_back(prefix + std::to_string(k + 1), tap, c, c, rng);
  }
  return out;
}

std::int64_t count_parameters(const BlockPartition& partition) {
  std::int64_t n = 0;
  for (const Parameter* p : partition.parameters())
    if (!p->frozen) n += p->value.numel();
  return n;
}

std::int64_t count_parameters(const std::vector<Connector>& connectors) {
  std::int64_t n = 0;
  for (const auto& c : connectors)
    for (const Parameter* p : c.tables().params)
      if (!p->frozen) n += p->value.numel();
  return n;
}

std::vector<int> interior_taps(const ArchSpec& spec) {
  std::vector<int> taps;
  for (int i = 1; i < static_cast<int>(spec.stages.size()); ++i) taps.push_back(i);
  return taps;
}

RATEKD_END_NAMESPACE
