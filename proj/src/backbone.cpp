#include "fssi/backbone.hpp"

#include <cmath>
#include <cstdint>

#include "byte_io.hpp"
#include "fssi/errors.hpp"
#include "fssi/random.hpp"

namespace fssi {
namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

std::string block_prefix(std::size_t block) { return "block" + std::to_string(block) + "."; }

void add_batch_norm(BackboneParams& p, const std::string& prefix, std::size_t channels) {
  p.add(prefix + ".gamma", Tensor::filled({channels}, 1.0), true);
  p.add(prefix + ".beta", Tensor::zeros({channels}), true);
  p.add(prefix + ".running_mean", Tensor::zeros({channels}), false);
  p.add(prefix + ".running_var", Tensor::filled({channels}, 1.0), false);
}

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Var batch_norm_layer(const ForwardContext& ctx, const std::string& prefix, Var x) {
  ops::BatchNormState state{ctx.params.get(prefix + ".running_mean"),
                            ctx.params.get(prefix + ".running_var")};
  Var y = ops::batch_norm(x, ctx.bound[prefix + ".gamma"], ctx.bound[prefix + ".beta"], state,
                          ctx.mode);
  if (ctx.mode == ops::Mode::kTrain && ctx.stats_out != nullptr) {
    ctx.stats_out->get(prefix + ".running_mean") = std::move(state.running_mean);
    ctx.stats_out->get(prefix + ".running_var") = std::move(state.running_var);
  }
  return y;
}

}  // namespace

std::string to_string(ConvVariant variant) {
  return variant == ConvVariant::kStandard ? "SC" : "DSC";
}

ConvVariant parse_conv_variant(const std::string& text) {
  if (text == "SC" || text == "sc") return ConvVariant::kStandard;
  if (text == "DSC" || text == "dsc") return ConvVariant::kDepthwiseSeparable;
  throw ConfigError("unknown conv variant '" + text + "' (expected SC or DSC)");
}

void ModelConfig::validate() const {
  if (channels.size() != 3) {
    throw ConfigError("channels must list exactly 3 block widths, got " +
                      std::to_string(channels.size()));
  }
  if (channels[0] == 0) throw ConfigError("channel counts must be positive");
  for (std::size_t i = 1; i < channels.size(); ++i) {
    if (channels[i] <= channels[i - 1]) throw ConfigError("channels must be strictly increasing");
  }
  if (kernel_h == 0 || kernel_w == 0 || kernel_h % 2 == 0 || kernel_w % 2 == 0) {
    throw ConfigError("kernel extents must be odd and positive");
  }
  if (ca_reduction == 0 || channels.back() % ca_reduction != 0) {
    throw ConfigError("ca_reduction " + std::to_string(ca_reduction) +
                      " must divide the final channel count " + std::to_string(channels.back()));
  }
  if (embed_dim != kEmbeddingDim) {
    throw ConfigError("embed_dim must be " + std::to_string(kEmbeddingDim));
  }
}

std::string ModelConfig::variant_name() const {
  return to_string(variant) + (use_ca ? "+CA" : "");
}

void BackboneParams::add(std::string name, Tensor value, bool learnable) {
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back(Parameter{std::move(name), std::move(value), learnable});
}

Tensor& BackboneParams::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return entries_[it->second].value;
}

const Tensor& BackboneParams::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return entries_[it->second].value;
}

std::size_t BackboneParams::learnable_count() const {
  std::size_t n = 0;
  for (const Parameter& p : entries_) {
    if (p.learnable) n += p.value.size();
  }
  return n;
}

std::size_t count_block_parameters(ConvVariant variant, std::size_t in_channels,
                                   std::size_t out_channels, std::size_t kernel_h,
                                   std::size_t kernel_w) {
  if (variant == ConvVariant::kStandard) {
    return out_channels * in_channels * kernel_h * kernel_w + 2 * out_channels;
  }
  return in_channels * kernel_h * kernel_w + 2 * in_channels + out_channels * in_channels +
         2 * out_channels;
}

std::size_t count_attention_parameters(std::size_t channels, std::size_t reduction) {
  const std::size_t hidden = channels / reduction;
  return 2 * hidden * channels + hidden + channels;
}

std::size_t count_parameters(const ModelConfig& config) {
  config.validate();
  std::size_t total = 0;
  std::size_t in = 1;
  for (std::size_t out : config.channels) {
    total += count_block_parameters(config.variant, in, out, config.kernel_h, config.kernel_w);
    in = out;
  }
  if (config.use_ca) total += count_attention_parameters(in, config.ca_reduction);
  total += config.embed_dim * in + config.embed_dim + 2 * config.embed_dim;
  return total;
}

BackboneParams init_params(const ModelConfig& config) {
  config.validate();
  Rng rng(config.seed);
  BackboneParams p;
  const std::size_t kh = config.kernel_h, kw = config.kernel_w;
  std::size_t in = 1;
  for (std::size_t b = 0; b < config.channels.size(); ++b) {
    const std::string prefix = block_prefix(b + 1);
    const std::size_t out = config.channels[b];
    if (config.variant == ConvVariant::kStandard) {
      p.add(prefix + "conv", he_uniform({out, in, kh, kw}, in * kh * kw, rng), true);
      add_batch_norm(p, prefix + "bn", out);
    } else {
      p.add(prefix + "depthwise", he_uniform({in, kh, kw}, kh * kw, rng), true);
      add_batch_norm(p, prefix + "depthwise_bn", in);
      p.add(prefix + "pointwise", he_uniform({out, in}, in, rng), true);
      add_batch_norm(p, prefix + "pointwise_bn", out);
    }
    in = out;
  }
  if (config.use_ca) {
    const std::size_t hidden = in / config.ca_reduction;
    p.add("ca.w1", he_uniform({hidden, in}, in, rng), true);
    p.add("ca.b1", Tensor::zeros({hidden}), true);
    p.add("ca.w2", he_uniform({in, hidden}, hidden, rng), true);
    p.add("ca.b2", Tensor::zeros({in}), true);
  }
  p.add("output.fc.weight", he_uniform({config.embed_dim, in}, in, rng), true);
  p.add("output.fc.bias", Tensor::zeros({config.embed_dim}), true);
  add_batch_norm(p, "output.bn", config.embed_dim);
  return p;
}

BoundParams::BoundParams(Tape& tape, const BackboneParams& params) {
  for (const Parameter& p : params.entries()) {
    if (!p.learnable) continue;
    index_.emplace(p.name, vars_.size());
    vars_.emplace_back(p.name, tape.leaf(p.value));
  }
}

Var BoundParams::operator[](const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("parameter " + name + " is not bound");
  return vars_[it->second].second;
}

ops::Conv2dGeometry block_geometry(const ModelConfig& config) {
  return ops::Conv2dGeometry{2, 1, config.kernel_h / 2, config.kernel_w / 2};
}

Var conv_block_forward(const ForwardContext& ctx, std::size_t block, Var x) {
  if (block < 1 || block > ctx.config.channels.size()) {
    throw ShapeError("conv block index " + std::to_string(block) + " out of range");
  }
  const std::string prefix = block_prefix(block);
  const ops::Conv2dGeometry geometry = block_geometry(ctx.config);
  if (ctx.config.variant == ConvVariant::kStandard) {
    Var y = ops::conv2d_standard(x, ctx.bound[prefix + "conv"], geometry);
    return ops::relu(batch_norm_layer(ctx, prefix + "bn", y));
  }
  Var y = ops::conv2d_depthwise(x, ctx.bound[prefix + "depthwise"], geometry);
  y = ops::relu(batch_norm_layer(ctx, prefix + "depthwise_bn", y));
  y = ops::conv_pointwise(y, ctx.bound[prefix + "pointwise"]);
  return ops::relu(batch_norm_layer(ctx, prefix + "pointwise_bn", y));
}

Var channel_attention(Var x, Var w1, Var b1, Var w2, Var b2) {
  const Shape& s = x.shape();
  if (s.size() < 2 || s.size() > 3 || w1.shape().size() != 2 || w1.shape()[1] != s[s.size() - 2]) {
    throw ShapeError("channel_attention: input " + shape_to_string(s) +
                     " does not match W1 " + shape_to_string(w1.shape()));
  }
  Var avg = ops::mean_over_time(x);
  Var peak = ops::max_over_time(x);
  Var from_avg = ops::fully_connected(ops::relu(ops::fully_connected(avg, w1, b1)), w2, b2);
  Var from_peak = ops::fully_connected(ops::relu(ops::fully_connected(peak, w1, b1)), w2, b2);
  Var coeff = ops::sigmoid(ops::add(from_avg, from_peak));
  return ops::scale_channels(x, coeff);
}

Var forward_batch(const ForwardContext& ctx, Var batch) {
  const Shape& s = batch.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != kMelBins) {
    throw ShapeError("forward: expected [N, 1, " + std::to_string(kMelBins) + ", T], got " +
                     shape_to_string(s));
  }
  Var x = batch;
  for (std::size_t b = 1; b <= ctx.config.channels.size(); ++b) x = conv_block_forward(ctx, b, x);
  x = ops::mean_over_axis(x, 2);  // collapse the residual frequency bins
  if (ctx.config.use_ca) {
    x = channel_attention(x, ctx.bound["ca.w1"], ctx.bound["ca.b1"], ctx.bound["ca.w2"],
                          ctx.bound["ca.b2"]);
  }
  x = ops::mean_over_time(ops::relu(x));
  x = ops::fully_connected(x, ctx.bound["output.fc.weight"], ctx.bound["output.fc.bias"]);
  return ops::relu(batch_norm_layer(ctx, "output.bn", x));
}

Tensor stack_features(std::span<const FeatureMatrix* const> features) {
  if (features.empty()) throw ShapeError("stack_features: empty batch");
  const std::size_t bins = features[0]->bins, frames = features[0]->frames;
  Tensor out({features.size(), 1, bins, frames});
  for (std::size_t n = 0; n < features.size(); ++n) {
    const FeatureMatrix& f = *features[n];
    if (f.bins != bins || f.frames != frames) {
      throw ShapeError("stack_features: utterance " + std::to_string(n) + " is " +
                       std::to_string(f.bins) + "x" + std::to_string(f.frames) + ", expected " +
                       std::to_string(bins) + "x" + std::to_string(frames));
    }
    std::copy(f.values.begin(), f.values.end(), out.raw() + n * bins * frames);
  }
  return out;
}

Embedding forward(const FeatureMatrix& features, BackboneParams& params,
                  const ModelConfig& config, ops::Mode mode) {
  if (features.bins != kMelBins) {
    throw ShapeError("forward: expected " + std::to_string(kMelBins) + " mel bins, got " +
                     std::to_string(features.bins));
  }
  for (double v : features.values) {
    if (!std::isfinite(v)) throw NumericError("forward: non-finite feature value");
  }
  if (mode == ops::Mode::kTrain) {
    throw ShapeError("forward: train mode needs a batch of at least two utterances; use forward_batch");
  }
  Tape tape(GradMode::kDisabled);
  BoundParams bound(tape, params);
  const FeatureMatrix* one[] = {&features};
  Var input = tape.constant(stack_features(one));
  ForwardContext ctx{bound, params, config, mode, &params};
  const Tensor& out = forward_batch(ctx, input).value();
  return Embedding(out.data().begin(), out.data().end());
}

Model make_model(const ModelConfig& config) { return Model{config, init_params(config)}; }

Embedding embed(const Model& model, const FeatureMatrix& features) {
  if (features.bins != kMelBins) {
    throw ShapeError("embed: expected " + std::to_string(kMelBins) + " mel bins, got " +
                     std::to_string(features.bins));
  }
  for (double v : features.values) {
    if (!std::isfinite(v)) throw NumericError("embed: non-finite feature value");
  }
  Tape tape(GradMode::kDisabled);
  BoundParams bound(tape, model.params);
  const FeatureMatrix* one[] = {&features};
  Var input = tape.constant(stack_features(one));
  ForwardContext ctx{bound, model.params, model.config, ops::Mode::kInfer};
  const Tensor& out = forward_batch(ctx, input).value();
  return Embedding(out.data().begin(), out.data().end());
}

std::vector<Embedding> embed_all(const Model& model, std::span<const FeatureMatrix> features) {
  std::vector<Embedding> out;
  out.reserve(features.size());
  for (const FeatureMatrix& f : features) out.push_back(embed(model, f));
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  const ModelConfig& c = model.config;
  std::vector<unsigned char> out;
  detail::append_bytes(out, "DSCN");
  detail::append_le<std::uint32_t>(out, kCheckpointVersion);
  detail::append_le<std::uint8_t>(out, c.variant == ConvVariant::kStandard ? 0 : 1);
  detail::append_le<std::uint8_t>(out, c.use_ca ? 1 : 0);
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.channels.size()));
  for (std::size_t ch : c.channels) detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(ch));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.kernel_h));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.kernel_w));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.ca_reduction));
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(c.embed_dim));
  detail::append_le<std::uint64_t>(out, c.seed);

  const auto& entries = model.params.entries();
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const Parameter& p : entries) {
    detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    detail::append_bytes(out, p.name);
    detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t e : p.value.shape()) detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    for (double v : p.value.data()) detail::append_le<double>(out, v);
  }
  detail::write_file(path, out);
}

Model load_checkpoint(const std::filesystem::path& path) {
  detail::ByteReader r = detail::open_reader(path);
  r.expect_magic("DSCN");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError(r.source() + ": unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig c;
  const auto variant = r.get<std::uint8_t>();
  if (variant > 1) throw DataError(r.source() + ": bad conv variant tag");
  c.variant = variant == 0 ? ConvVariant::kStandard : ConvVariant::kDepthwiseSeparable;
  c.use_ca = r.get<std::uint8_t>() != 0;
  c.channels.resize(r.get<std::uint32_t>());
  for (std::size_t& ch : c.channels) ch = r.get<std::uint32_t>();
  c.kernel_h = r.get<std::uint32_t>();
  c.kernel_w = r.get<std::uint32_t>();
  c.ca_reduction = r.get<std::uint32_t>();
  c.embed_dim = r.get<std::uint32_t>();
  c.seed = r.get<std::uint64_t>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw DataError(r.source() + ": invalid stored config: " + e.what());
  }

  Model model{c, init_params(c)};
  const auto count = r.get<std::uint32_t>();
  if (count != model.params.entries().size()) {
    throw DataError(r.source() + ": expected " + std::to_string(model.params.entries().size()) +
                    " tensors, found " + std::to_string(count));
  }
  for (Parameter& p : model.params.entries()) {
    const std::string name = r.bytes(r.get<std::uint32_t>());
    if (name != p.name) {
      throw DataError(r.source() + ": expected tensor " + p.name + ", found " + name);
    }
    Shape shape(r.get<std::uint32_t>());
    for (std::size_t& e : shape) e = r.get<std::uint32_t>();
    if (shape != p.value.shape()) {
      throw DataError(r.source() + ": tensor " + name + " has shape " + shape_to_string(shape) +
                      ", config implies " + shape_to_string(p.value.shape()));
    }
    for (double& v : p.value.data()) v = r.get<double>();
  }
  if (!r.at_end()) throw DataError(r.source() + ": trailing bytes after checkpoint");
  if (model.params.learnable_count() != count_parameters(c)) {
    throw DataError(r.source() + ": parameter count does not match stored config");
  }
  return model;
}

}  // namespace fssi
