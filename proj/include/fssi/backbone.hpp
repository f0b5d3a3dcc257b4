#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fssi/autodiff.hpp"
#include "fssi/features.hpp"
#include "fssi/ops.hpp"
#include "fssi/tensor.hpp"

namespace fssi {

inline constexpr std::size_t kEmbeddingDim = 512;

enum class ConvVariant { kStandard, kDepthwiseSeparable };

std::string to_string(ConvVariant variant);
ConvVariant parse_conv_variant(const std::string& text);

struct ModelConfig {
  ConvVariant variant = ConvVariant::kDepthwiseSeparable;
  bool use_ca = true;
  std::vector<std::size_t> channels{128, 256, 512};
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t ca_reduction = 128;
  std::size_t embed_dim = kEmbeddingDim;
  std::uint64_t seed = 0;

  // Throws ConfigError on a broken invariant.
  void validate() const;
  // "SC", "DSC", "SC+CA" or "DSC+CA".
  std::string variant_name() const;
  bool operator==(const ModelConfig&) const = default;
};

struct Parameter {
  std::string name;
  Tensor value;
  bool learnable = true;  // false for batch-norm running statistics
};

// Named tensors in a fixed creation order.
class BackboneParams {
 public:
  void add(std::string name, Tensor value, bool learnable);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;

  std::vector<Parameter>& entries() { return entries_; }
  const std::vector<Parameter>& entries() const { return entries_; }
  std::size_t learnable_count() const;

 private:
  std::vector<Parameter> entries_;
  std::map<std::string, std::size_t> index_;
};

// Learnable scalars of one conv block, BN included.
std::size_t count_block_parameters(ConvVariant variant, std::size_t in_channels,
                                   std::size_t out_channels, std::size_t kernel_h,
                                   std::size_t kernel_w);
// Learnable scalars of the channel-attention feed-forward pair, biases included.
std::size_t count_attention_parameters(std::size_t channels, std::size_t reduction);
std::size_t count_parameters(const ModelConfig& config);

// He-uniform weights (bound sqrt(6 / fan_in)), zero biases, BN gamma=1 beta=0,
// running mean 0 and variance 1. Deterministic in config.seed.
BackboneParams init_params(const ModelConfig& config);

// Leaf vars for every learnable parameter of `params` on one tape.
class BoundParams {
 public:
  BoundParams(Tape& tape, const BackboneParams& params);
  Var operator[](const std::string& name) const;
  const std::vector<std::pair<std::string, Var>>& all() const { return vars_; }

 private:
  std::vector<std::pair<std::string, Var>> vars_;
  std::map<std::string, std::size_t> index_;
};

// Everything a forward pass reads: leaves, running statistics, architecture.
// Train mode writes updated running statistics into `stats_out` when set.
struct ForwardContext {
  const BoundParams& bound;
  const BackboneParams& params;
  const ModelConfig& config;
  ops::Mode mode;
  BackboneParams* stats_out = nullptr;
};

// Stride 2 along frequency, 1 along time, "same" padding for odd kernels.
ops::Conv2dGeometry block_geometry(const ModelConfig& config);

// block in [1, 3]. DSC: depthwise -> BN -> ReLU -> pointwise -> BN -> ReLU.
// SC: conv -> BN -> ReLU.
Var conv_block_forward(const ForwardContext& ctx, std::size_t block, Var x);

// x: [C, T] or [N, C, T]. sigmoid(W2 relu(W1 mean + b1) + b2 + W2 relu(W1 max + b1) + b2) * x.
Var channel_attention(Var x, Var w1, Var b1, Var w2, Var b2);

// batch: [N, 1, 39, T] -> embeddings [N, embed_dim].
Var forward_batch(const ForwardContext& ctx, Var batch);

// [N, 1, bins, T]; every matrix must have the same frame count.
Tensor stack_features(std::span<const FeatureMatrix* const> features);

using Embedding = std::vector<double>;

// Single-utterance forward pass. Train mode needs a batch for the output BN
// and therefore rejects a lone utterance; use forward_batch for training.
Embedding forward(const FeatureMatrix& features, BackboneParams& params,
                  const ModelConfig& config, ops::Mode mode);

struct Model {
  ModelConfig config;
  BackboneParams params;
};

Model make_model(const ModelConfig& config);

// Infer-mode embedding.
Embedding embed(const Model& model, const FeatureMatrix& features);
std::vector<Embedding> embed_all(const Model& model, std::span<const FeatureMatrix> features);

// "DSCN" | version u32 | config | tensor count u32 | per tensor:
// name length u32, name, rank u32, extents u32..., f64 values. Little-endian.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace fssi
