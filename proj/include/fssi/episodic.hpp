#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fssi/autodiff.hpp"
#include "fssi/backbone.hpp"
#include "fssi/dataset.hpp"
#include "fssi/random.hpp"

namespace fssi {

// K classes; support[k] and query[k] index utterances of speaker classes[k].
struct Episode {
  std::vector<std::size_t> classes;
  std::vector<std::vector<std::size_t>> support;
  std::vector<std::vector<std::size_t>> query;
};

// K speakers without replacement, then N + Q utterances per speaker without
// replacement; the first N drawn form the support set.
Episode sample_episode(const Dataset& dataset, std::size_t k_way, std::size_t n_shot,
                       std::size_t n_query, Rng& rng);

struct PrototypeSet {
  std::vector<Embedding> centers;
  std::vector<std::size_t> labels;
};

// support[k] holds the N embeddings of class k; centers are their means.
PrototypeSet compute_prototypes(const std::vector<std::vector<Embedding>>& support);

struct PrototypicalLoss {
  double loss = 0.0;                             // mean over queries
  std::vector<std::vector<double>> posteriors;   // [M][K]
};

// Softmax over negated squared Euclidean distances to every prototype.
PrototypicalLoss prototypical_loss(std::span<const Embedding> queries,
                                   std::span<const std::size_t> labels,
                                   const PrototypeSet& prototypes);

// Tape version: queries [M, D], prototypes [K, D]; returns the scalar mean
// loss. Posteriors are written to `posteriors` ([M * K], row-major) when set.
Var prototypical_loss(Var queries, Var prototypes, std::span<const std::size_t> labels,
                      std::vector<double>* posteriors = nullptr);

struct TrainConfig {
  std::size_t k_way = 5;
  std::size_t n_shot = 5;
  std::size_t n_query = 5;
  std::size_t max_epochs = 80;
  std::size_t episodes_per_epoch = 50;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  // Every utterance of an episode is cut to a random window of this many
  // frames (or the episode's shortest utterance, if shorter). 0 = shortest.
  std::size_t crop_frames = 64;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t episodes = 0;
  double mean_loss = 0.0;
  double mean_accuracy = 0.0;

  // "epoch=3 episodes=50 loss=0.123456789 accuracy=0.9600"
  std::string to_line() const;
};

class AdamOptimizer {
 public:
  AdamOptimizer(const BackboneParams& params, double learning_rate, double beta1, double beta2,
                double epsilon);

  // grads[i] pairs with the i-th learnable entry of params.
  void step(BackboneParams& params, const std::vector<Tensor>& grads);

 private:
  double lr_, beta1_, beta2_, epsilon_;
  std::size_t steps_ = 0;
  std::vector<Tensor> first_moment_;
  std::vector<Tensor> second_moment_;
};

struct EpisodeOutcome {
  double loss = 0.0;
  double accuracy = 0.0;
};

// One optimization step on one episode. Throws NumericError naming the
// first parameter with a non-finite gradient when the loss is not finite.
EpisodeOutcome train_episode(const Dataset& dataset, const Episode& episode, Model& model,
                             AdamOptimizer& optimizer, const TrainConfig& config, Rng& rng);

struct TrainResult {
  Model model;
  std::vector<EpochRecord> log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

TrainResult train(const Dataset& dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config, const EpochCallback& on_epoch = {});

}  // namespace fssi
