#include "fssi/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "fssi/errors.hpp"
#include "fssi/ops.hpp"

namespace fssi {
namespace {

// Mean loss and posteriors for row-major queries [M, D] and prototypes [K, D].
struct LossCore {
  double loss = 0.0;
  std::vector<double> posteriors;  // [M * K]
};

LossCore loss_core(const double* queries, const double* centers, std::size_t m,
                   std::size_t k, std::size_t d, std::span<const std::size_t> labels) {
  if (m == 0) throw ShapeError("prototypical_loss: no queries");
  if (k == 0) throw ShapeError("prototypical_loss: no prototypes");
  if (labels.size() != m) throw ShapeError("prototypical_loss: one label per query required");
  LossCore out;
  out.posteriors.resize(m * k);
  std::vector<double> logits(k);
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] >= k) {
      throw ShapeError("prototypical_loss: label " + std::to_string(labels[i]) +
                       " has no prototype");
    }
    for (std::size_t c = 0; c < k; ++c) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = queries[i * d + j] - centers[c * d + j];
        dist += diff * diff;
      }
      logits[c] = -dist;
    }
    const double peak = *std::max_element(logits.begin(), logits.end());
    double norm = 0.0;
    for (std::size_t c = 0; c < k; ++c) norm += std::exp(logits[c] - peak);
    const double log_norm = peak + std::log(norm);
    for (std::size_t c = 0; c < k; ++c) {
      out.posteriors[i * k + c] = std::exp(logits[c] - log_norm);
    }
    out.loss += log_norm - logits[labels[i]];
  }
  out.loss /= static_cast<double>(m);
  if (!std::isfinite(out.loss)) throw NumericError("prototypical_loss: non-finite loss");
  return out;
}

std::string first_nonfinite_parameter(const BackboneParams& params) {
  for (const Parameter& p : params.entries()) {
    if (!p.value.all_finite()) return p.name;
  }
  return "none (all parameters finite)";
}

std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

}  // namespace

std::size_t Dataset::min_utterances() const {
  std::size_t n = std::numeric_limits<std::size_t>::max();
  for (const SpeakerData& s : speakers) n = std::min(n, s.utterances.size());
  return speakers.empty() ? 0 : n;
}

std::size_t Dataset::total_utterances() const {
  std::size_t n = 0;
  for (const SpeakerData& s : speakers) n += s.utterances.size();
  return n;
}

std::size_t Dataset::find(const std::string& id) const {
  for (std::size_t i = 0; i < speakers.size(); ++i) {
    if (speakers[i].id == id) return i;
  }
  return speakers.size();
}

Episode sample_episode(const Dataset& dataset, std::size_t k_way, std::size_t n_shot,
                       std::size_t n_query, Rng& rng) {
  if (k_way == 0 || n_shot == 0 || n_query == 0) {
    throw DataError("episode shape must have K, N, Q >= 1");
  }
  const std::size_t per_speaker = n_shot + n_query;
  std::vector<std::size_t> eligible;
  for (std::size_t s = 0; s < dataset.speakers.size(); ++s) {
    if (dataset.speakers[s].utterances.size() >= per_speaker) eligible.push_back(s);
  }
  if (eligible.size() < k_way) {
    throw DataError("episode needs " + std::to_string(k_way) + " speakers with at least " +
                    std::to_string(per_speaker) + " utterances; only " +
                    std::to_string(eligible.size()) + " qualify");
  }
  Episode ep;
  for (std::size_t pick : rng.sample_without_replacement(eligible.size(), k_way)) {
    const std::size_t speaker = eligible[pick];
    std::vector<std::size_t> draw =
        rng.sample_without_replacement(dataset.speakers[speaker].utterances.size(), per_speaker);
    ep.classes.push_back(speaker);
    ep.support.emplace_back(draw.begin(), draw.begin() + static_cast<long>(n_shot));
    ep.query.emplace_back(draw.begin() + static_cast<long>(n_shot), draw.end());
  }
  return ep;
}

PrototypeSet compute_prototypes(const std::vector<std::vector<Embedding>>& support) {
  PrototypeSet set;
  for (std::size_t k = 0; k < support.size(); ++k) {
    const auto& members = support[k];
    if (members.empty()) throw DataError("class " + std::to_string(k) + " has no support embeddings");
    Embedding center(members.front().size(), 0.0);
    for (const Embedding& e : members) {
      if (e.size() != center.size()) throw ShapeError("support embeddings differ in length");
      for (std::size_t j = 0; j < e.size(); ++j) center[j] += e[j];
    }
    for (double& v : center) v /= static_cast<double>(members.size());
    set.centers.push_back(std::move(center));
    set.labels.push_back(k);
  }
  return set;
}

PrototypicalLoss prototypical_loss(std::span<const Embedding> queries,
                                   std::span<const std::size_t> labels,
                                   const PrototypeSet& prototypes) {
  if (queries.empty()) throw ShapeError("prototypical_loss: no queries");
  if (prototypes.centers.empty()) throw ShapeError("prototypical_loss: no prototypes");
  const std::size_t d = prototypes.centers.front().size();
  std::vector<double> q, c;
  for (const Embedding& e : queries) {
    if (e.size() != d) throw ShapeError("prototypical_loss: query dimension mismatch");
    q.insert(q.end(), e.begin(), e.end());
  }
  for (const Embedding& e : prototypes.centers) {
    if (e.size() != d) throw ShapeError("prototypical_loss: prototype dimension mismatch");
    c.insert(c.end(), e.begin(), e.end());
  }
  for (double v : q) {
    if (!std::isfinite(v)) throw NumericError("prototypical_loss: non-finite query embedding");
  }
  for (double v : c) {
    if (!std::isfinite(v)) throw NumericError("prototypical_loss: non-finite prototype");
  }
  const std::size_t m = queries.size(), k = prototypes.centers.size();
  LossCore core = loss_core(q.data(), c.data(), m, k, d, labels);
  PrototypicalLoss out;
  out.loss = core.loss;
  for (std::size_t i = 0; i < m; ++i) {
    out.posteriors.emplace_back(core.posteriors.begin() + static_cast<long>(i * k),
                                core.posteriors.begin() + static_cast<long>((i + 1) * k));
  }
  return out;
}

Var prototypical_loss(Var queries, Var prototypes, std::span<const std::size_t> labels,
                      std::vector<double>* posteriors) {
  const Tensor& q = queries.value();
  const Tensor& c = prototypes.value();
  if (q.rank() != 2 || c.rank() != 2 || q.dim(1) != c.dim(1)) {
    throw ShapeError("prototypical_loss: queries " + shape_to_string(q.shape()) +
                     " and prototypes " + shape_to_string(c.shape()) + " are incompatible");
  }
  if (!q.all_finite() || !c.all_finite()) {
    throw NumericError("prototypical_loss: non-finite embeddings");
  }
  const std::size_t m = q.dim(0), k = c.dim(0), d = q.dim(1);
  LossCore core = loss_core(q.raw(), c.raw(), m, k, d, labels);
  if (posteriors != nullptr) *posteriors = core.posteriors;
  std::vector<std::size_t> label_copy(labels.begin(), labels.end());
  return queries.tape->record(
      Tensor::scalar(core.loss), {queries, prototypes},
      [m, k, d, labels = std::move(label_copy), post = std::move(core.posteriors)](
          const BackwardContext& ctx) {
        const double g = ctx.out_grad()[0] / static_cast<double>(m);
        const Tensor& qv = ctx.input(0);
        const Tensor& cv = ctx.input(1);
        Tensor* dq = ctx.input_grad(0);
        Tensor* dc = ctx.input_grad(1);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t c = 0; c < k; ++c) {
            // d loss_i / d dist_ic = [c == y_i] - p_ic; d dist / d q = 2 (q - c)
            const double w = 2.0 * g * ((labels[i] == c ? 1.0 : 0.0) - post[i * k + c]);
            for (std::size_t j = 0; j < d; ++j) {
              const double diff = qv[i * d + j] - cv[c * d + j];
              if (dq != nullptr) (*dq)[i * d + j] += w * diff;
              if (dc != nullptr) (*dc)[c * d + j] -= w * diff;
            }
          }
        }
      });
}

void TrainConfig::validate() const {
  if (k_way < 2) throw ConfigError("K must be at least 2");
  if (n_shot < 1 || n_query < 1) throw ConfigError("N and Q must be at least 1");
  if (episodes_per_epoch < 1) throw ConfigError("episodes_per_epoch must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be finite and non-negative");
  }
}

std::string EpochRecord::to_line() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%zu episodes=%zu loss=%.9f accuracy=%.4f", epoch,
                episodes, mean_loss, mean_accuracy);
  return buf;
}

AdamOptimizer::AdamOptimizer(const BackboneParams& params, double learning_rate, double beta1,
                             double beta2, double epsilon)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  for (const Parameter& p : params.entries()) {
    if (!p.learnable) continue;
    first_moment_.push_back(Tensor::zeros(p.value.shape()));
    second_moment_.push_back(Tensor::zeros(p.value.shape()));
  }
}

void AdamOptimizer::step(BackboneParams& params, const std::vector<Tensor>& grads) {
  if (grads.size() != first_moment_.size()) {
    throw ShapeError("optimizer received " + std::to_string(grads.size()) +
                     " gradients for " + std::to_string(first_moment_.size()) + " parameters");
  }
  ++steps_;
  const double correction1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double correction2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  std::size_t slot = 0;
  for (Parameter& p : params.entries()) {
    if (!p.learnable) continue;
    const Tensor& g = grads[slot];
    Tensor& m = first_moment_[slot];
    Tensor& v = second_moment_[slot];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      p.value[i] -= lr_ * m_hat / (std::sqrt(v_hat) + epsilon_);
    }
    ++slot;
  }
}

EpisodeOutcome train_episode(const Dataset& dataset, const Episode& episode, Model& model,
                             AdamOptimizer& optimizer, const TrainConfig& config, Rng& rng) {
  const std::size_t k = episode.classes.size();
  std::vector<const FeatureMatrix*> sources;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t u : episode.support[c]) {
      sources.push_back(&dataset.speakers[episode.classes[c]].utterances[u]);
    }
  }
  const std::size_t support_rows = sources.size();
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t u : episode.query[c]) {
      sources.push_back(&dataset.speakers[episode.classes[c]].utterances[u]);
    }
  }

  std::size_t frames = std::numeric_limits<std::size_t>::max();
  for (const FeatureMatrix* f : sources) frames = std::min(frames, f->frames);
  if (config.crop_frames > 0) frames = std::min(frames, config.crop_frames);
  std::vector<FeatureMatrix> crops;
  crops.reserve(sources.size());
  for (const FeatureMatrix* f : sources) {
    crops.push_back(f->crop(rng.below(f->frames - frames + 1), frames));
  }
  std::vector<const FeatureMatrix*> batch;
  for (const FeatureMatrix& f : crops) batch.push_back(&f);

  std::vector<std::size_t> support_index(support_rows), support_class;
  std::iota(support_index.begin(), support_index.end(), std::size_t{0});
  std::vector<std::size_t> query_index, query_label;
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < episode.support[c].size(); ++i) support_class.push_back(c);
  }
  for (std::size_t c = 0, row = support_rows; c < k; ++c) {
    for (std::size_t i = 0; i < episode.query[c].size(); ++i, ++row) {
      query_index.push_back(row);
      query_label.push_back(c);
    }
  }

  Tape tape;
  BoundParams bound(tape, model.params);
  Var input = tape.constant(stack_features(batch));
  ForwardContext ctx{bound, model.params, model.config, ops::Mode::kTrain, &model.params};
  std::vector<double> posteriors;
  Var loss;
  try {
    Var embeddings = forward_batch(ctx, input);
    Var prototypes =
        ops::segment_mean(ops::gather_rows(embeddings, support_index), support_class, k);
    Var queries = ops::gather_rows(embeddings, query_index);
    loss = prototypical_loss(queries, prototypes, query_label, &posteriors);
  } catch (const NumericError& err) {
    throw NumericError(std::string(err.what()) + "; offending parameter: " +
                       first_nonfinite_parameter(model.params));
  }
  tape.backward(loss);

  std::vector<Tensor> grads;
  grads.reserve(bound.all().size());
  for (const auto& [name, var] : bound.all()) {
    grads.push_back(tape.grad(var));
    if (!grads.back().all_finite()) {
      throw NumericError("non-finite gradient for parameter " + name);
    }
  }
  optimizer.step(model.params, grads);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < query_label.size(); ++i) {
    std::span<const double> row(posteriors.data() + i * k, k);
    if (argmax(row) == query_label[i]) ++correct;
  }
  return {loss.value()[0], static_cast<double>(correct) / static_cast<double>(query_label.size())};
}

TrainResult train(const Dataset& dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config, const EpochCallback& on_epoch) {
  train_config.validate();
  TrainResult result{make_model(model_config), {}};
  AdamOptimizer optimizer(result.model.params, train_config.learning_rate, train_config.beta1,
                          train_config.beta2, train_config.adam_epsilon);
  Rng rng(train_config.rng_seed);
  for (std::size_t epoch = 1; epoch <= train_config.max_epochs; ++epoch) {
    EpochRecord record{epoch, 0, 0.0, 0.0};
    for (std::size_t e = 1; e <= train_config.episodes_per_epoch; ++e) {
      const Episode episode = sample_episode(dataset, train_config.k_way, train_config.n_shot,
                                             train_config.n_query, rng);
      EpisodeOutcome outcome;
      try {
        outcome = train_episode(dataset, episode, result.model, optimizer, train_config, rng);
      } catch (const NumericError& err) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + ", episode " +
                           std::to_string(e) + ": " + err.what());
      }
      for (const Parameter& p : result.model.params.entries()) {
        if (!p.value.all_finite()) {
          throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                             ", episode " + std::to_string(e) + ": parameter " + p.name +
                             " became non-finite");
        }
      }
      record.episodes = e;
      record.mean_loss += outcome.loss;
      record.mean_accuracy += outcome.accuracy;
    }
    record.mean_loss /= static_cast<double>(record.episodes);
    record.mean_accuracy /= static_cast<double>(record.episodes);
    result.log.push_back(record);
    if (on_epoch) on_epoch(record);
  }
  return result;
}

}  // namespace fssi
