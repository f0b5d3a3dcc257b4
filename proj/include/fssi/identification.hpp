#pragma once

#include <cstddef>
#include <filesystem>
#include <limits>
#include <utility>
#include <span>
#include <string>
#include <vector>

#include "fssi/backbone.hpp"
#include "fssi/dataset.hpp"
#include "fssi/random.hpp"

namespace fssi {

struct EnrolledSpeaker {
  std::string id;
  Embedding center;
  std::size_t utterance_count = 0;
};

// Speaker centers in enrollment order. Ids are unique and centers finite.
class EnrollmentDB {
 public:
  void add(EnrolledSpeaker speaker);
  const std::vector<EnrolledSpeaker>& speakers() const { return speakers_; }
  std::size_t size() const { return speakers_.size(); }
  bool empty() const { return speakers_.empty(); }
  // Position of `id`, or size() when absent.
  std::size_t find(const std::string& id) const;

 private:
  std::vector<EnrolledSpeaker> speakers_;
};

struct SpeakerEmbeddings {
  std::string id;
  std::vector<Embedding> embeddings;
};

EnrollmentDB enroll_embeddings(std::span<const SpeakerEmbeddings> speakers);
// Infer-mode embeddings of each speaker's utterances, averaged into a center.
EnrollmentDB enroll(const Model& model, const Dataset& speakers);

inline constexpr double kUndefinedMargin = std::numeric_limits<double>::infinity();

struct Prediction {
  std::string speaker_id;
  std::size_t index = 0;
  std::vector<double> distances;  // squared Euclidean, one per enrolled speaker
  double margin = kUndefinedMargin;  // runner-up minus best; +inf with one speaker
};

// Nearest center; equal distances resolve to the lexicographically smallest id.
Prediction identify_embedding(const Embedding& embedding, const EnrollmentDB& db);
Prediction identify(const Model& model, const FeatureMatrix& utterance, const EnrollmentDB& db);

// counts[actual][predicted] over a fixed label order.
struct ConfusionMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<std::size_t>> counts;

  explicit ConfusionMatrix(std::vector<std::string> class_labels);
  void record(std::size_t actual, std::size_t predicted);
  std::size_t total() const;
  std::size_t trace() const;
};

struct ClassScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct EvaluationReport {
  double accuracy = 0.0;
  double macro_f = 0.0;
  std::vector<ClassScores> per_class;
  ConfusionMatrix confusion{{}};
};

// Accuracy = trace / total. Per class F1 = 2 TP / (2 TP + FP + FN), taken as
// 0 when the class is never predicted and never present. Macro-F is the
// unweighted mean over all labels.
EvaluationReport compute_metrics(const ConfusionMatrix& confusion);

struct LabeledEmbedding {
  std::string speaker_id;
  Embedding embedding;
};

EvaluationReport evaluate_embeddings(const EnrollmentDB& db,
                                     std::span<const LabeledEmbedding> tests);
// Every speaker of `tests` must be enrolled in `db`.
EvaluationReport evaluate(const Model& model, const EnrollmentDB& db, const Dataset& tests);

struct EpisodicScores {
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;  // population standard deviation over repeats
  double mean_f = 0.0;
  double std_f = 0.0;
  std::vector<double> accuracies;
  std::vector<double> f_scores;
};

struct EpisodicEvalConfig {
  std::size_t k_way = 5;
  std::size_t repeats = 50;
  // Enrollment utterances per speaker and repeat; 0 enrolls all of them.
  std::size_t shots = 5;
};

// Embedding-level driver; pools are indexed like the Dataset they came from.
EpisodicScores evaluate_episodic_embeddings(
    const std::vector<SpeakerEmbeddings>& enrollment_pool,
    const std::vector<SpeakerEmbeddings>& test_pool, const EpisodicEvalConfig& config, Rng& rng);

// Each repeat samples K speakers, enrolls them from the enrollment pool and
// scores all of their test utterances; scores are averaged over repeats.
// Every utterance is embedded once up front.
EpisodicScores evaluate_episodic(const Model& model, const Dataset& enrollment_pool,
                                 const Dataset& test_pool, const EpisodicEvalConfig& config,
                                 Rng& rng);

std::vector<SpeakerEmbeddings> embed_dataset(const Model& model, const Dataset& dataset);

// "ENRL" | version u32 | count u32 | per speaker: id length u32, id bytes,
// 512 f64 center values, utterance count u32. Little-endian.
void save_enrollment(const std::filesystem::path& path, const EnrollmentDB& db);
EnrollmentDB load_enrollment(const std::filesystem::path& path);

// Plain-text table of the per-repeat and summary scores.
std::string format_episodic_table(const EpisodicScores& scores);
using MetricRecord = std::vector<std::pair<std::string, double>>;

// One "name=value" line per entry, in order.
void write_metric_record(const std::filesystem::path& path, const MetricRecord& metrics);
MetricRecord read_metric_record(const std::filesystem::path& path);

}  // namespace fssi
