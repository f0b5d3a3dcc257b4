#include "fssi/identification.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "byte_io.hpp"
#include "fssi/errors.hpp"

namespace fssi {
namespace {

constexpr std::uint32_t kEnrollmentVersion = 1;

double squared_distance(const Embedding& a, const Embedding& b) {
  if (a.size() != b.size()) {
    throw ShapeError("embedding length " + std::to_string(a.size()) +
                     " does not match center length " + std::to_string(b.size()));
  }
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

Embedding mean_of(const std::vector<Embedding>& embeddings) {
  Embedding center(embeddings.front().size(), 0.0);
  for (const Embedding& e : embeddings) {
    if (e.size() != center.size()) throw ShapeError("enrollment embeddings differ in length");
    for (std::size_t j = 0; j < e.size(); ++j) center[j] += e[j];
  }
  for (double& v : center) v /= static_cast<double>(embeddings.size());
  return center;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double population_std(const std::vector<double>& v, double mu) {
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

void EnrollmentDB::add(EnrolledSpeaker speaker) {
  if (find(speaker.id) != size()) throw DataError("speaker " + speaker.id + " enrolled twice");
  for (double v : speaker.center) {
    if (!std::isfinite(v)) throw NumericError("speaker " + speaker.id + " has a non-finite center");
  }
  if (!speakers_.empty() && speaker.center.size() != speakers_.front().center.size()) {
    throw ShapeError("speaker " + speaker.id + " center length differs from the database");
  }
  speakers_.push_back(std::move(speaker));
}

std::size_t EnrollmentDB::find(const std::string& id) const {
  for (std::size_t i = 0; i < speakers_.size(); ++i) {
    if (speakers_[i].id == id) return i;
  }
  return speakers_.size();
}

EnrollmentDB enroll_embeddings(std::span<const SpeakerEmbeddings> speakers) {
  EnrollmentDB db;
  for (const SpeakerEmbeddings& s : speakers) {
    if (s.embeddings.empty()) throw DataError("speaker " + s.id + " has no enrollment utterances");
    db.add(EnrolledSpeaker{s.id, mean_of(s.embeddings), s.embeddings.size()});
  }
  return db;
}

EnrollmentDB enroll(const Model& model, const Dataset& speakers) {
  for (const SpeakerData& s : speakers.speakers) {
    if (s.utterances.empty()) throw DataError("speaker " + s.id + " has no enrollment utterances");
  }
  const std::vector<SpeakerEmbeddings> embedded = embed_dataset(model, speakers);
  return enroll_embeddings(embedded);
}

Prediction identify_embedding(const Embedding& embedding, const EnrollmentDB& db) {
  if (db.empty()) throw DataError("cannot identify against an empty enrollment database");
  Prediction p;
  p.distances.reserve(db.size());
  for (const EnrolledSpeaker& s : db.speakers()) p.distances.push_back(squared_distance(embedding, s.center));
  std::size_t best = 0;
  for (std::size_t i = 1; i < db.size(); ++i) {
    const double d = p.distances[i], b = p.distances[best];
    if (d < b || (d == b && db.speakers()[i].id < db.speakers()[best].id)) best = i;
  }
  p.index = best;
  p.speaker_id = db.speakers()[best].id;
  for (std::size_t i = 0; i < db.size(); ++i) {
    if (i == best) continue;
    const double gap = p.distances[i] - p.distances[best];
    if (p.margin == kUndefinedMargin || gap < p.margin) p.margin = gap;
  }
  return p;
}

Prediction identify(const Model& model, const FeatureMatrix& utterance, const EnrollmentDB& db) {
  if (db.empty()) throw DataError("cannot identify against an empty enrollment database");
  return identify_embedding(embed(model, utterance), db);
}

ConfusionMatrix::ConfusionMatrix(std::vector<std::string> class_labels)
    : labels(std::move(class_labels)),
      counts(labels.size(), std::vector<std::size_t>(labels.size(), 0)) {}

void ConfusionMatrix::record(std::size_t actual, std::size_t predicted) {
  if (actual >= labels.size() || predicted >= labels.size()) {
    throw DataError("confusion matrix index out of range");
  }
  ++counts[actual][predicted];
}

std::size_t ConfusionMatrix::total() const {
  std::size_t n = 0;
  for (const auto& row : counts) {
    for (std::size_t c : row) n += c;
  }
  return n;
}

std::size_t ConfusionMatrix::trace() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) n += counts[i][i];
  return n;
}

EvaluationReport compute_metrics(const ConfusionMatrix& confusion) {
  const std::size_t k = confusion.labels.size();
  if (k == 0) throw DataError("confusion matrix has no classes");
  EvaluationReport report;
  report.confusion = confusion;
  const std::size_t total = confusion.total();
  report.accuracy = total == 0 ? 0.0
                               : static_cast<double>(confusion.trace()) / static_cast<double>(total);
  double f_sum = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t predicted = 0, actual = 0;
    for (std::size_t r = 0; r < k; ++r) {
      predicted += confusion.counts[r][c];
      actual += confusion.counts[c][r];
    }
    const std::size_t tp = confusion.counts[c][c];
    const std::size_t fp = predicted - tp, fn = actual - tp;
    ClassScores s;
    if (predicted > 0) s.precision = static_cast<double>(tp) / static_cast<double>(predicted);
    if (actual > 0) s.recall = static_cast<double>(tp) / static_cast<double>(actual);
    if (tp > 0) s.f1 = static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn);
    f_sum += s.f1;
    report.per_class.push_back(s);
  }
  report.macro_f = f_sum / static_cast<double>(k);
  return report;
}

EvaluationReport evaluate_embeddings(const EnrollmentDB& db,
                                     std::span<const LabeledEmbedding> tests) {
  std::vector<std::string> labels;
  for (const EnrolledSpeaker& s : db.speakers()) labels.push_back(s.id);
  ConfusionMatrix confusion(labels);
  for (const LabeledEmbedding& t : tests) {
    const std::size_t actual = db.find(t.speaker_id);
    if (actual == db.size()) throw DataError("test label " + t.speaker_id + " is not enrolled");
    confusion.record(actual, identify_embedding(t.embedding, db).index);
  }
  return compute_metrics(confusion);
}

EvaluationReport evaluate(const Model& model, const EnrollmentDB& db, const Dataset& tests) {
  std::vector<LabeledEmbedding> labeled;
  for (const SpeakerData& s : tests.speakers) {
    if (db.find(s.id) == db.size()) throw DataError("test label " + s.id + " is not enrolled");
    for (const FeatureMatrix& f : s.utterances) labeled.push_back({s.id, embed(model, f)});
  }
  return evaluate_embeddings(db, labeled);
}

std::vector<SpeakerEmbeddings> embed_dataset(const Model& model, const Dataset& dataset) {
  std::vector<SpeakerEmbeddings> out;
  out.reserve(dataset.speakers.size());
  for (const SpeakerData& s : dataset.speakers) {
    out.push_back(SpeakerEmbeddings{s.id, embed_all(model, s.utterances)});
  }
  return out;
}

EpisodicScores evaluate_episodic_embeddings(const std::vector<SpeakerEmbeddings>& enrollment_pool,
                                            const std::vector<SpeakerEmbeddings>& test_pool,
                                            const EpisodicEvalConfig& config, Rng& rng) {
  if (config.k_way == 0 || config.repeats == 0) {
    throw DataError("episodic evaluation needs K >= 1 and repeats >= 1");
  }
  if (enrollment_pool.size() < config.k_way) {
    throw DataError("enrollment pool has " + std::to_string(enrollment_pool.size()) +
                    " speakers, fewer than K = " + std::to_string(config.k_way));
  }
  std::vector<std::size_t> test_index(enrollment_pool.size());
  for (std::size_t s = 0; s < enrollment_pool.size(); ++s) {
    const SpeakerEmbeddings& e = enrollment_pool[s];
    std::size_t t = 0;
    while (t < test_pool.size() && test_pool[t].id != e.id) ++t;
    if (t == test_pool.size() || test_pool[t].embeddings.empty()) {
      throw DataError("speaker " + e.id + " has no test utterances");
    }
    if (e.embeddings.size() < std::max<std::size_t>(config.shots, 1)) {
      throw DataError("speaker " + e.id + " has " + std::to_string(e.embeddings.size()) +
                      " enrollment utterances, fewer than " + std::to_string(config.shots));
    }
    test_index[s] = t;
  }

  EpisodicScores scores;
  for (std::size_t r = 0; r < config.repeats; ++r) {
    std::vector<SpeakerEmbeddings> enrolled;
    std::vector<LabeledEmbedding> tests;
    for (std::size_t s : rng.sample_without_replacement(enrollment_pool.size(), config.k_way)) {
      const SpeakerEmbeddings& pool = enrollment_pool[s];
      SpeakerEmbeddings chosen{pool.id, {}};
      if (config.shots == 0) {
        chosen.embeddings = pool.embeddings;
      } else {
        for (std::size_t u : rng.sample_without_replacement(pool.embeddings.size(), config.shots)) {
          chosen.embeddings.push_back(pool.embeddings[u]);
        }
      }
      enrolled.push_back(std::move(chosen));
      for (const Embedding& e : test_pool[test_index[s]].embeddings) tests.push_back({pool.id, e});
    }
    const EvaluationReport report = evaluate_embeddings(enroll_embeddings(enrolled), tests);
    scores.accuracies.push_back(report.accuracy);
    scores.f_scores.push_back(report.macro_f);
  }
  scores.mean_accuracy = mean(scores.accuracies);
  scores.std_accuracy = population_std(scores.accuracies, scores.mean_accuracy);
  scores.mean_f = mean(scores.f_scores);
  scores.std_f = population_std(scores.f_scores, scores.mean_f);
  return scores;
}

EpisodicScores evaluate_episodic(const Model& model, const Dataset& enrollment_pool,
                                 const Dataset& test_pool, const EpisodicEvalConfig& config,
                                 Rng& rng) {
  for (const SpeakerData& s : enrollment_pool.speakers) {
    if (test_pool.find(s.id) == test_pool.speakers.size()) {
      throw DataError("speaker " + s.id + " is missing from the test pool");
    }
  }
  return evaluate_episodic_embeddings(embed_dataset(model, enrollment_pool),
                                      embed_dataset(model, test_pool), config, rng);
}

void save_enrollment(const std::filesystem::path& path, const EnrollmentDB& db) {
  std::vector<unsigned char> out;
  detail::append_bytes(out, "ENRL");
  detail::append_le<std::uint32_t>(out, kEnrollmentVersion);
  detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(db.size()));
  for (const EnrolledSpeaker& s : db.speakers()) {
    if (s.center.size() != kEmbeddingDim) {
      throw ShapeError("enrollment file stores " + std::to_string(kEmbeddingDim) +
                       "-dim centers, speaker " + s.id + " has " + std::to_string(s.center.size()));
    }
    detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.id.size()));
    detail::append_bytes(out, s.id);
    for (double v : s.center) detail::append_le<double>(out, v);
    detail::append_le<std::uint32_t>(out, static_cast<std::uint32_t>(s.utterance_count));
  }
  detail::write_file(path, out);
}

EnrollmentDB load_enrollment(const std::filesystem::path& path) {
  detail::ByteReader r = detail::open_reader(path);
  r.expect_magic("ENRL");
  const auto version = r.get<std::uint32_t>();
  if (version != kEnrollmentVersion) {
    throw DataError(r.source() + ": unsupported enrollment version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  EnrollmentDB db;
  for (std::uint32_t i = 0; i < count; ++i) {
    EnrolledSpeaker s;
    s.id = r.bytes(r.get<std::uint32_t>());
    s.center.resize(kEmbeddingDim);
    for (double& v : s.center) v = r.get<double>();
    s.utterance_count = r.get<std::uint32_t>();
    db.add(std::move(s));
  }
  if (!r.at_end()) throw DataError(r.source() + ": trailing bytes after enrollment data");
  return db;
}

std::string format_episodic_table(const EpisodicScores& scores) {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-8s %12s %12s\n", "repeat", "accuracy(%)", "F-score(%)");
  out << line;
  for (std::size_t r = 0; r < scores.accuracies.size(); ++r) {
    std::snprintf(line, sizeof line, "%-8zu %12.2f %12.2f\n", r + 1, 100.0 * scores.accuracies[r],
                  100.0 * scores.f_scores[r]);
    out << line;
  }
  std::snprintf(line, sizeof line, "%-8s %6.2f+-%-4.2f %6.2f+-%-4.2f\n", "mean",
                100.0 * scores.mean_accuracy, 100.0 * scores.std_accuracy, 100.0 * scores.mean_f,
                100.0 * scores.std_f);
  out << line;
  return out.str();
}

void write_metric_record(const std::filesystem::path& path, const MetricRecord& metrics) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  char value[64];
  for (const auto& [name, v] : metrics) {
    std::snprintf(value, sizeof value, "%.17g", v);
    out << name << '=' << value << '\n';
  }
  if (!out) throw DataError("write failed for " + path.string());
}

MetricRecord read_metric_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  MetricRecord record;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError(path.string() + ": malformed line '" + line + "'");
    record.emplace_back(line.substr(0, eq), std::stod(line.substr(eq + 1)));
  }
  return record;
}

}  // namespace fssi
