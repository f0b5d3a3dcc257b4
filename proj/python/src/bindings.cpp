#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "fssi/backbone.hpp"
#include "fssi/config.hpp"
#include "fssi/episodic.hpp"
#include "fssi/errors.hpp"
#include "fssi/features.hpp"
#include "fssi/identification.hpp"
#include "fssi/manifest.hpp"
#include "fssi/synthetic.hpp"
#include "fssi/wav.hpp"

namespace py = pybind11;
using namespace fssi;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const std::vector<double>& v) {
  return Array(static_cast<py::ssize_t>(v.size()), v.data());
}

Array features_to_array(const FeatureMatrix& f) {
  Array out({static_cast<py::ssize_t>(f.bins), static_cast<py::ssize_t>(f.frames)});
  std::memcpy(out.mutable_data(), f.values.data(), f.values.size() * sizeof(double));
  return out;
}

FeatureMatrix array_to_features(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("features must be a 2-D array [bins, frames]");
  FeatureMatrix f;
  f.bins = static_cast<std::size_t>(a.shape(0));
  f.frames = static_cast<std::size_t>(a.shape(1));
  f.values.assign(a.data(), a.data() + a.size());
  return f;
}

std::vector<Embedding> rows_of(const Array& a) {
  if (a.ndim() != 2) throw ShapeError("expected a 2-D array of embeddings");
  std::vector<Embedding> rows(static_cast<std::size_t>(a.shape(0)));
  const auto cols = static_cast<std::size_t>(a.shape(1));
  for (std::size_t r = 0; r < rows.size(); ++r) rows[r].assign(a.data() + r * cols, a.data() + (r + 1) * cols);
  return rows;
}

py::dict scores_dict(const EpisodicScores& s) {
  py::dict d;
  d["accuracy"] = s.mean_accuracy;
  d["accuracy_std"] = s.std_accuracy;
  d["macro_f"] = s.mean_f;
  d["macro_f_std"] = s.std_f;
  d["accuracies"] = s.accuracies;
  d["f_scores"] = s.f_scores;
  return d;
}

}  // namespace

PYBIND11_MODULE(_fssi, m) {
  m.doc() = "Few-shot speaker identification with a depthwise-separable CNN backbone.";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.attr("EMBEDDING_DIM") = kEmbeddingDim;
  m.attr("MEL_BINS") = kMelBins;

  m.def("read_wav", [](const std::filesystem::path& path) {
    const AudioClip clip = read_wav(path);
    return py::make_tuple(to_array(clip.samples), clip.sample_rate);
  }, py::arg("path"), "Samples in [-1, 1) and the sample rate.");

  m.def("write_wav", [](const std::filesystem::path& path, const Array& samples, int rate) {
    write_wav(path, AudioClip{std::vector<double>(samples.data(), samples.data() + samples.size()), rate});
  }, py::arg("path"), py::arg("samples"), py::arg("sample_rate") = kExpectedSampleRate);

  m.def("log_mel", [](const Array& samples, int rate) {
    AudioClip clip{std::vector<double>(samples.data(), samples.data() + samples.size()), rate};
    py::gil_scoped_release release;
    FeatureMatrix f = log_mel(clip);
    py::gil_scoped_acquire acquire;
    return features_to_array(f);
  }, py::arg("samples"), py::arg("sample_rate") = kExpectedSampleRate,
     "Log-mel spectrogram, shape [39, frames].");

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init([](const std::string& variant, bool use_ca, std::vector<std::size_t> channels,
                       std::size_t kernel_h, std::size_t kernel_w, std::size_t ca_reduction,
                       std::uint64_t seed) {
             ModelConfig c;
             c.variant = parse_conv_variant(variant);
             c.use_ca = use_ca;
             c.channels = std::move(channels);
             c.kernel_h = kernel_h;
             c.kernel_w = kernel_w;
             c.ca_reduction = ca_reduction;
             c.seed = seed;
             c.validate();
             return c;
           }),
           py::arg("variant") = "DSC", py::arg("use_ca") = true,
           py::arg("channels") = std::vector<std::size_t>{128, 256, 512}, py::arg("kernel_h") = 3,
           py::arg("kernel_w") = 3, py::arg("ca_reduction") = 128, py::arg("seed") = 0)
      .def_property_readonly("variant", [](const ModelConfig& c) { return to_string(c.variant); })
      .def_readonly("use_ca", &ModelConfig::use_ca)
      .def_readonly("channels", &ModelConfig::channels)
      .def_readonly("ca_reduction", &ModelConfig::ca_reduction)
      .def_readonly("seed", &ModelConfig::seed)
      .def_property_readonly("name", &ModelConfig::variant_name)
      .def("__repr__", [](const ModelConfig& c) { return "<ModelConfig " + c.variant_name() + ">"; });

  m.def("count_parameters", &count_parameters, py::arg("config"));

  py::class_<Model>(m, "Model")
      .def(py::init(&make_model), py::arg("config"))
      .def_readonly("config", &Model::config)
      .def("embed", [](const Model& model, const Array& features) {
        const FeatureMatrix f = array_to_features(features);
        Embedding e;
        {
          py::gil_scoped_release release;
          e = embed(model, f);
        }
        return to_array(e);
      }, py::arg("features"))
      .def("save", [](const Model& model, const std::filesystem::path& p) { save_checkpoint(p, model); })
      .def_static("load", &load_checkpoint, py::arg("path"));

  m.def("prototypical_loss", [](const Array& queries, const std::vector<std::size_t>& labels,
                                const Array& prototypes) {
    PrototypeSet set;
    set.centers = rows_of(prototypes);
    for (std::size_t k = 0; k < set.centers.size(); ++k) set.labels.push_back(k);
    const std::vector<Embedding> q = rows_of(queries);
    const PrototypicalLoss r = prototypical_loss(q, labels, set);
    return py::make_tuple(r.loss, r.posteriors);
  }, py::arg("queries"), py::arg("labels"), py::arg("prototypes"),
     "Mean negative log posterior of each query's class; returns (loss, posteriors).");

  m.def("compute_metrics", [](const std::vector<std::vector<std::size_t>>& counts) {
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < counts.size(); ++i) labels.push_back(std::to_string(i));
    ConfusionMatrix cm(labels);
    for (std::size_t a = 0; a < counts.size(); ++a) {
      if (counts[a].size() != counts.size()) throw ShapeError("confusion matrix must be square");
      for (std::size_t p = 0; p < counts.size(); ++p) {
        for (std::size_t n = 0; n < counts[a][p]; ++n) cm.record(a, p);
      }
    }
    const EvaluationReport r = compute_metrics(cm);
    py::dict d;
    d["accuracy"] = r.accuracy;
    d["macro_f"] = r.macro_f;
    std::vector<double> f1;
    for (const ClassScores& c : r.per_class) f1.push_back(c.f1);
    d["f1"] = f1;
    return d;
  }, py::arg("counts"), "Accuracy, macro-F and per-class F1 of counts[actual][predicted].");

  m.def("generate_synthetic_corpus", [](const std::filesystem::path& out_dir, std::uint64_t seed,
                                        std::size_t train_speakers, std::size_t train_utterances,
                                        std::size_t eval_speakers, std::size_t enroll_utterances,
                                        std::size_t test_utterances, double min_duration,
                                        double max_duration) {
    CorpusSpec spec{train_speakers, train_utterances, eval_speakers, enroll_utterances,
                    test_utterances, min_duration, max_duration, seed};
    py::gil_scoped_release release;
    return generate_synthetic_corpus(spec, out_dir).rows.size();
  }, py::arg("out_dir"), py::arg("seed") = 0, py::arg("train_speakers") = 40,
     py::arg("train_utterances") = 40, py::arg("eval_speakers") = 10,
     py::arg("enroll_utterances") = 10, py::arg("test_utterances") = 20,
     py::arg("min_duration") = 2.0, py::arg("max_duration") = 5.0,
     "Writes WAVs and manifest.csv under out_dir; returns the number of utterances.");

  m.def("train", [](const std::filesystem::path& manifest_path, const std::string& config_text,
                    std::uint64_t seed) {
    RunConfig c = parse_config(config_text);
    c.set_seed(seed);
    const Manifest manifest = read_manifest(manifest_path);
    py::gil_scoped_release release;
    TrainResult r = train(load_split(manifest, Split::kTrain), c.model, c.train);
    py::gil_scoped_acquire acquire;
    std::vector<std::string> log;
    for (const EpochRecord& e : r.log) log.push_back(e.to_line());
    return py::make_tuple(std::move(r.model), log);
  }, py::arg("manifest"), py::arg("config") = "", py::arg("seed") = 0,
     "Episodic training on the train split. config uses the key=value format; returns (model, log).");

  py::class_<EnrollmentDB>(m, "EnrollmentDB")
      .def_property_readonly("speakers", [](const EnrollmentDB& db) {
        std::vector<std::string> ids;
        for (const EnrolledSpeaker& s : db.speakers()) ids.push_back(s.id);
        return ids;
      })
      .def("__len__", &EnrollmentDB::size)
      .def("save", [](const EnrollmentDB& db, const std::filesystem::path& p) { save_enrollment(p, db); })
      .def_static("load", &load_enrollment, py::arg("path"));

  m.def("enroll", [](const Model& model, const std::filesystem::path& manifest_path) {
    const Manifest manifest = read_manifest(manifest_path);
    py::gil_scoped_release release;
    return enroll(model, load_split(manifest, Split::kEnroll));
  }, py::arg("model"), py::arg("manifest"), "Enrolls every speaker of the manifest's enroll split.");

  m.def("identify", [](const Model& model, const Array& features, const EnrollmentDB& db) {
    const Prediction p = identify(model, array_to_features(features), db);
    return py::make_tuple(p.speaker_id, p.margin);
  }, py::arg("model"), py::arg("features"), py::arg("db"),
     "Nearest enrolled speaker; returns (speaker_id, margin).");

  m.def("evaluate_episodic", [](const Model& model, const std::filesystem::path& manifest_path,
                                std::size_t k_way, std::size_t repeats, std::size_t shots,
                                std::uint64_t seed) {
    const Manifest manifest = read_manifest(manifest_path);
    EpisodicScores s;
    {
      py::gil_scoped_release release;
      Rng rng(seed);
      s = evaluate_episodic(model, load_split(manifest, Split::kEnroll),
                            load_split(manifest, Split::kTest), {k_way, repeats, shots}, rng);
    }
    return scores_dict(s);
  }, py::arg("model"), py::arg("manifest"), py::arg("k_way") = 5, py::arg("repeats") = 50,
     py::arg("shots") = 5, py::arg("seed") = 0);
}
