#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mlang/audio.hpp"
#include "mlang/blob.hpp"
#include "mlang/bpe.hpp"
#include "mlang/codec.hpp"
#include "mlang/metrics.hpp"
#include "mlang/model.hpp"
#include "mlang/motion.hpp"
#include "mlang/pipeline.hpp"
#include "mlang/synth.hpp"
#include "mlang/tasks.hpp"
#include "mlang/vocab.hpp"

namespace py = pybind11;
using namespace mlang;

namespace {

Mat mat_from_numpy(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw ShapeMismatch("expected a 2D array");
  Mat m(a.shape(0), a.shape(1));
  auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i)
    for (py::ssize_t j = 0; j < a.shape(1); ++j) m(i, j) = r(i, j);
  return m;
}

py::array_t<double> numpy_from_mat(const Mat& m) {
  py::array_t<double> a({m.rows(), m.cols()});
  auto w = a.mutable_unchecked<2>();
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) w(i, j) = m(i, j);
  return a;
}

MotionSequence motion_from_dict(const py::dict& d) {
  MotionSequence seq;
  seq.fps = d.contains("fps") ? d["fps"].cast<double>() : 30.0;
  seq.face = mat_from_numpy(d["face"].cast<py::array_t<double>>());
  seq.hands = mat_from_numpy(d["hands"].cast<py::array_t<double>>());
  seq.upper = mat_from_numpy(d["upper"].cast<py::array_t<double>>());
  seq.lower = mat_from_numpy(d["lower"].cast<py::array_t<double>>());
  if (d.contains("translation"))
    seq.translation = mat_from_numpy(d["translation"].cast<py::array_t<double>>());
  else
    seq.translation = Mat::Zero(seq.face.rows(), 3);
  return seq;
}

py::dict motion_to_dict(const MotionSequence& seq) {
  py::dict d;
  d["fps"] = seq.fps;
  d["face"] = numpy_from_mat(seq.face);
  d["hands"] = numpy_from_mat(seq.hands);
  d["upper"] = numpy_from_mat(seq.upper);
  d["lower"] = numpy_from_mat(seq.lower);
  d["translation"] = numpy_from_mat(seq.translation);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "motion-language toolkit core bindings";

  py::register_exception<Error>(m, "MlangError");

  // --- motion core ----------------------------------------------------------
  m.def("rot6d_from_axis_angle", [](double x, double y, double z) {
    Vec6 r = rot6d_from_axis_angle(Vec3(x, y, z));
    return std::vector<double>(r.data(), r.data() + 6);
  });
  m.def("rot6d_to_matrix", [](const std::vector<double>& r6) {
    if (r6.size() != 6) throw ShapeMismatch("expected 6 values");
    Mat3 R = rot6d_to_matrix(Vec6(Eigen::Map<const Vec6>(r6.data())));
    return numpy_from_mat(R);
  });
  m.def("geodesic_distance", [](const py::array_t<double>& a, const py::array_t<double>& b) {
    return geodesic_distance(mat_from_numpy(a), mat_from_numpy(b));
  });
  m.def("finite_difference", [](const py::array_t<double>& seq, int order, double fps) {
    return numpy_from_mat(finite_difference(mat_from_numpy(seq), order, fps));
  });
  m.def("fk_positions", [](const std::vector<double>& pose, const std::vector<double>& translation) {
    if (translation.size() != 3) throw ShapeMismatch("translation needs 3 values");
    Eigen::VectorXd p = Eigen::Map<const Eigen::VectorXd>(pose.data(), Eigen::Index(pose.size()));
    return numpy_from_mat(fk_positions(p, ProxySkeleton::standard(),
                                       Vec3(translation[0], translation[1], translation[2])));
  });
  m.def("split_pose", [](const py::array_t<double>& full) {
    return motion_to_dict(split_pose(mat_from_numpy(full)));
  });
  m.def("merge_parts", [](const py::dict& d) {
    return numpy_from_mat(merge_parts(motion_from_dict(d)));
  });
  m.def("load_motion_json", [](const std::string& path) {
    return motion_to_dict(load_motion_json(path));
  });
  m.def("save_motion_json", [](const py::dict& d, const std::string& path) {
    save_motion_json(motion_from_dict(d), path);
  });

  // --- audio -------------------------------------------------------------
  m.def("featurize", [](const std::vector<double>& samples) {
    AudioClip clip;
    clip.samples = samples;
    return numpy_from_mat(featurize(clip));
  });
  m.def("fit_acoustic_codebook",
        [](const py::array_t<double>& features, int k, int iterations, uint64_t seed) {
          AcousticCodebook cb =
              fit_acoustic_codebook(mat_from_numpy(features), k, {iterations, seed});
          return numpy_from_mat(cb.centroids);
        },
        py::arg("features"), py::arg("k"), py::arg("iterations") = 50,
        py::arg("seed") = 0);
  m.def("tokenize_audio",
        [](const std::vector<double>& samples, const py::array_t<double>& centroids) {
          AudioClip clip;
          clip.samples = samples;
          AcousticCodebook cb;
          cb.centroids = mat_from_numpy(centroids);
          cb.size = int(cb.centroids.rows());
          cb.dim = int(cb.centroids.cols());
          return tokenize_audio(clip, cb);
        });
  m.def("load_wav", [](const std::string& path) { return load_wav(path).samples; });
  m.def("save_wav", [](const std::vector<double>& samples, const std::string& path) {
    AudioClip clip;
    clip.samples = samples;
    save_wav(clip, path);
  });

  // --- text ----------------------------------------------------------------
  py::class_<SubwordTokenizer>(m, "SubwordTokenizer")
      .def_static("train", &train_subword, py::arg("corpus"), py::arg("vocab_size"))
      .def_static("load", &SubwordTokenizer::load)
      .def("save", &SubwordTokenizer::save)
      .def("size", &SubwordTokenizer::size)
      .def("encode", [](const SubwordTokenizer& t, const std::string& s) {
        return encode_text(t, s);
      })
      .def("decode", [](const SubwordTokenizer& t, const std::vector<int>& ids) {
        return decode_text(t, ids);
      });

  // --- unified vocabulary -------------------------------------------------
  py::enum_<Modality>(m, "Modality")
      .value("text", Modality::text)
      .value("audio", Modality::audio)
      .value("face", Modality::face)
      .value("hands", Modality::hands)
      .value("upper", Modality::upper)
      .value("lower", Modality::lower);

  py::class_<UnifiedVocab>(m, "UnifiedVocab")
      .def_static("build",
                  [](const SubwordTokenizer& tok, int audio_k, int face_k,
                     int hands_k, int upper_k, int lower_k) {
                    return build_vocab(tok, audio_k, face_k, hands_k, upper_k, lower_k);
                  })
      .def_static("load", &UnifiedVocab::load)
      .def("save", &UnifiedVocab::save)
      .def_readonly("total_size", &UnifiedVocab::total_size)
      .def_readonly("hash", &UnifiedVocab::hash)
      .def("offset_of", &UnifiedVocab::offset_of)
      .def("size_of", &UnifiedVocab::size_of)
      .def("render", [](const UnifiedVocab& v, int id) { return render_token(v, id); })
      .def("parse", [](const UnifiedVocab& v, const std::string& s) {
        return parse_token(v, s);
      })
      .def("wrap", [](const UnifiedVocab& v, Modality mo, const std::vector<int>& ids) {
        return wrap_stream(v, mo, ids);
      })
      .def("unwrap", [](const UnifiedVocab& v, const std::vector<int>& ids) {
        return unwrap_stream(v, ids);
      });

  // --- codecs ------------------------------------------------------------
  py::class_<PartCodec>(m, "PartCodec")
      .def_static("load", &PartCodec::load)
      .def("save", &PartCodec::save)
      .def("encode", [](const PartCodec& c, const py::array_t<double>& seq) {
        return numpy_from_mat(c.encode(mat_from_numpy(seq)));
      })
      .def("decode", [](const PartCodec& c, const std::vector<int>& ids) {
        return numpy_from_mat(c.decode(ids));
      })
      .def("tokenize", [](const PartCodec& c, const py::array_t<double>& seq) {
        return c.tokenize(mat_from_numpy(seq));
      })
      .def("codebook", [](const PartCodec& c) {
        return numpy_from_mat(c.codebook().entries);
      });
  m.def("quantize", [](const py::array_t<double>& entries, const py::array_t<double>& z) {
    Codebook cb;
    cb.entries = mat_from_numpy(entries);
    cb.size = int(cb.entries.rows());
    cb.dim = int(cb.entries.cols());
    auto [idx, q] = quantize(cb, mat_from_numpy(z));
    return py::make_tuple(idx, numpy_from_mat(q));
  });

  // --- sequence model ------------------------------------------------------
  py::class_<SeqModel>(m, "SeqModel")
      .def_static("load", &SeqModel::load)
      .def("save", [](SeqModel& mdl, const std::string& dir) { mdl.save(dir); })
      .def("nll_loss", &SeqModel::nll_loss)
      .def("generate",
           [](const SeqModel& mdl, const std::vector<int>& input, int max_len,
              double temperature, uint64_t seed) {
             DecodeConfig dc;
             dc.max_len = max_len;
             if (temperature > 0) {
               dc.mode = DecodeConfig::Mode::sample;
               dc.temperature = temperature;
             }
             dc.seed = seed;
             return mdl.generate(input, dc);
           },
           py::arg("input"), py::arg("max_len") = 128, py::arg("temperature") = 0.0,
           py::arg("seed") = 0)
      .def("vocab_size", [](const SeqModel& mdl) { return mdl.config().vocab_size; });

  // --- metrics --------------------------------------------------------------
  m.def("frechet_distance",
        [](const py::array_t<double>& mean_a, const py::array_t<double>& cov_a,
           const py::array_t<double>& mean_b, const py::array_t<double>& cov_b) {
          GaussianStats a, b;
          Mat ma = mat_from_numpy(mean_a), mb = mat_from_numpy(mean_b);
          a.mean = ma.row(0).transpose();
          b.mean = mb.row(0).transpose();
          a.covariance = mat_from_numpy(cov_a);
          b.covariance = mat_from_numpy(cov_b);
          return frechet_distance(a, b);
        });
  m.def("beat_consistency",
        [](const std::vector<double>& samples, const py::dict& motion, double sigma) {
          AudioClip clip;
          clip.samples = samples;
          BeatConfig bc;
          bc.sigma_s = sigma;
          return beat_consistency(clip, motion_from_dict(motion), bc);
        },
        py::arg("samples"), py::arg("motion"), py::arg("sigma") = 0.1);
  m.def("diversity",
        [](const std::vector<std::vector<double>>& clips, int pairs, uint64_t seed) {
          std::vector<Eigen::VectorXd> v;
          for (const auto& c : clips)
            v.push_back(Eigen::Map<const Eigen::VectorXd>(c.data(), Eigen::Index(c.size())));
          Rng rng(seed);
          return diversity(v, pairs, rng);
        },
        py::arg("clips"), py::arg("pairs") = 200, py::arg("seed") = 0);
  m.def("text_overlap", [](const std::string& pred, const std::string& ref) {
    TextOverlap o = text_overlap(pred, ref);
    return py::make_tuple(o.bleu1, o.rouge_l);
  });

  // --- synthetic data ----------------------------------------------------
  m.def("synth_clip",
        [](uint64_t seed, double duration_s, double bpm, const std::string& emotion,
           double amplitude, double locomotion) {
          SynthConfig cfg;
          cfg.seed = seed;
          cfg.duration_s = duration_s;
          cfg.bpm = bpm;
          cfg.emotion = emotion;
          cfg.amplitude = amplitude;
          cfg.locomotion = locomotion;
          SynthClip clip = synth_clip(cfg);
          py::dict d;
          d["audio"] = clip.audio.samples;
          d["transcript"] = clip.transcript;
          d["emotion"] = clip.emotion;
          d["motion"] = motion_to_dict(clip.motion);
          d["beat_times"] = clip.beat_times;
          return d;
        },
        py::arg("seed") = 0, py::arg("duration_s") = 3.0, py::arg("bpm") = 100.0,
        py::arg("emotion") = "neutral", py::arg("amplitude") = 1.0,
        py::arg("locomotion") = 0.0);
  m.attr("EMOTION_LABELS") = std::vector<std::string>(kEmotionLabels.begin(),
                                                      kEmotionLabels.end());

  // --- pipeline ---------------------------------------------------------------
  m.def("run_command",
        [](const std::string& command, const std::string& config_json,
           const std::map<std::string, std::string>& flags) {
          PipelineConfig cfg =
              config_from_json(nlohmann::json::parse(config_json));
          CommandResult r = run_command(command, cfg, flags);
          return py::make_tuple(r.exit_code, r.output.dump());
        },
        py::arg("command"), py::arg("config_json") = "{}",
        py::arg("flags") = std::map<std::string, std::string>{});
}
