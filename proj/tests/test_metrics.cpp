#include <cmath>
#include <numeric>
#include <filesystem>

#include "doctest.h"
#include "mlang/metrics.hpp"

using namespace mlang;

TEST_CASE("frechet distance: identity, closed forms, symmetry") {
  Rng rng(3);

  // d-dimensional identity case.
  Mat feats(40, 5);
  for (Eigen::Index i = 0; i < feats.size(); ++i) feats.data()[i] = rng.normal();
  GaussianStats g = fit_gaussian(feats);
  CHECK(frechet_distance(g, g) < 1e-8);

  // 1-D closed form over random cases.
  for (int trial = 0; trial < 100; ++trial) {
    GaussianStats a, b;
    a.mean = Eigen::VectorXd::Constant(1, rng.normal(0, 2));
    b.mean = Eigen::VectorXd::Constant(1, rng.normal(0, 2));
    const double sa = 0.1 + rng.uniform(), sb = 0.1 + rng.uniform();
    a.covariance = Mat::Constant(1, 1, sa * sa);
    b.covariance = Mat::Constant(1, 1, sb * sb);
    const double want = (a.mean[0] - b.mean[0]) * (a.mean[0] - b.mean[0]) +
                        (sa - sb) * (sa - sb);
    CHECK(std::abs(frechet_distance(a, b) - want) < 1e-8);
    CHECK(std::abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-10);
  }

  // Diagonal closed form.
  for (int trial = 0; trial < 100; ++trial) {
    const int d = 4;
    GaussianStats a, b;
    a.mean = Eigen::VectorXd::Zero(d);
    b.mean = Eigen::VectorXd::Zero(d);
    a.covariance = Mat::Zero(d, d);
    b.covariance = Mat::Zero(d, d);
    double want = 0;
    for (int i = 0; i < d; ++i) {
      a.mean[i] = rng.normal();
      b.mean[i] = rng.normal();
      const double la = 0.1 + rng.uniform(), lb = 0.1 + rng.uniform();
      a.covariance(i, i) = la;
      b.covariance(i, i) = lb;
      want += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]) +
              (std::sqrt(la) - std::sqrt(lb)) * (std::sqrt(la) - std::sqrt(lb));
    }
    CHECK(std::abs(frechet_distance(a, b) - want) < 1e-8);
  }
}

TEST_CASE("frechet distance is monotone in mean shift and validates inputs") {
  Rng rng(5);
  Mat feats(60, 6);
  for (Eigen::Index i = 0; i < feats.size(); ++i) feats.data()[i] = rng.normal();
  GaussianStats base = fit_gaussian(feats);
  double prev = -1;
  for (double shift : {0.5, 1.0, 2.0}) {
    GaussianStats moved = base;
    moved.mean.array() += shift;
    const double d = frechet_distance(base, moved);
    CHECK(d > prev);
    prev = d;
  }

  GaussianStats small;
  small.mean = Eigen::VectorXd::Zero(3);
  small.covariance = Mat::Identity(3, 3);
  CHECK_THROWS_AS(frechet_distance(base, small), DimensionMismatch);

  GaussianStats bad = base;
  bad.covariance(0, 0) = -1.0;
  CHECK_THROWS_AS(frechet_distance(bad, base), NotPSD);
}

TEST_CASE("beat detectors land exactly on synthetic beats") {
  SynthConfig cfg;
  cfg.seed = 21;
  cfg.bpm = 100;
  cfg.duration_s = 3.0;
  SynthClip clip = synth_clip(cfg);

  // Every true beat appears among the audio onsets at the exact frame time.
  auto ab = audio_beat_times(clip.audio);
  for (double t : clip.beat_times) {
    bool hit = false;
    for (double a : ab) hit = hit || std::abs(a - t) < 1e-9;
    CHECK(hit);
  }

  // Motion direction reversals sit exactly on the beats.
  auto mb = motion_beat_times(clip.motion);
  REQUIRE(!mb.empty());
  for (double m : mb) {
    bool hit = false;
    for (double t : clip.beat_times) hit = hit || std::abs(m - t) < 1e-9;
    CHECK(hit);
  }
}

TEST_CASE("beat consistency: perfect alignment scores exactly 1") {
  for (uint64_t seed : {1, 2, 3}) {
    SynthConfig cfg;
    cfg.seed = seed;
    cfg.bpm = 100;
    SynthClip clip = synth_clip(cfg);
    CHECK(std::abs(beat_consistency(clip.audio, clip.motion) - 1.0) < 1e-6);
  }
}

TEST_CASE("beat consistency: known offset gives the Gaussian kernel value") {
  // One audio click at 1.0 s, one motion reversal at 1.2 s.
  AudioClip audio;
  audio.samples.assign(2 * kAudioRate, 0.0);
  for (int i = 0; i < 160; ++i) {
    const double t = double(i) / kAudioRate;
    audio.samples[size_t(kAudioRate + i)] =
        0.9 * std::sin(2 * M_PI * 1200 * t) * std::exp(-t / 0.004);
  }

  MotionSequence motion;
  motion.fps = 30;
  const int frames = 60;
  motion.face = Mat::Zero(frames, kFaceDim);
  motion.hands = Mat::Zero(frames, kHandsDim);
  motion.upper = Mat::Zero(frames, kUpperDim);
  motion.lower = Mat::Zero(frames, kLowerDim);
  motion.translation = Mat::Zero(frames, 3);
  for (int f = 0; f < frames; ++f) {
    const double angle = 0.4 * std::abs(f / 30.0 - 1.2);  // vertex at 1.2 s
    for (int j = 0; j < kUpperJoints; ++j)
      motion.upper.block<1, 6>(f, 6 * j) =
          rot6d_from_axis_angle(Vec3(0, 0, angle)).transpose();
    Vec6 id;
    id << 1, 0, 0, 0, 1, 0;
    for (int j = 0; j < kHandJoints; ++j)
      motion.hands.block<1, 6>(f, 6 * j) = id.transpose();
    for (int j = 0; j < kLowerJoints; ++j)
      motion.lower.block<1, 6>(f, 6 * j) = id.transpose();
    motion.face.block<1, 6>(f, 0) = id.transpose();
  }

  const double got = beat_consistency(audio, motion);
  CHECK(got == doctest::Approx(std::exp(-0.04 / 0.02)).epsilon(1e-6));

  AudioClip silent;
  silent.samples.assign(2 * kAudioRate, 0.0);
  CHECK_THROWS_AS(beat_consistency(silent, motion), NoBeats);

  AudioClip shorter;
  shorter.samples.assign(kAudioRate, 0.0);
  CHECK_THROWS_AS(beat_consistency(shorter, motion), LengthMismatch);
}

TEST_CASE("time-shuffled motion scores clearly lower") {
  Rng rng(31);
  double margin_sum = 0;
  int n = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    SynthConfig cfg;
    cfg.seed = seed + 100;
    cfg.bpm = 60 + 10 * (seed % 5);
    SynthClip clip = synth_clip(cfg);
    const double aligned = beat_consistency(clip.audio, clip.motion);

    MotionSequence shuffled = clip.motion;
    std::vector<int> perm(size_t(clip.motion.frames()));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    for (int f = 0; f < clip.motion.frames(); ++f) {
      shuffled.face.row(f) = clip.motion.face.row(perm[size_t(f)]);
      shuffled.hands.row(f) = clip.motion.hands.row(perm[size_t(f)]);
      shuffled.upper.row(f) = clip.motion.upper.row(perm[size_t(f)]);
      shuffled.lower.row(f) = clip.motion.lower.row(perm[size_t(f)]);
    }
    const double broken = beat_consistency(clip.audio, shuffled);
    margin_sum += aligned - broken;
    ++n;
    CHECK(aligned > broken);
  }
  CHECK(margin_sum / n >= 0.1);
}

TEST_CASE("diversity: zeros, hand arithmetic, permutation invariance") {
  Rng rng(7);
  std::vector<Eigen::VectorXd> same(4, Eigen::VectorXd::Constant(10, 2.5));
  CHECK(diversity(same, 100, rng) == 0.0);

  std::vector<Eigen::VectorXd> pair{Eigen::VectorXd::Zero(8),
                                    Eigen::VectorXd::Constant(8, 0.75)};
  CHECK(diversity(pair, 10, rng) == doctest::Approx(0.75 * 8));

  std::vector<Eigen::VectorXd> clips;
  for (int i = 0; i < 6; ++i) {
    Eigen::VectorXd v(12);
    for (int k = 0; k < 12; ++k) v[k] = rng.normal();
    clips.push_back(v);
  }
  Rng r1(9), r2(9);
  const double a = diversity(clips, 1000000, r1);
  std::reverse(clips.begin(), clips.end());
  const double b = diversity(clips, 1000000, r2);
  CHECK(a == doctest::Approx(b).epsilon(1e-12));

  std::vector<Eigen::VectorXd> one{Eigen::VectorXd::Zero(3)};
  CHECK_THROWS_AS(diversity(one, 10, rng), TooFewClips);
  std::vector<Eigen::VectorXd> ragged{Eigen::VectorXd::Zero(3),
                                      Eigen::VectorXd::Zero(4)};
  CHECK_THROWS_AS(diversity(ragged, 10, rng), LengthMismatch);
}

TEST_CASE("text overlap scores") {
  CHECK(text_overlap("happiness", "happiness").bleu1 == doctest::Approx(100.0));
  CHECK(text_overlap("happiness", "anger").bleu1 == 0.0);
  CHECK(text_overlap("very happy", "happy").rouge_l == doctest::Approx(200.0 / 3.0));
  CHECK(text_overlap("", "anything").bleu1 == 0.0);
  CHECK(text_overlap("anything", "").rouge_l == 0.0);
  CHECK(text_overlap("The Cat", "the cat").bleu1 == doctest::Approx(100.0));
}

namespace {

std::vector<MotionSequence> small_motion_corpus(int n, int frames = 64) {
  std::vector<MotionSequence> out;
  for (int i = 0; i < n; ++i) {
    SynthConfig cfg;
    cfg.seed = uint64_t(i);
    cfg.duration_s = frames / 30.0;
    cfg.emotion = kEmotionLabels[size_t(i % 8)];
    out.push_back(synth_clip(cfg).motion);
  }
  return out;
}

EmbedderConfig small_embedder_config() {
  EmbedderConfig cfg;
  cfg.window = 16;
  cfg.stride = 4;
  cfg.hidden = 32;
  cfg.feature_dim = 8;
  cfg.epochs = 10;
  cfg.lr = 2e-3;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("embedder: insufficient data and reconstruction quality") {
  EmbedderConfig cfg = small_embedder_config();
  CHECK_THROWS_AS(fit_embedder(small_motion_corpus(1), cfg), InsufficientData);

  double mse = 0, baseline = 0;
  FeatureEmbedder emb = fit_embedder(small_motion_corpus(10), cfg, &mse, &baseline);
  CHECK(mse < 0.5 * baseline);

  MotionSequence seq = small_motion_corpus(1)[0];
  Mat feats = emb.embed_sequence(seq);
  CHECK(feats.cols() == cfg.feature_dim);
  CHECK(feats.rows() > 0);

  const auto dir = (std::filesystem::temp_directory_path() / "mlang_embedder").string();
  emb.save(dir);
  FeatureEmbedder back = FeatureEmbedder::load(dir);
  CHECK((back.embed_sequence(seq) - emb.embed_sequence(seq)).cwiseAbs().maxCoeff() ==
        0.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("ground-truth self-evaluation: zero FGD, exact GT text scores") {
  EmbedderConfig ecfg = small_embedder_config();
  FeatureEmbedder emb = fit_embedder(small_motion_corpus(10), ecfg);

  const auto dir = (std::filesystem::temp_directory_path() / "mlang_eval_gt").string();
  std::filesystem::remove_all(dir);
  SynthCorpusConfig scfg;
  scfg.n = 6;
  scfg.seed = 9;
  synth_corpus(scfg, dir);
  auto testset = load_corpus(dir);
  std::filesystem::remove_all(dir);

  SubwordTokenizer tok = train_subword({"neutral anger happiness"},
                                       SubwordTokenizer::kByteBase + 256);
  UnifiedVocab vocab = build_vocab(tok, 8, 8, 8, 8, 8);
  CodecSet codecs;  // unused by the ground-truth path

  EvalConfig cfg;
  cfg.emotion_task = true;
  EvalReport rep = eval_ground_truth(codecs, vocab, emb, testset, cfg);
  CHECK(rep.fgd < 1e-6);
  CHECK(rep.bleu1 == doctest::Approx(100.0));
  CHECK(rep.n_items == 6);
  CHECK(rep.diversity > 0.0);

  EvalReport back = EvalReport::from_json(rep.to_json());
  CHECK(back.fgd == rep.fgd);
  CHECK(back.config_hash == rep.config_hash);
  CHECK(rep.to_json().find("unavailable") != std::string::npos);
}
