#include <filesystem>
#include <map>

#include "doctest.h"
#include "mlang/blob.hpp"
#include "mlang/synth.hpp"

using namespace mlang;

namespace fs = std::filesystem;

TEST_CASE("synth_clip is deterministic and validates its config") {
  SynthConfig cfg;
  cfg.seed = 12;
  cfg.emotion = "happiness";
  cfg.locomotion = 0.7;
  SynthClip a = synth_clip(cfg);
  SynthClip b = synth_clip(cfg);
  CHECK(a.audio.samples == b.audio.samples);
  CHECK(a.transcript == b.transcript);
  CHECK((merge_parts(a.motion) - merge_parts(b.motion)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.motion.translation - b.motion.translation).cwiseAbs().maxCoeff() == 0.0);

  SynthConfig bad = cfg;
  bad.bpm = 30;
  CHECK_THROWS_AS(synth_clip(bad), InvalidConfig);
  bad = cfg;
  bad.emotion = "bored";
  CHECK_THROWS_AS(synth_clip(bad), InvalidConfig);
  bad = cfg;
  bad.duration_s = 0;
  CHECK_THROWS_AS(synth_clip(bad), InvalidConfig);
}

TEST_CASE("generated motion satisfies the sequence invariants") {
  for (uint64_t seed : {1, 2, 3, 4, 5}) {
    SynthConfig cfg;
    cfg.seed = seed;
    cfg.emotion = kEmotionLabels[seed % 8];
    cfg.locomotion = seed % 2 ? 0.8 : 0.0;
    SynthClip clip = synth_clip(cfg);
    clip.motion.validate();

    // Audio and motion cover the same duration within one frame.
    const double audio_s = clip.audio.duration();
    const double motion_s = clip.motion.frames() / clip.motion.fps;
    CHECK(std::abs(audio_s - motion_s) <= 1.0 / clip.motion.fps + 1e-9);
  }
}

TEST_CASE("beats lie on the shared 0.1s grid and inside the clip") {
  SynthConfig cfg;
  cfg.seed = 9;
  cfg.bpm = 100;
  SynthClip clip = synth_clip(cfg);
  REQUIRE(!clip.beat_times.empty());
  for (double t : clip.beat_times) {
    CHECK(std::abs(t * 10.0 - std::round(t * 10.0)) < 1e-9);
    CHECK(t >= 0.1);
    CHECK(t <= cfg.duration_s - 0.1);
  }
}

TEST_CASE("emotion modulates upper-body angular speed") {
  auto mean_speed = [](const std::string& emotion) {
    SynthConfig cfg;
    cfg.seed = 4;
    cfg.emotion = emotion;
    SynthClip clip = synth_clip(cfg);
    const Mat& u = clip.motion.upper;
    double sum = 0;
    int count = 0;
    for (int f = 0; f + 1 < clip.motion.frames(); ++f)
      for (int j = 0; j < kUpperJoints; ++j) {
        Mat3 a = rot6d_to_matrix(Vec6(u.block<1, 6>(f, 6 * j).transpose()));
        Mat3 b = rot6d_to_matrix(Vec6(u.block<1, 6>(f + 1, 6 * j).transpose()));
        sum += geodesic_distance(a, b) * clip.motion.fps;
        ++count;
      }
    return sum / count;
  };
  CHECK(mean_speed("anger") > 1.3 * mean_speed("neutral"));
  CHECK(mean_speed("sadness") < mean_speed("neutral"));
}

TEST_CASE("distinct seeds give distinct clips") {
  SynthConfig a, b;
  a.seed = 100;
  b.seed = 101;
  SynthClip ca = synth_clip(a);
  SynthClip cb = synth_clip(b);
  CHECK(ca.transcript != cb.transcript);
  CHECK(ca.audio.samples != cb.audio.samples);
}

TEST_CASE("stationary clips keep translation constant; walking clips advance") {
  SynthConfig stat;
  stat.seed = 7;
  stat.locomotion = 0.0;
  SynthClip s = synth_clip(stat);
  CHECK((s.motion.translation.bottomRows(1) - s.motion.translation.topRows(1))
            .cwiseAbs()
            .maxCoeff() < 1e-9);

  SynthConfig walk = stat;
  walk.locomotion = 1.0;
  SynthClip w = synth_clip(walk);
  CHECK(w.motion.translation(w.motion.frames() - 1, 2) > 0.5);
}

TEST_CASE("synth_corpus writes files, exact label histogram, reproducible bytes") {
  const auto dir = (fs::temp_directory_path() / "mlang_synth_corpus").string();
  fs::remove_all(dir);
  SynthCorpusConfig cfg;
  cfg.n = 16;
  cfg.seed = 77;
  auto items = synth_corpus(cfg, dir);
  CHECK(items.size() == 16);
  CHECK(fs::exists(fs::path(dir) / "clip_0000.wav"));
  CHECK(fs::exists(fs::path(dir) / "clip_0015.motion.json"));
  CHECK(fs::exists(fs::path(dir) / "metadata.jsonl"));

  // Uniform probabilities over 16 clips -> exactly 2 of each label.
  std::map<std::string, int> hist;
  for (const auto& it : items) ++hist[it.cfg.emotion];
  for (const auto& label : kEmotionLabels) CHECK(hist[label] == 2);

  auto clips = load_corpus(dir);
  CHECK(clips.size() == 16);
  clips[3].motion.validate();
  CHECK(is_emotion_label(clips[3].emotion));

  // Regeneration reproduces every byte.
  const auto dir2 = (fs::temp_directory_path() / "mlang_synth_corpus2").string();
  fs::remove_all(dir2);
  synth_corpus(cfg, dir2);
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    CHECK(read_text_file(entry.path().string()) ==
          read_text_file((fs::path(dir2) / name).string()));
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("skewed label distribution is honored within 3 percent") {
  const auto dir = (fs::temp_directory_path() / "mlang_synth_skew").string();
  fs::remove_all(dir);
  SynthCorpusConfig cfg;
  cfg.n = 800;
  cfg.seed = 5;
  cfg.emotion_probs = {0.5, 0.1, 0.1, 0.1, 0.05, 0.05, 0.05, 0.05};
  // Allocation only; skip writing 800 clips by using a tiny duration.
  cfg.min_duration_s = 1.0;
  cfg.max_duration_s = 1.0;
  auto items = synth_corpus(cfg, dir);
  std::map<std::string, int> hist;
  for (const auto& it : items) ++hist[it.cfg.emotion];
  for (int e = 0; e < 8; ++e) {
    const double got = hist[kEmotionLabels[size_t(e)]] / 800.0;
    CHECK(std::abs(got - cfg.emotion_probs[size_t(e)]) <= 0.03);
  }
  fs::remove_all(dir);
}
