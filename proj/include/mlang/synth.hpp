#pragma once

#include <array>
#include <string>
#include <vector>

#include "mlang/audio.hpp"
#include "mlang/motion.hpp"
#include "mlang/rng.hpp"

namespace mlang {

// The eight-class emotion label set.
extern const std::array<std::string, 8> kEmotionLabels;
bool is_emotion_label(const std::string& s);
int emotion_index(const std::string& s);

// Per-clip generator configuration. Beat times snap to the 0.1 s grid that
// both the 30 fps motion clock and the 50 Hz audio-token clock share, so a
// generated pair is exactly beat-aligned.
struct SynthConfig {
  uint64_t seed = 0;
  double duration_s = 3.0;  // snapped to 0.1 s multiples
  double bpm = 100.0;       // must lie in [40, 200]
  std::string emotion = "neutral";
  double amplitude = 1.0;   // gesture amplitude scale
  double locomotion = 0.0;  // 0 = stationary; > 0 walks forward
  std::array<double, 4> style = {0, 0, 0, 0};
  double fps = 30.0;
};

struct SynthClip {
  AudioClip audio;
  std::string transcript;
  std::string emotion;
  MotionSequence motion;
  std::vector<double> beat_times;  // seconds, shared by audio and motion
};

// Deterministic per seed: click-train audio with noise-burst "speech",
// pseudo-transcript, and body motion whose oscillators reverse direction
// exactly on the beats. Emotion modulates gesture amplitude, beat period
// and face coefficients.
SynthClip synth_clip(const SynthConfig& cfg);

struct SynthCorpusConfig {
  int n = 200;
  uint64_t seed = 0;
  double min_duration_s = 2.0;
  double max_duration_s = 4.0;
  double min_bpm = 60.0;
  double max_bpm = 150.0;
  std::array<double, 8> emotion_probs = {0.125, 0.125, 0.125, 0.125,
                                         0.125, 0.125, 0.125, 0.125};
  double locomotion_prob = 0.5;
};

struct CorpusItem {
  std::string id;
  SynthConfig cfg;
  std::string transcript;
};

// Writes clip_%04d.wav + clip_%04d.motion.json + metadata.jsonl + index.json.
// Emotion counts follow the requested distribution by largest-remainder
// allocation, so the label histogram is exact up to rounding.
std::vector<CorpusItem> synth_corpus(const SynthCorpusConfig& cfg,
                                     const std::string& dir);

struct LoadedClip {
  std::string id;
  AudioClip audio;
  std::string transcript;
  std::string emotion;
  MotionSequence motion;
};

std::vector<LoadedClip> load_corpus(const std::string& dir);

}  // namespace mlang
