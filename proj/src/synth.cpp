#include "mlang/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "mlang/blob.hpp"

namespace mlang {

namespace fs = std::filesystem;
using nlohmann::json;

const std::array<std::string, 8> kEmotionLabels = {
    "neutral", "anger",   "happiness", "fear",
    "disgust", "sadness", "contempt",  "surprise"};

bool is_emotion_label(const std::string& s) {
  return std::find(kEmotionLabels.begin(), kEmotionLabels.end(), s) !=
         kEmotionLabels.end();
}

int emotion_index(const std::string& s) {
  for (int i = 0; i < 8; ++i)
    if (kEmotionLabels[size_t(i)] == s) return i;
  throw InvalidConfig("unknown emotion label '" + s + "'");
}

namespace {

// Emotion modulation channels: gesture amplitude, beat-period shift in 0.1 s
// grid units, a dedicated face-coefficient direction, and jaw openness.
struct EmotionStyle {
  double amplitude;
  int tempo_shift;
  int face_dim;  // offset into the 100 expression coefficients
  double face_amp;
  double jaw;
};

const EmotionStyle& emotion_style(int idx) {
  static const std::array<EmotionStyle, 8> table = {{
      {1.00, 0, 0, 0.30, 0.50},    // neutral
      {1.60, -1, 12, 0.95, 0.90},  // anger
      {1.30, -1, 24, 0.90, 0.70},  // happiness
      {0.65, 1, 36, 0.95, 0.40},   // fear
      {0.80, 1, 48, 0.85, 0.45},   // disgust
      {0.50, 2, 60, 0.90, 0.30},   // sadness
      {0.70, 1, 72, 0.85, 0.35},   // contempt
      {1.45, 0, 84, 1.00, 0.95},   // surprise
  }};
  return table[size_t(idx)];
}

double snap_grid(double x) { return std::round(x * 10.0) / 10.0; }

Vec6 aa6(double x, double y, double z) {
  return rot6d_from_axis_angle(Vec3(x, y, z));
}

void set_joint(Mat& stream, int frame, int joint, const Vec6& r6) {
  stream.block<1, 6>(frame, 6 * joint) = r6.transpose();
}

const char* kWordBank[] = {
    "body",   "moves",  "with",    "energy", "while",  "speaking", "softly",
    "loudly", "waving", "turning", "steps",  "aside",  "quickly",  "slowly",
    "gently", "hands",  "open",    "closed", "rhythm", "pauses",   "leaning",
    "upright"};
constexpr int kWordBankSize = int(sizeof(kWordBank) / sizeof(kWordBank[0]));

}  // namespace

SynthClip synth_clip(const SynthConfig& cfg) {
  if (cfg.duration_s <= 0) throw InvalidConfig("duration must be positive");
  if (cfg.bpm < 40.0 || cfg.bpm > 200.0)
    throw InvalidConfig("bpm must lie in [40, 200]");
  const int eidx = emotion_index(cfg.emotion);  // validates the label
  const EmotionStyle& es = emotion_style(eidx);

  Rng rng(cfg.seed);
  const double duration = std::max(1.0, snap_grid(cfg.duration_s));
  const int frames = int(std::lround(duration * cfg.fps));
  const int samples = int(std::lround(duration * kAudioRate));

  double period = snap_grid(60.0 / cfg.bpm) + 0.1 * es.tempo_shift;
  period = std::min(1.2, std::max(0.2, period));

  std::vector<double> beats;
  for (double t = 0.2; t <= duration - 0.2 + 1e-9; t += period)
    beats.push_back(snap_grid(t));
  if (beats.empty()) beats.push_back(0.2);

  const double amp = cfg.amplitude * es.amplitude;

  // --- audio: click train + noise-burst "speech" ---------------------------
  AudioClip audio;
  audio.samples.assign(size_t(samples), 0.0);
  for (double bt : beats) {
    const int start = int(std::lround(bt * kAudioRate));
    for (int i = 0; i < 160 && start + i < samples; ++i) {
      const double t = double(i) / kAudioRate;
      audio.samples[size_t(start + i)] +=
          0.85 * std::sin(2 * M_PI * 1200.0 * t) * std::exp(-t / 0.004);
    }
  }
  int bursts = 0;
  for (size_t b = 0; b + 1 < beats.size(); ++b) {
    const double mid = (beats[b] + beats[b + 1]) / 2.0;
    const int len = int(0.12 * kAudioRate);
    const int start = int(std::lround(mid * kAudioRate)) - len / 2;
    const double level = 0.12 + 0.05 * rng.uniform();
    for (int i = 0; i < len; ++i) {
      const int at = start + i;
      if (at < 0 || at >= samples) continue;
      const double env = 0.5 - 0.5 * std::cos(2 * M_PI * i / double(len - 1));
      audio.samples[size_t(at)] += level * env * rng.normal(0, 0.6);
    }
    ++bursts;
  }
  for (auto& s : audio.samples) s = std::min(1.0, std::max(-1.0, s));

  // --- transcript ------------------------------------------------------------
  std::string transcript = cfg.emotion + " voice";
  const int words = 3 + bursts;
  for (int w = 0; w < words; ++w) {
    transcript += ' ';
    transcript += kWordBank[rng.below(kWordBankSize)];
  }

  // --- motion -----------------------------------------------------------
  MotionSequence motion;
  motion.fps = cfg.fps;
  motion.face = Mat::Zero(frames, kFaceDim);
  motion.hands = Mat::Zero(frames, kHandsDim);
  motion.upper = Mat::Zero(frames, kUpperDim);
  motion.lower = Mat::Zero(frames, kLowerDim);
  motion.translation = Mat::Zero(frames, 3);

  const double t0 = beats.front();
  const double walk_speed = 0.5 * cfg.locomotion;
  const double arm = 0.45 * amp * (1.0 + 0.2 * cfg.style[0]);
  const double nod = 0.18 * amp * (1.0 + 0.2 * cfg.style[1]);
  const double curl = 0.35 * amp * (1.0 + 0.2 * cfg.style[2]);

  for (int f = 0; f < frames; ++f) {
    const double time = double(f) / cfg.fps;
    const double phase = M_PI * (time - t0) / period;
    const double osc = std::cos(phase);

    // Upper body: counter-swinging shoulders, elbows, head nod, spine sway.
    set_joint(motion.upper, f, 0, aa6(0, 0, 0.05 * amp * osc));   // spine1
    set_joint(motion.upper, f, 1, aa6(0, 0, -0.04 * amp * osc));  // spine2
    set_joint(motion.upper, f, 2, aa6(0, 0, 0.03 * amp * osc));   // spine3
    set_joint(motion.upper, f, 3, aa6(0.3 * nod * osc, 0, 0));    // neck
    set_joint(motion.upper, f, 4, aa6(nod * osc, 0, 0));          // head
    set_joint(motion.upper, f, 5, aa6(0, 0, 0.02 * amp * osc));
    set_joint(motion.upper, f, 6, aa6(0, 0, -0.02 * amp * osc));
    set_joint(motion.upper, f, 7, aa6(0, 0, arm * osc));          // L shoulder
    set_joint(motion.upper, f, 8, aa6(0, 0, -arm * osc));         // R shoulder
    set_joint(motion.upper, f, 9, aa6(0, 0.4 * arm * osc, 0));    // L elbow
    set_joint(motion.upper, f, 10, aa6(0, -0.4 * arm * osc, 0));  // R elbow
    set_joint(motion.upper, f, 11, aa6(0.15 * arm * osc, 0, 0));
    set_joint(motion.upper, f, 12, aa6(-0.15 * arm * osc, 0, 0));

    // Hands: finger-base curl on both hands.
    for (int h = 0; h < 2; ++h)
      for (int fg = 0; fg < 5; ++fg) {
        const int base = 15 * h + 3 * fg;
        const double sgn = h == 0 ? 1.0 : -1.0;
        set_joint(motion.hands, f, base, aa6(0, 0, sgn * curl * osc));
        set_joint(motion.hands, f, base + 1, aa6(0, 0, sgn * 0.6 * curl * osc));
        set_joint(motion.hands, f, base + 2, aa6(0, 0, sgn * 0.3 * curl * osc));
      }

    // Lower body: gait swing scaled by locomotion, phase-locked to beats.
    const double gait = 0.5 * cfg.locomotion;
    set_joint(motion.lower, f, 0, aa6(0, 0.03 * amp * osc, 0));  // pelvis
    set_joint(motion.lower, f, 1, aa6(gait * osc, 0, 0));        // L hip
    set_joint(motion.lower, f, 2, aa6(-gait * osc, 0, 0));       // R hip
    set_joint(motion.lower, f, 3, aa6(0.5 * gait * (1 - osc), 0, 0));
    set_joint(motion.lower, f, 4, aa6(0.5 * gait * (1 + osc), 0, 0));
    set_joint(motion.lower, f, 5, aa6(0.2 * gait * osc, 0, 0));
    set_joint(motion.lower, f, 6, aa6(-0.2 * gait * osc, 0, 0));
    set_joint(motion.lower, f, 7, aa6(0, 0, 0));
    set_joint(motion.lower, f, 8, aa6(0, 0, 0));

    motion.translation(f, 2) = walk_speed * time;
    motion.translation(f, 1) = 0.01 * cfg.locomotion * std::cos(2 * phase);

    // Face: jaw oscillation plus a per-emotion coefficient direction.
    const double jaw = 0.05 + 0.06 * es.jaw * (1.0 - osc) / 2.0;
    motion.face.block<1, 6>(f, 0) = aa6(jaw, 0, 0).transpose();
    const int base = 6 + es.face_dim;
    motion.face(f, base) = es.face_amp;
    motion.face(f, base + 1) = 0.5 * es.face_amp;
    motion.face(f, base + 2) = 0.25 * es.face_amp * osc;
    motion.face(f, 6 + 96 + (eidx % 4)) += 0.1 * cfg.style[3];
  }

  SynthClip out;
  out.audio = std::move(audio);
  out.transcript = std::move(transcript);
  out.emotion = cfg.emotion;
  out.motion = std::move(motion);
  out.beat_times = std::move(beats);
  return out;
}

// --- corpus ---------------------------------------------------------------

namespace {

uint64_t clip_seed(uint64_t corpus_seed, int i) {
  uint64_t x = corpus_seed + 0x9e3779b97f4a7c15ULL * uint64_t(i + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::vector<CorpusItem> synth_corpus(const SynthCorpusConfig& cfg,
                                     const std::string& dir) {
  if (cfg.n < 1) throw InvalidConfig("corpus needs n >= 1");
  ensure_dir(dir);
  Rng rng(cfg.seed);

  // Largest-remainder allocation keeps the label histogram exact.
  std::array<int, 8> counts{};
  double psum = 0;
  for (double p : cfg.emotion_probs) psum += p;
  if (psum <= 0) throw InvalidConfig("emotion probabilities must sum > 0");
  int assigned = 0;
  std::array<double, 8> remainders{};
  for (int e = 0; e < 8; ++e) {
    const double want = cfg.n * cfg.emotion_probs[size_t(e)] / psum;
    counts[size_t(e)] = int(want);
    remainders[size_t(e)] = want - counts[size_t(e)];
    assigned += counts[size_t(e)];
  }
  while (assigned < cfg.n) {
    int best = 0;
    for (int e = 1; e < 8; ++e)
      if (remainders[size_t(e)] > remainders[size_t(best)]) best = e;
    ++counts[size_t(best)];
    remainders[size_t(best)] = -1;
    ++assigned;
  }
  std::vector<int> emotions;
  for (int e = 0; e < 8; ++e)
    for (int i = 0; i < counts[size_t(e)]; ++i) emotions.push_back(e);
  rng.shuffle(emotions);

  std::vector<CorpusItem> items;
  json index;
  index["n"] = cfg.n;
  index["seed"] = cfg.seed;
  index["clips"] = json::array();
  std::ofstream meta(fs::path(dir) / "metadata.jsonl");
  if (!meta) throw IoError("cannot write metadata in " + dir);

  for (int i = 0; i < cfg.n; ++i) {
    SynthConfig sc;
    sc.seed = clip_seed(cfg.seed, i);
    sc.duration_s = snap_grid(rng.uniform(cfg.min_duration_s, cfg.max_duration_s));
    sc.bpm = rng.uniform(cfg.min_bpm, cfg.max_bpm);
    sc.emotion = kEmotionLabels[size_t(emotions[size_t(i)])];
    sc.amplitude = rng.uniform(0.85, 1.2);
    sc.locomotion = rng.uniform() < cfg.locomotion_prob ? rng.uniform(0.4, 1.0) : 0.0;
    for (auto& s : sc.style) s = rng.normal(0, 0.3);

    SynthClip clip = synth_clip(sc);
    char name[32];
    snprintf(name, sizeof name, "clip_%04d", i);
    save_wav(clip.audio, (fs::path(dir) / (std::string(name) + ".wav")).string());
    save_motion_json(clip.motion,
                     (fs::path(dir) / (std::string(name) + ".motion.json")).string());

    json m = {{"id", name},
              {"seed", sc.seed},
              {"emotion", sc.emotion},
              {"transcript", clip.transcript},
              {"bpm", sc.bpm}};
    meta << m.dump() << "\n";

    json c = m;
    c["duration_s"] = sc.duration_s;
    c["amplitude"] = sc.amplitude;
    c["locomotion"] = sc.locomotion;
    c["style"] = sc.style;
    index["clips"].push_back(c);

    CorpusItem item;
    item.id = name;
    item.cfg = sc;
    item.transcript = clip.transcript;
    items.push_back(std::move(item));
  }
  if (!meta) throw IoError("write failure on metadata in " + dir);
  meta.close();
  write_json_file((fs::path(dir) / "index.json").string(), index);
  return items;
}

std::vector<LoadedClip> load_corpus(const std::string& dir) {
  const json index = read_json_file((fs::path(dir) / "index.json").string());
  std::vector<LoadedClip> out;
  for (const auto& c : index["clips"]) {
    LoadedClip clip;
    clip.id = c["id"].get<std::string>();
    clip.emotion = c["emotion"].get<std::string>();
    clip.transcript = c["transcript"].get<std::string>();
    clip.audio = load_wav((fs::path(dir) / (clip.id + ".wav")).string());
    clip.motion =
        load_motion_json((fs::path(dir) / (clip.id + ".motion.json")).string());
    out.push_back(std::move(clip));
  }
  return out;
}

}  // namespace mlang
