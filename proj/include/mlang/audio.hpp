#pragma once

#include <string>
#include <vector>

#include "mlang/motion.hpp"
#include "mlang/rng.hpp"

namespace mlang {

constexpr int kAudioRate = 16000;
constexpr int kAudioHop = 320;     // 20 ms -> 50 tokens per second
constexpr int kAudioWindow = 400;  // 25 ms
constexpr int kMelBands = 40;

// 16 kHz mono samples in [-1, 1]; resampling is the caller's job.
struct AudioClip {
  std::vector<double> samples;
  int rate = kAudioRate;

  double duration() const { return double(samples.size()) / double(rate); }
};

// Log-magnitude mel-band energies, one row per 320-sample hop; frame count
// is floor(samples / 320). Throws TooShortAudio below one hop.
Mat featurize(const AudioClip& clip);

struct AcousticCodebook {
  int size = 512;
  int dim = kMelBands;
  Mat centroids;  // size x dim

  void save(const std::string& dir) const;
  static AcousticCodebook load(const std::string& dir);
};

struct KMeansConfig {
  int iterations = 50;
  uint64_t seed = 0;
};

// k-means with k-means++ seeding; deterministic given the seed. Throws
// InsufficientData when rows < k.
AcousticCodebook fit_acoustic_codebook(const Mat& features, int k,
                                       const KMeansConfig& cfg = {});

// Mean distance of each row to its nearest centroid (model distortion).
double codebook_distortion(const AcousticCodebook& cb, const Mat& features);

// Per-frame nearest-centroid index at 50 Hz; ties break to the lowest index.
std::vector<int> tokenize_audio(const AudioClip& clip, const AcousticCodebook& cb);

// --- wav io -----------------------------------------------------------------

// 16 kHz mono WAV, PCM16 or float32. Other rates or channel counts are
// rejected with IoError.
AudioClip load_wav(const std::string& path);
void save_wav(const AudioClip& clip, const std::string& path);  // PCM16

}  // namespace mlang
