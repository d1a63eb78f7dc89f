#include "mlang/audio.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "mlang/blob.hpp"

namespace mlang {

namespace {

constexpr double kLogFloor = 1e-10;

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Precomputed analysis matrices: windowed DFT bases and the mel filterbank.
struct Analysis {
  Mat dft_cos;  // bins x window
  Mat dft_sin;
  Mat mel;      // bands x bins
};

const Analysis& analysis() {
  static const Analysis a = [] {
    Analysis an;
    const int bins = kAudioWindow / 2 + 1;
    an.dft_cos.resize(bins, kAudioWindow);
    an.dft_sin.resize(bins, kAudioWindow);
    for (int b = 0; b < bins; ++b)
      for (int t = 0; t < kAudioWindow; ++t) {
        const double hann =
            0.5 - 0.5 * std::cos(2.0 * M_PI * t / (kAudioWindow - 1));
        const double phase = 2.0 * M_PI * b * t / kAudioWindow;
        an.dft_cos(b, t) = std::cos(phase) * hann;
        an.dft_sin(b, t) = -std::sin(phase) * hann;
      }
    an.mel = Mat::Zero(kMelBands, bins);
    const double mel_lo = hz_to_mel(0.0);
    const double mel_hi = hz_to_mel(kAudioRate / 2.0);
    std::vector<double> edges(kMelBands + 2);
    for (int i = 0; i < kMelBands + 2; ++i)
      edges[size_t(i)] =
          mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / double(kMelBands + 1));
    for (int m = 0; m < kMelBands; ++m) {
      const double lo = edges[size_t(m)], mid = edges[size_t(m) + 1],
                   hi = edges[size_t(m) + 2];
      for (int b = 0; b < bins; ++b) {
        const double hz = double(b) * kAudioRate / kAudioWindow;
        if (hz > lo && hz < mid)
          an.mel(m, b) = (hz - lo) / (mid - lo);
        else if (hz >= mid && hz < hi)
          an.mel(m, b) = (hi - hz) / (hi - mid);
      }
    }
    return an;
  }();
  return a;
}

}  // namespace

Mat featurize(const AudioClip& clip) {
  if (clip.rate != kAudioRate)
    throw IoError("audio must be sampled at 16 kHz");
  const int64_t n = int64_t(clip.samples.size());
  if (n < kAudioHop) throw TooShortAudio("need at least 320 samples");
  const int frames = int(n / kAudioHop);

  // Frame i covers samples [i*320 - 80, i*320 + 320), zero-padded at the
  // clip start: energy arriving at a hop boundary lands in that hop's
  // frame, which keeps onset times on the 50 Hz grid.
  Mat windows = Mat::Zero(kAudioWindow, frames);
  for (int f = 0; f < frames; ++f) {
    const int64_t start = int64_t(f) * kAudioHop - (kAudioWindow - kAudioHop);
    for (int64_t t = 0; t < kAudioWindow; ++t) {
      const int64_t src = start + t;
      if (src >= 0 && src < n) windows(Eigen::Index(t), f) = clip.samples[size_t(src)];
    }
  }
  const Analysis& an = analysis();
  Mat re = an.dft_cos * windows;
  Mat im = an.dft_sin * windows;
  Mat power = re.array().square() + im.array().square();
  Mat bands = an.mel * power;  // bands x frames
  return (bands.array() + kLogFloor).log().transpose();  // frames x bands
}

// --- k-means -------------------------------------------------------------

AcousticCodebook fit_acoustic_codebook(const Mat& features, int k,
                                       const KMeansConfig& cfg) {
  const int n = int(features.rows());
  if (k < 2) throw InsufficientData("codebook needs at least 2 centroids");
  if (n < k)
    throw InsufficientData("k-means needs at least " + std::to_string(k) +
                           " rows, got " + std::to_string(n));
  Rng rng(cfg.seed);

  // k-means++ seeding.
  std::vector<int> chosen;
  chosen.push_back(int(rng.below(uint64_t(n))));
  Eigen::VectorXd d2(n);
  for (int i = 0; i < n; ++i)
    d2[i] = (features.row(i) - features.row(chosen[0])).squaredNorm();
  while (int(chosen.size()) < k) {
    const double total = d2.sum();
    int pick;
    if (total <= 0) {
      pick = int(rng.below(uint64_t(n)));  // all points coincide with centers
    } else {
      double r = rng.uniform() * total;
      pick = n - 1;
      for (int i = 0; i < n; ++i) {
        r -= d2[i];
        if (r <= 0) {
          pick = i;
          break;
        }
      }
    }
    chosen.push_back(pick);
    for (int i = 0; i < n; ++i)
      d2[i] = std::min(d2[i], (features.row(i) - features.row(pick)).squaredNorm());
  }

  Mat centroids(k, features.cols());
  for (int c = 0; c < k; ++c) centroids.row(c) = features.row(chosen[size_t(c)]);

  std::vector<int> assign(size_t(n), 0);
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    bool moved = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double bd = (features.row(i) - centroids.row(0)).squaredNorm();
      for (int c = 1; c < k; ++c) {
        const double d = (features.row(i) - centroids.row(c)).squaredNorm();
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (assign[size_t(i)] != best) {
        assign[size_t(i)] = best;
        moved = true;
      }
    }
    Mat sums = Mat::Zero(k, features.cols());
    std::vector<int64_t> counts(size_t(k), 0);
    for (int i = 0; i < n; ++i) {
      sums.row(assign[size_t(i)]) += features.row(i);
      ++counts[size_t(assign[size_t(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[size_t(c)] > 0) {
        centroids.row(c) = sums.row(c) / double(counts[size_t(c)]);
      } else {
        // Re-seed an empty cluster at the point farthest from its centroid.
        int far = 0;
        double fd = -1;
        for (int i = 0; i < n; ++i) {
          const double d =
              (features.row(i) - centroids.row(assign[size_t(i)])).squaredNorm();
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        centroids.row(c) = features.row(far);
        moved = true;
      }
    }
    if (!moved && iter > 0) break;
  }

  AcousticCodebook cb;
  cb.size = k;
  cb.dim = int(features.cols());
  cb.centroids = std::move(centroids);
  return cb;
}

double codebook_distortion(const AcousticCodebook& cb, const Mat& features) {
  double sum = 0;
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int c = 0; c < cb.size; ++c)
      best = std::min(best, (features.row(i) - cb.centroids.row(c)).squaredNorm());
    sum += std::sqrt(best);
  }
  return sum / double(std::max<Eigen::Index>(1, features.rows()));
}

std::vector<int> tokenize_audio(const AudioClip& clip, const AcousticCodebook& cb) {
  const Mat feats = featurize(clip);
  if (feats.cols() != cb.dim)
    throw ShapeMismatch("feature width differs from codebook dim");
  std::vector<int> out(size_t(feats.rows()));
  for (Eigen::Index i = 0; i < feats.rows(); ++i) {
    int best = 0;
    double bd = (feats.row(i) - cb.centroids.row(0)).squaredNorm();
    for (int c = 1; c < cb.size; ++c) {
      const double d = (feats.row(i) - cb.centroids.row(c)).squaredNorm();
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    out[size_t(i)] = best;
  }
  return out;
}

void AcousticCodebook::save(const std::string& dir) const {
  ensure_dir(dir);
  nlohmann::json j;
  j["kind"] = "acoustic_codebook";
  j["size"] = size;
  j["dim"] = dim;
  write_json_file(dir + "/config.json", j);
  NamedTensorData data;
  std::vector<double> v(size_t(centroids.size()));
  for (Eigen::Index i = 0; i < centroids.rows(); ++i)
    for (Eigen::Index c = 0; c < centroids.cols(); ++c)
      v[size_t(i * centroids.cols() + c)] = centroids(i, c);
  data.emplace_back("centroids", std::make_pair(std::vector<int>{size, dim}, v));
  write_blob(dir, "params", data);
}

AcousticCodebook AcousticCodebook::load(const std::string& dir) {
  nlohmann::json j = read_json_file(dir + "/config.json");
  if (!j.contains("kind") || j["kind"] != "acoustic_codebook")
    throw CorruptCheckpoint(dir + " is not an acoustic codebook");
  AcousticCodebook cb;
  cb.size = j["size"].get<int>();
  cb.dim = j["dim"].get<int>();
  auto blob = read_blob(dir, "params");
  const auto& [shape, values] = blob.at("centroids");
  cb.centroids.resize(shape[0], shape[1]);
  for (int r = 0; r < shape[0]; ++r)
    for (int c = 0; c < shape[1]; ++c)
      cb.centroids(r, c) = values[size_t(r * shape[1] + c)];
  return cb;
}

// --- wav ------------------------------------------------------------------

namespace {

template <class T>
T read_le(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

template <class T>
void write_le(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

}  // namespace

AudioClip load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char tag[5] = {0};
  in.read(tag, 4);
  if (std::strncmp(tag, "RIFF", 4) != 0) throw IoError(path + ": not a RIFF file");
  read_le<uint32_t>(in);
  in.read(tag, 4);
  if (std::strncmp(tag, "WAVE", 4) != 0) throw IoError(path + ": not a WAVE file");

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  std::vector<char> payload;
  while (in.read(tag, 4)) {
    const uint32_t size = read_le<uint32_t>(in);
    if (std::strncmp(tag, "fmt ", 4) == 0) {
      format = read_le<uint16_t>(in);
      channels = read_le<uint16_t>(in);
      rate = read_le<uint32_t>(in);
      read_le<uint32_t>(in);  // byte rate
      read_le<uint16_t>(in);  // block align
      bits = read_le<uint16_t>(in);
      if (size > 16) in.seekg(size - 16, std::ios::cur);
    } else if (std::strncmp(tag, "data", 4) == 0) {
      payload.resize(size);
      in.read(payload.data(), size);
    } else {
      in.seekg(size + (size & 1), std::ios::cur);
    }
  }
  if (payload.empty()) throw IoError(path + ": missing data chunk");
  if (channels != 1) throw IoError(path + ": expected mono audio");
  if (rate != kAudioRate) throw IoError(path + ": expected 16 kHz audio");

  AudioClip clip;
  if (format == 1 && bits == 16) {
    const size_t n = payload.size() / 2;
    clip.samples.resize(n);
    const int16_t* p = reinterpret_cast<const int16_t*>(payload.data());
    for (size_t i = 0; i < n; ++i) clip.samples[i] = double(p[i]) / 32768.0;
  } else if (format == 3 && bits == 32) {
    const size_t n = payload.size() / 4;
    clip.samples.resize(n);
    const float* p = reinterpret_cast<const float*>(payload.data());
    for (size_t i = 0; i < n; ++i) clip.samples[i] = double(p[i]);
  } else {
    throw IoError(path + ": expected PCM16 or float32 WAV");
  }
  return clip;
}

void save_wav(const AudioClip& clip, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  const uint32_t nsamples = uint32_t(clip.samples.size());
  const uint32_t data_size = nsamples * 2;
  out.write("RIFF", 4);
  write_le<uint32_t>(out, 36 + data_size);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  write_le<uint32_t>(out, 16);
  write_le<uint16_t>(out, 1);  // PCM
  write_le<uint16_t>(out, 1);  // mono
  write_le<uint32_t>(out, uint32_t(clip.rate));
  write_le<uint32_t>(out, uint32_t(clip.rate) * 2);
  write_le<uint16_t>(out, 2);
  write_le<uint16_t>(out, 16);
  out.write("data", 4);
  write_le<uint32_t>(out, data_size);
  for (double s : clip.samples) {
    const double clamped = std::min(1.0, std::max(-1.0, s));
    const long q = std::lround(clamped * 32768.0);
    write_le<int16_t>(out, int16_t(std::min(32767L, std::max(-32768L, q))));
  }
  if (!out) throw IoError("write failure on " + path);
}

}  // namespace mlang
