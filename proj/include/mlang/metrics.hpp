#pragma once

#include <string>
#include <vector>

#include "mlang/audio.hpp"
#include "mlang/codec.hpp"
#include "mlang/model.hpp"
#include "mlang/motion.hpp"
#include "mlang/synth.hpp"

namespace mlang {

// --- learned feature embedder (FGD backbone) --------------------------------

struct EmbedderConfig {
  int window = 64;   // frames per window
  int stride = 32;
  int feature_dim = 32;
  int hidden = 128;
  int epochs = 30;
  int batch_size = 8;
  double lr = 1e-3;
  double holdout_frac = 0.1;
  uint64_t seed = 0;
};

// Window autoencoder; the 32-dim bottleneck is the gesture feature space
// FGD operates in.
class FeatureEmbedder {
 public:
  FeatureEmbedder(EmbedderConfig cfg, uint64_t seed);

  const EmbedderConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }

  Eigen::VectorXd embed(const Mat& window) const;  // window x 418 -> feature
  Mat embed_sequence(const MotionSequence& seq) const;  // one row per window
  double reconstruction_error(const Mat& window) const;

  void save(const std::string& dir);
  static FeatureEmbedder load(const std::string& dir);

 private:
  friend FeatureEmbedder fit_embedder(const std::vector<MotionSequence>&,
                                      const EmbedderConfig&, double*, double*);
  nn::Tensor forward(const Mat& window, bool with_decoder) const;

  EmbedderConfig cfg_;
  nn::ParamStore params_;
};

// Throws InsufficientData when the corpus yields fewer than 100 windows.
FeatureEmbedder fit_embedder(const std::vector<MotionSequence>& corpus,
                             const EmbedderConfig& cfg,
                             double* holdout_mse = nullptr,
                             double* variance_baseline = nullptr);

// --- Frechet statistics ----------------------------------------------------

struct GaussianStats {
  Eigen::VectorXd mean;
  Mat covariance;
};

GaussianStats fit_gaussian(const Mat& features);  // rows = samples

// ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2)); the matrix square root
// comes from an eigendecomposition of sqrt(Sa) Sb sqrt(Sa), with tiny
// negative eigenvalues clamped at zero.
double frechet_distance(const GaussianStats& a, const GaussianStats& b);

// --- beat consistency ----------------------------------------------------

struct BeatConfig {
  double sigma_s = 0.1;       // Gaussian kernel width, seconds
  int nms_frames = 2;         // +- window for peak picking
  double flux_threshold = 3.0;  // multiple of the median flux
};

// Spectral-flux onset peaks, in seconds.
std::vector<double> audio_beat_times(const AudioClip& clip,
                                     const BeatConfig& cfg = {});
// Local minima of summed joint angular speed (central differences), seconds.
std::vector<double> motion_beat_times(const MotionSequence& seq,
                                      const BeatConfig& cfg = {});

// Mean Gaussian-kernel proximity of motion beats to the nearest audio beat.
// Throws NoBeats when either beat set is empty and LengthMismatch when the
// clips disagree on duration by more than one frame.
double beat_consistency(const AudioClip& audio, const MotionSequence& motion,
                        const BeatConfig& cfg = {});

// --- diversity & text overlap ------------------------------------------------

// Mean unnormalized l1 distance over up to pair_count random unordered
// pairs (all pairs when fewer exist).
double diversity(const std::vector<Eigen::VectorXd>& clips, int pair_count,
                 Rng& rng);

struct TextOverlap {
  double bleu1 = 0;    // unigram precision with brevity penalty, x100
  double rouge_l = 0;  // LCS F1, x100
};
TextOverlap text_overlap(const std::string& prediction, const std::string& reference);

// --- end-to-end evaluation ---------------------------------------------------

struct EvalConfig {
  BeatConfig beat;
  int diversity_pairs = 200;
  uint64_t seed = 0;
  bool emotion_task = true;
  int max_items = -1;  // cap on test items, -1 = all
};

struct EvalReport {
  double fgd = 0;
  double bc = 0;
  double diversity = 0;
  double bleu1 = 0;
  double rouge_l = 0;
  int n_items = 0;
  std::string config_hash;

  std::string to_json() const;  // includes the unavailable-BERTScore marker
  static EvalReport from_json(const std::string& text);
};

// Generates motion for each test clip's audio, decodes it, and scores FGD /
// BC / diversity against the ground truth; motion-to-emotion predictions are
// scored with text overlap. Throws VocabHashMismatch when the model was
// trained against a different vocabulary.
EvalReport eval_suite(SeqModel& model, const CodecSet& codecs,
                      const AcousticCodebook& acoustic, const UnifiedVocab& vocab,
                      const TemplateBank& bank, const FeatureEmbedder& embedder,
                      const std::vector<LoadedClip>& testset, const EvalConfig& cfg);

// Ground-truth self-evaluation: the "generated" set is the ground truth
// itself; FGD must vanish. Shares all scoring code with eval_suite.
EvalReport eval_ground_truth(const CodecSet& codecs, const UnifiedVocab& vocab,
                             const FeatureEmbedder& embedder,
                             const std::vector<LoadedClip>& testset,
                             const EvalConfig& cfg);

}  // namespace mlang
