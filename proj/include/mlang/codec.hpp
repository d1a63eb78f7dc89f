#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mlang/motion.hpp"
#include "mlang/nn.hpp"
#include "mlang/rng.hpp"

namespace mlang {

// A finite set of latent vectors with learned entries; the quantization
// target of the codec.
struct Codebook {
  int size = 256;
  int dim = 128;
  Mat entries;                        // size x dim
  std::vector<int64_t> usage_counts;  // per entry, maintained by training
};

// indices[t] = argmin_k ||z_t - entry_k||^2, ties broken by lowest index.
std::pair<std::vector<int>, Mat> quantize(const Codebook& codebook, const Mat& z);

struct VqLossReport {
  double rec = 0, vel = 0, acc = 0;
  double mrec = 0, mvel = 0, macc = 0;
  double comm = 0;
  double total = 0;  // unweighted sum of the seven components
};

struct CodecConfig {
  BodyPart part = BodyPart::upper;
  int codebook_size = 256;
  int latent_dim = 128;
  int hidden = 64;
  int downsample = 4;  // 1, 2 or 4
  double fps = 30.0;
  // Training-objective weights; the report itself is always unweighted.
  double w_rec = 1.0, w_vel = 1.0, w_acc = 1.0;
  double w_mrec = 1.0, w_mvel = 1.0, w_macc = 1.0;
  double w_comm = 0.25;      // commitment
  double w_codebook = 1.0;   // symmetric codebook pull

  int input_dim() const { return part_dim(part); }
};

// Per-body-part vector-quantized autoencoder: four-layer temporal
// convolutional encoder, codebook, mirrored decoder.
class PartCodec {
 public:
  PartCodec(CodecConfig cfg, uint64_t seed);

  const CodecConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  Codebook codebook() const;
  std::vector<int64_t>& usage_counts() { return usage_; }

  // frames x D -> ceil(frames/downsample) x latent_dim. Inputs whose length
  // is not a downsample multiple are padded by repeating the last frame.
  Mat encode(const Mat& part_seq) const;

  // steps -> (steps * downsample) x D.
  Mat decode(const std::vector<int>& indices) const;

  // Token stream for a part sequence: encode then quantize.
  std::vector<int> tokenize(const Mat& part_seq) const;

  // Differentiable training graph over one clip whose frame count is a
  // downsample multiple. Returns the weighted optimization objective and
  // fills the unweighted report; components_out receives the seven ledger
  // terms (rec, vel, acc, mrec, mvel, macc, comm) as live graph nodes.
  nn::Tensor loss_graph(const Mat& part_seq, const ProxySkeleton& skeleton,
                        VqLossReport* report, std::vector<int>* indices_out = nullptr,
                        std::vector<nn::Tensor>* components_out = nullptr);

  void save(const std::string& dir);
  static PartCodec load(const std::string& dir);

 private:
  nn::Tensor encode_graph(const Mat& part_seq) const;  // -> [steps, latent]
  nn::Tensor decode_graph(const nn::Tensor& latents_rows) const;  // -> [frames, D]

  CodecConfig cfg_;
  nn::ParamStore params_;
  nn::Tensor codebook_;
  std::vector<int64_t> usage_;

  friend struct CodecTrainer;
};

// Eq-style seven-term loss ledger computed from explicit inputs; the
// training path builds the same terms as a differentiable graph and the two
// routes are cross-checked in tests.
VqLossReport vq_loss(const PartCodec& codec, const Mat& g, const Mat& ghat,
                     const Mat& z, const Mat& q, const ProxySkeleton& skeleton);

struct TrainCodecConfig {
  int epochs = 50;
  int batch_size = 4;
  double lr = 2e-4;
  double weight_decay = 1e-4;
  uint64_t seed = 0;
  double holdout_frac = 0.1;
  bool reseed_dead_codes = true;
  // Stop once held-out total drops below this fraction of the initial
  // value; <= 0 trains all epochs. min_epochs keeps training long enough
  // for dead-code reseeding to spread codebook usage.
  double early_stop_ratio = 0.0;
  int min_epochs = 0;
  int log_every = 0;  // epochs; 0 = silent
};

struct CodecTrainReport {
  double initial_holdout = 0;
  double final_holdout = 0;
  double utilization = 0;  // fraction of codebook entries used
  std::vector<double> epoch_train_loss;
  std::vector<double> epoch_holdout_loss;
};

// Trains a fresh codec for one part on the part streams of `dataset`.
// Clips are cropped to downsample multiples. Throws EmptyDataset, TooShort
// and DivergedTraining per the operation contract.
PartCodec train_codec(const std::vector<MotionSequence>& dataset, BodyPart part,
                      const CodecConfig& cfg, const TrainCodecConfig& tc,
                      CodecTrainReport* report = nullptr);

// The four per-part codecs of one trained system.
struct CodecSet {
  std::vector<PartCodec> codecs;  // face, hands, upper, lower

  const PartCodec& of(BodyPart p) const { return codecs[size_t(int(p))]; }
  PartCodec& of(BodyPart p) { return codecs[size_t(int(p))]; }

  std::vector<int> tokenize_part(BodyPart p, const MotionSequence& seq) const {
    return of(p).tokenize(seq.part(p));
  }

  // Decodes four part token streams into a motion sequence (translation
  // zeroed, frame count = shortest decoded part).
  MotionSequence decode(const std::vector<int>& face, const std::vector<int>& hands,
                        const std::vector<int>& upper, const std::vector<int>& lower,
                        double fps = 30.0) const;

  void save(const std::string& dir) const;
  static CodecSet load(const std::string& dir);
};

// --- global translation prediction -----------------------------------------

struct TranslationConfig {
  int hidden = 32;
  int latent_dim = 8;
  double fps = 30.0;
  double kl_weight = 1e-4;
};

// Four-layer temporal convolutional variational regressor from the lower
// body stream to per-frame translation deltas, integrated over time.
class TranslationPredictor {
 public:
  TranslationPredictor(TranslationConfig cfg, uint64_t seed);

  const TranslationConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }

  // frames x 54 -> frames x 3 (translation relative to the first frame).
  Mat predict(const Mat& lower_seq) const;

  // ELBO-style objective: l2 reconstruction + kl_weight * KL.
  nn::Tensor loss_graph(const Mat& lower_seq, const Mat& target_translation,
                        Rng& noise, double* recon_out = nullptr);

  void save(const std::string& dir);
  static TranslationPredictor load(const std::string& dir);

 private:
  nn::Tensor backbone(const Mat& lower_seq, const Mat* noise) const;

  TranslationConfig cfg_;
  nn::ParamStore params_;
};

struct TranslationTrainReport {
  double initial_holdout = 0;
  double final_holdout = 0;
  double constant_baseline = 0;  // per-clip best-constant l2 on holdout
};

TranslationPredictor train_translation(const std::vector<MotionSequence>& dataset,
                                       const TranslationConfig& cfg,
                                       const TrainCodecConfig& tc,
                                       TranslationTrainReport* report = nullptr);

}  // namespace mlang
