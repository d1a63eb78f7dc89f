#include "mlang/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "mlang/blob.hpp"
#include "mlang/tasks.hpp"

namespace mlang {

using nn::Tensor;
using nlohmann::json;

// --- embedder -----------------------------------------------------------------

FeatureEmbedder::FeatureEmbedder(EmbedderConfig cfg, uint64_t seed) : cfg_(cfg) {
  Rng rng(seed);
  const int in = cfg_.window * kFullDim;
  auto linear = [&](const std::string& name, int out, int fan_in) {
    Tensor w = params_.add(name, {out, fan_in});
    nn::init_uniform(w, rng, -nn::fan_in_bound(fan_in), nn::fan_in_bound(fan_in));
    nn::init_zero(params_.add(name + ".b", {out}));
  };
  linear("enc.w1", cfg_.hidden, in);
  linear("enc.w2", cfg_.feature_dim, cfg_.hidden);
  linear("dec.w1", cfg_.hidden, cfg_.feature_dim);
  linear("dec.w2", in, cfg_.hidden);
  // Training-set mean; subtracted from inputs, never updated by gradients.
  nn::init_zero(params_.add("input_mean", {in}));
}

Tensor FeatureEmbedder::forward(const Mat& window, bool with_decoder) const {
  if (window.rows() != cfg_.window || window.cols() != kFullDim)
    throw ShapeMismatch("embedder window must be " + std::to_string(cfg_.window) +
                        " x " + std::to_string(kFullDim));
  Mat flat(1, window.size());
  int at = 0;
  for (Eigen::Index r = 0; r < window.rows(); ++r)
    for (Eigen::Index c = 0; c < window.cols(); ++c) flat(0, at++) = window(r, c);
  const auto mean = params_.find("input_mean");
  for (Eigen::Index c = 0; c < flat.cols(); ++c) flat(0, c) -= mean.value()[c];
  Tensor x = Tensor::constant(flat);
  Tensor h = nn::relu(nn::add_rowvec(nn::matmul_nt(x, params_.find("enc.w1")),
                                     params_.find("enc.w1.b")));
  Tensor code = nn::add_rowvec(nn::matmul_nt(h, params_.find("enc.w2")),
                               params_.find("enc.w2.b"));
  if (!with_decoder) return code;
  Tensor d = nn::relu(nn::add_rowvec(nn::matmul_nt(code, params_.find("dec.w1")),
                                     params_.find("dec.w1.b")));
  Tensor recon = nn::add_rowvec(nn::matmul_nt(d, params_.find("dec.w2")),
                                params_.find("dec.w2.b"));
  return nn::mean(nn::square(nn::sub(recon, x)));
}

Eigen::VectorXd FeatureEmbedder::embed(const Mat& window) const {
  nn::NoGrad ng;
  Tensor code = forward(window, false);
  return Eigen::Map<const Eigen::VectorXd>(code.value().data(), cfg_.feature_dim);
}

double FeatureEmbedder::reconstruction_error(const Mat& window) const {
  nn::NoGrad ng;
  return forward(window, true).item();
}

Mat FeatureEmbedder::embed_sequence(const MotionSequence& seq) const {
  const Mat merged = merge_parts(seq);
  std::vector<Mat> windows;
  const int t = int(merged.rows());
  if (t <= cfg_.window) {
    Mat w(cfg_.window, kFullDim);
    for (int f = 0; f < cfg_.window; ++f) w.row(f) = merged.row(std::min(f, t - 1));
    windows.push_back(std::move(w));
  } else {
    for (int start = 0; start + cfg_.window <= t; start += cfg_.stride)
      windows.push_back(merged.middleRows(start, cfg_.window));
  }
  Mat out(windows.size(), cfg_.feature_dim);
  for (size_t i = 0; i < windows.size(); ++i)
    out.row(Eigen::Index(i)) = embed(windows[i]).transpose();
  return out;
}

void FeatureEmbedder::save(const std::string& dir) {
  ensure_dir(dir);
  json j;
  j["kind"] = "feature_embedder";
  j["window"] = cfg_.window;
  j["stride"] = cfg_.stride;
  j["feature_dim"] = cfg_.feature_dim;
  j["hidden"] = cfg_.hidden;
  write_json_file(dir + "/config.json", j);
  save_params(dir, "params", params_);
}

FeatureEmbedder FeatureEmbedder::load(const std::string& dir) {
  json j = read_json_file(dir + "/config.json");
  if (!j.contains("kind") || j["kind"] != "feature_embedder")
    throw CorruptCheckpoint(dir + " is not an embedder checkpoint");
  EmbedderConfig cfg;
  cfg.window = j["window"].get<int>();
  cfg.stride = j["stride"].get<int>();
  cfg.feature_dim = j["feature_dim"].get<int>();
  cfg.hidden = j["hidden"].get<int>();
  FeatureEmbedder e(cfg, 0);
  load_params(dir, "params", e.params_);
  return e;
}

FeatureEmbedder fit_embedder(const std::vector<MotionSequence>& corpus,
                             const EmbedderConfig& cfg, double* holdout_mse,
                             double* variance_baseline) {
  std::vector<Mat> windows;
  for (const auto& seq : corpus) {
    const Mat merged = merge_parts(seq);
    for (int start = 0; start + cfg.window <= int(merged.rows());
         start += cfg.stride)
      windows.push_back(merged.middleRows(start, cfg.window));
  }
  if (int(windows.size()) < 100)
    throw InsufficientData("embedder needs >= 100 windows, got " +
                           std::to_string(windows.size()));

  // Shuffle before the split so the holdout spans clips.
  {
    Rng split_rng(cfg.seed ^ 0x5113ULL);
    split_rng.shuffle(windows);
  }
  const int nh = std::max(1, int(std::lround(double(windows.size()) * cfg.holdout_frac)));
  const int nt = int(windows.size()) - nh;

  FeatureEmbedder model(cfg, cfg.seed);
  {
    auto mean = model.params().find("input_mean");
    for (int i = 0; i < nt; ++i) {
      const Mat& w = windows[size_t(i)];
      Eigen::Index at = 0;
      for (Eigen::Index r = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c)
          mean.value()[at++] += w(r, c) / double(nt);
    }
    for (Eigen::Index c = 0; c < mean.numel(); ++c)
      mean.value()[c] = double(float(mean.value()[c]));
  }
  nn::AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.weight_decay = 1e-4;
  nn::AdamW opt(oc);
  Rng rng(cfg.seed ^ 0xe3bedULL);

  std::vector<int> order(static_cast<size_t>(nt));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t at = 0; at < order.size(); at += size_t(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), at + size_t(cfg.batch_size));
      model.params().zero_grad();
      for (size_t i = at; i < stop; ++i) {
        Tensor loss = model.forward(windows[size_t(order[i])], true);
        if (!std::isfinite(loss.item()))
          throw DivergedTraining("embedder loss became non-finite");
        nn::backward(nn::scale(loss, 1.0 / double(stop - at)));
      }
      opt.step(model.params());
    }
  }

  if (holdout_mse || variance_baseline) {
    double mse = 0, var = 0;
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(cfg.window * kFullDim);
    for (int i = nt; i < int(windows.size()); ++i) {
      const Mat& w = windows[size_t(i)];
      mean += Eigen::Map<const Eigen::RowVectorXd>(w.data(), w.size());
    }
    mean /= double(nh);
    for (int i = nt; i < int(windows.size()); ++i) {
      const Mat& w = windows[size_t(i)];
      mse += model.reconstruction_error(w);
      var += (Eigen::Map<const Eigen::RowVectorXd>(w.data(), w.size()) - mean)
                 .squaredNorm() /
             double(w.size());
    }
    if (holdout_mse) *holdout_mse = mse / nh;
    if (variance_baseline) *variance_baseline = var / nh;
  }
  return model;
}

// --- Frechet ---------------------------------------------------------------

GaussianStats fit_gaussian(const Mat& features) {
  GaussianStats g;
  const Eigen::Index n = features.rows(), d = features.cols();
  if (n < 1) throw InsufficientData("need at least one feature row");
  g.mean = features.colwise().mean().transpose();
  g.covariance = Mat::Zero(d, d);
  if (n > 1) {
    Mat centered = features.rowwise() - g.mean.transpose();
    g.covariance = centered.transpose() * centered / double(n - 1);
  }
  return g;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size() || a.covariance.rows() != b.covariance.rows())
    throw DimensionMismatch("Gaussian statistics disagree on dimension");
  const Eigen::Index d = a.mean.size();

  auto check_psd = [&](const Mat& cov) {
    Mat sym = (cov + cov.transpose()) / 2.0;
    Eigen::SelfAdjointEigenSolver<Mat> es(sym);
    const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    if (es.eigenvalues().minCoeff() < -1e-8 * scale)
      throw NotPSD("covariance has a negative eigenvalue beyond tolerance");
    return es;
  };

  auto es_a = check_psd(a.covariance);
  check_psd(b.covariance);

  // sqrt(Sa) via eigendecomposition, then the symmetrized product.
  Eigen::VectorXd la = es_a.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  Mat sqrt_a = es_a.eigenvectors() * la.asDiagonal() * es_a.eigenvectors().transpose();
  Mat m = sqrt_a * b.covariance * sqrt_a;
  m = (m + m.transpose()) / 2.0;
  Eigen::SelfAdjointEigenSolver<Mat> es_m(m);
  const double trace_sqrt = es_m.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  const double dist = (a.mean - b.mean).squaredNorm() + a.covariance.trace() +
                      b.covariance.trace() - 2.0 * trace_sqrt;
  (void)d;
  return std::max(0.0, dist);
}

// --- beats -----------------------------------------------------------------

std::vector<double> audio_beat_times(const AudioClip& clip, const BeatConfig& cfg) {
  const Mat feats = featurize(clip);  // frames x bands
  const int n = int(feats.rows());
  Eigen::VectorXd flux = Eigen::VectorXd::Zero(n);
  for (int i = 1; i < n; ++i)
    flux[i] = (feats.row(i) - feats.row(i - 1)).cwiseMax(0.0).sum();

  std::vector<double> sorted(flux.data(), flux.data() + n);
  std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
  const double threshold = cfg.flux_threshold * sorted[size_t(n) / 2] + 1e-9;

  std::vector<double> beats;
  const int w = cfg.nms_frames;
  for (int i = 1; i < n; ++i) {
    if (flux[i] <= threshold) continue;
    bool peak = true;
    for (int j = std::max(0, i - w); j <= std::min(n - 1, i + w); ++j) {
      if (j == i) continue;
      if (flux[j] > flux[i] || (flux[j] == flux[i] && j < i)) {
        peak = false;
        break;
      }
    }
    if (peak) beats.push_back(double(i) * kAudioHop / kAudioRate);
  }
  return beats;
}

std::vector<double> motion_beat_times(const MotionSequence& seq,
                                      const BeatConfig& cfg) {
  const int t = seq.frames();
  if (t < 3) return {};
  // Central-difference angular speed summed over the 52 skeletal joints; a
  // direction reversal on a beat frame gives an exact zero there.
  Eigen::VectorXd speed = Eigen::VectorXd::Zero(t);
  auto add_stream = [&](const Mat& stream, int joints) {
    for (int f = 1; f + 1 < t; ++f)
      for (int j = 0; j < joints; ++j) {
        // Model output can contain near-degenerate 6D blocks; skip them.
        try {
          Mat3 a =
              rot6d_to_matrix(Vec6(stream.block<1, 6>(f - 1, 6 * j).transpose()));
          Mat3 b =
              rot6d_to_matrix(Vec6(stream.block<1, 6>(f + 1, 6 * j).transpose()));
          speed[f] += geodesic_distance(a, b) * seq.fps / 2.0;
        } catch (const DegenerateRotation&) {
        }
      }
  };
  add_stream(seq.hands, kHandJoints);
  add_stream(seq.upper, kUpperJoints);
  add_stream(seq.lower, kLowerJoints);

  std::vector<double> beats;
  const int w = std::max(1, cfg.nms_frames);
  // Candidates keep a full comparison window away from the sweep edges; a
  // monotone tail otherwise reads as a spurious boundary minimum. Plateaus
  // carry float jitter, so ties use a relative tolerance and a minimum must
  // dip well below its surroundings.
  for (int f = 1 + w; f + 1 + w < t; ++f) {
    const int lo = f - w, hi = f + w;
    double wmax = 0;
    for (int g = lo; g <= hi; ++g) wmax = std::max(wmax, speed[g]);
    if (wmax <= 1e-9) continue;           // no motion in the window
    if (speed[f] > 0.5 * wmax) continue;  // not a prominent dip
    const double tol = 1e-9 * wmax;
    bool minimum = true;
    for (int g = lo; g <= hi; ++g) {
      if (g == f) continue;
      if (speed[g] < speed[f] - tol ||
          (std::abs(speed[g] - speed[f]) <= tol && g < f)) {
        minimum = false;
        break;
      }
    }
    if (minimum) beats.push_back(double(f) / seq.fps);
  }
  return beats;
}

double beat_consistency(const AudioClip& audio, const MotionSequence& motion,
                        const BeatConfig& cfg) {
  const double audio_s = audio.duration();
  const double motion_s = motion.frames() / motion.fps;
  if (std::abs(audio_s - motion_s) > 1.0 / motion.fps + 1e-9)
    throw LengthMismatch("audio and motion disagree on duration");
  const auto ab = audio_beat_times(audio, cfg);
  const auto mb = motion_beat_times(motion, cfg);
  if (ab.empty()) throw NoBeats("no audio beats detected");
  if (mb.empty()) throw NoBeats("no motion beats detected");
  double sum = 0;
  for (double m : mb) {
    double best = std::numeric_limits<double>::infinity();
    for (double a : ab) best = std::min(best, std::abs(m - a));
    sum += std::exp(-best * best / (2.0 * cfg.sigma_s * cfg.sigma_s));
  }
  return sum / double(mb.size());
}

// --- diversity ------------------------------------------------------------

double diversity(const std::vector<Eigen::VectorXd>& clips, int pair_count,
                 Rng& rng) {
  if (clips.size() < 2) throw TooFewClips("diversity needs at least two clips");
  for (const auto& c : clips)
    if (c.size() != clips[0].size())
      throw LengthMismatch("diversity clips must share a length");
  const int64_t n = int64_t(clips.size());
  const int64_t all_pairs = n * (n - 1) / 2;
  double sum = 0;
  if (all_pairs <= int64_t(pair_count)) {
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = i + 1; j < n; ++j)
        sum += (clips[size_t(i)] - clips[size_t(j)]).cwiseAbs().sum();
    return sum / double(all_pairs);
  }
  for (int p = 0; p < pair_count; ++p) {
    const int64_t i = int64_t(rng.below(uint64_t(n)));
    int64_t j = int64_t(rng.below(uint64_t(n - 1)));
    if (j >= i) ++j;
    sum += (clips[size_t(i)] - clips[size_t(j)]).cwiseAbs().sum();
  }
  return sum / double(pair_count);
}

// --- text overlap ---------------------------------------------------------

namespace {

std::vector<std::string> tokenize_words(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(char(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

TextOverlap text_overlap(const std::string& prediction, const std::string& reference) {
  const auto pred = tokenize_words(prediction);
  const auto ref = tokenize_words(reference);
  TextOverlap out;
  if (pred.empty() || ref.empty()) return out;

  // Clipped unigram precision with the standard brevity penalty.
  std::map<std::string, int> ref_counts;
  for (const auto& w : ref) ++ref_counts[w];
  int matched = 0;
  std::map<std::string, int> used;
  for (const auto& w : pred) {
    auto it = ref_counts.find(w);
    if (it != ref_counts.end() && used[w] < it->second) {
      ++used[w];
      ++matched;
    }
  }
  const double precision = double(matched) / double(pred.size());
  const double bp = pred.size() >= ref.size()
                        ? 1.0
                        : std::exp(1.0 - double(ref.size()) / double(pred.size()));
  out.bleu1 = 100.0 * bp * precision;

  // LCS F1.
  const size_t np = pred.size(), nr = ref.size();
  std::vector<std::vector<int>> lcs(np + 1, std::vector<int>(nr + 1, 0));
  for (size_t i = 1; i <= np; ++i)
    for (size_t j = 1; j <= nr; ++j)
      lcs[i][j] = pred[i - 1] == ref[j - 1]
                      ? lcs[i - 1][j - 1] + 1
                      : std::max(lcs[i - 1][j], lcs[i][j - 1]);
  const double l = lcs[np][nr];
  if (l > 0) {
    const double p = l / double(np), r = l / double(nr);
    out.rouge_l = 100.0 * 2.0 * p * r / (p + r);
  }
  return out;
}

// --- eval suite -----------------------------------------------------------

std::string EvalReport::to_json() const {
  json j;
  j["fgd"] = fgd;
  j["bc"] = bc;
  j["diversity"] = diversity;
  j["bleu1"] = bleu1;
  j["rouge_l"] = rouge_l;
  j["n_items"] = n_items;
  j["config_hash"] = config_hash;
  j["bertscore"] = "unavailable";  // needs an external pretrained model
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("report parse failure: ") + e.what());
  }
  EvalReport r;
  r.fgd = j["fgd"].get<double>();
  r.bc = j["bc"].get<double>();
  r.diversity = j["diversity"].get<double>();
  r.bleu1 = j["bleu1"].get<double>();
  r.rouge_l = j["rouge_l"].get<double>();
  r.n_items = j["n_items"].get<int>();
  r.config_hash = j["config_hash"].get<std::string>();
  return r;
}

namespace {

struct ScoredSet {
  std::vector<MotionSequence> generated;
  std::vector<MotionSequence> reference;
  std::vector<const AudioClip*> audio;
  std::vector<std::pair<std::string, std::string>> emotion_pairs;  // pred, ref
};

EvalReport score_set(const ScoredSet& set, const FeatureEmbedder& embedder,
                     const EvalConfig& cfg, const std::string& hash_seed) {
  EvalReport report;
  report.n_items = int(set.generated.size());

  std::vector<Mat> gen_feats, ref_feats;
  for (const auto& m : set.generated) gen_feats.push_back(embedder.embed_sequence(m));
  for (const auto& m : set.reference) ref_feats.push_back(embedder.embed_sequence(m));
  auto stack = [](const std::vector<Mat>& rows) {
    Eigen::Index total = 0;
    for (const auto& m : rows) total += m.rows();
    Mat out(total, rows.empty() ? 0 : rows[0].cols());
    Eigen::Index at = 0;
    for (const auto& m : rows) {
      out.middleRows(at, m.rows()) = m;
      at += m.rows();
    }
    return out;
  };
  report.fgd = frechet_distance(fit_gaussian(stack(ref_feats)),
                                fit_gaussian(stack(gen_feats)));

  double bc_sum = 0;
  int bc_n = 0;
  for (size_t i = 0; i < set.generated.size(); ++i) {
    try {
      bc_sum += beat_consistency(*set.audio[i], set.generated[i], cfg.beat);
      ++bc_n;
    } catch (const NoBeats&) {
      ++bc_n;  // silent or frozen generations score zero
    }
  }
  report.bc = bc_n ? bc_sum / bc_n : 0.0;

  // Diversity over pose matrices cropped to the shortest generated clip.
  int min_frames = std::numeric_limits<int>::max();
  for (const auto& m : set.generated) min_frames = std::min(min_frames, m.frames());
  std::vector<Eigen::VectorXd> flat;
  for (const auto& m : set.generated) {
    Mat merged = merge_parts(m).topRows(min_frames);
    flat.push_back(Eigen::Map<const Eigen::VectorXd>(merged.data(), merged.size()));
  }
  Rng rng(cfg.seed ^ 0xd1);
  report.diversity =
      set.generated.size() >= 2 ? diversity(flat, cfg.diversity_pairs, rng) : 0.0;

  if (!set.emotion_pairs.empty()) {
    double b = 0, r = 0;
    for (const auto& [pred, ref] : set.emotion_pairs) {
      TextOverlap o = text_overlap(pred, ref);
      b += o.bleu1;
      r += o.rouge_l;
    }
    report.bleu1 = b / double(set.emotion_pairs.size());
    report.rouge_l = r / double(set.emotion_pairs.size());
  }
  report.config_hash = fnv1a_hex(hash_seed + "|" + std::to_string(cfg.seed) + "|" +
                                 std::to_string(cfg.beat.sigma_s));
  return report;
}

// Extracts the first wrapped run of each motion part from generated ids;
// falls back to a flat stream of token zero when a part is missing.
MotionTokens parse_generated_motion(const UnifiedVocab& vocab,
                                    const std::vector<int>& ids, int fallback_steps) {
  MotionTokens out;
  auto part_of = [](Modality m) -> BodyPart {
    switch (m) {
      case Modality::face: return BodyPart::face;
      case Modality::hands: return BodyPart::hands;
      case Modality::upper: return BodyPart::upper;
      default: return BodyPart::lower;
    }
  };
  size_t at = 0;
  while (at < ids.size()) {
    if (!vocab.is_special(ids[at])) {
      ++at;
      continue;
    }
    const Modality m = vocab.modality_of(ids[at]);
    if (ids[at] != vocab.start_special(m) || m == Modality::text ||
        m == Modality::audio) {
      ++at;
      continue;
    }
    std::vector<int> locals;
    size_t j = at + 1;
    while (j < ids.size() && ids[j] != vocab.end_special(m)) {
      if (vocab.in_segment(ids[j], m)) locals.push_back(ids[j] - vocab.offset_of(m));
      ++j;
    }
    auto& dst = out.part(part_of(m));
    if (dst.empty()) dst = std::move(locals);
    at = j + 1;
  }
  for (BodyPart p :
       {BodyPart::face, BodyPart::hands, BodyPart::upper, BodyPart::lower})
    if (out.part(p).empty())
      out.part(p).assign(size_t(std::max(1, fallback_steps)), 0);
  return out;
}

}  // namespace

EvalReport eval_suite(SeqModel& model, const CodecSet& codecs,
                      const AcousticCodebook& acoustic, const UnifiedVocab& vocab,
                      const TemplateBank& bank, const FeatureEmbedder& embedder,
                      const std::vector<LoadedClip>& testset, const EvalConfig& cfg) {
  if (!model.config().vocab_hash.empty() && model.config().vocab_hash != vocab.hash)
    throw VocabHashMismatch("model was trained against a different vocabulary");

  ScoredSet set;
  Rng rng(cfg.seed);
  const int limit = cfg.max_items < 0
                        ? int(testset.size())
                        : std::min<int>(cfg.max_items, int(testset.size()));
  for (int i = 0; i < limit; ++i) {
    const LoadedClip& item = testset[size_t(i)];
    const auto audio_tokens = tokenize_audio(item.audio, acoustic);
    const int steps = int(codecs.tokenize_part(BodyPart::upper, item.motion).size());

    SlotMap slots;
    slots["audio"] = SlotValue::make_stream(Modality::audio, audio_tokens);
    std::vector<int> prompt =
        compile_prompt(vocab, bank, TaskKind::audio2motion, slots, rng, 0);

    DecodeConfig dc;
    dc.max_len = 4 * (steps + 2) + 8;
    std::vector<int> generated = model.generate(prompt, dc);
    MotionTokens tokens = parse_generated_motion(vocab, generated, steps);
    set.generated.push_back(codecs.decode(tokens.face, tokens.hands, tokens.upper,
                                          tokens.lower, item.motion.fps));
    set.reference.push_back(item.motion);
    set.audio.push_back(&item.audio);

    if (cfg.emotion_task) {
      MotionTokens gt;
      for (BodyPart p :
           {BodyPart::face, BodyPart::hands, BodyPart::upper, BodyPart::lower})
        gt.part(p) = codecs.tokenize_part(p, item.motion);
      SlotMap eslots;
      eslots["face"] = SlotValue::make_stream(Modality::face, gt.face);
      eslots["hands"] = SlotValue::make_stream(Modality::hands, gt.hands);
      eslots["upper"] = SlotValue::make_stream(Modality::upper, gt.upper);
      eslots["lower"] = SlotValue::make_stream(Modality::lower, gt.lower);
      std::vector<int> eprompt =
          compile_prompt(vocab, bank, TaskKind::motion2emotion, eslots, rng, 0);
      DecodeConfig edc;
      edc.max_len = 12;
      std::vector<int> eout = model.generate(eprompt, edc);
      std::vector<int> text_ids;
      for (int id : eout)
        if (id >= SubwordTokenizer::kNumSpecials && id < vocab.text.size())
          text_ids.push_back(id);
      set.emotion_pairs.emplace_back(decode_text(vocab.text, text_ids), item.emotion);
    }
  }
  return score_set(set, embedder, cfg, vocab.hash + "|model");
}

EvalReport eval_ground_truth(const CodecSet& codecs, const UnifiedVocab& vocab,
                             const FeatureEmbedder& embedder,
                             const std::vector<LoadedClip>& testset,
                             const EvalConfig& cfg) {
  ScoredSet set;
  const int limit = cfg.max_items < 0
                        ? int(testset.size())
                        : std::min<int>(cfg.max_items, int(testset.size()));
  for (int i = 0; i < limit; ++i) {
    const LoadedClip& item = testset[size_t(i)];
    set.generated.push_back(item.motion);
    set.reference.push_back(item.motion);
    set.audio.push_back(&item.audio);
    if (cfg.emotion_task) set.emotion_pairs.emplace_back(item.emotion, item.emotion);
  }
  (void)codecs;
  return score_set(set, embedder, cfg, vocab.hash + "|gt");
}

}  // namespace mlang
