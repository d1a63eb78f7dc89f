#include "mlang/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mlang/blob.hpp"

namespace mlang {

namespace fs = std::filesystem;
using nlohmann::json;

// --- artifact locations -----------------------------------------------------

std::string PipelineConfig::codec_dir(BodyPart part) const {
  return work_dir + "/codecs/" + part_name(part);
}
std::string PipelineConfig::translation_dir() const {
  return work_dir + "/codecs/translation";
}
std::string PipelineConfig::audio_codebook_dir() const {
  return work_dir + "/audio_codebook";
}
std::string PipelineConfig::tokenizer_path() const {
  return work_dir + "/tokenizer.json";
}
std::string PipelineConfig::vocab_path() const { return work_dir + "/vocab.json"; }
std::string PipelineConfig::pretrain_corpus_path() const {
  return work_dir + "/tasks_pretrain.jsonl";
}
std::string PipelineConfig::posttrain_corpus_path() const {
  return work_dir + "/tasks_posttrain.jsonl";
}
std::string PipelineConfig::pretrain_dir() const { return work_dir + "/lm_pretrain"; }
std::string PipelineConfig::posttrain_dir() const { return work_dir + "/lm_posttrain"; }
std::string PipelineConfig::embedder_dir() const { return work_dir + "/embedder"; }
std::string PipelineConfig::report_path() const { return work_dir + "/report.json"; }

// --- config -------------------------------------------------------------------

namespace {

void check_keys(const json& j, const std::vector<std::string>& allowed,
                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError("unknown config key '" + where + it.key() + "'");
  }
}

uint64_t salt(uint64_t seed, const std::string& tag) {
  uint64_t h = 1469598103934665603ULL ^ seed;
  for (char c : tag) {
    h ^= uint64_t(uint8_t(c));
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

PipelineConfig config_from_json(const json& j) {
  PipelineConfig cfg;
  check_keys(j, {"seed", "data_dir", "work_dir", "template_bank_path",
                 "eval_holdout_frac", "synth", "codec", "codec_train",
                 "translation", "text_vocab_size", "audio_codebook_size", "kmeans",
                 "model", "pretrain", "posttrain", "posttrain_from_scratch",
                 "tasks", "embedder", "eval"},
             "");
  cfg.seed = j.value("seed", uint64_t(0));
  cfg.data_dir = j.value("data_dir", cfg.data_dir);
  cfg.work_dir = j.value("work_dir", cfg.work_dir);
  cfg.template_bank_path = j.value("template_bank_path", cfg.template_bank_path);
  cfg.eval_holdout_frac = j.value("eval_holdout_frac", cfg.eval_holdout_frac);

  if (j.contains("synth")) {
    const json& s = j["synth"];
    check_keys(s, {"n", "min_duration_s", "max_duration_s", "min_bpm", "max_bpm",
                   "emotion_probs", "locomotion_prob"},
               "synth.");
    cfg.synth.n = s.value("n", cfg.synth.n);
    cfg.synth.min_duration_s = s.value("min_duration_s", cfg.synth.min_duration_s);
    cfg.synth.max_duration_s = s.value("max_duration_s", cfg.synth.max_duration_s);
    cfg.synth.min_bpm = s.value("min_bpm", cfg.synth.min_bpm);
    cfg.synth.max_bpm = s.value("max_bpm", cfg.synth.max_bpm);
    cfg.synth.locomotion_prob = s.value("locomotion_prob", cfg.synth.locomotion_prob);
    if (s.contains("emotion_probs")) {
      auto p = s["emotion_probs"].get<std::vector<double>>();
      if (p.size() != 8) throw ConfigError("emotion_probs needs 8 entries");
      std::copy(p.begin(), p.end(), cfg.synth.emotion_probs.begin());
    }
  }
  if (j.contains("codec")) {
    const json& c = j["codec"];
    check_keys(c, {"codebook_size", "latent_dim", "hidden", "downsample", "fps",
                   "w_rec", "w_vel", "w_acc", "w_mrec", "w_mvel", "w_macc",
                   "w_comm", "w_codebook"},
               "codec.");
    cfg.codec.codebook_size = c.value("codebook_size", cfg.codec.codebook_size);
    cfg.codec.latent_dim = c.value("latent_dim", cfg.codec.latent_dim);
    cfg.codec.hidden = c.value("hidden", cfg.codec.hidden);
    cfg.codec.downsample = c.value("downsample", cfg.codec.downsample);
    cfg.codec.fps = c.value("fps", cfg.codec.fps);
    cfg.codec.w_rec = c.value("w_rec", cfg.codec.w_rec);
    cfg.codec.w_vel = c.value("w_vel", cfg.codec.w_vel);
    cfg.codec.w_acc = c.value("w_acc", cfg.codec.w_acc);
    cfg.codec.w_mrec = c.value("w_mrec", cfg.codec.w_mrec);
    cfg.codec.w_mvel = c.value("w_mvel", cfg.codec.w_mvel);
    cfg.codec.w_macc = c.value("w_macc", cfg.codec.w_macc);
    cfg.codec.w_comm = c.value("w_comm", cfg.codec.w_comm);
    cfg.codec.w_codebook = c.value("w_codebook", cfg.codec.w_codebook);
  }
  if (j.contains("codec_train")) {
    const json& c = j["codec_train"];
    check_keys(c, {"epochs", "batch_size", "lr", "weight_decay", "holdout_frac",
                   "reseed_dead_codes", "early_stop_ratio", "min_epochs",
                   "log_every"},
               "codec_train.");
    cfg.codec_train.epochs = c.value("epochs", cfg.codec_train.epochs);
    cfg.codec_train.batch_size = c.value("batch_size", cfg.codec_train.batch_size);
    cfg.codec_train.lr = c.value("lr", cfg.codec_train.lr);
    cfg.codec_train.weight_decay = c.value("weight_decay", cfg.codec_train.weight_decay);
    cfg.codec_train.holdout_frac = c.value("holdout_frac", cfg.codec_train.holdout_frac);
    cfg.codec_train.reseed_dead_codes =
        c.value("reseed_dead_codes", cfg.codec_train.reseed_dead_codes);
    cfg.codec_train.early_stop_ratio =
        c.value("early_stop_ratio", cfg.codec_train.early_stop_ratio);
    cfg.codec_train.min_epochs = c.value("min_epochs", cfg.codec_train.min_epochs);
    cfg.codec_train.log_every = c.value("log_every", cfg.codec_train.log_every);
  }
  if (j.contains("translation")) {
    const json& c = j["translation"];
    check_keys(c, {"hidden", "latent_dim", "kl_weight"}, "translation.");
    cfg.translation.hidden = c.value("hidden", cfg.translation.hidden);
    cfg.translation.latent_dim = c.value("latent_dim", cfg.translation.latent_dim);
    cfg.translation.kl_weight = c.value("kl_weight", cfg.translation.kl_weight);
  }
  cfg.text_vocab_size = j.value("text_vocab_size", cfg.text_vocab_size);
  cfg.audio_codebook_size = j.value("audio_codebook_size", cfg.audio_codebook_size);
  if (j.contains("kmeans")) {
    check_keys(j["kmeans"], {"iterations"}, "kmeans.");
    cfg.kmeans.iterations = j["kmeans"].value("iterations", cfg.kmeans.iterations);
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, {"enc_layers", "dec_layers", "width", "heads", "ff_mult",
                   "max_input", "max_output", "rel_buckets", "rel_max_distance"},
               "model.");
    cfg.model.enc_layers = m.value("enc_layers", cfg.model.enc_layers);
    cfg.model.dec_layers = m.value("dec_layers", cfg.model.dec_layers);
    cfg.model.width = m.value("width", cfg.model.width);
    cfg.model.heads = m.value("heads", cfg.model.heads);
    cfg.model.ff_mult = m.value("ff_mult", cfg.model.ff_mult);
    cfg.model.max_input = m.value("max_input", cfg.model.max_input);
    cfg.model.max_output = m.value("max_output", cfg.model.max_output);
    cfg.model.rel_buckets = m.value("rel_buckets", cfg.model.rel_buckets);
    cfg.model.rel_max_distance =
        m.value("rel_max_distance", cfg.model.rel_max_distance);
  }
  auto read_train = [&](const char* key, TrainLmConfig& t) {
    if (!j.contains(key)) return;
    const json& c = j[key];
    check_keys(c, {"epochs", "batch_size", "lr", "weight_decay", "clip_norm",
                   "checkpoint_every", "log_every"},
               std::string(key) + ".");
    t.epochs = c.value("epochs", t.epochs);
    t.batch_size = c.value("batch_size", t.batch_size);
    t.lr = c.value("lr", t.lr);
    t.weight_decay = c.value("weight_decay", t.weight_decay);
    t.clip_norm = c.value("clip_norm", t.clip_norm);
    t.checkpoint_every = c.value("checkpoint_every", t.checkpoint_every);
    t.log_every = c.value("log_every", t.log_every);
  };
  // Supplement schedule defaults: pre-training lr 2e-4; post-training lr
  // 1e-4 for a fixed 350 epochs.
  cfg.pretrain.lr = 2e-4;
  cfg.pretrain.epochs = 50;
  cfg.posttrain.lr = 1e-4;
  cfg.posttrain.epochs = 350;
  read_train("pretrain", cfg.pretrain);
  read_train("posttrain", cfg.posttrain);
  cfg.posttrain_from_scratch =
      j.value("posttrain_from_scratch", cfg.posttrain_from_scratch);
  if (j.contains("tasks")) {
    const json& t = j["tasks"];
    check_keys(t, {"spatial_per_clip", "temporal_per_clip", "audio_text_per_clip",
                   "mask_ratio_lo", "mask_ratio_hi", "posttrain_fraction",
                   "include_text2audio"},
               "tasks.");
    cfg.tasks.spatial_per_clip = t.value("spatial_per_clip", cfg.tasks.spatial_per_clip);
    cfg.tasks.temporal_per_clip =
        t.value("temporal_per_clip", cfg.tasks.temporal_per_clip);
    cfg.tasks.audio_text_per_clip =
        t.value("audio_text_per_clip", cfg.tasks.audio_text_per_clip);
    cfg.tasks.mask_ratio_lo = t.value("mask_ratio_lo", cfg.tasks.mask_ratio_lo);
    cfg.tasks.mask_ratio_hi = t.value("mask_ratio_hi", cfg.tasks.mask_ratio_hi);
    cfg.tasks.posttrain_fraction =
        t.value("posttrain_fraction", cfg.tasks.posttrain_fraction);
    cfg.tasks.include_text2audio =
        t.value("include_text2audio", cfg.tasks.include_text2audio);
  }
  if (j.contains("embedder")) {
    const json& e = j["embedder"];
    check_keys(e, {"window", "stride", "feature_dim", "hidden", "epochs",
                   "batch_size", "lr"},
               "embedder.");
    cfg.embedder.window = e.value("window", cfg.embedder.window);
    cfg.embedder.stride = e.value("stride", cfg.embedder.stride);
    cfg.embedder.feature_dim = e.value("feature_dim", cfg.embedder.feature_dim);
    cfg.embedder.hidden = e.value("hidden", cfg.embedder.hidden);
    cfg.embedder.epochs = e.value("epochs", cfg.embedder.epochs);
    cfg.embedder.batch_size = e.value("batch_size", cfg.embedder.batch_size);
    cfg.embedder.lr = e.value("lr", cfg.embedder.lr);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    check_keys(e, {"sigma_bc", "diversity_pairs", "emotion_task", "max_items"},
               "eval.");
    cfg.eval.beat.sigma_s = e.value("sigma_bc", cfg.eval.beat.sigma_s);
    cfg.eval.diversity_pairs = e.value("diversity_pairs", cfg.eval.diversity_pairs);
    cfg.eval.emotion_task = e.value("emotion_task", cfg.eval.emotion_task);
    cfg.eval.max_items = e.value("max_items", cfg.eval.max_items);
  }
  return cfg;
}

json config_to_json(const PipelineConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["data_dir"] = c.data_dir;
  j["work_dir"] = c.work_dir;
  j["template_bank_path"] = c.template_bank_path;
  j["eval_holdout_frac"] = c.eval_holdout_frac;
  j["synth"] = {{"n", c.synth.n},
                {"min_duration_s", c.synth.min_duration_s},
                {"max_duration_s", c.synth.max_duration_s},
                {"min_bpm", c.synth.min_bpm},
                {"max_bpm", c.synth.max_bpm},
                {"emotion_probs", c.synth.emotion_probs},
                {"locomotion_prob", c.synth.locomotion_prob}};
  j["codec"] = {{"codebook_size", c.codec.codebook_size},
                {"latent_dim", c.codec.latent_dim},
                {"hidden", c.codec.hidden},
                {"downsample", c.codec.downsample},
                {"fps", c.codec.fps},
                {"w_rec", c.codec.w_rec},
                {"w_vel", c.codec.w_vel},
                {"w_acc", c.codec.w_acc},
                {"w_mrec", c.codec.w_mrec},
                {"w_mvel", c.codec.w_mvel},
                {"w_macc", c.codec.w_macc},
                {"w_comm", c.codec.w_comm},
                {"w_codebook", c.codec.w_codebook}};
  j["codec_train"] = {{"epochs", c.codec_train.epochs},
                      {"batch_size", c.codec_train.batch_size},
                      {"lr", c.codec_train.lr},
                      {"weight_decay", c.codec_train.weight_decay},
                      {"holdout_frac", c.codec_train.holdout_frac},
                      {"reseed_dead_codes", c.codec_train.reseed_dead_codes},
                      {"early_stop_ratio", c.codec_train.early_stop_ratio},
                      {"min_epochs", c.codec_train.min_epochs},
                      {"log_every", c.codec_train.log_every}};
  j["translation"] = {{"hidden", c.translation.hidden},
                      {"latent_dim", c.translation.latent_dim},
                      {"kl_weight", c.translation.kl_weight}};
  j["text_vocab_size"] = c.text_vocab_size;
  j["audio_codebook_size"] = c.audio_codebook_size;
  j["kmeans"] = {{"iterations", c.kmeans.iterations}};
  j["model"] = {{"enc_layers", c.model.enc_layers},
                {"dec_layers", c.model.dec_layers},
                {"width", c.model.width},
                {"heads", c.model.heads},
                {"ff_mult", c.model.ff_mult},
                {"max_input", c.model.max_input},
                {"max_output", c.model.max_output},
                {"rel_buckets", c.model.rel_buckets},
                {"rel_max_distance", c.model.rel_max_distance}};
  auto train_json = [](const TrainLmConfig& t) {
    return json{{"epochs", t.epochs},       {"batch_size", t.batch_size},
                {"lr", t.lr},               {"weight_decay", t.weight_decay},
                {"clip_norm", t.clip_norm}, {"checkpoint_every", t.checkpoint_every},
                {"log_every", t.log_every}};
  };
  j["pretrain"] = train_json(c.pretrain);
  j["posttrain"] = train_json(c.posttrain);
  j["posttrain_from_scratch"] = c.posttrain_from_scratch;
  j["tasks"] = {{"spatial_per_clip", c.tasks.spatial_per_clip},
                {"temporal_per_clip", c.tasks.temporal_per_clip},
                {"audio_text_per_clip", c.tasks.audio_text_per_clip},
                {"mask_ratio_lo", c.tasks.mask_ratio_lo},
                {"mask_ratio_hi", c.tasks.mask_ratio_hi},
                {"posttrain_fraction", c.tasks.posttrain_fraction},
                {"include_text2audio", c.tasks.include_text2audio}};
  j["embedder"] = {{"window", c.embedder.window},
                   {"stride", c.embedder.stride},
                   {"feature_dim", c.embedder.feature_dim},
                   {"hidden", c.embedder.hidden},
                   {"epochs", c.embedder.epochs},
                   {"batch_size", c.embedder.batch_size},
                   {"lr", c.embedder.lr}};
  j["eval"] = {{"sigma_bc", c.eval.beat.sigma_s},
               {"diversity_pairs", c.eval.diversity_pairs},
               {"emotion_task", c.eval.emotion_task},
               {"max_items", c.eval.max_items}};
  return j;
}

std::string config_hash(const PipelineConfig& cfg) {
  return fnv1a_hex(config_to_json(cfg).dump());
}

void apply_override(json& j, const std::string& entry) {
  const auto eq = entry.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + entry + "' is not key=value");
  const std::string path = entry.substr(0, eq);
  const std::string raw = entry.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;  // unquoted strings
  }
  json* at = &j;
  size_t start = 0;
  while (true) {
    const size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("override path has an empty segment");
    if (dot == std::string::npos) {
      (*at)[key] = value;
      return;
    }
    at = &(*at)[key];
    start = dot + 1;
  }
}

// --- shared loaders ---------------------------------------------------------

namespace {

void require_artifact(const std::string& path, const std::string& what) {
  if (!fs::exists(path))
    throw MissingArtifact(what + " missing at " + path +
                          " (run the producing command first)");
}

void write_provenance(const std::string& dir, const std::string& command,
                      const PipelineConfig& cfg) {
  ensure_dir(dir);
  write_json_file(dir + "/provenance.json",
                  json{{"command", command},
                       {"config_hash", config_hash(cfg)},
                       {"seed", cfg.seed}});
}

void write_file_provenance(const std::string& file, const std::string& command,
                           const PipelineConfig& cfg) {
  write_json_file(file + ".provenance.json",
                  json{{"command", command},
                       {"config_hash", config_hash(cfg)},
                       {"seed", cfg.seed}});
}

UnifiedVocab load_vocab_checked(const PipelineConfig& cfg) {
  require_artifact(cfg.vocab_path(), "vocabulary manifest");
  return UnifiedVocab::load(cfg.vocab_path());
}

CodecSet load_codecs_checked(const PipelineConfig& cfg) {
  for (BodyPart p :
       {BodyPart::face, BodyPart::hands, BodyPart::upper, BodyPart::lower})
    require_artifact(cfg.codec_dir(p) + "/config.json",
                     std::string(part_name(p)) + " codec checkpoint");
  return CodecSet::load(cfg.work_dir + "/codecs");
}

AcousticCodebook load_acoustic_checked(const PipelineConfig& cfg) {
  require_artifact(cfg.audio_codebook_dir() + "/config.json", "acoustic codebook");
  return AcousticCodebook::load(cfg.audio_codebook_dir());
}

TemplateBank load_bank(const PipelineConfig& cfg) {
  if (cfg.template_bank_path.empty()) return default_template_bank();
  require_artifact(cfg.template_bank_path, "template bank");
  return load_template_bank(cfg.template_bank_path);
}

MotionTokens tokenize_clip(const CodecSet& codecs, const MotionSequence& motion) {
  MotionTokens t;
  for (BodyPart p :
       {BodyPart::face, BodyPart::hands, BodyPart::upper, BodyPart::lower})
    t.part(p) = codecs.tokenize_part(p, motion);
  return t;
}

SlotMap motion_slots(const MotionTokens& t) {
  SlotMap slots;
  slots["face"] = SlotValue::make_stream(Modality::face, t.face);
  slots["hands"] = SlotValue::make_stream(Modality::hands, t.hands);
  slots["upper"] = SlotValue::make_stream(Modality::upper, t.upper);
  slots["lower"] = SlotValue::make_stream(Modality::lower, t.lower);
  return slots;
}

// First wrapped run per motion part in a generated stream.
MotionTokens parse_parts(const UnifiedVocab& vocab, const std::vector<int>& ids,
                         int fallback_steps) {
  MotionTokens out;
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
    BodyPart p = m == Modality::face    ? BodyPart::face
                 : m == Modality::hands ? BodyPart::hands
                 : m == Modality::upper ? BodyPart::upper
                                        : BodyPart::lower;
    if (out.part(p).empty() && !locals.empty()) out.part(p) = std::move(locals);
    at = j + 1;
  }
  for (BodyPart p :
       {BodyPart::face, BodyPart::hands, BodyPart::upper, BodyPart::lower})
    if (out.part(p).empty())
      out.part(p).assign(size_t(std::max(1, fallback_steps)), 0);
  return out;
}

std::string flag_or(const std::map<std::string, std::string>& flags,
                    const std::string& key, const std::string& fallback) {
  auto it = flags.find(key);
  return it == flags.end() ? fallback : it->second;
}

}  // namespace

CorpusSplit load_split_corpus(const PipelineConfig& cfg) {
  require_artifact(cfg.data_dir + "/index.json", "synthetic corpus");
  auto clips = load_corpus(cfg.data_dir);
  CorpusSplit split;
  const int n_eval = std::min<int>(
      int(clips.size()) - 1,
      std::max(1, int(std::ceil(double(clips.size()) * cfg.eval_holdout_frac))));
  const int n_train = int(clips.size()) - n_eval;
  for (int i = 0; i < int(clips.size()); ++i)
    (i < n_train ? split.train : split.eval).push_back(std::move(clips[size_t(i)]));
  return split;
}

// --- commands ----------------------------------------------------------------

namespace {

CommandResult cmd_synth_data(const PipelineConfig& cfg) {
  SynthCorpusConfig sc = cfg.synth;
  sc.seed = cfg.seed;
  auto items = synth_corpus(sc, cfg.data_dir);
  write_provenance(cfg.data_dir, "synth-data", cfg);
  return {kExitOk, json{{"clips", items.size()}, {"dir", cfg.data_dir}}};
}

CommandResult cmd_codec_train(const PipelineConfig& cfg, const std::string& part) {
  CorpusSplit split = load_split_corpus(cfg);
  std::vector<MotionSequence> motions;
  for (auto& c : split.train) motions.push_back(c.motion);

  if (part == "translation") {
    TrainCodecConfig tc = cfg.codec_train;
    tc.seed = salt(cfg.seed, "translation");
    TranslationConfig trc = cfg.translation;
    trc.fps = cfg.codec.fps;
    TranslationTrainReport rep;
    TranslationPredictor model = train_translation(motions, trc, tc, &rep);
    model.save(cfg.translation_dir());
    write_provenance(cfg.translation_dir(), "codec-train", cfg);
    return {kExitOk, json{{"part", "translation"},
                          {"initial_holdout", rep.initial_holdout},
                          {"final_holdout", rep.final_holdout},
                          {"constant_baseline", rep.constant_baseline}}};
  }

  const BodyPart p = part_from_name(part);
  TrainCodecConfig tc = cfg.codec_train;
  tc.seed = salt(cfg.seed, part);
  CodecTrainReport rep;
  PartCodec codec = train_codec(motions, p, cfg.codec, tc, &rep);
  codec.save(cfg.codec_dir(p));
  write_provenance(cfg.codec_dir(p), "codec-train", cfg);
  return {kExitOk, json{{"part", part},
                        {"initial_holdout", rep.initial_holdout},
                        {"final_holdout", rep.final_holdout},
                        {"utilization", rep.utilization},
                        {"epochs_run", rep.epoch_holdout_loss.size()}}};
}

CommandResult cmd_audio_fit(const PipelineConfig& cfg) {
  CorpusSplit split = load_split_corpus(cfg);
  std::vector<Mat> feats;
  Eigen::Index rows = 0;
  for (auto& c : split.train) {
    feats.push_back(featurize(c.audio));
    rows += feats.back().rows();
  }
  Mat all(rows, kMelBands);
  Eigen::Index at = 0;
  for (auto& f : feats) {
    all.middleRows(at, f.rows()) = f;
    at += f.rows();
  }
  // Deterministic stride subsample keeps k-means tractable on big corpora.
  const Eigen::Index cap = 20000;
  Mat sample = all;
  if (all.rows() > cap) {
    const Eigen::Index stride = (all.rows() + cap - 1) / cap;
    sample = Mat((all.rows() + stride - 1) / stride, kMelBands);
    Eigen::Index out = 0;
    for (Eigen::Index i = 0; i < all.rows(); i += stride) sample.row(out++) = all.row(i);
    sample.conservativeResize(out, kMelBands);
  }
  KMeansConfig kc = cfg.kmeans;
  kc.seed = salt(cfg.seed, "audio-fit");
  AcousticCodebook cb = fit_acoustic_codebook(sample, cfg.audio_codebook_size, kc);
  cb.save(cfg.audio_codebook_dir());
  write_provenance(cfg.audio_codebook_dir(), "audio-fit", cfg);
  return {kExitOk, json{{"frames", sample.rows()},
                        {"codebook_size", cb.size},
                        {"distortion", codebook_distortion(cb, sample)}}};
}

CommandResult cmd_text_train(const PipelineConfig& cfg) {
  CorpusSplit split = load_split_corpus(cfg);
  std::vector<std::string> texts;
  for (auto& c : split.train) texts.push_back(c.transcript);
  TemplateBank bank = load_bank(cfg);
  for (const auto& [kind, templates] : bank.templates)
    for (const auto& t : templates) texts.push_back(t.prompt);
  for (const auto& label : kEmotionLabels) texts.push_back(label);
  texts.push_back("Translate audio to text.");
  texts.push_back("Translate text to audio.");
  SubwordTokenizer tok = train_subword(texts, cfg.text_vocab_size);
  ensure_dir(cfg.work_dir);
  tok.save(cfg.tokenizer_path());
  write_file_provenance(cfg.tokenizer_path(), "text-train", cfg);
  return {kExitOk, json{{"vocab_size", tok.size()},
                        {"merges", tok.merges.size()}}};
}

CommandResult cmd_vocab_build(const PipelineConfig& cfg) {
  require_artifact(cfg.tokenizer_path(), "text tokenizer");
  SubwordTokenizer tok = SubwordTokenizer::load(cfg.tokenizer_path());
  CodecSet codecs = load_codecs_checked(cfg);
  AcousticCodebook acb = load_acoustic_checked(cfg);
  UnifiedVocab vocab = build_vocab(
      tok, acb.size, codecs.of(BodyPart::face).config().codebook_size,
      codecs.of(BodyPart::hands).config().codebook_size,
      codecs.of(BodyPart::upper).config().codebook_size,
      codecs.of(BodyPart::lower).config().codebook_size);
  vocab.save(cfg.vocab_path());
  write_file_provenance(cfg.vocab_path(), "vocab-build", cfg);
  return {kExitOk, json{{"total_size", vocab.total_size}, {"hash", vocab.hash}}};
}

CommandResult cmd_tasks_compile(const PipelineConfig& cfg, const std::string& stage) {
  UnifiedVocab vocab = load_vocab_checked(cfg);
  CodecSet codecs = load_codecs_checked(cfg);
  AcousticCodebook acb = load_acoustic_checked(cfg);
  CorpusSplit split = load_split_corpus(cfg);
  TemplateBank bank = load_bank(cfg);
  Rng rng(salt(cfg.seed, "tasks-" + stage));

  std::vector<TaskSample> samples;
  if (stage == "pretrain") {
    for (auto& clip : split.train) {
      MotionTokens tokens = tokenize_clip(codecs, clip.motion);
      const auto audio_tokens = tokenize_audio(clip.audio, acb);
      for (int i = 0; i < cfg.tasks.spatial_per_clip; ++i)
        samples.push_back(make_spatial_task(vocab, tokens, rng));
      for (int i = 0; i < cfg.tasks.temporal_per_clip; ++i) {
        const double ratio =
            rng.uniform(cfg.tasks.mask_ratio_lo, cfg.tasks.mask_ratio_hi);
        samples.push_back(make_temporal_task(vocab, tokens, ratio, rng));
      }
      for (int i = 0; i < cfg.tasks.audio_text_per_clip; ++i)
        samples.push_back(make_audio_text_task(
            vocab, audio_tokens, clip.transcript,
            cfg.tasks.include_text2audio ? AudioTextDirection::random
                                         : AudioTextDirection::audio2text,
            rng));
    }
    write_corpus(samples, vocab, cfg.pretrain_corpus_path());
    write_file_provenance(cfg.pretrain_corpus_path(), "tasks-compile", cfg);
  } else if (stage == "posttrain") {
    const int used = std::max(
        1, int(std::lround(double(split.train.size()) * cfg.tasks.posttrain_fraction)));
    for (int ci = 0; ci < used; ++ci) {
      auto& clip = split.train[size_t(ci)];
      MotionTokens tokens = tokenize_clip(codecs, clip.motion);
      const auto audio_tokens = tokenize_audio(clip.audio, acb);
      SlotMap slots = motion_slots(tokens);
      slots["audio"] = SlotValue::make_stream(Modality::audio, audio_tokens);
      slots["caption"] = SlotValue::make_text(clip.transcript);
      slots["emotion"] = SlotValue::make_text(clip.emotion);

      samples.push_back(
          compile_instruction(vocab, bank, TaskKind::audio2motion, slots, rng));
      samples.push_back(
          compile_instruction(vocab, bank, TaskKind::audio2part, slots, rng));
      samples.push_back(
          compile_instruction(vocab, bank, TaskKind::text2motion, slots, rng));
      samples.push_back(
          compile_instruction(vocab, bank, TaskKind::text2part, slots, rng));
      samples.push_back(
          compile_instruction(vocab, bank, TaskKind::emotion2motion, slots, rng));
      samples.push_back(
          compile_instruction(vocab, bank, TaskKind::motion2emotion, slots, rng));
      samples.push_back(
          compile_instruction(vocab, bank, TaskKind::motion2text, slots, rng));
      samples.push_back(
          compile_instruction(vocab, bank, TaskKind::audio2text, slots, rng));
      if (cfg.tasks.include_text2audio)
        samples.push_back(
            compile_instruction(vocab, bank, TaskKind::text2audio, slots, rng));
    }
    write_corpus(samples, vocab, cfg.posttrain_corpus_path());
    write_file_provenance(cfg.posttrain_corpus_path(), "tasks-compile", cfg);
  } else {
    throw ConfigError("tasks-compile stage must be pretrain or posttrain");
  }
  return {kExitOk, json{{"stage", stage}, {"samples", samples.size()}}};
}

SeqModel fresh_model(const PipelineConfig& cfg, const UnifiedVocab& vocab) {
  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.total_size;
  mc.vocab_hash = vocab.hash;
  return SeqModel(mc, salt(cfg.seed, "model"));
}

CommandResult cmd_pretrain(const PipelineConfig& cfg) {
  UnifiedVocab vocab = load_vocab_checked(cfg);
  require_artifact(cfg.pretrain_corpus_path(), "pre-training corpus");
  auto samples = read_corpus(cfg.pretrain_corpus_path(), vocab);
  SeqModel model = fresh_model(cfg, vocab);
  TrainLmConfig tc = cfg.pretrain;
  tc.seed = salt(cfg.seed, "pretrain");
  tc.checkpoint_dir = cfg.pretrain_dir();
  tc.metrics_csv = cfg.pretrain_dir() + "/metrics.csv";
  ensure_dir(cfg.pretrain_dir());
  LmTrainReport rep;
  train_lm(model, samples, tc, nullptr, &rep);
  write_provenance(cfg.pretrain_dir(), "pretrain", cfg);
  return {kExitOk, json{{"samples", samples.size()},
                        {"initial_loss", rep.initial_loss},
                        {"final_loss", rep.final_loss}}};
}

CommandResult cmd_posttrain(const PipelineConfig& cfg) {
  UnifiedVocab vocab = load_vocab_checked(cfg);
  require_artifact(cfg.posttrain_corpus_path(), "post-training corpus");
  auto samples = read_corpus(cfg.posttrain_corpus_path(), vocab);

  SeqModel model = [&] {
    if (cfg.posttrain_from_scratch) return fresh_model(cfg, vocab);
    require_artifact(cfg.pretrain_dir() + "/final/config.json",
                     "pre-trained checkpoint");
    SeqModel m = SeqModel::load(cfg.pretrain_dir() + "/final");
    if (m.config().vocab_hash != vocab.hash)
      throw VocabHashMismatch("pre-trained checkpoint built on another vocabulary");
    return m;
  }();
  model.set_step_count(0);

  TrainLmConfig tc = cfg.posttrain;
  tc.seed = salt(cfg.seed, "posttrain");
  tc.checkpoint_dir = cfg.posttrain_dir();
  tc.metrics_csv = cfg.posttrain_dir() + "/metrics.csv";
  ensure_dir(cfg.posttrain_dir());
  LmTrainReport rep;
  train_lm(model, samples, tc, nullptr, &rep);
  write_provenance(cfg.posttrain_dir(), "posttrain", cfg);
  return {kExitOk, json{{"samples", samples.size()},
                        {"initial_loss", rep.initial_loss},
                        {"final_loss", rep.final_loss},
                        {"from_scratch", cfg.posttrain_from_scratch}}};
}

MotionSequence finish_motion(const PipelineConfig& cfg, const CodecSet& codecs,
                             const MotionTokens& tokens) {
  MotionSequence seq = codecs.decode(tokens.face, tokens.hands, tokens.upper,
                                     tokens.lower, cfg.codec.fps);
  if (fs::exists(cfg.translation_dir() + "/config.json")) {
    TranslationPredictor tp = TranslationPredictor::load(cfg.translation_dir());
    seq.translation = tp.predict(seq.lower);
  }
  return seq;
}

CommandResult cmd_generate(const PipelineConfig& cfg,
                           const std::map<std::string, std::string>& flags) {
  const std::string task = flag_or(flags, "task", "audio2motion");
  const std::string model_dir =
      flag_or(flags, "model", cfg.posttrain_dir() + "/final");
  require_artifact(model_dir + "/config.json", "sequence-model checkpoint");
  UnifiedVocab vocab = load_vocab_checked(cfg);
  CodecSet codecs = load_codecs_checked(cfg);
  AcousticCodebook acb = load_acoustic_checked(cfg);
  TemplateBank bank = load_bank(cfg);
  SeqModel model = SeqModel::load(model_dir);
  if (model.config().vocab_hash != vocab.hash)
    throw VocabHashMismatch("checkpoint built on another vocabulary");
  const std::string out = flag_or(flags, "out", cfg.work_dir + "/generated");
  Rng rng(salt(cfg.seed, "generate"));

  if (task == "audio2motion" || task == "text2motion") {
    SlotMap slots;
    TaskKind kind;
    int steps_hint = 16;
    if (task == "audio2motion") {
      require_artifact(flag_or(flags, "audio", ""), "input audio (--audio)");
      AudioClip clip = load_wav(flags.at("audio"));
      const auto audio_tokens = tokenize_audio(clip, acb);
      slots["audio"] = SlotValue::make_stream(Modality::audio, audio_tokens);
      steps_hint = std::max(1, int(audio_tokens.size() * 30 / 50 /
                                   std::max(1, cfg.codec.downsample)));
      kind = TaskKind::audio2motion;
    } else {
      if (!flags.count("text")) throw ConfigError("text2motion needs --text");
      slots["caption"] = SlotValue::make_text(flags.at("text"));
      kind = TaskKind::text2motion;
    }
    std::vector<int> prompt = compile_prompt(vocab, bank, kind, slots, rng, 0);
    DecodeConfig dc;
    dc.max_len = 4 * (steps_hint + 2) + 8;
    dc.seed = salt(cfg.seed, "decode");
    std::vector<int> ids = model.generate(prompt, dc);
    MotionTokens tokens = parse_parts(vocab, ids, steps_hint);
    MotionSequence seq = finish_motion(cfg, codecs, tokens);
    const std::string path = out + ".motion.json";
    save_motion_json(seq, path);
    write_file_provenance(path, "generate", cfg);
    return {kExitOk, json{{"task", task},
                          {"frames", seq.frames()},
                          {"out", path}}};
  }
  if (task == "motion2emotion") {
    require_artifact(flag_or(flags, "motion", ""), "input motion (--motion)");
    MotionSequence motion = load_motion_json(flags.at("motion"));
    MotionTokens tokens = tokenize_clip(codecs, motion);
    SlotMap slots = motion_slots(tokens);
    std::vector<int> prompt =
        compile_prompt(vocab, bank, TaskKind::motion2emotion, slots, rng, 0);
    DecodeConfig dc;
    dc.max_len = 12;
    std::vector<int> ids = model.generate(prompt, dc);
    std::vector<int> text_ids;
    for (int id : ids)
      if (id >= SubwordTokenizer::kNumSpecials && id < vocab.text.size())
        text_ids.push_back(id);
    const std::string label = decode_text(vocab.text, text_ids);
    return {kExitOk, json{{"task", task}, {"emotion", label}}};
  }
  if (task == "editable") {
    require_artifact(flag_or(flags, "audio", ""), "input audio (--audio)");
    if (!flags.count("text")) throw ConfigError("editable needs --text");
    AudioClip clip = load_wav(flags.at("audio"));
    std::map<std::string, std::string> part_source;
    MotionTokens tokens;
    MotionSequence seq =
        editable_generate(model, codecs, acb, vocab, bank, clip, flags.at("text"),
                          salt(cfg.seed, "editable"), &part_source, &tokens);
    if (fs::exists(cfg.translation_dir() + "/config.json")) {
      TranslationPredictor tp = TranslationPredictor::load(cfg.translation_dir());
      seq.translation = tp.predict(seq.lower);
    }
    const std::string path = out + ".motion.json";
    save_motion_json(seq, path);
    write_file_provenance(path, "generate", cfg);
    json sources;
    for (auto& [k, v] : part_source) sources[k] = v;
    return {kExitOk, json{{"task", task},
                          {"frames", seq.frames()},
                          {"out", path},
                          {"part_source", sources}}};
  }
  throw ConfigError("unknown generate task '" + task + "'");
}

CommandResult cmd_eval(const PipelineConfig& cfg,
                       const std::map<std::string, std::string>& flags) {
  const std::string model_dir =
      flag_or(flags, "model", cfg.posttrain_dir() + "/final");
  require_artifact(model_dir + "/config.json", "sequence-model checkpoint");
  UnifiedVocab vocab = load_vocab_checked(cfg);
  CodecSet codecs = load_codecs_checked(cfg);
  AcousticCodebook acb = load_acoustic_checked(cfg);
  TemplateBank bank = load_bank(cfg);
  SeqModel model = SeqModel::load(model_dir);
  CorpusSplit split = load_split_corpus(cfg);

  FeatureEmbedder embedder = [&] {
    if (fs::exists(cfg.embedder_dir() + "/config.json"))
      return FeatureEmbedder::load(cfg.embedder_dir());
    std::vector<MotionSequence> motions;
    for (auto& c : split.train) motions.push_back(c.motion);
    EmbedderConfig ec = cfg.embedder;
    ec.seed = salt(cfg.seed, "embedder");
    FeatureEmbedder e = fit_embedder(motions, ec);
    e.save(cfg.embedder_dir());
    write_provenance(cfg.embedder_dir(), "eval", cfg);
    return e;
  }();

  EvalConfig ec = cfg.eval;
  ec.seed = salt(cfg.seed, "eval");
  EvalReport report =
      eval_suite(model, codecs, acb, vocab, bank, embedder, split.eval, ec);
  write_text_file(cfg.report_path(), report.to_json() + "\n");
  write_file_provenance(cfg.report_path(), "eval", cfg);
  return {kExitOk, json::parse(report.to_json())};
}

CommandResult cmd_export(const PipelineConfig& cfg,
                         const std::map<std::string, std::string>& flags) {
  require_artifact(flag_or(flags, "motion", ""), "input motion (--motion)");
  const std::string format = flag_or(flags, "format", "csv");
  const std::string out = flag_or(flags, "out", cfg.work_dir + "/export." + format);
  MotionSequence motion = load_motion_json(flags.at("motion"));
  export_animation(motion, ProxySkeleton::standard(), out, format);
  write_file_provenance(out, "export", cfg);
  return {kExitOk, json{{"out", out}, {"format", format}, {"frames", motion.frames()}}};
}

}  // namespace

MotionSequence editable_generate(SeqModel& model, const CodecSet& codecs,
                                 const AcousticCodebook& acoustic,
                                 const UnifiedVocab& vocab, const TemplateBank& bank,
                                 const AudioClip& audio, const std::string& caption,
                                 uint64_t seed,
                                 std::map<std::string, std::string>* part_source,
                                 MotionTokens* tokens_out) {
  const auto audio_tokens = tokenize_audio(audio, acoustic);
  const int ds = codecs.of(BodyPart::upper).config().downsample;
  const int steps_hint = std::max(1, int(audio_tokens.size()) * 30 / 50 / ds);

  // Pass 1: audio-conditioned full-body generation for face/hands/upper.
  Rng rng1(seed);
  SlotMap slots1;
  slots1["audio"] = SlotValue::make_stream(Modality::audio, audio_tokens);
  std::vector<int> prompt1 =
      compile_prompt(vocab, bank, TaskKind::audio2motion, slots1, rng1, 0);
  DecodeConfig dc1;
  dc1.max_len = 4 * (steps_hint + 2) + 8;
  MotionTokens pass1 = parse_parts(vocab, model.generate(prompt1, dc1), steps_hint);

  // Pass 2: caption-conditioned lower body, constrained to that segment.
  Rng rng2(seed + 1);
  SlotMap slots2;
  slots2["caption"] = SlotValue::make_text(caption);
  std::vector<int> prompt2 =
      compile_prompt(vocab, bank, TaskKind::text2part, slots2, rng2, 1);
  DecodeConfig dc2;
  dc2.max_len = steps_hint + 4;
  dc2.allowed = modality_mask(vocab, {Modality::lower});
  MotionTokens pass2 = parse_parts(vocab, model.generate(prompt2, dc2), steps_hint);

  MotionTokens merged;
  merged.face = pass1.face;
  merged.hands = pass1.hands;
  merged.upper = pass1.upper;
  merged.lower = pass2.lower;
  if (part_source)
    *part_source = {{"face", "audio"},
                    {"hands", "audio"},
                    {"upper", "audio"},
                    {"lower", "text"}};
  if (tokens_out) *tokens_out = merged;
  return codecs.decode(merged.face, merged.hands, merged.upper, merged.lower,
                       codecs.of(BodyPart::upper).config().fps);
}

void export_animation(const MotionSequence& motion, const ProxySkeleton& skeleton,
                      const std::string& path, const std::string& format) {
  if (format == "json") {
    save_motion_json(motion, path);
    return;
  }
  if (format != "csv") throw ConfigError("export format must be csv or json");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "frame,marker,x,y,z\n";
  for (int f = 0; f < motion.frames(); ++f) {
    Eigen::VectorXd pose(6 * kTotalJoints);
    for (int j = 0; j < kTotalJoints; ++j) {
      const Mat* stream;
      int local;
      if (j < kLowerJoints) {
        stream = &motion.lower;
        local = j;
      } else if (j < kLowerJoints + kUpperJoints) {
        stream = &motion.upper;
        local = j - kLowerJoints;
      } else {
        stream = &motion.hands;
        local = j - kLowerJoints - kUpperJoints;
      }
      pose.segment<6>(pose_offset_of_joint(j)) =
          stream->block<1, 6>(f, 6 * local).transpose();
    }
    const Mat markers =
        fk_positions(pose, skeleton, motion.translation.row(f).transpose());
    for (int m = 0; m < markers.rows(); ++m) {
      char line[128];
      snprintf(line, sizeof line, "%d,%d,%.9g,%.9g,%.9g\n", f, m, markers(m, 0),
               markers(m, 1), markers(m, 2));
      out << line;
    }
  }
  if (!out) throw IoError("write failure on " + path);
}

CommandResult run_command(const std::string& command, const PipelineConfig& cfg,
                          const std::map<std::string, std::string>& flags) {
  try {
    ensure_dir(cfg.work_dir);
    if (command == "synth-data") return cmd_synth_data(cfg);
    if (command == "codec-train")
      return cmd_codec_train(cfg, flag_or(flags, "part", "upper"));
    if (command == "audio-fit") return cmd_audio_fit(cfg);
    if (command == "text-train") return cmd_text_train(cfg);
    if (command == "vocab-build") return cmd_vocab_build(cfg);
    if (command == "tasks-compile")
      return cmd_tasks_compile(cfg, flag_or(flags, "stage", "pretrain"));
    if (command == "pretrain") return cmd_pretrain(cfg);
    if (command == "posttrain") return cmd_posttrain(cfg);
    if (command == "generate") return cmd_generate(cfg, flags);
    if (command == "eval") return cmd_eval(cfg, flags);
    if (command == "export") return cmd_export(cfg, flags);
    throw ConfigError("unknown command '" + command + "'");
  } catch (const ConfigError& e) {
    return {kExitConfigError, json{{"error", {{"type", e.name()}, {"message", e.what()}}}}};
  } catch (const InvalidConfig& e) {
    return {kExitConfigError, json{{"error", {{"type", e.name()}, {"message", e.what()}}}}};
  } catch (const MissingArtifact& e) {
    return {kExitMissingArtifact,
            json{{"error", {{"type", e.name()}, {"message", e.what()}}}}};
  } catch (const DivergedTraining& e) {
    return {kExitDiverged, json{{"error", {{"type", e.name()}, {"message", e.what()}}}}};
  } catch (const Error& e) {
    return {kExitFailure, json{{"error", {{"type", e.name()}, {"message", e.what()}}}}};
  } catch (const std::exception& e) {
    return {kExitFailure,
            json{{"error", {{"type", "InternalError"}, {"message", e.what()}}}}};
  }
}

}  // namespace mlang
