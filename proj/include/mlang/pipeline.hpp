#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlang/audio.hpp"
#include "mlang/codec.hpp"
#include "mlang/metrics.hpp"
#include "mlang/model.hpp"
#include "mlang/synth.hpp"
#include "mlang/tasks.hpp"

namespace mlang {

// Sampling plan for task compilation.
struct TasksConfig {
  int spatial_per_clip = 2;
  int temporal_per_clip = 2;
  int audio_text_per_clip = 2;
  double mask_ratio_lo = 0.15;
  double mask_ratio_hi = 0.5;
  double posttrain_fraction = 1.0;  // fraction of training clips used
  bool include_text2audio = true;
};

struct PipelineConfig {
  uint64_t seed = 0;
  std::string data_dir = "out/data";
  std::string work_dir = "out";
  std::string template_bank_path;  // empty = built-in bank
  double eval_holdout_frac = 0.2;  // tail clips reserved for evaluation

  SynthCorpusConfig synth;
  CodecConfig codec;
  TrainCodecConfig codec_train;
  TranslationConfig translation;
  int text_vocab_size = 4096;
  int audio_codebook_size = 512;
  KMeansConfig kmeans;
  ModelConfig model;  // vocab_size/vocab_hash filled by vocab-build
  TrainLmConfig pretrain;
  TrainLmConfig posttrain;
  bool posttrain_from_scratch = false;  // ablation: skip pre-trained weights
  TasksConfig tasks;
  EmbedderConfig embedder;
  EvalConfig eval;

  // Artifact locations inside work_dir.
  std::string codec_dir(BodyPart part) const;
  std::string translation_dir() const;
  std::string audio_codebook_dir() const;
  std::string tokenizer_path() const;
  std::string vocab_path() const;
  std::string pretrain_corpus_path() const;
  std::string posttrain_corpus_path() const;
  std::string pretrain_dir() const;
  std::string posttrain_dir() const;
  std::string embedder_dir() const;
  std::string report_path() const;
};

// Defaults overlaid with a JSON object; unknown keys are rejected.
PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const PipelineConfig& cfg);
std::string config_hash(const PipelineConfig& cfg);

// Applies one `--override key.path=value` entry onto a JSON config.
void apply_override(nlohmann::json& j, const std::string& entry);

// --- commands ---------------------------------------------------------------

struct CommandResult {
  int exit_code = 0;
  nlohmann::json output;  // machine-readable summary or error
};

// Runs one pipeline command; flags are per-command arguments (already
// stripped of the global config/seed/override options).
CommandResult run_command(const std::string& command, const PipelineConfig& cfg,
                          const std::map<std::string, std::string>& flags);

// Exit codes per the CLI contract.
constexpr int kExitOk = 0;
constexpr int kExitConfigError = 2;
constexpr int kExitMissingArtifact = 3;
constexpr int kExitDiverged = 4;
constexpr int kExitFailure = 1;

// Writes per-frame marker positions (CSV "frame,marker,x,y,z") or re-emits
// motion-json; the json form round-trips through the reader.
void export_animation(const MotionSequence& motion, const ProxySkeleton& skeleton,
                      const std::string& path, const std::string& format);

// Train/eval split of a corpus directory per eval_holdout_frac.
struct CorpusSplit {
  std::vector<LoadedClip> train;
  std::vector<LoadedClip> eval;
};
CorpusSplit load_split_corpus(const PipelineConfig& cfg);

// Editable generation: one audio-conditioned pass for face/hands/upper and
// one caption-conditioned pass for the lower body, merged into a single
// sequence. part_source reports which pass produced each part.
MotionSequence editable_generate(SeqModel& model, const CodecSet& codecs,
                                 const AcousticCodebook& acoustic,
                                 const UnifiedVocab& vocab, const TemplateBank& bank,
                                 const AudioClip& audio, const std::string& caption,
                                 uint64_t seed,
                                 std::map<std::string, std::string>* part_source,
                                 MotionTokens* tokens_out = nullptr);

}  // namespace mlang
