#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mlang/motion.hpp"
#include "mlang/rng.hpp"
#include "mlang/vocab.hpp"

namespace mlang {

constexpr int kMaxInputTokens = 512;

enum class TaskKind {
  spatial = 0,
  temporal,
  audio2text,
  text2audio,
  audio2motion,
  audio2part,
  text2motion,
  text2part,
  emotion2motion,
  motion2emotion,
  motion2text,
};
constexpr int kNumTaskKinds = 11;

const char* task_kind_name(TaskKind k);
TaskKind task_kind_from_name(const std::string& name);

// (prompt, condition, answer) id triple over one UnifiedVocab. The model
// consumes prompt + condition and is trained to emit the answer.
struct TaskSample {
  TaskKind kind = TaskKind::spatial;
  std::vector<int> prompt;
  std::vector<int> condition;
  std::vector<int> answer;
};

// Throws on any invariant violation: input budget, empty answer, invalid id.
void validate_sample(const TaskSample& sample, const UnifiedVocab& vocab);

// Per-part local token indices for one clip (same step count per part).
struct MotionTokens {
  std::vector<int> face, hands, upper, lower;

  const std::vector<int>& part(BodyPart p) const;
  std::vector<int>& part(BodyPart p);
};

// --- template bank ---------------------------------------------------------

struct TaskTemplate {
  std::string prompt;                // text with [placeholder] slots
  std::vector<std::string> outputs;  // answer slots in order, e.g. face,hands
};

struct TemplateBank {
  std::map<TaskKind, std::vector<TaskTemplate>> templates;

  const std::vector<TaskTemplate>& of(TaskKind k) const;
  void validate() const;  // >= 2 templates per kind, known placeholders
};

TemplateBank default_template_bank();
TemplateBank load_template_bank(const std::string& path);
void save_template_bank(const TemplateBank& bank, const std::string& path);

// --- pre-training task synthesis ----------------------------------------

// Source parts -> disjoint target parts; prompt names both sets.
TaskSample make_spatial_task(const UnifiedVocab& vocab, const MotionTokens& tokens,
                             Rng& rng);

// ceil(mask_ratio * len) token positions per part replaced by the mask
// special; the answer is the original streams.
TaskSample make_temporal_task(const UnifiedVocab& vocab, const MotionTokens& tokens,
                              double mask_ratio, Rng& rng);

enum class AudioTextDirection { audio2text, text2audio, random };
TaskSample make_audio_text_task(const UnifiedVocab& vocab,
                                const std::vector<int>& audio_locals,
                                const std::string& transcript,
                                AudioTextDirection direction, Rng& rng);

// --- instruction compilation -------------------------------------------------

// A slot is either plain text ([caption]/[emotion]), one boundary-wrapped
// stream, or the audio&transcript pairing.
struct SlotValue {
  enum class Kind { text, stream, audio_transcript } kind = Kind::text;
  std::string text;
  Modality modality = Modality::text;
  std::vector<int> locals;

  static SlotValue make_text(std::string s);
  static SlotValue make_stream(Modality m, std::vector<int> locals);
  static SlotValue make_audio_transcript(std::vector<int> audio_locals,
                                         std::string transcript);
};
using SlotMap = std::map<std::string, SlotValue>;

// Samples a template (or takes template_index >= 0), inlines slot streams
// into the prompt at their placeholders, and assembles the answer in the
// template's declared output order. Streams are center-cropped to the input
// budget; answers follow the matching window.
TaskSample compile_instruction(const UnifiedVocab& vocab, const TemplateBank& bank,
                               TaskKind kind, const SlotMap& slots, Rng& rng,
                               int template_index = -1);

// Prompt-only compilation for inference: output slots need not be present.
std::vector<int> compile_prompt(const UnifiedVocab& vocab, const TemplateBank& bank,
                                TaskKind kind, const SlotMap& slots, Rng& rng,
                                int template_index = -1);

// --- corpus io -------------------------------------------------------------

// JSONL: a header line {"vocab_hash": ...} followed by one sample per line
// {"task", "prompt", "condition", "answer"}.
void write_corpus(const std::vector<TaskSample>& samples, const UnifiedVocab& vocab,
                  const std::string& path);
std::vector<TaskSample> read_corpus(const std::string& path,
                                    const UnifiedVocab& vocab);

}  // namespace mlang
