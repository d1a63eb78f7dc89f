#include "mlang/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mlang/blob.hpp"

namespace mlang {

using nlohmann::json;

namespace {

constexpr BodyPart kPartOrder[4] = {BodyPart::face, BodyPart::hands,
                                    BodyPart::upper, BodyPart::lower};

Modality part_modality(BodyPart p) {
  switch (p) {
    case BodyPart::face: return Modality::face;
    case BodyPart::hands: return Modality::hands;
    case BodyPart::upper: return Modality::upper;
    case BodyPart::lower: return Modality::lower;
  }
  return Modality::face;
}

std::vector<int> crop_window(const std::vector<int>& v, double frac_lo,
                             double frac_hi) {
  const int n = int(v.size());
  // Length floors so the summed crop never exceeds the budget fraction.
  int len = int((frac_hi - frac_lo) * n + 1e-9);
  len = std::max(0, std::min(n, len));
  int lo = int(frac_lo * n + 0.5);
  lo = std::max(0, std::min(n - len, lo));
  return std::vector<int>(v.begin() + lo, v.begin() + lo + len);
}

// Centered fraction window that fits `allowed` total tokens across streams
// of the given lengths (each stream pays two boundary tokens).
std::pair<double, double> fit_fraction(const std::vector<int>& lengths,
                                       int allowed) {
  int64_t total = 0;
  for (int l : lengths) total += l;
  if (total <= 0) return {0.0, 1.0};
  int64_t budget = allowed;
  if (budget >= total) return {0.0, 1.0};
  const double frac = double(std::max<int64_t>(1, budget)) / double(total);
  const double lo = (1.0 - frac) / 2.0;
  return {lo, lo + frac};
}

std::string join_parts(const std::vector<BodyPart>& parts) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out += '+';
    out += part_name(parts[i]);
  }
  return out;
}

std::string replace_all(std::string s, const std::string& from,
                        const std::string& to) {
  size_t at = 0;
  while ((at = s.find(from, at)) != std::string::npos) {
    s.replace(at, from.size(), to);
    at += to.size();
  }
  return s;
}

void append(std::vector<int>& dst, const std::vector<int>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

const TemplateBank& builtin_bank() {
  static const TemplateBank bank = default_template_bank();
  return bank;
}

const std::set<std::string>& known_placeholders() {
  static const std::set<std::string> names = {
      "audio", "caption", "emotion", "face",  "hands",
      "upper", "lower",   "source",  "target", "audio&transcript"};
  return names;
}

std::vector<std::string> placeholders_in(const std::string& prompt) {
  std::vector<std::string> out;
  size_t at = 0;
  while (true) {
    const size_t lb = prompt.find('[', at);
    if (lb == std::string::npos) break;
    const size_t rb = prompt.find(']', lb);
    if (rb == std::string::npos) break;
    out.push_back(prompt.substr(lb + 1, rb - lb - 1));
    at = rb + 1;
  }
  return out;
}

}  // namespace

const char* task_kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::spatial: return "spatial";
    case TaskKind::temporal: return "temporal";
    case TaskKind::audio2text: return "audio2text";
    case TaskKind::text2audio: return "text2audio";
    case TaskKind::audio2motion: return "audio2motion";
    case TaskKind::audio2part: return "audio2part";
    case TaskKind::text2motion: return "text2motion";
    case TaskKind::text2part: return "text2part";
    case TaskKind::emotion2motion: return "emotion2motion";
    case TaskKind::motion2emotion: return "motion2emotion";
    case TaskKind::motion2text: return "motion2text";
  }
  return "?";
}

TaskKind task_kind_from_name(const std::string& name) {
  for (int k = 0; k < kNumTaskKinds; ++k)
    if (name == task_kind_name(TaskKind(k))) return TaskKind(k);
  throw UnknownTaskKind("unknown task kind '" + name + "'");
}

void validate_sample(const TaskSample& sample, const UnifiedVocab& vocab) {
  if (int(sample.prompt.size() + sample.condition.size()) > kMaxInputTokens)
    throw SequenceTooLong("prompt + condition exceeds the input budget");
  if (sample.answer.empty()) throw EmptyStream("answer must be non-empty");
  auto check_ids = [&](const std::vector<int>& ids) {
    for (int id : ids)
      if (id < 0 || id >= vocab.total_size)
        throw UnknownToken("sample id " + std::to_string(id) +
                           " outside the vocabulary");
  };
  check_ids(sample.prompt);
  check_ids(sample.condition);
  check_ids(sample.answer);
}

const std::vector<int>& MotionTokens::part(BodyPart p) const {
  switch (p) {
    case BodyPart::face: return face;
    case BodyPart::hands: return hands;
    case BodyPart::upper: return upper;
    case BodyPart::lower: return lower;
  }
  return face;
}

std::vector<int>& MotionTokens::part(BodyPart p) {
  return const_cast<std::vector<int>&>(
      static_cast<const MotionTokens*>(this)->part(p));
}

// --- template bank ----------------------------------------------------------

const std::vector<TaskTemplate>& TemplateBank::of(TaskKind k) const {
  auto it = templates.find(k);
  if (it == templates.end() || it->second.empty())
    throw UnknownTaskKind(std::string("no templates for task kind ") +
                          task_kind_name(k));
  return it->second;
}

void TemplateBank::validate() const {
  for (int k = 0; k < kNumTaskKinds; ++k) {
    auto it = templates.find(TaskKind(k));
    if (it == templates.end() || it->second.size() < 2)
      throw ConfigError(std::string("template bank needs >= 2 templates for ") +
                        task_kind_name(TaskKind(k)));
    for (const auto& t : it->second) {
      for (const auto& name : placeholders_in(t.prompt))
        if (!known_placeholders().count(name))
          throw ConfigError("unknown placeholder [" + name + "] in template");
      for (const auto& out : t.outputs)
        if (out != "face" && out != "hands" && out != "upper" && out != "lower" &&
            out != "audio" && out != "emotion" && out != "caption")
          throw ConfigError("unknown output slot '" + out + "' in template");
    }
  }
}

TemplateBank default_template_bank() {
  TemplateBank bank;
  auto add = [&](TaskKind k, const char* prompt, std::vector<std::string> outputs) {
    bank.templates[k].push_back({prompt, std::move(outputs)});
  };
  const std::vector<std::string> full = {"face", "hands", "upper", "lower"};

  add(TaskKind::spatial, "Translate [source] to [target] body.", {});
  add(TaskKind::spatial, "Predict the [target] motion from the [source] motion.", {});
  add(TaskKind::spatial, "Given the [source] stream, produce the matching [target] stream.", {});
  add(TaskKind::spatial, "Complete the [target] body parts that accompany [source].", {});

  add(TaskKind::temporal, "Translate mask to unmasked motion.", {});
  add(TaskKind::temporal, "Fill in the masked motion tokens.", {});
  add(TaskKind::temporal, "Recover the original motion from the masked stream.", {});
  add(TaskKind::temporal, "Reconstruct every masked position in the motion.", {});

  add(TaskKind::audio2text, "Transcribe [audio] into text.", {"caption"});
  add(TaskKind::audio2text, "Write down the words spoken in [audio].", {"caption"});
  add(TaskKind::audio2text, "What does [audio] say? Answer in plain text.", {"caption"});
  add(TaskKind::audio2text, "Produce the transcript of [audio].", {"caption"});

  add(TaskKind::text2audio, "Pronounce the sentence [caption] as audio tokens.", {"audio"});
  add(TaskKind::text2audio, "Synthesize speech units for [caption].", {"audio"});
  add(TaskKind::text2audio, "Turn the text [caption] into an audio stream.", {"audio"});
  add(TaskKind::text2audio, "Read [caption] aloud as discrete audio units.", {"audio"});

  add(TaskKind::audio2motion,
      "Based on [audio], generate a synchronized movement sequence involving both "
      "face, hands, upper and lower body.",
      full);
  add(TaskKind::audio2motion,
      "Listen to [audio] and produce movements that involve both the upper and "
      "lower body in harmony.",
      full);
  add(TaskKind::audio2motion,
      "Create a full-body gesture performance matching the rhythm of [audio].", full);
  add(TaskKind::audio2motion,
      "From [audio], derive face, hand, upper and lower body motions.", full);

  add(TaskKind::audio2part,
      "Using [audio], produce upper body movements that capture the tone and energy.",
      {"upper"});
  add(TaskKind::audio2part,
      "Interpret [audio] with lower body gestures that reflect its tempo.",
      {"lower"});
  add(TaskKind::audio2part,
      "Develop a set of hand movements that respond dynamically to [audio].",
      {"hands"});
  add(TaskKind::audio2part,
      "Create facial expressions that correspond to the varying sentiments in [audio].",
      {"face"});

  add(TaskKind::text2motion,
      "Give me gestures involving the face, hands, upper body, and lower body that "
      "correspond to [caption].",
      full);
  add(TaskKind::text2motion,
      "Show me gestures involving the face, hands, upper body, and lower body that "
      "capture the essence of [caption].",
      full);
  add(TaskKind::text2motion, "Perform [caption] with the whole body.", full);
  add(TaskKind::text2motion, "Act out the description [caption].", full);

  add(TaskKind::text2part,
      "Create an upper body gesture that aligns with the sentiment of [caption].",
      {"upper"});
  add(TaskKind::text2part, "Illustrate the message in [caption] with lower body motions.",
      {"lower"});
  add(TaskKind::text2part, "Express [caption] with hand gestures alone.", {"hands"});
  add(TaskKind::text2part, "Show a facial expression that conveys [caption].", {"face"});

  add(TaskKind::emotion2motion,
      "Generate a movement sequence that fully embodies the emotion of [emotion] "
      "using the face, hands, upper body, and lower body.",
      full);
  add(TaskKind::emotion2motion,
      "Express the emotion [emotion] through a series of actions involving the face, "
      "hands, upper, and lower body.",
      full);
  add(TaskKind::emotion2motion, "Move the whole body the way [emotion] feels.", full);
  add(TaskKind::emotion2motion, "Portray [emotion] in a full-body gesture.", full);

  add(TaskKind::motion2emotion,
      "What emotion is conveyed by the movements in the face, hands, upper body, and "
      "lower body within [face][hands][upper][lower]?",
      {"emotion"});
  add(TaskKind::motion2emotion,
      "Examine the face, hand, upper, and lower body movements in "
      "[face][hands][upper][lower] to interpret the emotional tone.",
      {"emotion"});
  add(TaskKind::motion2emotion,
      "Name the emotion expressed by [face][hands][upper][lower].", {"emotion"});
  add(TaskKind::motion2emotion,
      "Which of the eight emotions matches [face][hands][upper][lower]?", {"emotion"});

  add(TaskKind::motion2text,
      "Describe the motion represented by [upper][lower] using plain English.",
      {"caption"});
  add(TaskKind::motion2text,
      "What does the [upper][lower] communicate? Please describe it in words.",
      {"caption"});
  add(TaskKind::motion2text, "Caption the movement shown in [upper][lower].",
      {"caption"});
  add(TaskKind::motion2text, "Summarize [upper][lower] as a sentence.", {"caption"});

  bank.validate();
  return bank;
}

TemplateBank load_template_bank(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw IoError(std::string("template bank parse failure: ") + e.what());
  }
  TemplateBank bank;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const TaskKind kind = task_kind_from_name(it.key());
    for (const auto& t : it.value()) {
      TaskTemplate tt;
      tt.prompt = t["prompt"].get<std::string>();
      tt.outputs = t["outputs"].get<std::vector<std::string>>();
      bank.templates[kind].push_back(std::move(tt));
    }
  }
  bank.validate();
  return bank;
}

void save_template_bank(const TemplateBank& bank, const std::string& path) {
  json j;
  for (const auto& [kind, templates] : bank.templates) {
    json list = json::array();
    for (const auto& t : templates)
      list.push_back({{"prompt", t.prompt}, {"outputs", t.outputs}});
    j[task_kind_name(kind)] = list;
  }
  write_text_file(path, j.dump(2) + "\n");
}

// --- pre-training makers ------------------------------------------------

TaskSample make_spatial_task(const UnifiedVocab& vocab, const MotionTokens& tokens,
                             Rng& rng) {
  for (BodyPart p : kPartOrder)
    if (tokens.part(p).empty())
      throw MissingPart(std::string("empty ") + part_name(p) + " stream");

  // Non-empty strict subset of the four parts, then a non-empty subset of
  // the complement.
  const int source_mask = 1 + int(rng.below(14));
  std::vector<BodyPart> source, complement, target;
  for (int i = 0; i < 4; ++i)
    (source_mask >> i & 1 ? source : complement).push_back(kPartOrder[i]);
  const int tmask = 1 + int(rng.below((1u << complement.size()) - 1));
  for (size_t i = 0; i < complement.size(); ++i)
    if (tmask >> i & 1) target.push_back(complement[i]);

  const auto& paraphrases = builtin_bank().of(TaskKind::spatial);
  std::string prompt_text =
      paraphrases[size_t(rng.below(paraphrases.size()))].prompt;
  prompt_text = replace_all(prompt_text, "[source]", join_parts(source));
  prompt_text = replace_all(prompt_text, "[target]", join_parts(target));

  TaskSample s;
  s.kind = TaskKind::spatial;
  s.prompt = encode_text(vocab.text, prompt_text);

  std::vector<int> lengths;
  for (BodyPart p : source) lengths.push_back(int(tokens.part(p).size()));
  const int allowed =
      kMaxInputTokens - int(s.prompt.size()) - 2 * int(source.size());
  auto [flo, fhi] = fit_fraction(lengths, allowed);
  for (BodyPart p : source)
    append(s.condition, wrap_stream(vocab, part_modality(p),
                                    crop_window(tokens.part(p), flo, fhi)));
  for (BodyPart p : target)
    append(s.answer, wrap_stream(vocab, part_modality(p),
                                 crop_window(tokens.part(p), flo, fhi)));
  validate_sample(s, vocab);
  return s;
}

TaskSample make_temporal_task(const UnifiedVocab& vocab, const MotionTokens& tokens,
                              double mask_ratio, Rng& rng) {
  if (!(mask_ratio > 0.0) || !(mask_ratio < 1.0))
    throw BadRatio("mask_ratio must lie strictly between 0 and 1");
  for (BodyPart p : kPartOrder)
    if (tokens.part(p).empty())
      throw MissingPart(std::string("empty ") + part_name(p) + " stream");

  const auto& paraphrases = builtin_bank().of(TaskKind::temporal);
  TaskSample s;
  s.kind = TaskKind::temporal;
  s.prompt = encode_text(
      vocab.text, paraphrases[size_t(rng.below(paraphrases.size()))].prompt);

  std::vector<int> lengths;
  for (BodyPart p : kPartOrder) lengths.push_back(int(tokens.part(p).size()));
  const int allowed = kMaxInputTokens - int(s.prompt.size()) - 8;
  auto [flo, fhi] = fit_fraction(lengths, allowed);

  for (BodyPart p : kPartOrder) {
    const std::vector<int> locals = crop_window(tokens.part(p), flo, fhi);
    std::vector<int> wrapped = wrap_stream(vocab, part_modality(p), locals);
    const int n = int(locals.size());
    const int k = int(std::ceil(mask_ratio * n));
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    for (int i = 0; i < k; ++i) wrapped[size_t(order[size_t(i)]) + 1] = vocab.mask_id();
    append(s.condition, wrapped);
    append(s.answer, wrap_stream(vocab, part_modality(p), locals));
  }
  validate_sample(s, vocab);
  return s;
}

TaskSample make_audio_text_task(const UnifiedVocab& vocab,
                                const std::vector<int>& audio_locals,
                                const std::string& transcript,
                                AudioTextDirection direction, Rng& rng) {
  if (audio_locals.empty()) throw EmptyStream("audio stream is empty");
  if (transcript.empty()) throw EmptyStream("transcript is empty");
  bool a2t;
  switch (direction) {
    case AudioTextDirection::audio2text: a2t = true; break;
    case AudioTextDirection::text2audio: a2t = false; break;
    default: a2t = rng.uniform() < 0.5;
  }
  const std::vector<int> text_ids = encode_text(vocab.text, transcript);

  TaskSample s;
  if (a2t) {
    s.kind = TaskKind::audio2text;
    s.prompt = encode_text(vocab.text, "Translate audio to text.");
    const int allowed = kMaxInputTokens - int(s.prompt.size()) - 2;
    auto [flo, fhi] = fit_fraction({int(audio_locals.size())}, allowed);
    s.condition =
        wrap_stream(vocab, Modality::audio, crop_window(audio_locals, flo, fhi));
    s.answer = text_ids;
  } else {
    s.kind = TaskKind::text2audio;
    s.prompt = encode_text(vocab.text, "Translate text to audio.");
    s.condition = wrap_stream(vocab, Modality::text, text_ids);
    s.answer = wrap_stream(vocab, Modality::audio, audio_locals);
  }
  validate_sample(s, vocab);
  return s;
}

// --- instruction compilation ------------------------------------------------

SlotValue SlotValue::make_text(std::string s) {
  SlotValue v;
  v.kind = Kind::text;
  v.text = std::move(s);
  return v;
}

SlotValue SlotValue::make_stream(Modality m, std::vector<int> locals) {
  SlotValue v;
  v.kind = Kind::stream;
  v.modality = m;
  v.locals = std::move(locals);
  return v;
}

SlotValue SlotValue::make_audio_transcript(std::vector<int> audio_locals,
                                           std::string transcript) {
  SlotValue v;
  v.kind = Kind::audio_transcript;
  v.modality = Modality::audio;
  v.locals = std::move(audio_locals);
  v.text = std::move(transcript);
  return v;
}

namespace {

TaskSample compile_impl(const UnifiedVocab& vocab, const TemplateBank& bank,
                        TaskKind kind, const SlotMap& slots, Rng& rng,
                        int template_index, bool with_answer);

}  // namespace

TaskSample compile_instruction(const UnifiedVocab& vocab, const TemplateBank& bank,
                               TaskKind kind, const SlotMap& slots, Rng& rng,
                               int template_index) {
  return compile_impl(vocab, bank, kind, slots, rng, template_index, true);
}

std::vector<int> compile_prompt(const UnifiedVocab& vocab, const TemplateBank& bank,
                                TaskKind kind, const SlotMap& slots, Rng& rng,
                                int template_index) {
  return compile_impl(vocab, bank, kind, slots, rng, template_index, false).prompt;
}

namespace {

TaskSample compile_impl(const UnifiedVocab& vocab, const TemplateBank& bank,
                        TaskKind kind, const SlotMap& slots, Rng& rng,
                        int template_index, bool with_answer) {
  const auto& templates = bank.of(kind);
  if (template_index >= int(templates.size()))
    throw IndexOutOfRange("template index out of range");
  const TaskTemplate& tmpl =
      template_index >= 0 ? templates[size_t(template_index)]
                          : templates[size_t(rng.below(templates.size()))];

  auto slot_of = [&](const std::string& name) -> const SlotValue& {
    auto it = slots.find(name);
    if (it == slots.end())
      throw MissingSlot("missing slot [" + name + "] for task " +
                        task_kind_name(kind));
    return it->second;
  };

  // Budget pass: text pieces are fixed; streams share the remaining budget.
  const auto names = placeholders_in(tmpl.prompt);
  std::vector<int> stream_lengths;
  int fixed = 0;
  {
    std::string text_only = tmpl.prompt;
    for (const auto& name : names) {
      const SlotValue& v = slot_of(name);
      if (v.kind == SlotValue::Kind::text)
        text_only = replace_all(text_only, "[" + name + "]", v.text);
      else {
        text_only = replace_all(text_only, "[" + name + "]", "");
        stream_lengths.push_back(int(v.locals.size()));
        fixed += 2;  // boundary pair
        if (v.kind == SlotValue::Kind::audio_transcript) {
          fixed += 2 + int(encode_text(vocab.text, v.text).size());
        }
      }
    }
    fixed += int(encode_text(vocab.text, text_only).size());
  }
  auto [flo, fhi] = fit_fraction(stream_lengths, kMaxInputTokens - fixed);

  // Render pass: interleave encoded text pieces with wrapped streams.
  TaskSample s;
  s.kind = kind;
  std::string pending;
  size_t at = 0;
  auto flush_text = [&]() {
    if (!pending.empty()) append(s.prompt, encode_text(vocab.text, pending));
    pending.clear();
  };
  while (at < tmpl.prompt.size()) {
    const size_t lb = tmpl.prompt.find('[', at);
    if (lb == std::string::npos) {
      pending += tmpl.prompt.substr(at);
      break;
    }
    const size_t rb = tmpl.prompt.find(']', lb);
    if (rb == std::string::npos) {
      pending += tmpl.prompt.substr(at);
      break;
    }
    pending += tmpl.prompt.substr(at, lb - at);
    const std::string name = tmpl.prompt.substr(lb + 1, rb - lb - 1);
    const SlotValue& v = slot_of(name);
    switch (v.kind) {
      case SlotValue::Kind::text:
        pending += v.text;
        break;
      case SlotValue::Kind::stream:
        flush_text();
        append(s.prompt,
               wrap_stream(vocab, v.modality, crop_window(v.locals, flo, fhi)));
        break;
      case SlotValue::Kind::audio_transcript:
        flush_text();
        append(s.prompt, wrap_stream(vocab, Modality::audio,
                                     crop_window(v.locals, flo, fhi)));
        append(s.prompt,
               wrap_stream(vocab, Modality::text, encode_text(vocab.text, v.text)));
        break;
    }
    at = rb + 1;
  }
  flush_text();

  // Answer in the template's declared output order.
  if (with_answer) {
    for (const auto& out : tmpl.outputs) {
      if (out == "emotion" || out == "caption") {
        append(s.answer, encode_text(vocab.text, slot_of(out).text));
      } else {
        const SlotValue& v = slot_of(out);
        if (v.kind != SlotValue::Kind::stream)
          throw MissingSlot("output slot [" + out + "] must be a token stream");
        // Cropped prompts keep answers on the matching window.
        const bool cropped = fhi - flo < 1.0;
        append(s.answer,
               wrap_stream(vocab, v.modality,
                           cropped ? crop_window(v.locals, flo, fhi) : v.locals));
      }
    }
    validate_sample(s, vocab);
  }
  return s;
}

}  // namespace

// --- corpus io --------------------------------------------------------------

void write_corpus(const std::vector<TaskSample>& samples, const UnifiedVocab& vocab,
                  const std::string& path) {
  for (const auto& s : samples) validate_sample(s, vocab);
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << json{{"vocab_hash", vocab.hash}}.dump() << "\n";
  for (const auto& s : samples) {
    json j = {{"task", task_kind_name(s.kind)},
              {"prompt", s.prompt},
              {"condition", s.condition},
              {"answer", s.answer}};
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("write failure on " + path);
}

std::vector<TaskSample> read_corpus(const std::string& path,
                                    const UnifiedVocab& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError(path + " is empty");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw IoError("corpus header parse failure: " + std::string(e.what()));
  }
  if (!header.contains("vocab_hash")) throw IoError("corpus missing vocab_hash");
  if (header["vocab_hash"].get<std::string>() != vocab.hash)
    throw VocabHashMismatch("corpus was written against a different vocabulary");

  std::vector<TaskSample> out;
  size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IoError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
    TaskSample s;
    s.kind = task_kind_from_name(j["task"].get<std::string>());
    s.prompt = j["prompt"].get<std::vector<int>>();
    s.condition = j["condition"].get<std::vector<int>>();
    s.answer = j["answer"].get<std::vector<int>>();
    validate_sample(s, vocab);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mlang
