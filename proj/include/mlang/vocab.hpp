#pragma once

#include <string>
#include <vector>

#include "mlang/bpe.hpp"

namespace mlang {

enum class Modality { text = 0, audio, face, hands, upper, lower };
constexpr int kNumModalities = 6;

const char* modality_name(Modality m);
Modality modality_from_name(const std::string& name);

// Merged token space: contiguous segments in the fixed order text, audio,
// face, hands, upper, lower, followed by start/end boundary specials for
// each modality. Text occupies offset 0 so text ids stay stable as codec
// sizes change.
struct UnifiedVocab {
  struct Segment {
    Modality modality;
    int offset = 0;
    int size = 0;
  };

  std::vector<Segment> segments;  // one per modality, in order
  int specials_offset = 0;
  int total_size = 0;
  SubwordTokenizer text;  // attached tokenizer; may be empty for layout-only
  std::string hash;

  const Segment& segment(Modality m) const { return segments[size_t(m)]; }
  int offset_of(Modality m) const { return segment(m).offset; }
  int size_of(Modality m) const { return segment(m).size; }

  int start_special(Modality m) const { return specials_offset + 2 * int(m); }
  int end_special(Modality m) const { return specials_offset + 2 * int(m) + 1; }
  bool is_special(int id) const { return id >= specials_offset && id < total_size; }
  bool in_segment(int id, Modality m) const {
    return id >= offset_of(m) && id < offset_of(m) + size_of(m);
  }
  // Modality owning a non-special id; boundary specials map to their modality.
  Modality modality_of(int id) const;
  int local_index(int id) const;  // id - segment offset

  int pad_id() const { return SubwordTokenizer::kPad; }
  int unk_id() const { return SubwordTokenizer::kUnk; }
  int eos_id() const { return SubwordTokenizer::kEos; }
  int mask_id() const { return SubwordTokenizer::kMask; }

  std::string manifest_json() const;
  void save(const std::string& path) const;
  static UnifiedVocab load(const std::string& path);
};

// Layout construction from segment sizes; 12 boundary specials follow the
// six segments.
UnifiedVocab build_vocab(int text_size, int audio_k, int face_k, int hands_k,
                         int upper_k, int lower_k);
// Same, with the text tokenizer attached (text_size = tokenizer size).
UnifiedVocab build_vocab(const SubwordTokenizer& text, int audio_k, int face_k,
                         int hands_k, int upper_k, int lower_k);

// Token id <-> string. Text ids render as their subword string (specials as
// "<pad>"-style names); non-text ids as "<audio_k>", "<face_k>", "<hand_k>",
// "<upper_k>", "<lower_k>"; boundary specials as "</soa>"-style names.
std::string render_token(const UnifiedVocab& vocab, int id);
int parse_token(const UnifiedVocab& vocab, const std::string& s);

// [start special] + mapped ids + [end special]; unwrap inverts exactly.
std::vector<int> wrap_stream(const UnifiedVocab& vocab, Modality m,
                             const std::vector<int>& local_indices);
std::pair<Modality, std::vector<int>> unwrap_stream(const UnifiedVocab& vocab,
                                                    const std::vector<int>& ids);

}  // namespace mlang
