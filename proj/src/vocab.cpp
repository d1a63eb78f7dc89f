#include "mlang/vocab.hpp"

#include <array>
#include <cstdio>

#include "json.hpp"
#include "mlang/blob.hpp"

namespace mlang {

using nlohmann::json;

namespace {

// Letters used by the boundary special names: </sot>, </eoa>, ...
constexpr std::array<char, 6> kModalityLetter = {'t', 'a', 'f', 'h', 'u', 'l'};

// Render prefixes of the in-segment token grammar.
const char* grammar_name(Modality m) {
  switch (m) {
    case Modality::audio: return "audio";
    case Modality::face: return "face";
    case Modality::hands: return "hand";
    case Modality::upper: return "upper";
    case Modality::lower: return "lower";
    default: return "text";
  }
}

}  // namespace

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::audio: return "audio";
    case Modality::face: return "face";
    case Modality::hands: return "hands";
    case Modality::upper: return "upper";
    case Modality::lower: return "lower";
  }
  return "?";
}

Modality modality_from_name(const std::string& name) {
  for (int m = 0; m < kNumModalities; ++m)
    if (name == modality_name(Modality(m))) return Modality(m);
  throw ConfigError("unknown modality '" + name + "'");
}

Modality UnifiedVocab::modality_of(int id) const {
  if (id < 0 || id >= total_size)
    throw UnknownToken("id " + std::to_string(id) + " outside vocabulary");
  if (id >= specials_offset) return Modality((id - specials_offset) / 2);
  for (const auto& seg : segments)
    if (id >= seg.offset && id < seg.offset + seg.size) return seg.modality;
  throw UnknownToken("id in segment gap");  // unreachable: segments contiguous
}

int UnifiedVocab::local_index(int id) const {
  const Modality m = modality_of(id);
  if (id >= specials_offset)
    throw UnknownToken("special id has no local index");
  return id - offset_of(m);
}

UnifiedVocab build_vocab(int text_size, int audio_k, int face_k, int hands_k,
                         int upper_k, int lower_k) {
  const int sizes[6] = {text_size, audio_k, face_k, hands_k, upper_k, lower_k};
  for (int s : sizes)
    if (s < 1) throw InvalidConfig("every vocabulary segment needs size >= 1");
  UnifiedVocab v;
  int at = 0;
  for (int m = 0; m < kNumModalities; ++m) {
    v.segments.push_back({Modality(m), at, sizes[m]});
    at += sizes[m];
  }
  v.specials_offset = at;
  v.total_size = at + 2 * kNumModalities;
  v.hash = fnv1a_hex(v.manifest_json());
  return v;
}

UnifiedVocab build_vocab(const SubwordTokenizer& text, int audio_k, int face_k,
                         int hands_k, int upper_k, int lower_k) {
  UnifiedVocab v =
      build_vocab(text.size(), audio_k, face_k, hands_k, upper_k, lower_k);
  v.text = text;
  v.hash = fnv1a_hex(v.manifest_json() + text.to_json());
  return v;
}

std::string render_token(const UnifiedVocab& vocab, int id) {
  const Modality m = vocab.modality_of(id);  // validates range
  if (vocab.is_special(id)) {
    const bool start = (id - vocab.specials_offset) % 2 == 0;
    return std::string("</") + (start ? "so" : "eo") + kModalityLetter[size_t(m)] + ">";
  }
  if (m == Modality::text) {
    if (id < SubwordTokenizer::kNumSpecials) return SubwordTokenizer::special_name(id);
    if (vocab.text.size() == 0)
      throw UnknownToken("vocabulary has no attached text tokenizer");
    return decode_text(vocab.text, {id});
  }
  return std::string("<") + grammar_name(m) + "_" + std::to_string(vocab.local_index(id)) +
         ">";
}

int parse_token(const UnifiedVocab& vocab, const std::string& s) {
  // Boundary specials.
  if (s.size() == 6 && s[0] == '<' && s[1] == '/' && s[3] == 'o' && s[5] == '>' &&
      (s[2] == 's' || s[2] == 'e')) {
    for (int m = 0; m < kNumModalities; ++m)
      if (s[4] == kModalityLetter[size_t(m)])
        return s[2] == 's' ? vocab.start_special(Modality(m))
                           : vocab.end_special(Modality(m));
    throw MalformedTokenString("unknown boundary token " + s);
  }
  // Text specials.
  for (int id = 0; id < SubwordTokenizer::kNumSpecials; ++id)
    if (s == SubwordTokenizer::special_name(id)) return id;
  // <modality_k> grammar.
  if (s.size() > 2 && s.front() == '<' && s.back() == '>') {
    const auto underscore = s.rfind('_');
    if (underscore != std::string::npos && underscore > 1) {
      const std::string name = s.substr(1, underscore - 1);
      const std::string num = s.substr(underscore + 1, s.size() - underscore - 2);
      for (int m = 1; m < kNumModalities; ++m) {
        if (name != grammar_name(Modality(m))) continue;
        if (num.empty() || num.find_first_not_of("0123456789") != std::string::npos)
          throw MalformedTokenString("bad token index in " + s);
        const long k = std::strtol(num.c_str(), nullptr, 10);
        if (k < 0 || k >= vocab.size_of(Modality(m)))
          throw MalformedTokenString("token index out of range in " + s);
        return vocab.offset_of(Modality(m)) + int(k);
      }
    }
  }
  // Text subword match.
  if (vocab.text.size() > 0) {
    const std::vector<uint8_t> bytes(s.begin(), s.end());
    for (int id = SubwordTokenizer::kNumSpecials; id < vocab.text.size(); ++id)
      if (vocab.text.vocab[size_t(id)] == bytes) return id;
  }
  throw MalformedTokenString("no token renders as '" + s + "'");
}

std::vector<int> wrap_stream(const UnifiedVocab& vocab, Modality m,
                             const std::vector<int>& local_indices) {
  std::vector<int> out;
  out.reserve(local_indices.size() + 2);
  out.push_back(vocab.start_special(m));
  for (int k : local_indices) {
    if (k < 0 || k >= vocab.size_of(m))
      throw IndexOutOfRange("local index " + std::to_string(k) + " outside " +
                            modality_name(m) + " segment");
    out.push_back(vocab.offset_of(m) + k);
  }
  out.push_back(vocab.end_special(m));
  return out;
}

std::pair<Modality, std::vector<int>> unwrap_stream(const UnifiedVocab& vocab,
                                                    const std::vector<int>& ids) {
  if (ids.size() < 2) throw MalformedTokenString("stream too short to unwrap");
  const int first = ids.front(), last = ids.back();
  if (!vocab.is_special(first) || (first - vocab.specials_offset) % 2 != 0)
    throw MalformedTokenString("stream does not begin with a start special");
  const Modality m = vocab.modality_of(first);
  if (last != vocab.end_special(m))
    throw MalformedTokenString("stream does not end with the matching end special");
  std::vector<int> locals;
  locals.reserve(ids.size() - 2);
  for (size_t i = 1; i + 1 < ids.size(); ++i) {
    if (!vocab.in_segment(ids[i], m))
      throw MalformedTokenString("interior id outside the stream's segment");
    locals.push_back(ids[i] - vocab.offset_of(m));
  }
  return {m, std::move(locals)};
}

std::string UnifiedVocab::manifest_json() const {
  json j;
  j["segments"] = json::array();
  for (const auto& seg : segments)
    j["segments"].push_back({{"modality", modality_name(seg.modality)},
                             {"offset", seg.offset},
                             {"size", seg.size}});
  j["specials_offset"] = specials_offset;
  j["total_size"] = total_size;
  return j.dump();
}

void UnifiedVocab::save(const std::string& path) const {
  json j = json::parse(manifest_json());
  j["hash"] = hash;
  j["text_tokenizer"] = json::parse(text.size() ? text.to_json() : "null");
  write_text_file(path, j.dump(2));
}

UnifiedVocab UnifiedVocab::load(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw IoError(std::string("vocab manifest parse failure: ") + e.what());
  }
  int sizes[6] = {0, 0, 0, 0, 0, 0};
  for (const auto& seg : j["segments"]) {
    const Modality m = modality_from_name(seg["modality"].get<std::string>());
    sizes[int(m)] = seg["size"].get<int>();
  }
  UnifiedVocab v;
  if (!j["text_tokenizer"].is_null()) {
    SubwordTokenizer tok = SubwordTokenizer::from_json(j["text_tokenizer"].dump());
    v = build_vocab(tok, sizes[1], sizes[2], sizes[3], sizes[4], sizes[5]);
  } else {
    v = build_vocab(sizes[0], sizes[1], sizes[2], sizes[3], sizes[4], sizes[5]);
  }
  const std::string want = j.value("hash", "");
  if (!want.empty() && want != v.hash)
    throw VocabHashMismatch("vocabulary hash changed since the manifest was written");
  return v;
}

}  // namespace mlang
