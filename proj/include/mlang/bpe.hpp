#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mlang/errors.hpp"

namespace mlang {

// Byte-level byte-pair tokenizer. Id layout: four reserved specials, the
// 256 byte tokens, then one token per learned merge. Newline acts as a hard
// merge boundary so streams joined on '\n' tokenize piecewise.
struct SubwordTokenizer {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kEos = 2;
  static constexpr int kMask = 3;
  static constexpr int kNumSpecials = 4;
  static constexpr int kByteBase = kNumSpecials;

  std::vector<std::vector<uint8_t>> vocab;   // byte string per id; specials empty
  std::vector<std::pair<int, int>> merges;   // merged id pairs, training order

  int size() const { return int(vocab.size()); }

  // Printable name for a special id ("<pad>", "<unk>", "<eos>", "<mask>").
  static const char* special_name(int id);

  std::string to_json() const;
  static SubwordTokenizer from_json(const std::string& text);
  void save(const std::string& path) const;
  static SubwordTokenizer load(const std::string& path);
};

// Byte-pair-merge training: most-frequent pair first, ties broken by
// lexicographic order on the pair's byte strings. Deterministic. Stops
// early if the corpus runs out of mergeable pairs.
SubwordTokenizer train_subword(const std::vector<std::string>& corpus,
                               int vocab_size);

std::vector<int> encode_text(const SubwordTokenizer& tok, const std::string& s);
std::string decode_text(const SubwordTokenizer& tok, const std::vector<int>& ids);

}  // namespace mlang
