#include "mlang/bpe.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mlang/blob.hpp"

namespace mlang {

using nlohmann::json;

namespace {

constexpr uint8_t kBoundaryByte = '\n';

std::vector<int> bytes_to_ids(const std::string& s) {
  std::vector<int> ids;
  ids.reserve(s.size());
  for (unsigned char c : s) ids.push_back(SubwordTokenizer::kByteBase + int(c));
  return ids;
}

// Applies one merge rule in place, left to right.
void apply_merge(std::vector<int>& ids, int a, int b, int fused) {
  size_t w = 0;
  for (size_t r = 0; r < ids.size();) {
    if (r + 1 < ids.size() && ids[r] == a && ids[r + 1] == b) {
      ids[w++] = fused;
      r += 2;
    } else {
      ids[w++] = ids[r++];
    }
  }
  ids.resize(w);
}

}  // namespace

const char* SubwordTokenizer::special_name(int id) {
  switch (id) {
    case kPad: return "<pad>";
    case kUnk: return "<unk>";
    case kEos: return "<eos>";
    case kMask: return "<mask>";
  }
  return "";
}

SubwordTokenizer train_subword(const std::vector<std::string>& corpus,
                               int vocab_size) {
  if (corpus.empty()) throw EmptyCorpus("training corpus is empty");
  const int base = SubwordTokenizer::kByteBase + 256;
  if (vocab_size < base)
    throw VocabTooSmall("vocab_size must cover " + std::to_string(base) +
                        " byte tokens and specials");

  SubwordTokenizer tok;
  tok.vocab.resize(size_t(base));
  for (int b = 0; b < 256; ++b)
    tok.vocab[size_t(SubwordTokenizer::kByteBase + b)] = {uint8_t(b)};

  std::vector<std::vector<int>> docs;
  docs.reserve(corpus.size());
  for (const auto& s : corpus) docs.push_back(bytes_to_ids(s));

  const int boundary_id = SubwordTokenizer::kByteBase + int(kBoundaryByte);
  std::set<std::vector<uint8_t>> existing(tok.vocab.begin(), tok.vocab.end());

  while (tok.size() < vocab_size) {
    std::map<std::pair<int, int>, int64_t> counts;
    for (const auto& doc : docs)
      for (size_t i = 0; i + 1 < doc.size(); ++i) {
        if (doc[i] == boundary_id || doc[i + 1] == boundary_id) continue;
        ++counts[{doc[i], doc[i + 1]}];
      }

    std::pair<int, int> best{-1, -1};
    int64_t best_count = 0;
    std::pair<std::vector<uint8_t>, std::vector<uint8_t>> best_key;
    for (const auto& [pair, count] : counts) {
      std::vector<uint8_t> fused = tok.vocab[size_t(pair.first)];
      const auto& right = tok.vocab[size_t(pair.second)];
      fused.insert(fused.end(), right.begin(), right.end());
      if (existing.count(fused)) continue;  // keep byte strings unique
      std::pair<std::vector<uint8_t>, std::vector<uint8_t>> key{
          tok.vocab[size_t(pair.first)], tok.vocab[size_t(pair.second)]};
      if (count > best_count || (count == best_count && best_count > 0 && key < best_key)) {
        best_count = count;
        best = pair;
        best_key = key;
      }
    }
    if (best_count == 0) break;  // nothing left to merge

    std::vector<uint8_t> fused = tok.vocab[size_t(best.first)];
    const auto& right = tok.vocab[size_t(best.second)];
    fused.insert(fused.end(), right.begin(), right.end());
    const int fused_id = tok.size();
    tok.vocab.push_back(fused);
    existing.insert(fused);
    tok.merges.push_back(best);
    for (auto& doc : docs) apply_merge(doc, best.first, best.second, fused_id);
  }
  return tok;
}

std::vector<int> encode_text(const SubwordTokenizer& tok, const std::string& s) {
  std::vector<int> ids = bytes_to_ids(s);
  for (size_t m = 0; m < tok.merges.size(); ++m)
    apply_merge(ids, tok.merges[m].first, tok.merges[m].second,
                SubwordTokenizer::kByteBase + 256 + int(m));
  return ids;
}

std::string decode_text(const SubwordTokenizer& tok, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= tok.size())
      throw UnknownId("token id " + std::to_string(id) + " outside vocabulary of " +
                      std::to_string(tok.size()));
    const auto& bytes = tok.vocab[size_t(id)];
    out.append(bytes.begin(), bytes.end());
  }
  return out;
}

std::string SubwordTokenizer::to_json() const {
  json j;
  j["vocab"] = json::array();
  for (const auto& v : vocab) j["vocab"].push_back(std::vector<int>(v.begin(), v.end()));
  j["merges"] = json::array();
  for (const auto& [a, b] : merges) j["merges"].push_back({a, b});
  j["specials"] = {{"pad", kPad}, {"unk", kUnk}, {"eos", kEos}, {"mask", kMask}};
  return j.dump();
}

SubwordTokenizer SubwordTokenizer::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("tokenizer parse failure: ") + e.what());
  }
  if (!j.contains("vocab") || !j.contains("merges") || !j.contains("specials"))
    throw IoError("tokenizer json missing fields");
  SubwordTokenizer tok;
  for (const auto& entry : j["vocab"]) {
    std::vector<uint8_t> bytes;
    for (const auto& b : entry) bytes.push_back(uint8_t(b.get<int>()));
    tok.vocab.push_back(std::move(bytes));
  }
  for (const auto& m : j["merges"])
    tok.merges.emplace_back(m[0].get<int>(), m[1].get<int>());
  return tok;
}

void SubwordTokenizer::save(const std::string& path) const {
  write_text_file(path, to_json());
}

SubwordTokenizer SubwordTokenizer::load(const std::string& path) {
  return from_json(read_text_file(path));
}

}  // namespace mlang
