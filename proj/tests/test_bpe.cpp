#include "doctest.h"
#include "mlang/bpe.hpp"
#include "mlang/rng.hpp"

#include <filesystem>
#include <set>

using namespace mlang;

TEST_CASE("first merge follows pair frequency counted by hand") {
  // "aaab" + "aab": pairs aa:3, ab:2 -> first merge is (a, a).
  const int base = SubwordTokenizer::kByteBase + 256;
  SubwordTokenizer tok = train_subword({"aaab", "aab"}, base + 1);
  REQUIRE(tok.merges.size() == 1);
  const int a_id = SubwordTokenizer::kByteBase + 'a';
  CHECK(tok.merges[0] == std::make_pair(a_id, a_id));
  CHECK(tok.size() == base + 1);

  // "aaab" -> [aa, a, b] after the single merge.
  auto ids = encode_text(tok, "aaab");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == base);
  CHECK(decode_text(tok, ids) == "aaab");
}

TEST_CASE("train_subword validation") {
  CHECK_THROWS_AS(train_subword({}, 4096), EmptyCorpus);
  CHECK_THROWS_AS(train_subword({"abc"}, 100), VocabTooSmall);

  SubwordTokenizer tok = train_subword({"hello"}, SubwordTokenizer::kByteBase + 256 + 8);
  auto ids = encode_text(tok, "hello");
  CHECK(decode_text(tok, ids) == "hello");
}

TEST_CASE("round trip on random byte strings and training corpus") {
  Rng rng(3);
  std::vector<std::string> corpus;
  const std::string words[] = {"the", "quick", "brown", "fox", "jumps",
                               "over", "lazy", "dog", "happiness", "anger"};
  for (int i = 0; i < 60; ++i) {
    std::string s;
    for (int w = 0; w < 8; ++w) {
      s += words[rng.below(10)];
      s += ' ';
    }
    corpus.push_back(s);
  }
  SubwordTokenizer tok = train_subword(corpus, SubwordTokenizer::kByteBase + 256 + 64);
  CHECK(tok.size() == SubwordTokenizer::kByteBase + 256 + 64);

  for (const auto& s : corpus) CHECK(decode_text(tok, encode_text(tok, s)) == s);

  for (int trial = 0; trial < 1000; ++trial) {
    std::string s;
    const int len = int(rng.below(40));
    for (int i = 0; i < len; ++i) s.push_back(char(32 + rng.below(95)));
    CHECK(decode_text(tok, encode_text(tok, s)) == s);
  }

  // Merged tokens tighten the encoding of in-domain text.
  CHECK(encode_text(tok, corpus[0]).size() < corpus[0].size());
}

TEST_CASE("empty string and unknown ids") {
  SubwordTokenizer tok = train_subword({"ab"}, SubwordTokenizer::kByteBase + 256);
  CHECK(encode_text(tok, "").empty());
  CHECK(decode_text(tok, {}) == "");
  CHECK_THROWS_AS(decode_text(tok, {tok.size()}), UnknownId);
  CHECK_THROWS_AS(decode_text(tok, {-1}), UnknownId);
}

TEST_CASE("specials are never produced by merges") {
  SubwordTokenizer tok =
      train_subword({"abababab milk milk milk"}, SubwordTokenizer::kByteBase + 256 + 16);
  for (const auto& [a, b] : tok.merges) {
    CHECK(a >= SubwordTokenizer::kByteBase);
    CHECK(b >= SubwordTokenizer::kByteBase);
  }
  auto ids = encode_text(tok, "abab milk");
  for (int id : ids) CHECK(id >= SubwordTokenizer::kByteBase);
}

TEST_CASE("newline separator keeps encoding prefix-stable") {
  std::vector<std::string> corpus = {"walk north\nwave hands", "walk south\nnod head"};
  SubwordTokenizer tok = train_subword(corpus, SubwordTokenizer::kByteBase + 256 + 32);

  Rng rng(9);
  const std::string parts[] = {"walk", "wave hands", "north", "nod head", "xyz"};
  for (int trial = 0; trial < 50; ++trial) {
    const std::string a = parts[rng.below(5)];
    const std::string b = parts[rng.below(5)];
    auto joint = encode_text(tok, a + "\n" + b);
    auto left = encode_text(tok, a);
    auto right = encode_text(tok, b);
    std::vector<int> want = left;
    want.push_back(SubwordTokenizer::kByteBase + '\n');
    want.insert(want.end(), right.begin(), right.end());
    CHECK(joint == want);
  }
}

TEST_CASE("vocab byte strings are unique (render bijectivity)") {
  SubwordTokenizer tok = train_subword(
      {"abc abc abc ababab ccc dddd abcabc"}, SubwordTokenizer::kByteBase + 256 + 24);
  std::set<std::vector<uint8_t>> seen;
  for (int id = SubwordTokenizer::kByteBase; id < tok.size(); ++id) {
    CHECK(seen.insert(tok.vocab[size_t(id)]).second);
  }
}

TEST_CASE("tokenizer json round trip") {
  SubwordTokenizer tok =
      train_subword({"round trip me please"}, SubwordTokenizer::kByteBase + 256 + 8);
  SubwordTokenizer back = SubwordTokenizer::from_json(tok.to_json());
  CHECK(back.vocab == tok.vocab);
  CHECK(back.merges == tok.merges);
  CHECK(encode_text(back, "round trip") == encode_text(tok, "round trip"));

  const auto path = (std::filesystem::temp_directory_path() / "mlang_tok.json").string();
  tok.save(path);
  SubwordTokenizer loaded = SubwordTokenizer::load(path);
  CHECK(loaded.vocab == tok.vocab);
  std::filesystem::remove(path);
}

TEST_CASE("training is deterministic") {
  std::vector<std::string> corpus = {"xyxyxy", "yxyxyx", "xxyy"};
  SubwordTokenizer a = train_subword(corpus, SubwordTokenizer::kByteBase + 256 + 12);
  SubwordTokenizer b = train_subword(corpus, SubwordTokenizer::kByteBase + 256 + 12);
  CHECK(a.vocab == b.vocab);
  CHECK(a.merges == b.merges);
}
