#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mlang/model.hpp"

using namespace mlang;

namespace {

ModelConfig tiny_config(int vocab = 64) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.width = 32;
  cfg.heads = 2;
  cfg.ff_mult = 2;
  cfg.rel_buckets = 8;
  cfg.rel_max_distance = 32;
  return cfg;
}

std::vector<int> random_ids(Rng& rng, int n, int vocab, int lo = 4) {
  std::vector<int> out;
  for (int i = 0; i < n; ++i) out.push_back(lo + int(rng.below(uint64_t(vocab - lo))));
  return out;
}

TaskSample sample_of(std::vector<int> input, std::vector<int> answer) {
  TaskSample s;
  s.kind = TaskKind::audio2motion;
  s.prompt = std::move(input);
  s.answer = std::move(answer);
  return s;
}

}  // namespace

TEST_CASE("build determinism and config validation") {
  SeqModel a(tiny_config(), 7);
  SeqModel b(tiny_config(), 7);
  for (size_t i = 0; i < a.params().items.size(); ++i) {
    CHECK(a.params().items[i].first == b.params().items[i].first);
    CHECK((a.params().items[i].second.value() == b.params().items[i].second.value())
              .all());
  }
  SeqModel c(tiny_config(), 8);
  bool any_diff = false;
  for (size_t i = 0; i < a.params().items.size(); ++i)
    if ((a.params().items[i].second.value() != c.params().items[i].second.value())
            .any())
      any_diff = true;
  CHECK(any_diff);

  ModelConfig bad = tiny_config();
  bad.width = 255;
  bad.heads = 4;
  CHECK_THROWS_AS(SeqModel(bad, 0), InvalidConfig);
}

TEST_CASE("parameter count matches the closed-form formula") {
  ModelConfig cfg = tiny_config(100);
  SeqModel model(cfg, 1);
  const int64_t d = cfg.width, ff = int64_t(cfg.ff_mult) * d, v = cfg.vocab_size;
  const int64_t enc_layer = 2 * d + 4 * d * d + 2 * d * ff;
  const int64_t dec_layer = 3 * d + 8 * d * d + 2 * d * ff;
  const int64_t want = v * d + cfg.enc_layers * enc_layer + d +
                       cfg.dec_layers * dec_layer + d +
                       2 * int64_t(cfg.rel_buckets) * cfg.heads;
  CHECK(model.params().total_params() == want);
}

TEST_CASE("uniform logits give loss = ln(vocab_size)") {
  ModelConfig cfg = tiny_config(100);
  SeqModel model(cfg, 3);
  nn::init_zero(model.params().find("embed"));  // logits become identically 0
  Rng rng(5);
  const auto input = random_ids(rng, 7, cfg.vocab_size);
  const auto target = random_ids(rng, 5, cfg.vocab_size);
  CHECK(std::abs(model.nll_loss(input, target) - std::log(100.0)) < 1e-6);
}

TEST_CASE("nll validation errors") {
  ModelConfig cfg = tiny_config();
  cfg.max_input = 16;
  SeqModel model(cfg, 3);
  Rng rng(5);
  const auto input = random_ids(rng, 17, cfg.vocab_size);
  CHECK_THROWS_AS(model.nll_loss(input, {5}), SequenceTooLong);
  CHECK_THROWS_AS(model.nll_loss({5}, {}), EmptyTarget);
  CHECK_THROWS_AS(model.nll_loss({5}, {cfg.pad_id, cfg.pad_id}), EmptyTarget);
}

TEST_CASE("pad positions are masked from the loss") {
  ModelConfig cfg = tiny_config();
  SeqModel model(cfg, 9);
  Rng rng(11);
  const auto input = random_ids(rng, 6, cfg.vocab_size);
  std::vector<int> target = random_ids(rng, 4, cfg.vocab_size);
  auto steps = model.stepwise_nll(input, target);
  const double mean_plain = model.nll_loss(input, target);
  double sum = 0;
  for (double s : steps) sum += s;
  CHECK(mean_plain == doctest::Approx(sum / 4.0).epsilon(1e-12));

  // Appending pads must not change the masked mean given identical prefixes.
  std::vector<int> padded = target;
  padded.push_back(cfg.pad_id);
  auto steps_padded = model.stepwise_nll(input, padded);
  double sum_live = 0;
  for (size_t i = 0; i < 4; ++i) sum_live += steps_padded[i];
  CHECK(model.nll_loss(input, padded) == doctest::Approx(sum_live / 4.0).epsilon(1e-12));
  for (size_t i = 0; i < 4; ++i)
    CHECK(steps_padded[i] == doctest::Approx(steps[i]).epsilon(1e-12));
}

TEST_CASE("causality: future target tokens never change earlier step losses") {
  ModelConfig cfg = tiny_config();
  SeqModel model(cfg, 13);
  Rng rng(17);
  const auto input = random_ids(rng, 8, cfg.vocab_size);
  auto target = random_ids(rng, 6, cfg.vocab_size);
  auto base = model.stepwise_nll(input, target);
  for (int j = 2; j < 6; ++j) {
    auto mutated = target;
    mutated[size_t(j)] = (mutated[size_t(j)] + 11) % (cfg.vocab_size - 4) + 4;
    auto steps = model.stepwise_nll(input, mutated);
    // target[j] feeds the decoder at position j+1 (and is step j's label),
    // so logits at steps < j are fixed.
    for (int k = 0; k < j; ++k)
      CHECK(steps[size_t(k)] == doctest::Approx(base[size_t(k)]).epsilon(1e-12));
  }
}

TEST_CASE("gradients match central finite differences on a sampled parameter set") {
  ModelConfig cfg = tiny_config(40);
  SeqModel model(cfg, 19);
  Rng rng(23);
  const auto input = random_ids(rng, 5, cfg.vocab_size);
  const auto target = random_ids(rng, 4, cfg.vocab_size);

  model.params().zero_grad();
  nn::Tensor loss = model.nll_graph(input, target);
  nn::backward(loss);

  Rng pick(29);
  const double h = 1e-5;
  int checked = 0;
  for (int trial = 0; trial < 24; ++trial) {
    auto& item = model.params().items[pick.below(model.params().items.size())];
    nn::Tensor w = item.second;
    const int64_t i = int64_t(pick.below(uint64_t(w.numel())));
    if (w.grad().size() == 0) continue;
    const double x0 = w.value()[i];
    w.value()[i] = x0 + h;
    const double fp = model.nll_loss(input, target);
    w.value()[i] = x0 - h;
    const double fm = model.nll_loss(input, target);
    w.value()[i] = x0;
    const double fd = (fp - fm) / (2 * h);
    const double ad = w.grad()[i];
    if (std::abs(fd) < 1e-9 && std::abs(ad) < 1e-9) continue;
    CHECK(std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-6}) < 1e-3);
    ++checked;
  }
  CHECK(checked >= 10);
}

TEST_CASE("single-pair memorization and greedy reproduction") {
  ModelConfig cfg = tiny_config(48);
  SeqModel model(cfg, 31);
  Rng rng(37);
  const auto input = random_ids(rng, 6, cfg.vocab_size);
  const auto answer = random_ids(rng, 5, cfg.vocab_size);

  std::vector<TaskSample> corpus{sample_of(input, answer)};
  TrainLmConfig tc;
  tc.epochs = 500;
  tc.batch_size = 1;
  tc.lr = 4e-3;
  tc.weight_decay = 0.0;
  tc.clip_norm = 5.0;
  tc.seed = 1;
  LmTrainReport rep;
  train_lm(model, corpus, tc, nullptr, &rep);

  auto [in, tgt] = lm_pair(corpus[0], cfg.eos_id);
  CHECK(model.nll_loss(in, tgt) < 0.01);

  DecodeConfig dc;
  dc.max_len = 16;
  CHECK(model.generate(in, dc) == answer);
}

TEST_CASE("training reduces loss on a small synthetic corpus") {
  ModelConfig cfg = tiny_config(64);
  SeqModel model(cfg, 41);
  Rng rng(43);
  std::vector<TaskSample> corpus;
  for (int i = 0; i < 12; ++i) {
    // Deterministic mapping: answer = input shifted by one id.
    auto input = random_ids(rng, 5, 60);
    std::vector<int> answer;
    for (int id : input) answer.push_back(id + 1 >= 60 ? 4 : id + 1);
    corpus.push_back(sample_of(input, answer));
  }
  TrainLmConfig tc;
  tc.epochs = 80;
  tc.batch_size = 4;
  tc.lr = 2e-3;
  tc.seed = 2;
  LmTrainReport rep;
  train_lm(model, corpus, tc, nullptr, &rep);
  CHECK(rep.final_loss < 0.5 * rep.initial_loss);
}

TEST_CASE("train_lm rejects out-of-vocabulary corpora") {
  SeqModel model(tiny_config(32), 1);
  std::vector<TaskSample> corpus{sample_of({1, 2, 3}, {40})};
  TrainLmConfig tc;
  tc.epochs = 1;
  CHECK_THROWS_AS(train_lm(model, corpus, tc), VocabHashMismatch);
}

TEST_CASE("constrained decoding stays inside the allowed set") {
  SubwordTokenizer tok = train_subword({"abc"}, SubwordTokenizer::kByteBase + 256);
  UnifiedVocab vocab = build_vocab(tok, 8, 8, 8, 8, 8);
  ModelConfig cfg = tiny_config(vocab.total_size);
  SeqModel model(cfg, 47);

  DecodeConfig dc;
  dc.max_len = 24;
  dc.allowed = modality_mask(vocab, {Modality::lower});
  Rng rng(53);
  for (int trial = 0; trial < 25; ++trial) {
    dc.mode = trial % 2 ? DecodeConfig::Mode::sample : DecodeConfig::Mode::greedy;
    dc.temperature = 1.5;
    dc.seed = trial;
    auto out = model.generate(random_ids(rng, 6, vocab.total_size), dc);
    for (int id : out) {
      const bool ok = vocab.in_segment(id, Modality::lower) || vocab.is_special(id) ||
                      id < SubwordTokenizer::kNumSpecials;
      CHECK(ok);
    }
  }
}

TEST_CASE("temperature-zero sampling equals greedy decoding") {
  SeqModel model(tiny_config(40), 59);
  Rng rng(61);
  const auto input = random_ids(rng, 7, 40);
  DecodeConfig greedy;
  greedy.max_len = 12;
  DecodeConfig t0;
  t0.mode = DecodeConfig::Mode::sample;
  t0.temperature = 0.0;
  t0.max_len = 12;
  CHECK(model.generate(input, greedy) == model.generate(input, t0));
}

TEST_CASE("checkpoint round trip reproduces generation and loss") {
  SeqModel model(tiny_config(44), 67);
  Rng rng(71);
  const auto input = random_ids(rng, 6, 44);
  const auto target = random_ids(rng, 4, 44);

  const auto dir = (std::filesystem::temp_directory_path() / "mlang_lm_ckpt").string();
  std::filesystem::remove_all(dir);
  model.save(dir);
  SeqModel back = SeqModel::load(dir);

  DecodeConfig dc;
  dc.max_len = 10;
  CHECK(back.generate(input, dc) == model.generate(input, dc));
  CHECK(back.nll_loss(input, target) == model.nll_loss(input, target));

  // Corrupt the blob -> CorruptCheckpoint.
  {
    std::ofstream trunc(dir + "/params.bin", std::ios::trunc);
  }
  CHECK_THROWS_AS(SeqModel::load(dir), CorruptCheckpoint);
  std::filesystem::remove_all(dir);
}

TEST_CASE("resuming from a checkpoint reproduces uninterrupted training") {
  Rng rng(73);
  std::vector<TaskSample> corpus;
  for (int i = 0; i < 8; ++i)
    corpus.push_back(sample_of(random_ids(rng, 4, 40), random_ids(rng, 3, 40)));

  const auto dir =
      (std::filesystem::temp_directory_path() / "mlang_lm_resume").string();
  std::filesystem::remove_all(dir);

  TrainLmConfig tc;
  tc.epochs = 4;
  tc.batch_size = 4;
  tc.lr = 1e-3;
  tc.seed = 5;
  tc.checkpoint_every = 2;
  tc.checkpoint_dir = dir;

  SeqModel a(tiny_config(44), 79);
  nn::AdamW opt_a;
  LmTrainReport rep_a;
  train_lm(a, corpus, tc, &opt_a, &rep_a);

  SeqModel b = SeqModel::load(dir + "/epoch_2");
  nn::AdamW opt_b;
  REQUIRE(b.load_optimizer(dir + "/epoch_2", opt_b));
  TrainLmConfig tc2 = tc;
  tc2.epochs = 2;
  tc2.checkpoint_dir.clear();
  tc2.checkpoint_every = 0;
  LmTrainReport rep_b;
  train_lm(b, corpus, tc2, &opt_b, &rep_b);

  // Epochs 3 and 4 replay exactly.
  CHECK(rep_b.epoch_loss[0] == doctest::Approx(rep_a.epoch_loss[2]).epsilon(1e-12));
  CHECK(rep_b.epoch_loss[1] == doctest::Approx(rep_a.epoch_loss[3]).epsilon(1e-12));

  // Final parameters agree bit-for-bit with the final emitted checkpoint.
  SeqModel final_a = SeqModel::load(dir + "/final");
  nn::round_to_f32(b.params());
  for (size_t i = 0; i < b.params().items.size(); ++i)
    CHECK((b.params().items[i].second.value() ==
           final_a.params().items[i].second.value())
              .all());
  std::filesystem::remove_all(dir);
}
