#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mlang/nn.hpp"
#include "mlang/tasks.hpp"
#include "mlang/vocab.hpp"

namespace mlang {

struct ModelConfig {
  int vocab_size = 0;
  int enc_layers = 4;
  int dec_layers = 4;
  int width = 256;
  int heads = 4;
  int ff_mult = 4;
  int max_input = kMaxInputTokens;
  int max_output = 512;
  int rel_buckets = 32;
  int rel_max_distance = 128;
  int pad_id = SubwordTokenizer::kPad;
  int eos_id = SubwordTokenizer::kEos;
  std::string vocab_hash;

  void validate() const;
};

struct DecodeConfig {
  enum class Mode { greedy, sample } mode = Mode::greedy;
  double temperature = 1.0;
  int max_len = 256;
  uint64_t seed = 0;
  // Optional modality mask: allowed[id] != 0 keeps the id; empty allows all.
  std::vector<uint8_t> allowed;
};

// Allowed-id mask for constrained decoding: the given segments plus all
// boundary specials and the text pad/eos controls.
std::vector<uint8_t> modality_mask(const UnifiedVocab& vocab,
                                   const std::vector<Modality>& allowed);

// Encoder-decoder transformer over the unified vocabulary: pre-RMSNorm
// blocks, bucketed relative position bias shared across layers, tied
// input/output embedding. The decoder starts from the pad token and is
// trained with teacher forcing on next-token prediction.
class SeqModel {
 public:
  SeqModel(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }

  // Mean negative log-likelihood of target given input (teacher forcing);
  // pad positions in the target are masked from the loss.
  nn::Tensor nll_graph(const std::vector<int>& input_ids,
                       const std::vector<int>& target_ids);
  double nll_loss(const std::vector<int>& input_ids,
                  const std::vector<int>& target_ids);

  // Per-position negative log-likelihoods under teacher forcing; the mean
  // over non-pad positions equals nll_loss.
  std::vector<double> stepwise_nll(const std::vector<int>& input_ids,
                                   const std::vector<int>& target_ids);

  // Autoregressive generation; stops at eos or max_len. Greedy mode and
  // temperature-0 sampling are identical and deterministic.
  std::vector<int> generate(const std::vector<int>& input_ids,
                            const DecodeConfig& cfg) const;

  void save(const std::string& dir, bool with_optimizer = false,
            const class nn::AdamW* opt = nullptr);
  static SeqModel load(const std::string& dir);
  // Restores optimizer state saved alongside a checkpoint; returns false
  // when the checkpoint has none.
  bool load_optimizer(const std::string& dir, nn::AdamW& opt) const;

 private:
  nn::Tensor encode(const std::vector<int>& input_ids) const;
  nn::Tensor decode(const nn::Tensor& enc_out,
                    const std::vector<int>& dec_input) const;
  nn::Tensor logits(const nn::Tensor& dec_out) const;
  nn::Tensor rel_bias(const std::string& table, int n_q, int n_k,
                      bool bidirectional) const;

  ModelConfig cfg_;
  nn::ParamStore params_;
  int64_t step_ = 0;
};

// --- training --------------------------------------------------------------

struct TrainLmConfig {
  int epochs = 50;
  int batch_size = 8;
  double lr = 2e-4;  // pre-training default; post-training uses 1e-4
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs; 0 = only final
  std::string checkpoint_dir;
  std::string metrics_csv;  // per-step "step,loss,lr,tokens_per_s"
  int log_every = 0;        // epochs; 0 = silent
  bool save_optimizer = true;
};

struct LmTrainReport {
  std::vector<double> epoch_loss;
  double initial_loss = 0;
  double final_loss = 0;
};

// Full-parameter AdamW training over (prompt+condition -> answer+eos) pairs.
// Epoch order reshuffles from the seed so a resumed run replays the exact
// schedule. Throws VocabHashMismatch on out-of-range ids and
// DivergedTraining on non-finite loss.
void train_lm(SeqModel& model, const std::vector<TaskSample>& samples,
              const TrainLmConfig& cfg, nn::AdamW* opt = nullptr,
              LmTrainReport* report = nullptr);

// Teacher-forcing pair for one sample: input = prompt + condition,
// target = answer + eos.
std::pair<std::vector<int>, std::vector<int>> lm_pair(const TaskSample& sample,
                                                      int eos_id);

}  // namespace mlang
