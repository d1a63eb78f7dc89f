#include "mlang/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "mlang/blob.hpp"

namespace mlang {

using nn::Tensor;
using nlohmann::json;

void ModelConfig::validate() const {
  if (vocab_size < 2) throw InvalidConfig("vocab_size must be >= 2");
  if (width % heads != 0) throw InvalidConfig("width must be divisible by heads");
  if (enc_layers < 1 || dec_layers < 1) throw InvalidConfig("need >= 1 layer per side");
  if (rel_buckets < 4 || rel_buckets % 2 != 0)
    throw InvalidConfig("rel_buckets must be an even number >= 4");
}

std::vector<uint8_t> modality_mask(const UnifiedVocab& vocab,
                                   const std::vector<Modality>& allowed) {
  std::vector<uint8_t> mask(size_t(vocab.total_size), 0);
  for (Modality m : allowed)
    for (int id = vocab.offset_of(m); id < vocab.offset_of(m) + vocab.size_of(m); ++id)
      mask[size_t(id)] = 1;
  for (int id = vocab.specials_offset; id < vocab.total_size; ++id)
    mask[size_t(id)] = 1;
  for (int id = 0; id < SubwordTokenizer::kNumSpecials; ++id) mask[size_t(id)] = 1;
  return mask;
}

namespace {

// T5-style relative position bucketing; rel = key_pos - query_pos.
int rel_bucket(int rel, bool bidirectional, int num_buckets, int max_distance) {
  int bucket = 0;
  int n = num_buckets;
  if (bidirectional) {
    n /= 2;
    if (rel > 0) bucket += n;
    rel = std::abs(rel);
  } else {
    rel = -std::min(rel, 0);
  }
  const int max_exact = n / 2;
  if (rel < max_exact) return bucket + rel;
  const double v = max_exact +
                   std::log(double(rel) / max_exact) /
                       std::log(double(max_distance) / max_exact) *
                       (n - max_exact);
  return bucket + std::min(int(v), n - 1);
}

Mat causal_mask(int n) {
  Mat m = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m(i, j) = -1e30;
  return m;
}

}  // namespace

SeqModel::SeqModel(ModelConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int d = cfg_.width;
  const int ff = cfg_.ff_mult * d;

  auto linear = [&](const std::string& name, int out, int in) {
    Tensor w = params_.add(name, {out, in});
    nn::init_uniform(w, rng, -nn::fan_in_bound(in), nn::fan_in_bound(in));
  };
  auto norm = [&](const std::string& name) {
    nn::init_const(params_.add(name, {d}), 1.0);
  };

  Tensor embed = params_.add("embed", {cfg_.vocab_size, d});
  nn::init_normal(embed, rng, 1.0 / std::sqrt(double(d)));

  for (int i = 0; i < cfg_.enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i) + ".";
    norm(p + "ln1");
    linear(p + "wq", d, d);
    linear(p + "wk", d, d);
    linear(p + "wv", d, d);
    linear(p + "wo", d, d);
    norm(p + "ln2");
    linear(p + "w1", ff, d);
    linear(p + "w2", d, ff);
  }
  norm("enc.final_ln");

  for (int i = 0; i < cfg_.dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i) + ".";
    norm(p + "ln1");
    linear(p + "wq", d, d);
    linear(p + "wk", d, d);
    linear(p + "wv", d, d);
    linear(p + "wo", d, d);
    norm(p + "ln2");
    linear(p + "xwq", d, d);
    linear(p + "xwk", d, d);
    linear(p + "xwv", d, d);
    linear(p + "xwo", d, d);
    norm(p + "ln3");
    linear(p + "w1", ff, d);
    linear(p + "w2", d, ff);
  }
  norm("dec.final_ln");

  Tensor re = params_.add("rel.enc", {cfg_.rel_buckets, cfg_.heads});
  Tensor rd = params_.add("rel.dec", {cfg_.rel_buckets, cfg_.heads});
  nn::init_normal(re, rng, 0.1);
  nn::init_normal(rd, rng, 0.1);
}

Tensor SeqModel::rel_bias(const std::string& table, int n_q, int n_k,
                          bool bidirectional) const {
  std::vector<int> buckets(size_t(n_q) * size_t(n_k));
  for (int i = 0; i < n_q; ++i)
    for (int j = 0; j < n_k; ++j)
      buckets[size_t(i) * n_k + j] =
          rel_bucket(j - i, bidirectional, cfg_.rel_buckets, cfg_.rel_max_distance);
  return nn::embedding(params_.find(table), buckets);  // [n_q*n_k, heads]
}

namespace {

// Multi-head attention with weights [out,in]; bias_gathered is the
// relative-position gather ([n_q*n_k, heads]) or undefined.
Tensor attention(const nn::ParamStore& params, const std::string& prefix,
                 const Tensor& x_q, const Tensor& x_kv, int heads,
                 const Tensor& bias_gathered, const Mat* additive_mask) {
  const int d = x_q.cols();
  const int dh = d / heads;
  Tensor Q = nn::matmul_nt(x_q, params.find(prefix + "wq"));
  Tensor K = nn::matmul_nt(x_kv, params.find(prefix + "wk"));
  Tensor V = nn::matmul_nt(x_kv, params.find(prefix + "wv"));
  Tensor Wo = params.find(prefix + "wo");
  const int n = x_q.rows(), m = x_kv.rows();
  Tensor out;
  for (int h = 0; h < heads; ++h) {
    Tensor Qh = nn::slice_cols(Q, h * dh, dh);
    Tensor Kh = nn::slice_cols(K, h * dh, dh);
    Tensor Vh = nn::slice_cols(V, h * dh, dh);
    Tensor scores = nn::scale(nn::matmul_nt(Qh, Kh), 1.0 / std::sqrt(double(dh)));
    if (bias_gathered.defined())
      scores = nn::add(scores,
                       nn::reshape(nn::slice_cols(bias_gathered, h, 1), {n, m}));
    if (additive_mask) scores = nn::add(scores, Tensor::constant(*additive_mask));
    Tensor A = nn::softmax_rows(scores);
    Tensor ctx = nn::matmul(A, Vh);
    Tensor proj = nn::matmul(ctx, nn::slice_rows(Wo, h * dh, dh));
    out = out.defined() ? nn::add(out, proj) : proj;
  }
  return out;
}

}  // namespace

Tensor SeqModel::encode(const std::vector<int>& input_ids) const {
  if (input_ids.empty()) throw SequenceTooLong("input must be non-empty");
  if (int(input_ids.size()) > cfg_.max_input)
    throw SequenceTooLong("input length " + std::to_string(input_ids.size()) +
                          " exceeds max_input " + std::to_string(cfg_.max_input));
  Tensor x = nn::embedding(params_.find("embed"), input_ids);
  const int n = int(input_ids.size());
  Tensor bias = rel_bias("rel.enc", n, n, true);
  for (int i = 0; i < cfg_.enc_layers; ++i) {
    const std::string p = "enc." + std::to_string(i) + ".";
    Tensor h = nn::rmsnorm(x, params_.find(p + "ln1"));
    x = nn::add(x, attention(params_, p, h, h, cfg_.heads, bias, nullptr));
    Tensor h2 = nn::rmsnorm(x, params_.find(p + "ln2"));
    Tensor ffn = nn::matmul_nt(nn::relu(nn::matmul_nt(h2, params_.find(p + "w1"))),
                               params_.find(p + "w2"));
    x = nn::add(x, ffn);
  }
  return nn::rmsnorm(x, params_.find("enc.final_ln"));
}

Tensor SeqModel::decode(const Tensor& enc_out,
                        const std::vector<int>& dec_input) const {
  Tensor x = nn::embedding(params_.find("embed"), dec_input);
  const int n = int(dec_input.size());
  Tensor bias = rel_bias("rel.dec", n, n, false);
  const Mat causal = causal_mask(n);
  for (int i = 0; i < cfg_.dec_layers; ++i) {
    const std::string p = "dec." + std::to_string(i) + ".";
    Tensor h = nn::rmsnorm(x, params_.find(p + "ln1"));
    x = nn::add(x, attention(params_, p, h, h, cfg_.heads, bias, &causal));
    Tensor h2 = nn::rmsnorm(x, params_.find(p + "ln2"));
    x = nn::add(x, attention(params_, p + "x", h2, enc_out, cfg_.heads, Tensor(),
                             nullptr));
    Tensor h3 = nn::rmsnorm(x, params_.find(p + "ln3"));
    Tensor ffn = nn::matmul_nt(nn::relu(nn::matmul_nt(h3, params_.find(p + "w1"))),
                               params_.find(p + "w2"));
    x = nn::add(x, ffn);
  }
  return nn::rmsnorm(x, params_.find("dec.final_ln"));
}

Tensor SeqModel::logits(const Tensor& dec_out) const {
  // Tied embedding; rescale by 1/sqrt(width) as in the T5 family.
  return nn::scale(nn::matmul_nt(dec_out, params_.find("embed")),
                   1.0 / std::sqrt(double(cfg_.width)));
}

Tensor SeqModel::nll_graph(const std::vector<int>& input_ids,
                           const std::vector<int>& target_ids) {
  if (target_ids.empty()) throw EmptyTarget("target must be non-empty");
  if (int(target_ids.size()) > cfg_.max_output)
    throw SequenceTooLong("target exceeds max_output");
  std::vector<int> dec_input;
  dec_input.push_back(cfg_.pad_id);  // decoder start token
  dec_input.insert(dec_input.end(), target_ids.begin(), target_ids.end() - 1);

  Tensor enc = encode(input_ids);
  Tensor dec = decode(enc, dec_input);
  Tensor lsm = nn::log_softmax_rows(logits(dec));
  Tensor picked = nn::pick_per_row(lsm, target_ids);

  std::vector<double> mask(target_ids.size(), 0.0);
  int64_t live = 0;
  for (size_t i = 0; i < target_ids.size(); ++i)
    if (target_ids[i] != cfg_.pad_id) {
      mask[i] = 1.0;
      ++live;
    }
  if (live == 0) throw EmptyTarget("target holds only pad tokens");
  Tensor masked = nn::mul(picked, Tensor::constant(mask));
  return nn::scale(nn::sum(masked), -1.0 / double(live));
}

double SeqModel::nll_loss(const std::vector<int>& input_ids,
                          const std::vector<int>& target_ids) {
  nn::NoGrad ng;
  return nll_graph(input_ids, target_ids).item();
}

std::vector<double> SeqModel::stepwise_nll(const std::vector<int>& input_ids,
                                           const std::vector<int>& target_ids) {
  nn::NoGrad ng;
  if (target_ids.empty()) throw EmptyTarget("target must be non-empty");
  std::vector<int> dec_input;
  dec_input.push_back(cfg_.pad_id);
  dec_input.insert(dec_input.end(), target_ids.begin(), target_ids.end() - 1);
  Tensor lsm = nn::log_softmax_rows(logits(decode(encode(input_ids), dec_input)));
  Tensor picked = nn::pick_per_row(lsm, target_ids);
  std::vector<double> out(target_ids.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = -picked.value()[Eigen::Index(i)];
  return out;
}

std::vector<int> SeqModel::generate(const std::vector<int>& input_ids,
                                    const DecodeConfig& dc) const {
  nn::NoGrad ng;
  if (!dc.allowed.empty() && int(dc.allowed.size()) != cfg_.vocab_size)
    throw InvalidConfig("constraint mask must cover the whole vocabulary");
  Tensor enc = encode(input_ids);
  Rng rng(dc.seed);
  std::vector<int> out;
  std::vector<int> dec_input{cfg_.pad_id};
  const int max_len = std::min(dc.max_len, cfg_.max_output);
  while (int(out.size()) < max_len) {
    Tensor dec = decode(enc, dec_input);
    Tensor lg = logits(dec);
    Eigen::VectorXd row =
        lg.mat().row(lg.rows() - 1).transpose();
    if (!dc.allowed.empty())
      for (int v = 0; v < cfg_.vocab_size; ++v)
        if (!dc.allowed[size_t(v)]) row[v] = -1e30;

    int next;
    if (dc.mode == DecodeConfig::Mode::greedy || dc.temperature <= 0.0) {
      Eigen::Index arg;
      row.maxCoeff(&arg);
      next = int(arg);
    } else {
      Eigen::VectorXd scaled = row / dc.temperature;
      const double mx = scaled.maxCoeff();
      Eigen::VectorXd p = (scaled.array() - mx).exp();
      p /= p.sum();
      double r = rng.uniform();
      next = cfg_.vocab_size - 1;
      for (int v = 0; v < cfg_.vocab_size; ++v) {
        r -= p[v];
        if (r <= 0) {
          next = v;
          break;
        }
      }
    }
    if (next == cfg_.eos_id) break;
    out.push_back(next);
    dec_input.push_back(next);
  }
  return out;
}

// --- checkpointing -----------------------------------------------------------

void SeqModel::save(const std::string& dir, bool with_optimizer,
                    const nn::AdamW* opt) {
  ensure_dir(dir);
  json j;
  j["kind"] = "seq_model";
  j["vocab_size"] = cfg_.vocab_size;
  j["enc_layers"] = cfg_.enc_layers;
  j["dec_layers"] = cfg_.dec_layers;
  j["width"] = cfg_.width;
  j["heads"] = cfg_.heads;
  j["ff_mult"] = cfg_.ff_mult;
  j["max_input"] = cfg_.max_input;
  j["max_output"] = cfg_.max_output;
  j["rel_buckets"] = cfg_.rel_buckets;
  j["rel_max_distance"] = cfg_.rel_max_distance;
  j["pad_id"] = cfg_.pad_id;
  j["eos_id"] = cfg_.eos_id;
  j["vocab_hash"] = cfg_.vocab_hash;
  j["step"] = step_;
  j["has_optimizer"] = with_optimizer && opt != nullptr;
  write_json_file(dir + "/config.json", j);
  save_params(dir, "params", params_);
  if (with_optimizer && opt) {
    NamedTensorData state;
    opt->save_state(params_, state);
    std::vector<double> t{double(opt->steps_taken())};
    state.emplace_back("adam_t", std::make_pair(std::vector<int>{1}, t));
    write_blob(dir, "optim", state);
  }
}

SeqModel SeqModel::load(const std::string& dir) {
  json j = read_json_file(dir + "/config.json");
  if (!j.contains("kind") || j["kind"] != "seq_model")
    throw CorruptCheckpoint(dir + " is not a sequence-model checkpoint");
  ModelConfig cfg;
  cfg.vocab_size = j["vocab_size"].get<int>();
  cfg.enc_layers = j["enc_layers"].get<int>();
  cfg.dec_layers = j["dec_layers"].get<int>();
  cfg.width = j["width"].get<int>();
  cfg.heads = j["heads"].get<int>();
  cfg.ff_mult = j["ff_mult"].get<int>();
  cfg.max_input = j["max_input"].get<int>();
  cfg.max_output = j["max_output"].get<int>();
  cfg.rel_buckets = j["rel_buckets"].get<int>();
  cfg.rel_max_distance = j["rel_max_distance"].get<int>();
  cfg.pad_id = j["pad_id"].get<int>();
  cfg.eos_id = j["eos_id"].get<int>();
  cfg.vocab_hash = j["vocab_hash"].get<std::string>();
  SeqModel model(cfg, 0);
  load_params(dir, "params", model.params_);
  model.step_ = j.value("step", int64_t(0));
  return model;
}

bool SeqModel::load_optimizer(const std::string& dir, nn::AdamW& opt) const {
  if (!blob_exists(dir, "optim")) return false;
  auto blob = read_blob(dir, "optim");
  std::unordered_map<std::string, std::vector<double>> m, v;
  int64_t t = 0;
  for (auto& [name, sv] : blob) {
    if (name == "adam_t")
      t = int64_t(sv.second[0]);
    else if (name.rfind("adam_m.", 0) == 0)
      m[name] = sv.second;
    else if (name.rfind("adam_v.", 0) == 0)
      v[name] = sv.second;
  }
  opt.load_state(params_, m, v, t);
  return true;
}

// --- training ----------------------------------------------------------------

std::pair<std::vector<int>, std::vector<int>> lm_pair(const TaskSample& sample,
                                                      int eos_id) {
  std::vector<int> input = sample.prompt;
  input.insert(input.end(), sample.condition.begin(), sample.condition.end());
  std::vector<int> target = sample.answer;
  target.push_back(eos_id);
  return {std::move(input), std::move(target)};
}

void train_lm(SeqModel& model, const std::vector<TaskSample>& samples,
              const TrainLmConfig& cfg, nn::AdamW* opt_in, LmTrainReport* report) {
  if (samples.empty()) throw EmptyDataset("training corpus is empty");
  const int vocab = model.config().vocab_size;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
  for (const auto& s : samples) {
    auto pair = lm_pair(s, model.config().eos_id);
    for (int id : pair.first)
      if (id < 0 || id >= vocab)
        throw VocabHashMismatch("corpus id outside the model vocabulary");
    for (int id : pair.second)
      if (id < 0 || id >= vocab)
        throw VocabHashMismatch("corpus id outside the model vocabulary");
    pairs.push_back(std::move(pair));
  }

  nn::AdamW local_opt;
  nn::AdamW& opt = opt_in ? *opt_in : local_opt;
  opt.config().lr = cfg.lr;
  opt.config().weight_decay = cfg.weight_decay;
  opt.config().clip_norm = cfg.clip_norm;

  const int steps_per_epoch =
      int((pairs.size() + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size));
  const int64_t start_epoch = model.step_count() / std::max(1, steps_per_epoch);

  std::ofstream csv;
  if (!cfg.metrics_csv.empty()) {
    const bool fresh = !path_exists(cfg.metrics_csv);
    csv.open(cfg.metrics_csv, std::ios::app);
    if (!csv) throw IoError("cannot write " + cfg.metrics_csv);
    if (fresh) csv << "step,loss,lr,tokens_per_s\n";
  }

  LmTrainReport local_report;
  LmTrainReport& rep = report ? *report : local_report;
  {
    double sum = 0;
    for (auto& [in, tgt] : pairs) sum += model.nll_loss(in, tgt);
    rep.initial_loss = sum / double(pairs.size());
  }

  std::vector<int> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);

  for (int e = 0; e < cfg.epochs; ++e) {
    const int64_t epoch_abs = start_epoch + e;
    // Order is a pure function of (seed, absolute epoch) so resumed runs
    // replay the schedule.
    std::iota(order.begin(), order.end(), 0);
    Rng rng(cfg.seed ^ (0x9e3779b97f4a7c15ULL * uint64_t(epoch_abs + 1)));
    rng.shuffle(order);
    double epoch_sum = 0;
    for (size_t at = 0; at < order.size(); at += size_t(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), at + size_t(cfg.batch_size));
      const auto t0 = std::chrono::steady_clock::now();
      model.params().zero_grad();
      double batch_loss = 0;
      int64_t batch_tokens = 0;
      for (size_t i = at; i < stop; ++i) {
        auto& [in, tgt] = pairs[size_t(order[i])];
        Tensor loss = model.nll_graph(in, tgt);
        const double v = loss.item();
        if (!std::isfinite(v)) throw DivergedTraining("loss became non-finite");
        batch_loss += v;
        batch_tokens += int64_t(in.size() + tgt.size());
        nn::backward(nn::scale(loss, 1.0 / double(stop - at)));
      }
      opt.step(model.params());
      model.set_step_count(model.step_count() + 1);
      epoch_sum += batch_loss;
      if (csv.is_open()) {
        const double dt =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                .count();
        csv << model.step_count() << "," << batch_loss / double(stop - at) << ","
            << opt.config().lr << "," << double(batch_tokens) / std::max(dt, 1e-9)
            << "\n";
      }
    }
    rep.epoch_loss.push_back(epoch_sum / double(pairs.size()));
    if (cfg.log_every > 0 && (e + 1) % cfg.log_every == 0)
      printf("[lm] epoch %lld loss %.5f\n", (long long)(epoch_abs + 1),
             rep.epoch_loss.back());
    if (!cfg.checkpoint_dir.empty() && cfg.checkpoint_every > 0 &&
        (e + 1) % cfg.checkpoint_every == 0) {
      // Emission synchronizes live state with float32 checkpoint precision
      // so a resumed run is bit-identical to an uninterrupted one.
      opt.round_state_to_f32();
      model.save(cfg.checkpoint_dir + "/epoch_" + std::to_string(epoch_abs + 1),
                 cfg.save_optimizer, &opt);
    }
  }
  if (!cfg.checkpoint_dir.empty()) {
    opt.round_state_to_f32();
    model.save(cfg.checkpoint_dir + "/final", cfg.save_optimizer, &opt);
  }
  rep.final_loss = rep.epoch_loss.empty() ? rep.initial_loss : rep.epoch_loss.back();
}

}  // namespace mlang
