#include "mlang/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mlang/blob.hpp"

namespace mlang {

using nn::Tensor;

namespace {

// Skeleton-order full pose layout: joint j owns columns [6j, 6j+6).
// Lower body joints come first, then upper, then hands.
int skeleton_col0(BodyPart part) {
  switch (part) {
    case BodyPart::lower: return 0;
    case BodyPart::upper: return 6 * kLowerJoints;
    case BodyPart::hands: return 6 * (kLowerJoints + kUpperJoints);
    default: throw ShapeMismatch("face has no skeletal joints");
  }
}

Mat rest_full_pose(int frames) {
  Mat base(frames, 6 * kTotalJoints);
  for (int f = 0; f < frames; ++f)
    for (int j = 0; j < kTotalJoints; ++j) {
      base(f, 6 * j + 0) = 1.0;
      base(f, 6 * j + 1) = 0.0;
      base(f, 6 * j + 2) = 0.0;
      base(f, 6 * j + 3) = 0.0;
      base(f, 6 * j + 4) = 1.0;
      base(f, 6 * j + 5) = 0.0;
    }
  return base;
}

int joints_of(BodyPart part) {
  switch (part) {
    case BodyPart::hands: return kHandJoints;
    case BodyPart::upper: return kUpperJoints;
    case BodyPart::lower: return kLowerJoints;
    default: return 0;
  }
}

struct ConvSpec {
  int cin, cout, k, stride, pad;
  bool transposed = false;
  bool relu = false;
};

std::vector<ConvSpec> encoder_spec(const CodecConfig& c) {
  const int s2 = c.downsample >= 2 ? 2 : 1;
  const int s3 = c.downsample >= 4 ? 2 : 1;
  auto kw = [](int s) { return s == 2 ? 4 : 3; };
  return {
      {c.input_dim(), c.hidden, 3, 1, 1, false, true},
      {c.hidden, c.hidden, kw(s2), s2, 1, false, true},
      {c.hidden, c.hidden, kw(s3), s3, 1, false, true},
      {c.hidden, c.latent_dim, 3, 1, 1, false, false},
  };
}

std::vector<ConvSpec> decoder_spec(const CodecConfig& c) {
  const int s2 = c.downsample >= 4 ? 2 : 1;
  const int s3 = c.downsample >= 2 ? 2 : 1;
  auto kw = [](int s) { return s == 2 ? 4 : 3; };
  return {
      {c.latent_dim, c.hidden, 3, 1, 1, false, true},
      {c.hidden, c.hidden, kw(s2), s2, 1, s2 == 2, true},
      {c.hidden, c.hidden, kw(s3), s3, 1, s3 == 2, true},
      {c.hidden, c.input_dim(), 3, 1, 1, false, false},
  };
}

void add_conv_params(nn::ParamStore& store, const std::string& prefix,
                     const std::vector<ConvSpec>& spec, Rng& rng) {
  for (size_t i = 0; i < spec.size(); ++i) {
    const auto& s = spec[i];
    const int fan_in = s.cin * s.k;
    const double bound = nn::fan_in_bound(fan_in);
    Tensor w = s.transposed
                   ? store.add(prefix + ".w" + std::to_string(i), {s.cin, s.cout, s.k})
                   : store.add(prefix + ".w" + std::to_string(i), {s.cout, s.cin, s.k});
    nn::init_uniform(w, rng, -bound, bound);
    Tensor b = store.add(prefix + ".b" + std::to_string(i), {s.cout});
    nn::init_zero(b);
  }
}

Tensor run_stack(const nn::ParamStore& store, const std::string& prefix,
                 const std::vector<ConvSpec>& spec, Tensor x) {
  for (size_t i = 0; i < spec.size(); ++i) {
    const auto& s = spec[i];
    Tensor w = store.find(prefix + ".w" + std::to_string(i));
    Tensor b = store.find(prefix + ".b" + std::to_string(i));
    x = s.transposed ? nn::conv1d_transpose(x, w, b, s.stride, s.pad)
                     : nn::conv1d(x, w, b, s.stride, s.pad);
    if (s.relu) x = nn::relu(x);
  }
  return x;
}

Mat pad_to_multiple(const Mat& seq, int multiple) {
  const int t = int(seq.rows());
  const int pad = (multiple - t % multiple) % multiple;
  if (pad == 0) return seq;
  Mat out(t + pad, seq.cols());
  out.topRows(t) = seq;
  for (int i = 0; i < pad; ++i) out.row(t + i) = seq.row(t - 1);
  return out;
}

// Geodesic target matrices for a 6D stream, rows in (frame, joint) order.
Mat stream_matrices(const Mat& stream, int joints) {
  Mat out(stream.rows() * joints, 9);
  for (Eigen::Index f = 0; f < stream.rows(); ++f)
    for (int j = 0; j < joints; ++j) {
      Mat3 R = rot6d_to_matrix(Vec6(stream.block<1, 6>(f, 6 * j).transpose()));
      for (int c = 0; c < 3; ++c)
        for (int r = 0; r < 3; ++r) out(f * joints + j, 3 * c + r) = R(r, c);
    }
  return out;
}

Tensor l1_of_diff(const Tensor& a, const Mat& b_const) {
  return nn::mean(nn::abs_t(nn::sub(a, Tensor::constant(b_const))));
}

Tensor fd_rows(const Tensor& x, double fps) {
  const int t = x.rows();
  return nn::scale(nn::sub(nn::slice_rows(x, 1, t - 1), nn::slice_rows(x, 0, t - 1)),
                   fps);
}

}  // namespace

// --- quantize ---------------------------------------------------------------

std::pair<std::vector<int>, Mat> quantize(const Codebook& codebook, const Mat& z) {
  if (z.cols() != codebook.dim)
    throw ShapeMismatch("latent width " + std::to_string(z.cols()) +
                        " != codebook dim " + std::to_string(codebook.dim));
  std::vector<int> indices(size_t(z.rows()));
  Mat q(z.rows(), z.cols());
  for (Eigen::Index t = 0; t < z.rows(); ++t) {
    int best = 0;
    double best_d = (z.row(t) - codebook.entries.row(0)).squaredNorm();
    for (int k = 1; k < codebook.size; ++k) {
      const double d = (z.row(t) - codebook.entries.row(k)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = k;
      }
    }
    indices[size_t(t)] = best;
    q.row(t) = codebook.entries.row(best);
  }
  return {indices, q};
}

// --- PartCodec ---------------------------------------------------------------

PartCodec::PartCodec(CodecConfig cfg, uint64_t seed) : cfg_(cfg) {
  if (cfg_.downsample != 1 && cfg_.downsample != 2 && cfg_.downsample != 4)
    throw InvalidConfig("downsample must be 1, 2 or 4");
  Rng rng(seed);
  add_conv_params(params_, "enc", encoder_spec(cfg_), rng);
  add_conv_params(params_, "dec", decoder_spec(cfg_), rng);
  codebook_ = params_.add("codebook", {cfg_.codebook_size, cfg_.latent_dim});
  nn::init_normal(codebook_, rng, 0.2);
  usage_.assign(size_t(cfg_.codebook_size), 0);
}

Codebook PartCodec::codebook() const {
  Codebook cb;
  cb.size = cfg_.codebook_size;
  cb.dim = cfg_.latent_dim;
  cb.entries = codebook_.to_mat();
  cb.usage_counts = usage_;
  return cb;
}

Tensor PartCodec::encode_graph(const Mat& part_seq) const {
  if (part_seq.cols() != cfg_.input_dim())
    throw ShapeMismatch("part stream width " + std::to_string(part_seq.cols()) +
                        " != " + std::to_string(cfg_.input_dim()));
  if (part_seq.rows() < cfg_.downsample)
    throw TooShort("need at least " + std::to_string(cfg_.downsample) + " frames");
  const Mat padded = pad_to_multiple(part_seq, cfg_.downsample);
  Tensor x = nn::transpose(Tensor::constant(padded));
  Tensor z = run_stack(params_, "enc", encoder_spec(cfg_), x);
  return nn::transpose(z);  // [steps, latent]
}

Tensor PartCodec::decode_graph(const Tensor& latents_rows) const {
  Tensor x = nn::transpose(latents_rows);
  Tensor y = run_stack(params_, "dec", decoder_spec(cfg_), x);
  return nn::transpose(y);  // [frames, D]
}

Mat PartCodec::encode(const Mat& part_seq) const {
  nn::NoGrad ng;
  return encode_graph(part_seq).to_mat();
}

Mat PartCodec::decode(const std::vector<int>& indices) const {
  if (indices.empty()) throw TooShort("empty token stream");
  for (int i : indices)
    if (i < 0 || i >= cfg_.codebook_size)
      throw IndexOutOfRange("token " + std::to_string(i) + " outside codebook of " +
                            std::to_string(cfg_.codebook_size));
  nn::NoGrad ng;
  Tensor q = nn::embedding(codebook_, indices);
  return decode_graph(q).to_mat();
}

std::vector<int> PartCodec::tokenize(const Mat& part_seq) const {
  return quantize(codebook(), encode(part_seq)).first;
}

Tensor PartCodec::loss_graph(const Mat& part_seq, const ProxySkeleton& skeleton,
                             VqLossReport* report, std::vector<int>* indices_out,
                             std::vector<Tensor>* components_out) {
  const int t = int(part_seq.rows());
  if (t % cfg_.downsample != 0)
    throw ShapeMismatch("training clips must be downsample multiples");
  Tensor z = encode_graph(part_seq);
  auto quantized = quantize(codebook(), z.to_mat());
  const std::vector<int>& indices = quantized.first;
  if (indices_out) *indices_out = indices;
  for (int i : indices) ++usage_[size_t(i)];

  Tensor q = nn::embedding(codebook_, indices);
  Tensor st = nn::add(z, nn::detach(nn::sub(q, z)));
  Tensor ghat = decode_graph(st);

  const double fps = cfg_.fps;
  const BodyPart part = cfg_.part;

  Tensor rec;
  if (part == BodyPart::face) {
    rec = nn::mean(nn::square(nn::sub(ghat, Tensor::constant(part_seq))));
  } else {
    const int joints = joints_of(part);
    Tensor mats = nn::rot6d_mats(nn::reshape(ghat, {t * joints, 6}));
    rec = nn::mean(nn::geodesic_to_const(mats, stream_matrices(part_seq, joints)));
  }

  Tensor vel = l1_of_diff(fd_rows(ghat, fps), finite_difference(part_seq, 1, fps));
  Tensor acc = l1_of_diff(fd_rows(fd_rows(ghat, fps), fps),
                          finite_difference(part_seq, 2, fps));

  Tensor mrec = Tensor::scalar(0.0), mvel = Tensor::scalar(0.0),
         macc = Tensor::scalar(0.0);
  if (part != BodyPart::face) {
    const Mat base = rest_full_pose(t);
    const Mat zero_trans = Mat::Zero(t, 3);
    Tensor full = nn::overlay_cols(base, ghat, skeleton_col0(part));
    Tensor markers = nn::fk_markers(
        nn::rot6d_mats(nn::reshape(full, {t * kTotalJoints, 6})), skeleton,
        zero_trans);
    Mat markers_g;
    {
      nn::NoGrad ng;
      Tensor fullg = nn::overlay_cols(base, Tensor::constant(part_seq),
                                      skeleton_col0(part));
      markers_g = nn::fk_markers(
                      nn::rot6d_mats(nn::reshape(fullg, {t * kTotalJoints, 6})),
                      skeleton, zero_trans)
                      .to_mat();
    }
    mrec = nn::mean(nn::square(nn::sub(markers, Tensor::constant(markers_g))));
    Mat mg1 = finite_difference(markers_g, 1, fps);
    Mat mg2 = finite_difference(markers_g, 2, fps);
    mvel = l1_of_diff(fd_rows(markers, fps), mg1);
    macc = l1_of_diff(fd_rows(fd_rows(markers, fps), fps), mg2);
  }

  Tensor comm = nn::mean(nn::square(nn::sub(z, nn::detach(q))));
  Tensor cb = nn::mean(nn::square(nn::sub(q, nn::detach(z))));

  if (components_out) *components_out = {rec, vel, acc, mrec, mvel, macc, comm};
  if (report) {
    report->rec = rec.item();
    report->vel = vel.item();
    report->acc = acc.item();
    report->mrec = mrec.item();
    report->mvel = mvel.item();
    report->macc = macc.item();
    report->comm = comm.item();
    report->total = report->rec + report->vel + report->acc + report->mrec +
                    report->mvel + report->macc + report->comm;
  }

  Tensor obj = nn::scale(rec, cfg_.w_rec);
  obj = nn::add(obj, nn::scale(vel, cfg_.w_vel));
  obj = nn::add(obj, nn::scale(acc, cfg_.w_acc));
  if (part != BodyPart::face) {
    obj = nn::add(obj, nn::scale(mrec, cfg_.w_mrec));
    obj = nn::add(obj, nn::scale(mvel, cfg_.w_mvel));
    obj = nn::add(obj, nn::scale(macc, cfg_.w_macc));
  }
  obj = nn::add(obj, nn::scale(comm, cfg_.w_comm));
  obj = nn::add(obj, nn::scale(cb, cfg_.w_codebook));
  return obj;
}

// --- plain loss ledger ------------------------------------------------------

VqLossReport vq_loss(const PartCodec& codec, const Mat& g, const Mat& ghat,
                     const Mat& z, const Mat& q, const ProxySkeleton& skeleton) {
  if (g.rows() != ghat.rows() || g.cols() != ghat.cols())
    throw ShapeMismatch("g and ghat shapes differ");
  if (z.rows() != q.rows() || z.cols() != q.cols())
    throw ShapeMismatch("z and q shapes differ");
  const auto& cfg = codec.config();
  if (g.cols() != cfg.input_dim()) throw ShapeMismatch("stream width mismatch");
  const double fps = cfg.fps;
  const int t = int(g.rows());

  VqLossReport r;
  if (cfg.part == BodyPart::face) {
    r.rec = (ghat - g).squaredNorm() / double(g.size());
  } else {
    const int joints = joints_of(cfg.part);
    double acc_geo = 0.0;
    for (int f = 0; f < t; ++f)
      for (int j = 0; j < joints; ++j) {
        Mat3 Rg = rot6d_to_matrix(Vec6(g.block<1, 6>(f, 6 * j).transpose()));
        Mat3 Rh = rot6d_to_matrix(Vec6(ghat.block<1, 6>(f, 6 * j).transpose()));
        acc_geo += geodesic_distance(Rh, Rg);
      }
    r.rec = acc_geo / double(t * joints);
  }

  if (t >= 2)
    r.vel = (finite_difference(ghat, 1, fps) - finite_difference(g, 1, fps))
                .cwiseAbs()
                .mean();
  if (t >= 3)
    r.acc = (finite_difference(ghat, 2, fps) - finite_difference(g, 2, fps))
                .cwiseAbs()
                .mean();

  if (cfg.part != BodyPart::face) {
    auto markers_of = [&](const Mat& stream) {
      Mat out(t, skeleton.marker_total() * 3);
      std::vector<Mat3> local(kTotalJoints, Mat3::Identity());
      std::vector<Mat3> global;
      std::vector<Vec3> pos;
      const int j0 = skeleton_col0(cfg.part) / 6;
      for (int f = 0; f < t; ++f) {
        for (int j = 0; j < joints_of(cfg.part); ++j)
          local[size_t(j0 + j)] =
              rot6d_to_matrix(Vec6(stream.block<1, 6>(f, 6 * j).transpose()));
        fk_chain(local, skeleton, Vec3::Zero(), global, pos);
        for (int j = 0; j < kTotalJoints; ++j)
          for (int m = 0; m < skeleton.marker_count; ++m) {
            Vec3 mk = pos[size_t(j)] +
                      global[size_t(j)] * skeleton.marker_offsets[size_t(j)][size_t(m)];
            for (int d = 0; d < 3; ++d)
              out(f, (j * skeleton.marker_count + m) * 3 + d) = mk[d];
          }
      }
      return out;
    };
    const Mat mk_g = markers_of(g);
    const Mat mk_h = markers_of(ghat);
    r.mrec = (mk_h - mk_g).squaredNorm() / double(mk_g.size());
    if (t >= 2)
      r.mvel = (finite_difference(mk_h, 1, fps) - finite_difference(mk_g, 1, fps))
                   .cwiseAbs()
                   .mean();
    if (t >= 3)
      r.macc = (finite_difference(mk_h, 2, fps) - finite_difference(mk_g, 2, fps))
                   .cwiseAbs()
                   .mean();
  }

  r.comm = (z - q).squaredNorm() / double(std::max<Eigen::Index>(z.size(), 1));
  r.total = r.rec + r.vel + r.acc + r.mrec + r.mvel + r.macc + r.comm;
  return r;
}

// --- checkpointing -------------------------------------------------------------

void PartCodec::save(const std::string& dir) {
  ensure_dir(dir);
  nlohmann::json j;
  j["kind"] = "part_codec";
  j["part"] = part_name(cfg_.part);
  j["codebook_size"] = cfg_.codebook_size;
  j["latent_dim"] = cfg_.latent_dim;
  j["hidden"] = cfg_.hidden;
  j["downsample"] = cfg_.downsample;
  j["fps"] = cfg_.fps;
  j["weights"] = {cfg_.w_rec, cfg_.w_vel, cfg_.w_acc, cfg_.w_mrec,
                  cfg_.w_mvel, cfg_.w_macc, cfg_.w_comm, cfg_.w_codebook};
  j["usage_counts"] = usage_;
  write_json_file(dir + "/config.json", j);
  save_params(dir, "params", params_);
}

PartCodec PartCodec::load(const std::string& dir) {
  nlohmann::json j = read_json_file(dir + "/config.json");
  if (!j.contains("kind") || j["kind"] != "part_codec")
    throw CorruptCheckpoint(dir + " is not a part codec checkpoint");
  CodecConfig cfg;
  cfg.part = part_from_name(j["part"].get<std::string>());
  cfg.codebook_size = j["codebook_size"].get<int>();
  cfg.latent_dim = j["latent_dim"].get<int>();
  cfg.hidden = j["hidden"].get<int>();
  cfg.downsample = j["downsample"].get<int>();
  cfg.fps = j["fps"].get<double>();
  const auto w = j["weights"].get<std::vector<double>>();
  cfg.w_rec = w[0]; cfg.w_vel = w[1]; cfg.w_acc = w[2]; cfg.w_mrec = w[3];
  cfg.w_mvel = w[4]; cfg.w_macc = w[5]; cfg.w_comm = w[6]; cfg.w_codebook = w[7];
  PartCodec codec(cfg, 0);
  load_params(dir, "params", codec.params_);
  codec.usage_ = j["usage_counts"].get<std::vector<int64_t>>();
  return codec;
}

// --- training ---------------------------------------------------------------

namespace {

struct PartDataset {
  std::vector<Mat> train, holdout;
};

PartDataset collect_part(const std::vector<MotionSequence>& dataset, BodyPart part,
                         int downsample, double holdout_frac) {
  if (dataset.empty()) throw EmptyDataset("codec training needs a non-empty dataset");
  std::vector<Mat> clips;
  for (const auto& seq : dataset) {
    const Mat& stream = seq.part(part);
    if (stream.rows() < downsample)
      throw TooShort("clip shorter than the downsample factor");
    const int keep = int(stream.rows()) - int(stream.rows()) % downsample;
    clips.push_back(stream.topRows(keep));
  }
  PartDataset out;
  const int nh = std::max(1, int(std::lround(double(clips.size()) * holdout_frac)));
  const int nt = std::max(1, int(clips.size()) - nh);
  for (int i = 0; i < int(clips.size()); ++i)
    (i < nt ? out.train : out.holdout).push_back(std::move(clips[size_t(i)]));
  if (out.holdout.empty()) out.holdout.push_back(out.train.back());
  return out;
}

}  // namespace

PartCodec train_codec(const std::vector<MotionSequence>& dataset, BodyPart part,
                      const CodecConfig& cfg_in, const TrainCodecConfig& tc,
                      CodecTrainReport* report) {
  CodecConfig cfg = cfg_in;
  cfg.part = part;
  PartDataset data = collect_part(dataset, part, cfg.downsample, tc.holdout_frac);

  PartCodec codec(cfg, tc.seed);
  const auto& skeleton = ProxySkeleton::standard();
  nn::AdamWConfig oc;
  oc.lr = tc.lr;
  oc.weight_decay = tc.weight_decay;
  nn::AdamW opt(oc);
  Rng rng(tc.seed ^ 0xc0dec);

  // Seed the codebook with k-means over initial encoder outputs; together
  // with dead-code reseeding this keeps utilization from collapsing onto a
  // handful of entries.
  {
    std::vector<Mat> zs;
    Eigen::Index rows = 0;
    for (size_t i = 0; i < data.train.size() && rows < 64 * cfg.codebook_size; ++i) {
      zs.push_back(codec.encode(data.train[i]));
      rows += zs.back().rows();
    }
    Mat all(rows, cfg.latent_dim);
    Eigen::Index at = 0;
    for (auto& z : zs) {
      all.middleRows(at, z.rows()) = z;
      at += z.rows();
    }
    if (all.rows() >= cfg.codebook_size) {
      KMeansConfig kc;
      kc.iterations = 25;
      kc.seed = tc.seed ^ 0x5eed;
      AcousticCodebook init = fit_acoustic_codebook(all, cfg.codebook_size, kc);
      auto cb = codec.params().find("codebook");
      for (int k = 0; k < cfg.codebook_size; ++k)
        for (int d = 0; d < cfg.latent_dim; ++d)
          cb.value()[int64_t(k) * cfg.latent_dim + d] =
              double(float(init.centroids(k, d)));
    }
  }

  auto eval_holdout = [&]() {
    nn::NoGrad ng;
    double sum = 0.0;
    for (const auto& clip : data.holdout) {
      VqLossReport r;
      codec.loss_graph(clip, skeleton, &r);
      sum += r.total;
    }
    return sum / double(data.holdout.size());
  };

  CodecTrainReport local;
  CodecTrainReport& rep = report ? *report : local;
  rep.initial_holdout = eval_holdout();

  std::vector<int> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    rng.shuffle(order);
    std::vector<int64_t> epoch_usage(size_t(cfg.codebook_size), 0);
    std::vector<Eigen::RowVectorXd> reservoir;
    double train_sum = 0.0;
    int64_t clip_count = 0;

    for (size_t at = 0; at < order.size(); at += size_t(tc.batch_size)) {
      const size_t stop = std::min(order.size(), at + size_t(tc.batch_size));
      codec.params().zero_grad();
      for (size_t i = at; i < stop; ++i) {
        const Mat& clip = data.train[size_t(order[i])];
        VqLossReport r;
        std::vector<int> idx;
        Tensor obj = codec.loss_graph(clip, skeleton, &r, &idx);
        if (!std::isfinite(r.total))
          throw DivergedTraining("codec loss became non-finite");
        train_sum += r.total;
        ++clip_count;
        for (int ii : idx) ++epoch_usage[size_t(ii)];
        if (reservoir.size() < size_t(cfg.codebook_size)) {
          const Mat z = codec.encode(clip);
          reservoir.push_back(z.row(Eigen::Index(rng.below(uint64_t(z.rows())))));
        }
        nn::backward(nn::scale(obj, 1.0 / double(stop - at)));
      }
      opt.step(codec.params());
    }

    if (tc.reseed_dead_codes && !reservoir.empty()) {
      auto cb = codec.params().find("codebook");
      for (int k = 0; k < cfg.codebook_size; ++k) {
        if (epoch_usage[size_t(k)] > 0) continue;
        const auto& row = reservoir[size_t(rng.below(reservoir.size()))];
        for (int d = 0; d < cfg.latent_dim; ++d)
          cb.value()[int64_t(k) * cfg.latent_dim + d] =
              double(float(row[d] + 0.01 * rng.normal()));
      }
    }

    rep.epoch_train_loss.push_back(train_sum / double(std::max<int64_t>(1, clip_count)));
    rep.epoch_holdout_loss.push_back(eval_holdout());
    if (tc.log_every > 0 && (epoch + 1) % tc.log_every == 0)
      printf("[codec:%s] epoch %d train %.5f holdout %.5f\n", part_name(part),
             epoch + 1, rep.epoch_train_loss.back(), rep.epoch_holdout_loss.back());
    if (tc.early_stop_ratio > 0 && epoch + 1 >= tc.min_epochs &&
        rep.epoch_holdout_loss.back() < tc.early_stop_ratio * rep.initial_holdout)
      break;
  }

  rep.final_holdout = eval_holdout();

  // Utilization over the full dataset at the final parameters.
  std::vector<bool> used(size_t(cfg.codebook_size), false);
  for (const auto& clip : data.train)
    for (int i : codec.tokenize(clip)) used[size_t(i)] = true;
  for (const auto& clip : data.holdout)
    for (int i : codec.tokenize(clip)) used[size_t(i)] = true;
  int used_n = 0;
  for (bool u : used) used_n += u ? 1 : 0;
  rep.utilization = double(used_n) / double(cfg.codebook_size);
  return codec;
}

// --- codec set -----------------------------------------------------------------

MotionSequence CodecSet::decode(const std::vector<int>& face,
                                const std::vector<int>& hands,
                                const std::vector<int>& upper,
                                const std::vector<int>& lower, double fps) const {
  MotionSequence seq;
  seq.fps = fps;
  seq.face = of(BodyPart::face).decode(face);
  seq.hands = of(BodyPart::hands).decode(hands);
  seq.upper = of(BodyPart::upper).decode(upper);
  seq.lower = of(BodyPart::lower).decode(lower);
  const int frames =
      int(std::min({seq.face.rows(), seq.hands.rows(), seq.upper.rows(),
                    seq.lower.rows()}));
  seq.face = seq.face.topRows(frames).eval();
  seq.hands = seq.hands.topRows(frames).eval();
  seq.upper = seq.upper.topRows(frames).eval();
  seq.lower = seq.lower.topRows(frames).eval();
  seq.translation = Mat::Zero(frames, 3);
  return seq;
}

void CodecSet::save(const std::string& dir) const {
  for (size_t i = 0; i < codecs.size(); ++i) {
    PartCodec copy = codecs[i];  // shares parameter storage
    copy.save(dir + "/" + part_name(copy.config().part));
  }
}

CodecSet CodecSet::load(const std::string& dir) {
  CodecSet set;
  for (BodyPart p :
       {BodyPart::face, BodyPart::hands, BodyPart::upper, BodyPart::lower})
    set.codecs.push_back(PartCodec::load(dir + "/" + part_name(p)));
  return set;
}

// --- translation predictor -----------------------------------------------------

namespace {

std::vector<ConvSpec> trans_encoder_spec(const TranslationConfig& c) {
  return {
      {kLowerDim, c.hidden, 3, 1, 1, false, true},
      {c.hidden, c.hidden, 3, 1, 1, false, true},
      {c.hidden, c.hidden, 3, 1, 1, false, true},
      {c.hidden, 2 * c.latent_dim, 3, 1, 1, false, false},
  };
}

std::vector<ConvSpec> trans_decoder_spec(const TranslationConfig& c) {
  return {
      {c.latent_dim, c.hidden, 3, 1, 1, false, true},
      {c.hidden, c.hidden, 3, 1, 1, false, true},
      {c.hidden, c.hidden, 3, 1, 1, false, true},
      {c.hidden, 3, 3, 1, 1, false, false},
  };
}

}  // namespace

TranslationPredictor::TranslationPredictor(TranslationConfig cfg, uint64_t seed)
    : cfg_(cfg) {
  Rng rng(seed);
  add_conv_params(params_, "enc", trans_encoder_spec(cfg_), rng);
  add_conv_params(params_, "dec", trans_decoder_spec(cfg_), rng);
  // Start the posterior tight (sigma ~ e^-2) so the latent carries signal
  // from the first epochs.
  auto b = params_.find("enc.b3");
  for (int i = 0; i < cfg_.latent_dim; ++i) b.value()[cfg_.latent_dim + i] = -4.0;
}

Tensor TranslationPredictor::backbone(const Mat& lower_seq, const Mat* noise) const {
  if (lower_seq.cols() != kLowerDim)
    throw ShapeMismatch("lower stream must have " + std::to_string(kLowerDim) +
                        " columns");
  Tensor x = nn::transpose(Tensor::constant(lower_seq));
  Tensor h = run_stack(params_, "enc", trans_encoder_spec(cfg_), x);
  Tensor mu = nn::slice_rows(h, 0, cfg_.latent_dim);
  Tensor z = mu;
  if (noise) {
    Tensor logvar = nn::slice_rows(h, cfg_.latent_dim, cfg_.latent_dim);
    Tensor eps = Tensor::constant(*noise);
    z = nn::add(mu, nn::mul(nn::exp_t(nn::scale(logvar, 0.5)), eps));
  }
  Tensor vel = run_stack(params_, "dec", trans_decoder_spec(cfg_), z);
  return nn::transpose(nn::cumsum_cols(vel));  // [frames, 3]
}

Mat TranslationPredictor::predict(const Mat& lower_seq) const {
  nn::NoGrad ng;
  return backbone(lower_seq, nullptr).to_mat();
}

Tensor TranslationPredictor::loss_graph(const Mat& lower_seq,
                                        const Mat& target_translation, Rng& noise,
                                        double* recon_out) {
  if (target_translation.rows() != lower_seq.rows() || target_translation.cols() != 3)
    throw ShapeMismatch("translation target must be frames x 3");
  Mat eps(cfg_.latent_dim, lower_seq.rows());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = noise.normal();

  Tensor x = nn::transpose(Tensor::constant(lower_seq));
  Tensor h = run_stack(params_, "enc", trans_encoder_spec(cfg_), x);
  Tensor mu = nn::slice_rows(h, 0, cfg_.latent_dim);
  Tensor logvar = nn::slice_rows(h, cfg_.latent_dim, cfg_.latent_dim);
  Tensor z = nn::add(mu, nn::mul(nn::exp_t(nn::scale(logvar, 0.5)),
                                 Tensor::constant(eps)));
  Tensor vel = run_stack(params_, "dec", trans_decoder_spec(cfg_), z);
  Tensor pos = nn::transpose(nn::cumsum_cols(vel));

  Tensor recon =
      nn::mean(nn::square(nn::sub(pos, Tensor::constant(target_translation))));
  if (recon_out) *recon_out = recon.item();
  // KL(q || N(0,1)) = -0.5 mean(1 + logvar - mu^2 - exp(logvar))
  Tensor kl = nn::scale(
      nn::mean(nn::sub(nn::add_scalar(logvar, 1.0),
                       nn::add(nn::square(mu), nn::exp_t(logvar)))),
      -0.5);
  return nn::add(recon, nn::scale(kl, cfg_.kl_weight));
}

void TranslationPredictor::save(const std::string& dir) {
  ensure_dir(dir);
  nlohmann::json j;
  j["kind"] = "translation_predictor";
  j["hidden"] = cfg_.hidden;
  j["latent_dim"] = cfg_.latent_dim;
  j["fps"] = cfg_.fps;
  j["kl_weight"] = cfg_.kl_weight;
  write_json_file(dir + "/config.json", j);
  save_params(dir, "params", params_);
}

TranslationPredictor TranslationPredictor::load(const std::string& dir) {
  nlohmann::json j = read_json_file(dir + "/config.json");
  if (!j.contains("kind") || j["kind"] != "translation_predictor")
    throw CorruptCheckpoint(dir + " is not a translation checkpoint");
  TranslationConfig cfg;
  cfg.hidden = j["hidden"].get<int>();
  cfg.latent_dim = j["latent_dim"].get<int>();
  cfg.fps = j["fps"].get<double>();
  cfg.kl_weight = j["kl_weight"].get<double>();
  TranslationPredictor p(cfg, 0);
  load_params(dir, "params", p.params_);
  return p;
}

TranslationPredictor train_translation(const std::vector<MotionSequence>& dataset,
                                       const TranslationConfig& cfg,
                                       const TrainCodecConfig& tc,
                                       TranslationTrainReport* report) {
  if (dataset.empty()) throw EmptyDataset("translation training needs data");
  std::vector<Mat> lowers, targets;
  for (const auto& seq : dataset) {
    lowers.push_back(seq.lower);
    Mat t = seq.translation;
    t.rowwise() -= seq.translation.row(0);  // clips start at the origin
    targets.push_back(std::move(t));
  }
  const int nh = std::max(1, int(std::lround(double(lowers.size()) * tc.holdout_frac)));
  const int nt = std::max(1, int(lowers.size()) - nh);

  TranslationPredictor model(cfg, tc.seed);
  nn::AdamWConfig oc;
  oc.lr = tc.lr;
  oc.weight_decay = tc.weight_decay;
  nn::AdamW opt(oc);
  Rng rng(tc.seed ^ 0x7a5);

  // Score against clips that actually move; a constant predictor is exact
  // on stationary clips and would mask any model signal.
  auto is_walking = [&](int i) {
    const Mat& t = targets[size_t(i)];
    return (t.colwise().maxCoeff() - t.colwise().minCoeff()).norm() > 1e-6;
  };
  std::vector<int> scored;
  for (int i = nt; i < int(lowers.size()); ++i)
    if (is_walking(i)) scored.push_back(i);
  if (scored.empty())
    for (int i = nt; i < int(lowers.size()); ++i) scored.push_back(i);

  auto holdout_mse = [&]() {
    double sum = 0.0;
    for (int i : scored) {
      Mat pred = model.predict(lowers[size_t(i)]);
      sum += (pred - targets[size_t(i)]).squaredNorm() / double(pred.size());
    }
    return sum / double(scored.size());
  };

  TranslationTrainReport local;
  TranslationTrainReport& rep = report ? *report : local;
  rep.initial_holdout = holdout_mse();
  {
    double base = 0.0;
    for (int i : scored) {
      const Mat& t = targets[size_t(i)];
      Mat centered = t.rowwise() - t.colwise().mean();
      base += centered.squaredNorm() / double(t.size());
    }
    rep.constant_baseline = base / double(scored.size());
  }

  std::vector<int> order(static_cast<size_t>(nt));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t at = 0; at < order.size(); at += size_t(tc.batch_size)) {
      const size_t stop = std::min(order.size(), at + size_t(tc.batch_size));
      model.params().zero_grad();
      for (size_t i = at; i < stop; ++i) {
        double recon = 0.0;
        Tensor obj = model.loss_graph(lowers[size_t(order[i])],
                                      targets[size_t(order[i])], rng, &recon);
        if (!std::isfinite(obj.item()))
          throw DivergedTraining("translation loss became non-finite");
        nn::backward(nn::scale(obj, 1.0 / double(stop - at)));
      }
      opt.step(model.params());
    }
  }
  rep.final_holdout = holdout_mse();
  return model;
}

}  // namespace mlang
