#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "mlang/codec.hpp"

using namespace mlang;

namespace {

Mat random_rotation_stream(Rng& rng, int frames, int joints, double scale = 0.4) {
  Mat m(frames, joints * 6);
  for (int f = 0; f < frames; ++f)
    for (int j = 0; j < joints; ++j)
      m.block<1, 6>(f, 6 * j) =
          rot6d_from_axis_angle(Vec3(rng.normal(0, scale), rng.normal(0, scale),
                                     rng.normal(0, scale)))
              .transpose();
  return m;
}

Mat identity_stream(int frames, int joints) {
  Mat m(frames, joints * 6);
  for (int f = 0; f < frames; ++f)
    for (int j = 0; j < joints; ++j) {
      Vec6 id;
      id << 1, 0, 0, 0, 1, 0;
      m.block<1, 6>(f, 6 * j) = id.transpose();
    }
  return m;
}

// Exhaustive nearest-neighbor oracle, written independently of quantize().
std::vector<int> brute_force_nn(const Mat& entries, const Mat& z) {
  std::vector<int> out;
  for (Eigen::Index t = 0; t < z.rows(); ++t) {
    int arg = -1;
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index k = 0; k < entries.rows(); ++k) {
      double d = 0;
      for (Eigen::Index c = 0; c < z.cols(); ++c) {
        const double diff = z(t, c) - entries(k, c);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        arg = int(k);
      }
    }
    out.push_back(arg);
  }
  return out;
}

}  // namespace

TEST_CASE("quantize: exact match, tie rule, brute-force agreement") {
  Rng rng(41);
  Codebook cb;
  cb.size = 16;
  cb.dim = 8;
  cb.entries = Mat(16, 8);
  for (int k = 0; k < 16; ++k)
    for (int c = 0; c < 8; ++c) cb.entries(k, c) = rng.normal();

  Mat z = cb.entries.row(7);
  auto [idx, q] = quantize(cb, z);
  CHECK(idx[0] == 7);
  CHECK((q.row(0) - cb.entries.row(7)).cwiseAbs().maxCoeff() == 0.0);

  // Equidistant between entries 2 and 5 (all others far): lowest index wins.
  Codebook tie = cb;
  tie.entries.array() += 25.0;
  tie.entries.row(2) = Mat::Zero(1, 8);
  tie.entries.row(5) = Mat::Zero(1, 8);
  tie.entries(2, 0) = 1.0;
  tie.entries(5, 0) = -1.0;
  Mat mid = Mat::Zero(1, 8);
  auto [tie_idx, tie_q] = quantize(tie, mid);
  CHECK(tie_idx[0] == 2);

  Mat zs(200, 8);
  for (Eigen::Index i = 0; i < zs.size(); ++i) zs.data()[i] = rng.normal();
  auto got = quantize(cb, zs).first;
  auto want = brute_force_nn(cb.entries, zs);
  CHECK(got == want);

  // Optimality certificate.
  auto [oi, oq] = quantize(cb, zs);
  for (Eigen::Index t = 0; t < zs.rows(); ++t)
    for (int k = 0; k < cb.size; ++k)
      CHECK((zs.row(t) - oq.row(t)).squaredNorm() <=
            (zs.row(t) - cb.entries.row(k)).squaredNorm() + 1e-12);

  CHECK_THROWS_AS(quantize(cb, Mat::Zero(3, 7)), ShapeMismatch);
}

TEST_CASE("encode/decode length arithmetic") {
  for (int ds : {1, 2, 4}) {
    CodecConfig cfg;
    cfg.part = BodyPart::lower;
    cfg.codebook_size = 8;
    cfg.latent_dim = 6;
    cfg.hidden = 8;
    cfg.downsample = ds;
    PartCodec codec(cfg, 7);
    Rng rng(99);
    for (int frames = 4; frames <= 64; frames += 7) {
      Mat x = random_rotation_stream(rng, frames, kLowerJoints);
      Mat z = codec.encode(x);
      CHECK(z.rows() == (frames + ds - 1) / ds);
      CHECK(z.cols() == cfg.latent_dim);
    }
    Mat y = codec.decode(std::vector<int>(8, 3));
    CHECK(y.rows() == 8 * ds);
    CHECK(y.cols() == kLowerDim);
  }
}

TEST_CASE("encode errors and determinism") {
  CodecConfig cfg;
  cfg.part = BodyPart::upper;
  cfg.codebook_size = 8;
  cfg.latent_dim = 6;
  cfg.hidden = 8;
  PartCodec codec(cfg, 3);
  Rng rng(5);
  Mat x = random_rotation_stream(rng, 32, kUpperJoints);
  Mat z1 = codec.encode(x);
  Mat z2 = codec.encode(x);
  CHECK(z1.rows() == 8);
  CHECK((z1 - z2).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(codec.encode(random_rotation_stream(rng, 2, kUpperJoints)), TooShort);
  CHECK_THROWS_AS(codec.encode(Mat::Zero(8, 77)), ShapeMismatch);
  CHECK_THROWS_AS(codec.decode({8}), IndexOutOfRange);
  CHECK_THROWS_AS(codec.decode({-1}), IndexOutOfRange);
}

TEST_CASE("vq_loss: perfect reconstruction gives an all-zero ledger") {
  CodecConfig cfg;
  cfg.part = BodyPart::upper;
  cfg.codebook_size = 8;
  cfg.latent_dim = 6;
  cfg.hidden = 8;
  PartCodec codec(cfg, 11);
  Rng rng(13);
  Mat g = random_rotation_stream(rng, 4, kUpperJoints);
  Mat z = Mat::Random(1, 6);
  VqLossReport r = vq_loss(codec, g, g, z, z, ProxySkeleton::standard());
  CHECK(r.rec == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r.vel == 0.0);
  CHECK(r.acc == 0.0);
  CHECK(r.mrec == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r.mvel == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r.macc == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(r.comm == 0.0);
  CHECK(r.total <= 1e-9);
}

TEST_CASE("vq_loss velocity term matches hand-computed arithmetic") {
  // One moving joint over three frames; everything else at identity and
  // the reference stream constant, so vel = mean |30 * delta(6D(ghat))|.
  CodecConfig cfg;
  cfg.part = BodyPart::upper;
  cfg.codebook_size = 8;
  cfg.latent_dim = 6;
  cfg.hidden = 8;
  PartCodec codec(cfg, 1);

  Mat g = identity_stream(3, kUpperJoints);
  Mat ghat = identity_stream(3, kUpperJoints);
  const double a1 = 0.3, a2 = 0.6;
  ghat.block<1, 6>(1, 0) = rot6d_from_axis_angle(Vec3(0, 0, a1)).transpose();
  ghat.block<1, 6>(2, 0) = rot6d_from_axis_angle(Vec3(0, 0, a2)).transpose();

  // 6D of a z-rotation t: (cos t, sin t, 0, -sin t, cos t, 0).
  const double d1 = std::abs(std::cos(a1) - 1) * 2 + std::sin(a1) * 2;
  const double d2 = std::abs(std::cos(a2) - std::cos(a1)) * 2 +
                    std::abs(std::sin(a2) - std::sin(a1)) * 2;
  const double want = 30.0 * (d1 + d2) / double(2 * kUpperDim);

  Mat z = Mat::Zero(1, 6);
  VqLossReport r = vq_loss(codec, g, ghat, z, z, ProxySkeleton::standard());
  CHECK(r.vel == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("vq_loss components are non-negative and total is their exact sum") {
  Rng rng(17);
  for (BodyPart part : {BodyPart::face, BodyPart::hands, BodyPart::lower}) {
    CodecConfig cfg;
    cfg.part = part;
    cfg.codebook_size = 8;
    cfg.latent_dim = 6;
    cfg.hidden = 8;
    PartCodec codec(cfg, 2);
    const int joints = part == BodyPart::face ? 1 : (part == BodyPart::hands ? 30 : 9);
    Mat g(4, part_dim(part)), ghat(4, part_dim(part));
    if (part == BodyPart::face) {
      g.setRandom();
      ghat.setRandom();
      g.leftCols(6) = random_rotation_stream(rng, 4, 1);
      ghat.leftCols(6) = random_rotation_stream(rng, 4, 1);
    } else {
      g = random_rotation_stream(rng, 4, joints);
      ghat = random_rotation_stream(rng, 4, joints);
    }
    Mat z = Mat::Random(2, 6), q = Mat::Random(2, 6);
    VqLossReport r = vq_loss(codec, g, ghat, z, q, ProxySkeleton::standard());
    for (double c : {r.rec, r.vel, r.acc, r.mrec, r.mvel, r.macc, r.comm})
      CHECK(c >= 0.0);
    CHECK(r.total ==
          doctest::Approx(r.rec + r.vel + r.acc + r.mrec + r.mvel + r.macc + r.comm)
              .epsilon(1e-15));
    if (part == BodyPart::face) {
      CHECK(r.mrec == 0.0);
      CHECK(r.mvel == 0.0);
      CHECK(r.macc == 0.0);
    }
    CHECK_THROWS_AS(vq_loss(codec, g, ghat.topRows(3), z, q, ProxySkeleton::standard()),
                    ShapeMismatch);
  }
}

TEST_CASE("training graph report agrees with the plain vq_loss ledger") {
  CodecConfig cfg;
  cfg.part = BodyPart::lower;
  cfg.codebook_size = 6;
  cfg.latent_dim = 4;
  cfg.hidden = 8;
  PartCodec codec(cfg, 19);
  Rng rng(23);
  Mat g = random_rotation_stream(rng, 8, kLowerJoints);

  VqLossReport from_graph;
  codec.loss_graph(g, ProxySkeleton::standard(), &from_graph);

  Mat z = codec.encode(g);
  auto [idx, q] = quantize(codec.codebook(), z);
  Mat ghat = codec.decode(idx);
  VqLossReport plain = vq_loss(codec, g, ghat, z, q, ProxySkeleton::standard());

  CHECK(from_graph.rec == doctest::Approx(plain.rec).epsilon(1e-10));
  CHECK(from_graph.vel == doctest::Approx(plain.vel).epsilon(1e-10));
  CHECK(from_graph.acc == doctest::Approx(plain.acc).epsilon(1e-10));
  CHECK(from_graph.mrec == doctest::Approx(plain.mrec).epsilon(1e-10));
  CHECK(from_graph.mvel == doctest::Approx(plain.mvel).epsilon(1e-10));
  CHECK(from_graph.macc == doctest::Approx(plain.macc).epsilon(1e-10));
  CHECK(from_graph.comm == doctest::Approx(plain.comm).epsilon(1e-10));
}

TEST_CASE("loss gradient w.r.t. decoder parameters matches finite differences") {
  CodecConfig cfg;
  cfg.part = BodyPart::lower;
  cfg.codebook_size = 6;
  cfg.latent_dim = 4;
  cfg.hidden = 6;
  PartCodec codec(cfg, 29);
  Rng rng(31);
  Mat g = random_rotation_stream(rng, 4, kLowerJoints);
  const auto& sk = ProxySkeleton::standard();

  codec.params().zero_grad();
  nn::Tensor obj = codec.loss_graph(g, sk, nullptr);
  nn::backward(obj);

  auto w = codec.params().find("dec.w1");
  const double h = 1e-5;
  Rng pick(37);
  for (int trial = 0; trial < 12; ++trial) {
    const int64_t i = int64_t(pick.below(uint64_t(w.numel())));
    const double x0 = w.value()[i];
    w.value()[i] = x0 + h;
    const double fp = codec.loss_graph(g, sk, nullptr).item();
    w.value()[i] = x0 - h;
    const double fm = codec.loss_graph(g, sk, nullptr).item();
    w.value()[i] = x0;
    const double fd = (fp - fm) / (2 * h);
    const double ad = w.grad()[i];
    CHECK(std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-6}) < 1e-3);
  }
}

TEST_CASE("straight-through: encoder-output gradient equals quantized-value gradient") {
  // d(loss)/dz through the straight-through path must match the gradient a
  // decoder sees at its own (quantized) input.
  CodecConfig cfg;
  cfg.part = BodyPart::lower;
  cfg.codebook_size = 6;
  cfg.latent_dim = 4;
  cfg.hidden = 6;
  PartCodec codec(cfg, 43);
  Rng rng(47);
  Mat g = random_rotation_stream(rng, 4, kLowerJoints);

  Mat zv = codec.encode(g);
  auto [idx, qv] = quantize(codec.codebook(), zv);

  nn::Tensor z_leaf = nn::Tensor::constant(zv);
  z_leaf.node()->requires_grad = true;
  nn::Tensor st = nn::add(z_leaf, nn::detach(nn::sub(nn::Tensor::constant(qv), z_leaf)));
  nn::Tensor y1 = nn::mean(nn::square(st));
  nn::backward(y1);
  Eigen::ArrayXd grad_st = z_leaf.grad();

  nn::Tensor q_leaf = nn::Tensor::constant(qv);
  q_leaf.node()->requires_grad = true;
  nn::Tensor y2 = nn::mean(nn::square(q_leaf));
  nn::backward(y2);
  for (int64_t i = 0; i < q_leaf.numel(); ++i)
    CHECK(grad_st[i] == doctest::Approx(q_leaf.grad()[i]).epsilon(1e-12));
}

TEST_CASE("train_codec edge cases") {
  CodecConfig cfg;
  cfg.part = BodyPart::lower;
  TrainCodecConfig tc;
  CHECK_THROWS_AS(train_codec({}, BodyPart::lower, cfg, tc), EmptyDataset);

  MotionSequence tiny;
  tiny.fps = 30;
  tiny.face = Mat::Zero(2, kFaceDim);
  tiny.hands = Mat::Zero(2, kHandsDim);
  tiny.upper = Mat::Zero(2, kUpperDim);
  tiny.lower = identity_stream(2, kLowerJoints);
  tiny.translation = Mat::Zero(2, 3);
  CHECK_THROWS_AS(train_codec({tiny}, BodyPart::lower, cfg, tc), TooShort);
}

TEST_CASE("train_codec memorizes a dataset of identical clips") {
  Rng rng(53);
  Mat stream = random_rotation_stream(rng, 16, kLowerJoints, 0.3);
  std::vector<MotionSequence> data;
  for (int i = 0; i < 8; ++i) {
    MotionSequence s;
    s.fps = 30;
    s.face = Mat::Zero(16, kFaceDim);
    s.hands = Mat::Zero(16, kHandsDim);
    s.upper = Mat::Zero(16, kUpperDim);
    s.lower = stream;
    s.translation = Mat::Zero(16, 3);
    data.push_back(std::move(s));
  }
  CodecConfig cfg;
  cfg.codebook_size = 8;
  cfg.latent_dim = 4;
  cfg.hidden = 12;
  TrainCodecConfig tc;
  tc.epochs = 200;
  tc.batch_size = 2;
  tc.lr = 3e-3;
  tc.seed = 5;
  tc.early_stop_ratio = 0.2;
  CodecTrainReport rep;
  PartCodec codec = train_codec(data, BodyPart::lower, cfg, tc, &rep);
  CHECK(rep.final_holdout < 0.35 * rep.initial_holdout);
  CHECK(rep.utilization >= 1.0 / cfg.codebook_size);

  // No two codebook entries identical after training.
  Codebook cb = codec.codebook();
  for (int a = 0; a < cb.size; ++a)
    for (int b = a + 1; b < cb.size; ++b)
      CHECK((cb.entries.row(a) - cb.entries.row(b)).norm() > 0.0);
}

TEST_CASE("codec checkpoint round trip preserves behavior") {
  CodecConfig cfg;
  cfg.part = BodyPart::upper;
  cfg.codebook_size = 8;
  cfg.latent_dim = 6;
  cfg.hidden = 8;
  PartCodec codec(cfg, 61);
  Rng rng(67);
  Mat x = random_rotation_stream(rng, 12, kUpperJoints);

  const auto dir =
      (std::filesystem::temp_directory_path() / "mlang_codec_ckpt").string();
  codec.save(dir);
  PartCodec back = PartCodec::load(dir);
  CHECK(back.tokenize(x) == codec.tokenize(x));
  Mat d1 = codec.decode({1, 2, 3});
  Mat d2 = back.decode({1, 2, 3});
  CHECK((d1 - d2).cwiseAbs().maxCoeff() == 0.0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("translation predictor shapes and gradcheck") {
  TranslationConfig cfg;
  cfg.hidden = 8;
  cfg.latent_dim = 4;
  TranslationPredictor model(cfg, 71);
  Rng rng(73);
  Mat lower = random_rotation_stream(rng, 10, kLowerJoints);
  Mat out = model.predict(lower);
  CHECK(out.rows() == 10);
  CHECK(out.cols() == 3);
  CHECK_THROWS_AS(model.predict(Mat::Zero(10, 53)), ShapeMismatch);

  Mat target = Mat::Random(10, 3);
  model.params().zero_grad();
  Rng noise(1);
  nn::Tensor obj = model.loss_graph(lower, target, noise);
  nn::backward(obj);
  auto w = model.params().find("dec.w3");
  const double h = 1e-5;
  for (int trial = 0; trial < 6; ++trial) {
    const int64_t i = int64_t(Rng(trial).below(uint64_t(w.numel())));
    const double x0 = w.value()[i];
    Rng n1(1), n2(1);
    w.value()[i] = x0 + h;
    const double fp = model.loss_graph(lower, target, n1).item();
    w.value()[i] = x0 - h;
    const double fm = model.loss_graph(lower, target, n2).item();
    w.value()[i] = x0;
    const double fd = (fp - fm) / (2 * h);
    CHECK(std::abs(fd - w.grad()[i]) /
              std::max({std::abs(fd), std::abs(w.grad()[i]), 1e-6}) <
          1e-3);
  }
}
