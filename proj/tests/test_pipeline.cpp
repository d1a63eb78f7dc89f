#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mlang/blob.hpp"
#include "mlang/pipeline.hpp"

using namespace mlang;
namespace fs = std::filesystem;
using nlohmann::json;

TEST_CASE("config defaults follow the training schedule") {
  PipelineConfig cfg = config_from_json(json::object());
  CHECK(cfg.pretrain.lr == doctest::Approx(2e-4));
  CHECK(cfg.posttrain.lr == doctest::Approx(1e-4));
  CHECK(cfg.posttrain.epochs == 350);
  CHECK(cfg.codec.codebook_size == 256);
  CHECK(cfg.codec.latent_dim == 128);
  CHECK(cfg.codec.downsample == 4);
  CHECK(cfg.text_vocab_size == 4096);
  CHECK(cfg.audio_codebook_size == 512);
  CHECK(cfg.model.width == 256);
  CHECK(cfg.model.enc_layers == 4);
  CHECK(cfg.model.max_input == 512);
}

TEST_CASE("config rejects unknown keys and honors overrides") {
  CHECK_THROWS_AS(config_from_json(json{{"not_a_key", 1}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"codec", {{"bogus", 1}}}}), ConfigError);

  json j = json::object();
  apply_override(j, "pretrain.epochs=7");
  apply_override(j, "codec.codebook_size=64");
  apply_override(j, "data_dir=/tmp/somewhere");
  PipelineConfig cfg = config_from_json(j);
  CHECK(cfg.pretrain.epochs == 7);
  CHECK(cfg.codec.codebook_size == 64);
  CHECK(cfg.data_dir == "/tmp/somewhere");

  CHECK_THROWS_AS(apply_override(j, "no_equals_sign"), ConfigError);

  // Hash tracks effective config content.
  PipelineConfig base = config_from_json(json::object());
  CHECK(config_hash(base) != config_hash(cfg));
  CHECK(config_hash(cfg) == config_hash(config_from_json(j)));
}

TEST_CASE("missing artifacts surface as exit code 3 with error json") {
  PipelineConfig cfg = config_from_json(json::object());
  cfg.data_dir = "/tmp/mlang_missing_nothing_here";
  cfg.work_dir = (fs::temp_directory_path() / "mlang_pipe_missing").string();
  CommandResult r = run_command("codec-train", cfg, {{"part", "upper"}});
  CHECK(r.exit_code == kExitMissingArtifact);
  CHECK(r.output["error"]["type"] == "MissingArtifact");
  CHECK(r.output["error"]["message"].get<std::string>().find("corpus") !=
        std::string::npos);

  CommandResult bad = run_command("frobnicate", cfg, {});
  CHECK(bad.exit_code == kExitConfigError);
  fs::remove_all(cfg.work_dir);
}

TEST_CASE("synth-data command writes the corpus with provenance") {
  PipelineConfig cfg = config_from_json(json::object());
  cfg.synth.n = 4;
  cfg.seed = 11;
  const auto root = (fs::temp_directory_path() / "mlang_pipe_synth").string();
  cfg.data_dir = root + "/data";
  cfg.work_dir = root + "/work";
  fs::remove_all(root);
  CommandResult r = run_command("synth-data", cfg, {});
  REQUIRE(r.exit_code == kExitOk);
  CHECK(r.output["clips"] == 4);
  CHECK(fs::exists(cfg.data_dir + "/provenance.json"));
  json prov = read_json_file(cfg.data_dir + "/provenance.json");
  CHECK(prov["command"] == "synth-data");
  CHECK(prov["seed"] == 11);
  CHECK(prov["config_hash"] == config_hash(cfg));

  auto split = load_split_corpus(cfg);
  CHECK(split.train.size() + split.eval.size() == 4);
  CHECK(!split.eval.empty());
  fs::remove_all(root);
}

TEST_CASE("export_animation: row arithmetic, rest pose, json round trip") {
  const auto dir = (fs::temp_directory_path() / "mlang_pipe_export").string();
  fs::remove_all(dir);
  fs::create_directories(dir);

  const int frames = 3;
  MotionSequence seq;
  seq.fps = 30;
  seq.face = Mat::Zero(frames, kFaceDim);
  seq.hands = Mat::Zero(frames, kHandsDim);
  seq.upper = Mat::Zero(frames, kUpperDim);
  seq.lower = Mat::Zero(frames, kLowerDim);
  seq.translation = Mat::Zero(frames, 3);
  Vec6 id;
  id << 1, 0, 0, 0, 1, 0;
  for (int f = 0; f < frames; ++f) {
    for (int j = 0; j < kHandJoints; ++j)
      seq.hands.block<1, 6>(f, 6 * j) = id.transpose();
    for (int j = 0; j < kUpperJoints; ++j)
      seq.upper.block<1, 6>(f, 6 * j) = id.transpose();
    for (int j = 0; j < kLowerJoints; ++j)
      seq.lower.block<1, 6>(f, 6 * j) = id.transpose();
    seq.face.block<1, 6>(f, 0) = id.transpose();
  }

  const auto csv = dir + "/markers.csv";
  export_animation(seq, ProxySkeleton::standard(), csv, "csv");
  std::ifstream in(csv);
  std::string line;
  int rows = 0;
  std::getline(in, line);
  CHECK(line == "frame,marker,x,y,z");
  std::string first_data;
  while (std::getline(in, line)) {
    if (rows == 0) first_data = line;
    ++rows;
  }
  CHECK(rows == frames * 156);

  // Rest pose: marker 0 of joint 0 sits at pelvis offset + marker offset.
  const auto& sk = ProxySkeleton::standard();
  Mat want = fk_positions(
      [&] {
        Eigen::VectorXd pose(kTotalJoints * 6);
        for (int j = 0; j < kTotalJoints; ++j)
          pose.segment<6>(pose_offset_of_joint(j)) = id;
        return pose;
      }(),
      sk, Vec3::Zero());
  char expect[128];
  snprintf(expect, sizeof expect, "0,0,%.9g,%.9g,%.9g", want(0, 0), want(0, 1),
           want(0, 2));
  CHECK(first_data == expect);

  const auto jpath = dir + "/motion.json";
  export_animation(seq, sk, jpath, "json");
  MotionSequence back = load_motion_json(jpath);
  CHECK((merge_parts(back) - merge_parts(seq)).cwiseAbs().maxCoeff() == 0.0);
  CHECK_THROWS_AS(export_animation(seq, sk, dir + "/x.bin", "bin"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("editable_generate merges passes and reports part provenance") {
  // Tiny untrained stack: checks plumbing, shapes and provenance only.
  SubwordTokenizer tok =
      train_subword({"walk forward slowly"}, SubwordTokenizer::kByteBase + 256 + 8);
  CodecSet codecs;
  for (BodyPart p :
       {BodyPart::face, BodyPart::hands, BodyPart::upper, BodyPart::lower}) {
    CodecConfig cc;
    cc.part = p;
    cc.codebook_size = 8;
    cc.latent_dim = 4;
    cc.hidden = 8;
    codecs.codecs.emplace_back(cc, uint64_t(3 + int(p)));
  }
  UnifiedVocab vocab = build_vocab(tok, 8, 8, 8, 8, 8);
  ModelConfig mc;
  mc.vocab_size = vocab.total_size;
  mc.enc_layers = 1;
  mc.dec_layers = 1;
  mc.width = 32;
  mc.heads = 2;
  mc.ff_mult = 2;
  mc.rel_buckets = 8;
  mc.vocab_hash = vocab.hash;
  SeqModel model(mc, 5);

  SynthConfig sc;
  sc.seed = 4;
  sc.duration_s = 2.0;
  AudioClip audio = synth_clip(sc).audio;

  AcousticCodebook acb;
  acb.size = 8;
  acb.dim = kMelBands;
  acb.centroids = Mat::Random(8, kMelBands);

  std::map<std::string, std::string> sources;
  MotionTokens tokens;
  MotionSequence merged =
      editable_generate(model, codecs, acb, vocab, default_template_bank(), audio,
                        "walk forward slowly", 9, &sources, &tokens);
  CHECK(sources.at("upper") == "audio");
  CHECK(sources.at("lower") == "text");
  CHECK(sources.at("face") == "audio");
  CHECK(merged.frames() > 0);
  CHECK(merged.lower.cols() == kLowerDim);
  CHECK(int(tokens.lower.size()) * 4 >= merged.frames());
}
