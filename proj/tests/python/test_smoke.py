"""Python smoke tests for the pybind11 surface."""

import json
import math
import os
import tempfile

import numpy as np
import pytest

import mlang


def test_rotations():
    r6 = mlang.rot6d_from_axis_angle(0.0, 0.0, math.pi / 2)
    assert np.allclose(r6, [0, 1, 0, -1, 0, 0])
    R = mlang.rot6d_to_matrix([1, 0, 0, 0, 1, 0])
    assert np.allclose(R, np.eye(3))
    with pytest.raises(mlang.MlangError):
        mlang.rot6d_to_matrix([1, 0, 0, 1, 0, 0])
    Rz = mlang.rot6d_to_matrix(mlang.rot6d_from_axis_angle(0.0, 0.0, 0.5))
    assert abs(mlang.geodesic_distance(np.eye(3), Rz) - 0.5) < 1e-9


def test_split_merge_and_finite_difference():
    full = np.random.default_rng(0).normal(size=(5, 418))
    parts = mlang.split_pose(full)
    assert parts["face"].shape == (5, 106)
    assert np.array_equal(mlang.merge_parts(parts), full)

    ramp = np.outer(np.arange(4.0), np.ones(3))
    vel = mlang.finite_difference(ramp, 1, 30.0)
    assert np.allclose(vel, 30.0)


def test_fk_positions_shape_and_shift():
    pose = np.tile([1, 0, 0, 0, 1, 0], 52).astype(float)
    base = mlang.fk_positions(list(pose), [0, 0, 0])
    shifted = mlang.fk_positions(list(pose), [1, 0, 0])
    assert base.shape == (156, 3)
    assert np.allclose(shifted[:, 0] - base[:, 0], 1.0)


def test_audio_tokens_rate():
    clip = mlang.synth_clip(seed=3, duration_s=2.0)
    feats = mlang.featurize(clip["audio"])
    assert feats.shape == (100, 40)
    centroids = mlang.fit_acoustic_codebook(feats, 8, iterations=10, seed=1)
    tokens = mlang.tokenize_audio(clip["audio"], centroids)
    assert len(tokens) == 100
    assert all(0 <= t < 8 for t in tokens)


def test_bpe_round_trip():
    tok = mlang.SubwordTokenizer.train(
        ["hello world hello there", "well hello wide world"], 260 + 16
    )
    ids = tok.encode("hello world")
    assert tok.decode(ids) == "hello world"
    assert 260 < tok.size() <= 260 + 16


def test_vocab_render_parse():
    tok = mlang.SubwordTokenizer.train(["walk and wave"], 260 + 4)
    vocab = mlang.UnifiedVocab.build(tok, 16, 16, 16, 16, 16)
    upper8 = vocab.offset_of(mlang.Modality.upper) + 8
    assert vocab.render(upper8) == "<upper_8>"
    assert vocab.parse("<upper_8>") == upper8
    wrapped = vocab.wrap(mlang.Modality.audio, [3, 1])
    mod, locals_ = vocab.unwrap(wrapped)
    assert mod == mlang.Modality.audio
    assert locals_ == [3, 1]


def test_quantize_matches_numpy_argmin():
    rng = np.random.default_rng(7)
    entries = rng.normal(size=(12, 6))
    z = rng.normal(size=(40, 6))
    idx, q = mlang.quantize(entries, z)
    want = np.argmin(((z[:, None, :] - entries[None, :, :]) ** 2).sum(-1), axis=1)
    assert np.array_equal(np.asarray(idx), want)


def test_metrics():
    mean = np.zeros((1, 3))
    cov = np.eye(3)
    assert mlang.frechet_distance(mean, cov, mean, cov) < 1e-9
    shifted = mean + 2.0
    assert mlang.frechet_distance(mean, cov, shifted, cov) == pytest.approx(12.0)

    bleu, rouge = mlang.text_overlap("very happy", "happy")
    assert rouge == pytest.approx(200.0 / 3.0)

    clips = [[0.0] * 6, [1.0] * 6]
    assert mlang.diversity(clips) == pytest.approx(6.0)


def test_synth_clip_beats_and_bc():
    clip = mlang.synth_clip(seed=5, bpm=100, duration_s=3.0)
    assert clip["emotion"] == "neutral"
    assert len(clip["beat_times"]) >= 4
    bc = mlang.beat_consistency(clip["audio"], clip["motion"])
    assert abs(bc - 1.0) < 1e-6


def test_motion_json_round_trip(tmp_path):
    clip = mlang.synth_clip(seed=9, duration_s=2.0)
    path = os.path.join(tmp_path, "m.json")
    mlang.save_motion_json(clip["motion"], path)
    back = mlang.load_motion_json(path)
    assert np.array_equal(back["upper"], clip["motion"]["upper"])


def test_pipeline_run_command(tmp_path):
    cfg = {
        "seed": 3,
        "data_dir": os.path.join(tmp_path, "data"),
        "work_dir": os.path.join(tmp_path, "work"),
        "synth": {"n": 4, "min_duration_s": 1.5, "max_duration_s": 2.0},
    }
    code, out = mlang.run_command("synth-data", json.dumps(cfg))
    assert code == 0
    assert json.loads(out)["clips"] == 4

    code, out = mlang.run_command("pretrain", json.dumps(cfg))
    assert code == 3  # vocabulary artifact missing
    assert json.loads(out)["error"]["type"] == "MissingArtifact"
