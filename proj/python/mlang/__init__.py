"""Desk-scale motion-language toolkit: compositional motion codecs, discrete
audio units, a unified multimodal vocabulary, and an instruction-tuned
sequence model, all backed by the C++ core."""

from mlang._core import (  # noqa: F401
    EMOTION_LABELS,
    Modality,
    MlangError,
    PartCodec,
    SeqModel,
    SubwordTokenizer,
    UnifiedVocab,
    beat_consistency,
    diversity,
    featurize,
    finite_difference,
    fit_acoustic_codebook,
    fk_positions,
    frechet_distance,
    geodesic_distance,
    load_motion_json,
    load_wav,
    merge_parts,
    quantize,
    rot6d_from_axis_angle,
    rot6d_to_matrix,
    run_command,
    save_motion_json,
    save_wav,
    split_pose,
    synth_clip,
    text_overlap,
    tokenize_audio,
)

__all__ = [
    "EMOTION_LABELS",
    "Modality",
    "MlangError",
    "PartCodec",
    "SeqModel",
    "SubwordTokenizer",
    "UnifiedVocab",
    "beat_consistency",
    "diversity",
    "featurize",
    "finite_difference",
    "fit_acoustic_codebook",
    "fk_positions",
    "frechet_distance",
    "geodesic_distance",
    "load_motion_json",
    "load_wav",
    "merge_parts",
    "quantize",
    "rot6d_from_axis_angle",
    "rot6d_to_matrix",
    "run_command",
    "save_motion_json",
    "save_wav",
    "split_pose",
    "synth_clip",
    "text_overlap",
    "tokenize_audio",
]
