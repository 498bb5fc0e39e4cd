"""Modality encoder contract, deterministic stub encoders and TXVF feature files.

Real video/audio encoders are frozen feature extractors; anything producing a
``SL_m x d_m`` matrix satisfies the contract. The stub encoder builds that
matrix from a counter-based generator keyed on the record id, plus fixed
cue patterns for whichever label cue bits are switched on.

TXVF layout (little-endian): ``b"TXVF"``, rows (u32), cols (u32), then
rows*cols float32 values in row-major order.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

MAGIC = b"TXVF"
_HEADER = struct.Struct("<4sII")
MODALITIES = ("video", "audio")


class FeatureFileError(ValueError):
    """Malformed or truncated TXVF file."""


@dataclass(frozen=True)
class EncoderSpec:
    modality: str
    dim: int
    length: int
    cue_strength: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.dim < 1 or self.length < 1:
            raise ValueError(f"encoder dims must be >= 1, got length={self.length} dim={self.dim}")
        if self.cue_strength < 0:
            raise ValueError("cue_strength must be nonnegative")


@dataclass
class EncodedModality:
    modality: str
    features: np.ndarray

    @property
    def shape(self):
        return self.features.shape


def _key(*parts) -> int:
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=16)
    return int.from_bytes(h.digest(), "little")


def _philox(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(*parts)))


def cue_pattern(spec: EncoderSpec, cue: str) -> np.ndarray:
    """Fixed unit Frobenius-norm pattern for one cue, derived from the encoder seed.

    The pattern repeats one random feature direction at every time step, so a
    filter shared across time can pick it up.
    """
    u = _philox("pattern", spec.modality, spec.seed, spec.dim, cue).standard_normal(spec.dim)
    p = np.repeat(u[None, :], spec.length, axis=0)
    return p / np.linalg.norm(p)


def stub_encode(record_id: str, label_cues: Mapping[str, int], spec: EncoderSpec) -> EncodedModality:
    """Deterministic stand-in for a pretrained encoder.

    ``label_cues`` maps cue names to bits; each bit that is on adds
    ``spec.cue_strength`` times that cue's pattern to the base noise.
    """
    base = _philox("base", spec.modality, spec.seed, record_id).standard_normal((spec.length, spec.dim))
    if spec.cue_strength > 0:
        for cue in sorted(label_cues):
            if label_cues[cue]:
                base = base + spec.cue_strength * cue_pattern(spec, cue)
    return EncodedModality(spec.modality, base)


def write_feature_file(path, features) -> None:
    arr = np.asarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"feature matrix must be 2-D, got shape {arr.shape}")
    rows, cols = arr.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, rows, cols))
            fh.write(np.ascontiguousarray(arr).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write feature file {os.fspath(path)}: {exc}") from exc


def read_feature_file(path) -> np.ndarray:
    """Read a TXVF file into a float32 ``rows x cols`` array."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"feature file not found: {os.fspath(path)}") from None
    if len(blob) < _HEADER.size:
        raise FeatureFileError(f"{os.fspath(path)}: truncated header ({len(blob)} bytes)")
    magic, rows, cols = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FeatureFileError(f"{os.fspath(path)}: bad magic {magic!r}, expected {MAGIC!r}")
    if rows < 1 or cols < 1:
        raise FeatureFileError(f"{os.fspath(path)}: empty matrix declared ({rows}x{cols})")
    need = rows * cols * 4
    have = len(blob) - _HEADER.size
    if have < need:
        raise FeatureFileError(
            f"{os.fspath(path)}: truncated payload, {rows}x{cols} needs {need} bytes, found {have}"
        )
    if have > need:
        raise FeatureFileError(f"{os.fspath(path)}: {have - need} trailing bytes after payload")
    return np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=_HEADER.size).reshape(rows, cols).copy()
