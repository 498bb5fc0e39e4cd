"""Seed splitting: every random stream is keyed on (root seed, purpose tag, index)."""

import zlib

import numpy as np


def seed_sequence(root: int, tag: str, index: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(tag.encode("utf-8")), int(index)])


def derive_rng(root: int, tag: str, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root, tag, index))
