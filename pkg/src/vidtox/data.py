"""Synthetic code-mixed utterance corpora, manifests, annotation simulation and
agreement statistics.

Two presets:

``toxcmm-marginals``
    Label counts scaled from the reference corpus (4021 utterances: 2324
    non-toxic / 1697 toxic; severity 2324/834/863; sentiment 469/1401/2151).
    Non-toxic implies severity 0; toxic records take negative sentiment first.
    Label cues are spread over text markers, video and audio features.

``crossmodal-xor``
    ``toxicity = text_bit XOR audio_bit`` with both bits balanced, so no single
    modality predicts toxicity. Severity of toxic records follows a video bit,
    sentiment of non-toxic records follows a second text marker.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from vidtox.encoders import EncoderSpec, read_feature_file, stub_encode, write_feature_file
from vidtox.records import NUM_CLASSES, TASKS, AnnotationTriple, UtteranceRecord
from vidtox.seeding import derive_rng
from vidtox.text import split_words

PRESETS = ("toxcmm-marginals", "crossmodal-xor")

REFERENCE_COUNTS = {
    "toxicity": (2324, 1697),
    "severity": (2324, 834, 863),
    "sentiment": (469, 1401, 2151),
}
REFERENCE_TOTAL = 4021
MEAN_WORDS = 8.68
MEAN_DURATION = 8.89
HINDI_FRACTION = 0.682
# filler words are drawn Hindi at a lower rate because every marker word is Hindi
_FILLER_HINDI_P = 0.66
# xor audio/video strength picked by pilot runs so that the fused model clears
# 0.9 toxicity F1 at 1000 training records while leaving headroom over no_both
DEFAULT_CUES = {
    "toxcmm-marginals": {"text": 0.8, "video": 6.0, "audio": 6.0},
    "crossmodal-xor": {"text": 1.0, "video": 3.5, "audio": 3.5},
}
KAPPA_TARGETS = {"toxicity": 0.74, "sentiment": 0.67, "severity": 0.64}
# found with tune_agreement() on the 4021-record toxcmm-marginals corpus, seed 0
DEFAULT_AGREEMENT = {"toxicity": 0.9321, "sentiment": 0.8934, "severity": 0.884}

XOR_TEXT_MARKERS = ("neela", "lal")  # text bit 0 / 1
XOR_POSITIVE_MARKER = "shanti"
TOXIC_MARKERS = ("pagal", "bewakoof", "gussa", "faltu")
SEVERE_MARKERS = ("maar", "dhamki")
POSITIVE_MARKERS = ("khush", "mast")
NEGATIVE_MARKERS = ("dukh", "bekar")
_ALL_MARKERS = frozenset(
    XOR_TEXT_MARKERS + (XOR_POSITIVE_MARKER,) + TOXIC_MARKERS + SEVERE_MARKERS + POSITIVE_MARKERS + NEGATIVE_MARKERS
)


class ManifestError(ValueError):
    pass


@lru_cache(maxsize=None)
def wordlist(name: str) -> tuple:
    text = resources.files("vidtox").joinpath(f"wordlists/{name}.txt").read_text(encoding="utf-8")
    return tuple(w for w in text.split() if w)


@lru_cache(maxsize=None)
def hindi_words() -> frozenset:
    return frozenset(wordlist("hindi"))


def _scale_counts(ref: Sequence[int], total: int) -> list[int]:
    """Largest-remainder scaling of reference counts to ``total``."""
    s = sum(ref)
    exact = [c * total / s for c in ref]
    out = [math.floor(x) for x in exact]
    order = sorted(range(len(ref)), key=lambda i: (-(exact[i] - out[i]), i))
    for i in order[: total - sum(out)]:
        out[i] += 1
    return out


@dataclass
class GeneratorSpec:
    preset: str = "toxcmm-marginals"
    total: int = REFERENCE_TOTAL
    counts: Optional[dict] = None
    cue_strength: Optional[dict] = None
    seed: int = 0
    sl_v: int = 16
    d_v: int = 24
    sl_a: int = 24
    d_a: int = 16

    def __post_init__(self):
        if self.cue_strength is None:
            self.cue_strength = dict(DEFAULT_CUES.get(self.preset, DEFAULT_CUES["toxcmm-marginals"]))

    def resolved_counts(self) -> dict:
        if self.counts is not None:
            return {k: list(v) for k, v in self.counts.items()}
        tox = _scale_counts(REFERENCE_COUNTS["toxicity"], self.total)
        sev_toxic = _scale_counts(REFERENCE_COUNTS["severity"][1:], tox[1])
        return {
            "toxicity": tox,
            "severity": [tox[0]] + sev_toxic,
            "sentiment": _scale_counts(REFERENCE_COUNTS["sentiment"], self.total),
        }

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.total < 1:
            raise ValueError("total must be >= 1")
        for k in ("text", "video", "audio"):
            if self.cue_strength.get(k, 0.0) < 0:
                raise ValueError(f"cue strength for {k} must be nonnegative")
        if not 0.0 <= self.cue_strength.get("text", 0.0) <= 1.0:
            raise ValueError("text cue strength is a marker probability in [0, 1]")
        if self.preset == "toxcmm-marginals":
            c = self.resolved_counts()
            for task in TASKS:
                if len(c[task]) != NUM_CLASSES[task]:
                    raise ValueError(f"{task} needs {NUM_CLASSES[task]} class counts")
                if sum(c[task]) != self.total:
                    raise ValueError(f"{task} counts {c[task]} do not sum to total {self.total}")
                if min(c[task]) < 0:
                    raise ValueError(f"negative class count for {task}")
            if c["severity"][0] != c["toxicity"][0]:
                raise ValueError("severity-0 count must equal the non-toxic count")

    def encoder(self, modality: str) -> EncoderSpec:
        dims = {"video": (self.sl_v, self.d_v), "audio": (self.sl_a, self.d_a)}[modality]
        return EncoderSpec(modality, dim=dims[1], length=dims[0], cue_strength=self.cue_strength.get(modality, 0.0), seed=self.seed)


def _allocate_marginals(counts: dict) -> list[dict]:
    """Deterministic joint labels matching the marginals; toxic records go negative first."""
    n_non, n_tox = counts["toxicity"]
    _, n_sev1, n_sev2 = counts["severity"]
    n_pos, n_neu, n_neg = counts["sentiment"]
    sentiments = [2] * n_neg + [1] * n_neu + [0] * n_pos
    labels = []
    for i in range(n_tox):
        labels.append({"toxicity": 1, "severity": 1 if i < n_sev1 else 2, "sentiment": sentiments[i]})
    for i in range(n_non):
        labels.append({"toxicity": 0, "severity": 0, "sentiment": sentiments[n_tox + i]})
    return labels


@lru_cache(maxsize=None)
def _filler(name: str) -> tuple:
    return tuple(w for w in wordlist(name) if w not in _ALL_MARKERS)


def _transcript(rng: np.random.Generator, markers: Sequence[str]) -> str:
    hindi, english = _filler("hindi"), _filler("english")
    n = 3 + int(rng.poisson(MEAN_WORDS - 3))
    words = []
    for _ in range(max(n - len(markers), 0)):
        pool = hindi if rng.random() < _FILLER_HINDI_P else english
        words.append(pool[int(rng.integers(len(pool)))])
    for m in markers:
        # markers stay near the front so short max lengths keep them
        words.insert(int(rng.integers(0, min(len(words), 7) + 1)), m)
    return " ".join(words)


def _balanced_bits(rng: np.random.Generator, n: int, levels: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % levels)


def generate_dataset(spec: GeneratorSpec) -> list[UtteranceRecord]:
    spec.validate()
    n = spec.total
    video_spec, audio_spec = spec.encoder("video"), spec.encoder("audio")
    if spec.preset == "toxcmm-marginals":
        labels = _allocate_marginals(spec.resolved_counts())
        order = derive_rng(spec.seed, "labels").permutation(n)
        labels = [labels[i] for i in order]
        cues = [None] * n
    else:
        # one balanced draw over all 8 (text, audio, video) patterns keeps every
        # single cue exactly independent of toxicity when 8 divides the total
        combo = _balanced_bits(derive_rng(spec.seed, "xor-combo"), n, 8)
        text_bit, audio_bit, video_bit = combo // 4, (combo // 2) % 2, combo % 2
        pos_bit = _balanced_bits(derive_rng(spec.seed, "xor-sentiment"), n, 2)
        labels, cues = [], []
        for i in range(n):
            tox = int(text_bit[i] ^ audio_bit[i])
            labels.append(
                {
                    "toxicity": tox,
                    "severity": (1 + int(video_bit[i])) if tox else 0,
                    "sentiment": 2 if tox else (0 if pos_bit[i] else 1),
                }
            )
            cues.append({"text": int(text_bit[i]), "audio": int(audio_bit[i]), "video": int(video_bit[i]), "positive": int(pos_bit[i])})
    text_p = spec.cue_strength.get("text", 0.0)
    records = []
    for i in range(n):
        rng = derive_rng(spec.seed, "record", i)
        y = labels[i]
        rid = f"{spec.preset}-{spec.seed}-{i:05d}"
        if spec.preset == "toxcmm-marginals":
            markers = []
            if y["toxicity"] and rng.random() < text_p:
                markers.append(TOXIC_MARKERS[int(rng.integers(len(TOXIC_MARKERS)))])
            if y["severity"] == 2 and rng.random() < text_p:
                markers.append(SEVERE_MARKERS[int(rng.integers(len(SEVERE_MARKERS)))])
            if y["sentiment"] == 0 and rng.random() < text_p:
                markers.append(POSITIVE_MARKERS[int(rng.integers(len(POSITIVE_MARKERS)))])
            if y["sentiment"] == 2 and not y["toxicity"] and rng.random() < text_p:
                markers.append(NEGATIVE_MARKERS[int(rng.integers(len(NEGATIVE_MARKERS)))])
            v_cues = {"toxic": y["toxicity"], "severe": int(y["severity"] == 2)}
            a_cues = {"toxic": y["toxicity"], "negative": int(y["sentiment"] == 2)}
            rec_cues = {}
        else:
            c = cues[i]
            markers = [XOR_TEXT_MARKERS[c["text"]]]
            if c["positive"]:
                markers.append(XOR_POSITIVE_MARKER)
            v_cues = {"video": c["video"]}
            a_cues = {"audio": c["audio"]}
            rec_cues = dict(c)
        transcript = _transcript(rng, markers)
        words = split_words(transcript)
        duration = float(max(0.5, rng.normal(MEAN_DURATION, 2.0)))
        records.append(
            UtteranceRecord(
                id=rid,
                transcript=transcript,
                labels=dict(y),
                video=stub_encode(rid, v_cues, video_spec).features,
                audio=stub_encode(rid, a_cues, audio_spec).features,
                duration_seconds=duration,
                hindi_word_count=sum(w in hindi_words() for w in words),
                total_word_count=len(words),
                cues=rec_cues,
            )
        )
    return records


# -- manifests -------------------------------------------------------------


def write_manifest(records: Sequence[UtteranceRecord], directory) -> str:
    """Write ``manifest.jsonl`` plus one TXVF file per record and modality."""
    feat_dir = os.path.join(directory, "features")
    os.makedirs(feat_dir, exist_ok=True)
    path = os.path.join(directory, "manifest.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "id": r.id,
                "transcript": r.transcript,
                "labels": {t: int(r.labels[t]) for t in TASKS if t in r.labels},
                "duration_seconds": r.duration_seconds,
                "hindi_word_count": r.hindi_word_count,
                "total_word_count": r.total_word_count,
                "annotations": None,
                "cues": r.cues,
            }
            for m in ("video", "audio"):
                arr = r.features(m)
                if arr is None:
                    obj[m] = None
                    continue
                rel = f"features/{r.id}.{m}.txvf"
                write_feature_file(os.path.join(directory, rel), arr)
                obj[m] = rel
            if r.annotations is not None:
                obj["annotations"] = {t: a.to_json() for t, a in r.annotations.items()}
            fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def read_manifest(directory) -> list[UtteranceRecord]:
    path = os.path.join(directory, "manifest.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid = obj["id"]
                transcript = obj["transcript"]
                labels = {k: int(v) for k, v in obj["labels"].items()}
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
            feats = {}
            for m in ("video", "audio"):
                rel = obj.get(m)
                if rel is None:
                    feats[m] = None
                    continue
                fpath = os.path.join(directory, rel)
                if not os.path.exists(fpath):
                    raise ManifestError(f"record {rid}: {m} feature file missing ({fpath})")
                try:
                    feats[m] = read_feature_file(fpath)
                except ValueError as exc:
                    raise ManifestError(f"record {rid}: {exc}") from exc
            ann = obj.get("annotations")
            records.append(
                UtteranceRecord(
                    id=rid,
                    transcript=transcript,
                    labels=labels,
                    video=feats["video"],
                    audio=feats["audio"],
                    duration_seconds=float(obj.get("duration_seconds", 0.0)),
                    hindi_word_count=int(obj.get("hindi_word_count", 0)),
                    total_word_count=int(obj.get("total_word_count", 0)),
                    annotations=None if ann is None else {t: AnnotationTriple.from_json(t, a) for t, a in ann.items()},
                    cues=obj.get("cues") or {},
                )
            )
    return records


# -- annotation ------------------------------------------------------------


def majority_vote(labels: Sequence[int], adjudicator: Optional[int] = None) -> tuple[int, bool]:
    """Label agreed by at least two of three annotators, else the adjudicator's label."""
    if len(labels) != 3:
        raise ValueError(f"majority vote needs 3 labels, got {len(labels)}")
    a, b, c = (int(x) for x in labels)
    if a == b or a == c:
        return a, False
    if b == c:
        return b, False
    return (adjudicator if adjudicator is not None else a), True


def simulate_annotations(
    records: Sequence[UtteranceRecord], agreement: dict, seed: int = 0
) -> list[UtteranceRecord]:
    """Three independent annotators per task: the true label with probability
    ``agreement[task]``, otherwise a uniformly chosen other label."""
    for task, p in agreement.items():
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"agreement for {task} must lie in [0, 1], got {p}")
    out = []
    for i, r in enumerate(records):
        rng = derive_rng(seed, "annotate", i)
        ann = {}
        for task in TASKS:
            if task not in agreement or task not in r.labels:
                continue
            k = NUM_CLASSES[task]
            truth = r.labels[task]
            triple = []
            for _ in range(3):
                if rng.random() < agreement[task]:
                    triple.append(truth)
                else:
                    other = int(rng.integers(k - 1))
                    triple.append(other if other < truth else other + 1)
            label, esc = majority_vote(triple, adjudicator=truth)
            ann[task] = AnnotationTriple(task, tuple(triple), label, esc)
        out.append(replace(r, annotations=ann))
    return out


def category_counts(triples: Sequence[Sequence[int]], n_categories: int) -> np.ndarray:
    counts = np.zeros((len(triples), n_categories), dtype=np.int64)
    for i, t in enumerate(triples):
        for lab in t:
            counts[i, lab] += 1
    return counts


def fleiss_kappa(counts, n_categories: Optional[int] = None) -> float:
    """Fleiss' kappa from an items x categories matrix of rating counts."""
    m = np.asarray(counts, dtype=np.int64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise ValueError("counts must be a nonempty items x categories matrix")
    if n_categories is not None and m.shape[1] != n_categories:
        raise ValueError(f"expected {n_categories} categories, got {m.shape[1]}")
    if (m < 0).any():
        raise ValueError("counts must be nonnegative")
    raters = m.sum(axis=1)
    n = int(raters[0])
    if (raters != n).any():
        raise ValueError("every item must be rated by the same number of raters")
    if n < 2:
        raise ValueError("need at least two raters per item")
    p_item = ((m * m).sum(axis=1) - n) / (n * (n - 1))
    p_bar = float(p_item.mean())
    p_cat = m.sum(axis=0) / (m.shape[0] * n)
    p_e = float((p_cat * p_cat).sum())
    if p_bar == 1.0:
        return 1.0
    return (p_bar - p_e) / (1.0 - p_e)


def task_kappa(records: Sequence[UtteranceRecord], task: str) -> float:
    triples = [r.annotations[task].labels for r in records]
    return fleiss_kappa(category_counts(triples, NUM_CLASSES[task]), NUM_CLASSES[task])


def tune_agreement(
    records: Sequence[UtteranceRecord], task: str, target: float, seed: int = 0, iters: int = 30
) -> float:
    """Bisection on the agreement probability until simulated kappa hits ``target``."""
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        k = task_kappa(simulate_annotations(records, {task: mid}, seed), task)
        if k < target:
            lo = mid
        else:
            hi = mid
    return round(0.5 * (lo + hi), 4)


# -- statistics ------------------------------------------------------------


def corpus_stats(records: Sequence[UtteranceRecord]) -> dict:
    if not records:
        raise ValueError("corpus_stats needs at least one record")
    hist = {t: [0] * NUM_CLASSES[t] for t in TASKS}
    for r in records:
        for t, y in r.labels.items():
            hist[t][y] += 1
    fractions = [r.hindi_word_count / r.total_word_count for r in records if r.total_word_count]
    return {
        "records": len(records),
        "histograms": hist,
        "mean_words": float(np.mean([r.total_word_count for r in records])),
        "mean_duration_seconds": float(np.mean([r.duration_seconds for r in records])),
        "mean_hindi_fraction": float(np.mean(fractions)) if fractions else 0.0,
    }


def format_stats(stats: dict) -> str:
    h = stats["histograms"]
    return "\n".join(
        [
            f"records              {stats['records']}",
            f"toxicity  (non/tox)  {h['toxicity'][0]} / {h['toxicity'][1]}",
            f"severity  (0/1/2)    {' / '.join(map(str, h['severity']))}",
            f"sentiment (pos/neu/neg) {' / '.join(map(str, h['sentiment']))}",
            f"mean words           {stats['mean_words']:.2f}",
            f"mean duration (s)    {stats['mean_duration_seconds']:.2f}",
            f"mean Hindi fraction  {stats['mean_hindi_fraction']:.4f}",
        ]
    )
