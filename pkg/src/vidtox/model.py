"""Multitask multimodal classifier, the concatenation baseline, and checkpoints.

Sequence layout fed to the backbone: text rows, one SEP embedding row, then
the fused soft-token rows. The backbone output is mean-pooled over non-PAD
rows and passed to one linear head per enabled task. Task losses are combined
with weights ``beta = M * softmax(theta_beta)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from vidtox import autodiff as ad
from vidtox import sync
from vidtox.autodiff import Parameter, Tensor
from vidtox.encoders import read_feature_file, write_feature_file
from vidtox.records import NUM_CLASSES, TASKS, UtteranceRecord
from vidtox.seeding import derive_rng
from vidtox.text import SEP, TextEmbeddings, Vocabulary, tokenize

VARIANTS = ("full", "no_gf", "no_mhca", "no_both", "baseline", "text_only")
MODALITIES = ("text", "video", "audio")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_t: int = 32
    sl_prime: int = 8
    sl_t: int = 12
    heads: int = 4
    depth: int = 2
    ffn_mult: int = 2
    max_vocab: int = 2000
    vocab_size: int = 0
    sl_v: int = 16
    d_v: int = 24
    sl_a: int = 24
    d_a: int = 16
    tasks: tuple = TASKS
    modalities: tuple = MODALITIES
    disable_mhca: bool = False
    disable_gf: bool = False
    baseline: bool = False
    baseline_hidden: int = 32
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        self.modalities = tuple(self.modalities)
        self.validate()

    def validate(self) -> None:
        if not self.tasks:
            raise ConfigError("at least one task must be enabled")
        for t in self.tasks:
            if t not in NUM_CLASSES:
                raise ConfigError(f"unknown task {t!r}")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("duplicate task")
        if "text" not in self.modalities:
            raise ConfigError("the text modality is always required")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r}")
        if self.d_t % self.heads:
            raise ConfigError(f"heads={self.heads} must divide d_t={self.d_t}")
        for name in ("d_t", "sl_prime", "sl_t", "heads", "sl_v", "d_v", "sl_a", "d_a", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.depth < 0:
            raise ConfigError("depth must be >= 0")
        if self.baseline and len(self.tasks) != 1:
            raise ConfigError("the baseline classifier handles exactly one task")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def fusion_modalities(self) -> tuple:
        return tuple(m for m in ("video", "audio") if m in self.modalities)

    def soft_token_count(self) -> int:
        n = len(self.fusion_modalities)
        if n == 0:
            return 0
        if n == 2 and not self.disable_gf:
            return self.sl_prime
        return n * self.sl_prime

    def variant(self, name: str) -> "ModelConfig":
        if name == "full":
            return replace(self)
        if name == "no_gf":
            return replace(self, disable_gf=True)
        if name == "no_mhca":
            return replace(self, disable_mhca=True)
        if name == "no_both":
            return replace(self, disable_gf=True, disable_mhca=True)
        if name == "baseline":
            return replace(self, baseline=True, tasks=(self.tasks[0],))
        if name == "text_only":
            return replace(self, modalities=("text",))
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Sample:
    id: str
    ids: list
    mask: np.ndarray
    video: Optional[Tensor]
    audio: Optional[Tensor]
    labels: dict


@dataclass
class TaskPrediction:
    logits: dict = field(default_factory=dict)
    probs: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)


def _softmax_row(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def multitask_loss(task_losses: Sequence[Tensor], theta_beta: Tensor) -> Tensor:
    """Weighted sum of task losses with ``beta = M * softmax(theta_beta)``."""
    m = len(task_losses)
    if m < 1:
        raise ValueError("need at least one task loss")
    if theta_beta.shape != (1, m):
        raise ad.ShapeError(f"theta_beta shape {theta_beta.shape}, expected (1, {m})")
    beta = ad.scale(ad.rowwise_softmax(theta_beta), float(m))
    losses = task_losses[0] if m == 1 else ad.concat_cols(list(task_losses))
    return ad.sum_all(ad.mul(beta, losses))


def beta_weights(theta_beta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta_beta, dtype=np.float64).reshape(-1)
    return theta.size * _softmax_row(theta)


def assemble_sequence(text: TextEmbeddings, soft: Optional[Tensor], sep_row: Optional[Tensor]):
    """``[text rows; SEP; soft rows]`` and its key mask; text alone when ``soft`` is None."""
    if soft is None:
        return text.embeddings, text.mask.copy()
    if soft.cols != text.embeddings.cols or sep_row.cols != text.embeddings.cols:
        raise ad.ShapeError(
            f"assemble_sequence: widths differ (text {text.embeddings.cols}, "
            f"sep {sep_row.cols}, soft {soft.cols})"
        )
    seq = ad.concat_rows([text.embeddings, sep_row, soft])
    mask = np.concatenate([text.mask, np.ones(1 + soft.rows, dtype=bool)])
    return seq, mask


@dataclass
class BackboneLayer:
    attn: sync.AttentionParams
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def backbone_forward(seq: Tensor, mask, layers: Sequence[BackboneLayer]) -> Tensor:
    """Masked self-attention + residual, then tanh feed-forward + residual, per layer."""
    x = seq
    for layer in layers:
        x = ad.add(x, sync.mhca(x, x, mask, layer.attn))
        h = ad.tanh(ad.linear(x, layer.w1, layer.b1))
        x = ad.add(x, ad.linear(h, layer.w2, layer.b2))
    return x


def multitask_heads(pooled: Tensor, heads: dict) -> dict:
    """Per-task logits (1 x K) from the pooled representation; ``heads`` maps task -> (W, b)."""
    return {task: ad.linear(pooled, w, b) for task, (w, b) in heads.items()}


def init_params(config: ModelConfig, vocab_size: int) -> dict:
    rng = derive_rng(config.seed, "init")
    d = config.d_t
    raw: dict[str, np.ndarray] = {}
    if config.baseline:
        hid = config.baseline_hidden
        raw["baseline.text.embedding"] = rng.normal(0.0, 1.0, (vocab_size, d))
        dims = {"text": d, "video": config.d_v, "audio": config.d_a}
        for m in config.modalities:
            raw[f"baseline.{m}.fc.w"] = rng.normal(0.0, 1.0 / np.sqrt(dims[m]), (dims[m], hid))
            raw[f"baseline.{m}.fc.b"] = np.zeros((1, hid))
        k = NUM_CLASSES[config.tasks[0]]
        width = hid * len(config.modalities)
        raw["baseline.classifier.w"] = rng.normal(0.0, 1.0 / np.sqrt(width), (width, k))
        raw["baseline.classifier.b"] = np.zeros((1, k))
        return raw
    raw["text.embedding"] = rng.normal(0.0, 1.0, (vocab_size, d))
    dims = {"video": config.d_v, "audio": config.d_a}
    for m in config.fusion_modalities:
        raw.update(sync.init_conv_proj(rng, dims[m], d, None, f"sync.{m}"))
    if not config.disable_mhca:
        for m in config.fusion_modalities:
            raw.update(sync.init_attention(rng, d, f"sync.{m}.attn"))
    if len(config.fusion_modalities) == 2 and not config.disable_gf:
        raw.update(sync.init_gate(rng, d, "sync.gate"))
    hidden = config.ffn_mult * d
    for i in range(config.depth):
        raw.update(sync.init_attention(rng, d, f"backbone.{i}.attn"))
        raw[f"backbone.{i}.ffn.w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, hidden))
        raw[f"backbone.{i}.ffn.b1"] = np.zeros((1, hidden))
        raw[f"backbone.{i}.ffn.w2"] = rng.normal(0.0, 0.5 / np.sqrt(hidden), (hidden, d))
        raw[f"backbone.{i}.ffn.b2"] = np.zeros((1, d))
    for task in config.tasks:
        k = NUM_CLASSES[task]
        raw[f"head.{task}.w"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, k))
        raw[f"head.{task}.b"] = np.zeros((1, k))
    raw["loss.theta_beta"] = np.zeros((1, len(config.tasks)))
    return raw


class Model:
    """Parameters plus forward passes for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: Optional[dict] = None):
        self.config = config
        self.vocab = vocab
        if config.vocab_size and config.vocab_size != len(vocab):
            raise ConfigError(f"config vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        config = replace(config, vocab_size=len(vocab))
        self.config = config
        raw = params if params is not None else init_params(config, len(vocab))
        dt = config.np_dtype
        self.params: dict[str, Parameter] = {
            name: Parameter(np.array(v, dtype=dt), name) for name, v in raw.items()
        }
        self._bind()

    def _bind(self):
        c, p = self.config, self.params
        if c.baseline:
            return
        self.conv = {
            m: sync.ConvProjParams(p[f"sync.{m}.conv.w"], p[f"sync.{m}.conv.b"], p[f"sync.{m}.proj.w"], p[f"sync.{m}.proj.b"])
            for m in c.fusion_modalities
        }
        self.attn = {}
        if not c.disable_mhca:
            self.attn = {
                m: sync.AttentionParams(*(p[f"sync.{m}.attn.{n}"] for n in ("wq", "wk", "wv", "wo")), heads=c.heads)
                for m in c.fusion_modalities
            }
        self.gate = None
        if "sync.gate.pv" in p:
            self.gate = sync.GateParams(p["sync.gate.pv"], p["sync.gate.pa"], p["sync.gate.bg"])
        self.layers = [
            BackboneLayer(
                sync.AttentionParams(*(p[f"backbone.{i}.attn.{n}"] for n in ("wq", "wk", "wv", "wo")), heads=c.heads),
                p[f"backbone.{i}.ffn.w1"],
                p[f"backbone.{i}.ffn.b1"],
                p[f"backbone.{i}.ffn.w2"],
                p[f"backbone.{i}.ffn.b2"],
            )
            for i in range(c.depth)
        ]
        self.heads = {t: (p[f"head.{t}.w"], p[f"head.{t}.b"]) for t in c.tasks}

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    # -- data ------------------------------------------------------------

    def prepare(self, record: UtteranceRecord) -> Sample:
        c = self.config
        ids, mask = tokenize(record.transcript, self.vocab, c.sl_t)
        feats = {}
        expected = {"video": (c.sl_v, c.d_v), "audio": (c.sl_a, c.d_a)}
        for m in ("video", "audio"):
            if m not in c.modalities:
                feats[m] = None
                continue
            arr = record.features(m)
            if arr is None:
                raise ValueError(f"record {record.id} has no {m} features")
            if arr.shape[1] != expected[m][1]:
                raise ad.ShapeError(
                    f"record {record.id}: {m} features are {arr.shape}, model expects width {expected[m][1]}"
                )
            feats[m] = Tensor(np.asarray(arr, dtype=c.np_dtype))
        return Sample(record.id, ids, np.asarray(mask, dtype=bool), feats["video"], feats["audio"], dict(record.labels))

    # -- forward ---------------------------------------------------------

    def _logits(self, s: Sample) -> dict:
        c, p = self.config, self.params
        if c.baseline:
            return self._baseline_logits(s)
        table = p["text.embedding"]
        text = TextEmbeddings(ad.embedding_lookup(table, s.ids), s.mask)
        soft = None
        if c.fusion_modalities:
            feats = {"video": s.video, "audio": s.audio}
            tokens = {m: sync.abstract_features(feats[m], self.conv[m], c.sl_prime) for m in c.fusion_modalities}
            if not c.disable_mhca:
                tokens = {m: sync.mhca(tokens[m], text.embeddings, text.mask, self.attn[m]) for m in tokens}
            if len(tokens) == 2 and self.gate is not None:
                soft = sync.gated_fusion(tokens["video"], tokens["audio"], self.gate).joint
            elif len(tokens) == 2:
                soft = ad.concat_rows([tokens["video"], tokens["audio"]])
            else:
                soft = next(iter(tokens.values()))
        sep = ad.embedding_lookup(table, [SEP]) if soft is not None else None
        seq, mask = assemble_sequence(text, soft, sep)
        h = backbone_forward(seq, mask, self.layers)
        pooled = ad.mean_rows(h, mask)
        return multitask_heads(pooled, self.heads)

    def _baseline_logits(self, s: Sample) -> dict:
        c, p = self.config, self.params
        parts = []
        for m in c.modalities:
            if m == "text":
                x = ad.mean_rows(ad.embedding_lookup(p["baseline.text.embedding"], s.ids), s.mask)
            else:
                x = ad.mean_rows(s.video if m == "video" else s.audio)
            parts.append(ad.linear(x, p[f"baseline.{m}.fc.w"], p[f"baseline.{m}.fc.b"]))
        fused = parts[0] if len(parts) == 1 else ad.concat_cols(parts)
        logits = ad.linear(fused, p["baseline.classifier.w"], p["baseline.classifier.b"])
        return {c.tasks[0]: logits}

    def forward(self, s: Sample):
        """Return ``(TaskPrediction, {task: loss Tensor})``; losses only for labelled tasks."""
        logits = self._logits(s)
        pred = TaskPrediction()
        losses = {}
        for task, z in logits.items():
            row = z.data[0].astype(np.float64)
            pred.logits[task] = row
            pred.probs[task] = _softmax_row(row)
            pred.labels[task] = int(np.argmax(row))
            if task in s.labels:
                losses[task] = ad.cross_entropy(z, s.labels[task])
        return pred, losses

    def loss(self, s: Sample) -> Tensor:
        _, losses = self.forward(s)
        missing = [t for t in self.config.tasks if t not in losses]
        if missing:
            raise ValueError(f"sample {s.id} lacks labels for {missing}")
        task_losses = [losses[t] for t in self.config.tasks]
        if self.config.baseline:
            return task_losses[0]
        return multitask_loss(task_losses, self.params["loss.theta_beta"])

    def predict(self, samples: Sequence[Sample]) -> dict:
        out = {t: np.empty(len(samples), dtype=np.int64) for t in self.config.tasks}
        with ad.no_grad():
            for i, s in enumerate(samples):
                pred, _ = self.forward(s)
                for t in self.config.tasks:
                    out[t][i] = pred.labels[t]
        return out

    def beta(self) -> Optional[np.ndarray]:
        if "loss.theta_beta" not in self.params:
            return None
        return beta_weights(self.params["loss.theta_beta"].data)

    def state(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}


# -- checkpoints ----------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path) -> None:
    """Directory layout: config.json, params.json (name -> file/rows/cols),
    vocab.txt and one TXVF file per parameter under ``params/``."""
    os.makedirs(os.path.join(path, "params"), exist_ok=True)
    with open(os.path.join(path, "config.json"), "w") as fh:
        json.dump(model.config.to_dict(), fh, indent=2, sort_keys=True)
    index = {}
    for name, p in model.params.items():
        rel = os.path.join("params", name + ".txvf")
        write_feature_file(os.path.join(path, rel), p.data)
        index[name] = {"file": rel, "rows": p.rows, "cols": p.cols}
    with open(os.path.join(path, "params.json"), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    model.vocab.save(os.path.join(path, "vocab.txt"))


def load_checkpoint(path) -> Model:
    try:
        with open(os.path.join(path, "config.json")) as fh:
            config = ModelConfig.from_dict(json.load(fh))
        with open(os.path.join(path, "params.json")) as fh:
            index = json.load(fh)
        vocab = Vocabulary.load(os.path.join(path, "vocab.txt"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot load checkpoint {path}: {exc}") from exc
    raw = {}
    for name, entry in index.items():
        try:
            arr = read_feature_file(os.path.join(path, entry["file"]))
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"parameter {name}: {exc}") from exc
        if arr.shape != (entry["rows"], entry["cols"]):
            raise CheckpointError(f"parameter {name}: shape {arr.shape} != index {(entry['rows'], entry['cols'])}")
        raw[name] = arr
    expected = init_params(config, len(vocab))
    if set(expected) != set(raw):
        raise CheckpointError(
            f"checkpoint parameters do not match config: missing {sorted(set(expected) - set(raw))}, "
            f"extra {sorted(set(raw) - set(expected))}"
        )
    for name, arr in expected.items():
        if arr.shape != raw[name].shape:
            raise CheckpointError(f"parameter {name}: shape {raw[name].shape}, config implies {arr.shape}")
    return Model(config, vocab, {k: raw[k] for k in expected})
