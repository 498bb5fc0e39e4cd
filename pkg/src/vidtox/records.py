"""Record and label types shared by the data toolkit and the model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

TASKS = ("toxicity", "severity", "sentiment")
NUM_CLASSES = {"toxicity": 2, "severity": 3, "sentiment": 3}
CLASS_NAMES = {
    "toxicity": ("non-toxic", "toxic"),
    "severity": ("0", "1", "2"),
    "sentiment": ("positive", "neutral", "negative"),
}


@dataclass
class AnnotationTriple:
    task: str
    labels: tuple[int, int, int]
    adjudicated: int
    escalated: bool

    def to_json(self) -> dict:
        return {"labels": list(self.labels), "adjudicated": self.adjudicated, "escalated": self.escalated}

    @classmethod
    def from_json(cls, task: str, obj: dict) -> "AnnotationTriple":
        labels = tuple(int(x) for x in obj["labels"])
        if len(labels) != 3:
            raise ValueError(f"annotation for {task} needs 3 labels, got {len(labels)}")
        return cls(task, labels, int(obj["adjudicated"]), bool(obj["escalated"]))


@dataclass
class UtteranceRecord:
    id: str
    transcript: str
    labels: dict[str, int]
    video: Optional[np.ndarray] = None
    audio: Optional[np.ndarray] = None
    duration_seconds: float = 0.0
    hindi_word_count: int = 0
    total_word_count: int = 0
    annotations: Optional[dict[str, AnnotationTriple]] = None
    cues: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.hindi_word_count > self.total_word_count:
            raise ValueError(f"record {self.id}: more Hindi words than words")
        for task, y in self.labels.items():
            if task not in NUM_CLASSES:
                raise ValueError(f"record {self.id}: unknown task {task!r}")
            if not 0 <= int(y) < NUM_CLASSES[task]:
                raise ValueError(f"record {self.id}: {task} label {y} out of range")

    def features(self, modality: str) -> Optional[np.ndarray]:
        return self.video if modality == "video" else self.audio if modality == "audio" else None
