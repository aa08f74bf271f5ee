"""Per-epoch search records."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import SequencingError


@dataclass
class EpochRecord:
    epoch: int
    tau: float
    train_loss: float
    val_loss: float
    expected_latency_ms: float
    derived_latency_ms: float
    depths: List[int]
    argmax: List[int]
    elastic: bool
    infeasible: bool
    alpha: Optional[np.ndarray] = field(default=None, repr=False)


class MetricsLog:
    """Ordered epoch records; epochs must arrive contiguously from zero."""

    def __init__(self, warmup_epochs: int = 0):
        self.records: List[EpochRecord] = []
        self.warmup_epochs = warmup_epochs

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def append(self, rec: EpochRecord):
        if rec.epoch != len(self.records):
            raise SequencingError(f"expected epoch {len(self.records)}, got {rec.epoch}")
        self.records.append(rec)

    @property
    def post_warmup(self) -> List[EpochRecord]:
        return [r for r in self.records if r.epoch >= self.warmup_epochs]

    def alpha_history(self) -> List[np.ndarray]:
        return [r.alpha for r in self.records]

    def columns(self) -> List[str]:
        if not self.records:
            return base_columns(0, 0)
        r = self.records[0]
        return base_columns(len(r.depths), len(r.argmax))


def base_columns(stages: int, layers: int) -> List[str]:
    return (["epoch", "tau", "train_loss", "val_loss", "expected_latency_ms",
             "derived_latency_ms"]
            + [f"depth_s{i + 1}" for i in range(stages)]
            + [f"argmax_l{i + 1}" for i in range(layers)]
            + ["elastic", "infeasible"])
