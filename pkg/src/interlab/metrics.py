"""Append-only metrics stream (CSV) and the stable metric-name registry."""

from __future__ import annotations

import csv
import hashlib
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

FIELDS = ("run_id", "step", "metric", "language", "value", "timestamp")
UNDEFINED = "undefined"

# every metric any module emits; report() and the README rely on these names
METRIC_NAMES = {
    "train/loss": "mean MLM loss over the steps since the previous record",
    "train/loss_lang": "mean MLM loss of one language's sampled batches",
    "train/lr": "learning rate at the record step",
    "train/skipped_steps": "cumulative count of steps skipped for non-finite gradients",
    "val/perplexity": "validation perplexity (fixed masking seed) per language",
    "test/perplexity": "test-split perplexity per language",
    "meta/train_loss": "phase-one training loss of the sampled language",
    "meta/val_loss": "validation loss at the lookahead weights, per language",
    "meta/direct_norm": "norm of the direct part of the adapter hypergradient",
    "meta/second_order_norm": "norm of the finite-difference second-order part",
    "meta/epsilon": "finite-difference step used for the second-order part",
    "probe/grad_cosine": "gradient cosine similarity; language is 'a|b'",
    "prune/expected_l0": "expected number of open gates after mask learning",
    "prune/mask_similarity": "cosine of mask parameters; language is 'a|b|layer|block'",
    "eval/f1_within": "within-language tagging micro-F1",
    "eval/f1_zero_shot": "zero-shot tagging micro-F1; language is 'source>target'",
}


@dataclass(frozen=True)
class MetricsRecord:
    run_id: str
    step: int
    metric: str
    language: str
    value: float | str
    timestamp: float = 0.0

    def row(self) -> list[str]:
        return [self.run_id, str(self.step), self.metric, self.language, format_value(self.value),
                f"{self.timestamp:.3f}"]


def format_value(value) -> str:
    if isinstance(value, str):
        return value
    value = float(value)
    if not math.isfinite(value):
        return UNDEFINED
    return repr(value)


def record(run_id: str, step: int, metric: str, value, language: str = "") -> MetricsRecord:
    if metric not in METRIC_NAMES:
        raise KeyError(f"undocumented metric name {metric!r}")
    return MetricsRecord(run_id, int(step), metric, language, value, time.time())


class MetricsWriter:
    """Appends records to ``path``; writes the header when the file is new."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(FIELDS)

    def write(self, records: Iterable[MetricsRecord]) -> None:
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for r in records:
                w.writerow(r.row())

    def __call__(self, records):
        self.write(records)


def read_metrics(path) -> Iterator[dict]:
    with open(path, newline="") as fh:
        yield from csv.DictReader(fh)


def metrics_digest(path) -> str:
    """SHA-256 over every column except the wall-clock timestamp."""
    h = hashlib.sha256()
    for row in read_metrics(path):
        h.update("\t".join(row[k] for k in FIELDS[:-1]).encode())
        h.update(b"\n")
    return h.hexdigest()
