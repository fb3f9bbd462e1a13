"""Website fingerprinting from packet lengths, directions and inter-arrival times alone."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..simnet.trace import TrafficTrace

SEQUENCE_LENGTH = 100
SUMMARY = ("up_cells", "down_cells", "up_bytes", "down_bytes")
GAP_STATS = ("mean", "var", "q1", "median", "q3")
DIMENSION = len(SUMMARY) + SEQUENCE_LENGTH + 2 * len(GAP_STATS)


def feature_names() -> list[str]:
    names = list(SUMMARY) + [f"seq{i}" for i in range(SEQUENCE_LENGTH)]
    for d in ("up", "down"):
        names += [f"{d}_gap_{s}" for s in GAP_STATS]
    return names


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) != DIMENSION:
            raise ValueError(f"feature vector must have {DIMENSION} dimensions")

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def named(self) -> dict[str, float]:
        return dict(zip(feature_names(), self.values))


def _gap_stats(times_us: list[int]) -> list[float]:
    if len(times_us) < 2:
        return [0.0] * len(GAP_STATS)
    gaps = np.diff(np.asarray(times_us, dtype=float)) / 1e6
    q1, med, q3 = np.percentile(gaps, [25, 50, 75])
    return [float(gaps.mean()), float(gaps.var()), float(q1), float(med), float(q3)]


def extract_features(trace: TrafficTrace) -> FeatureVector:
    """Pure function of the trace; absolute time never enters, only gaps within a direction."""
    up_t, down_t = [], []
    up_b = down_b = 0
    seq = [0.0] * SEQUENCE_LENGTH
    for i, (t, d, n) in enumerate(trace):
        if i < SEQUENCE_LENGTH:
            seq[i] = float(d * n)
        if d > 0:
            up_t.append(t)
            up_b += n
        else:
            down_t.append(t)
            down_b += n
    values = [float(len(up_t)), float(len(down_t)), float(up_b), float(down_b)]
    values += seq + _gap_stats(up_t) + _gap_stats(down_t)
    return FeatureVector(tuple(values))


class WFModel:
    """k-NN under L1 distance on z-normalized features.

    Neighbours are ordered by (distance, label, insertion index) and votes tie
    towards the smallest label, so classification is fully deterministic.
    """

    def __init__(self, k: int = 1):
        if k < 1 or k % 2 == 0:
            raise ValueError("k must be a positive odd number")
        self.k = k
        self.labels: list[str] = []
        self.X = np.zeros((0, DIMENSION))
        self.mean = np.zeros(DIMENSION)
        self.scale = np.ones(DIMENSION)

    def fit(self, vectors: Sequence[FeatureVector], labels: Sequence[str]) -> WFModel:
        if len(vectors) != len(labels):
            raise ValueError("one label per training vector")
        if not vectors:
            raise ValueError("empty training set")
        if self.k > len(vectors):
            raise ValueError(f"k={self.k} exceeds training size {len(vectors)}")
        raw = np.vstack([v.as_array() for v in vectors])
        self.mean = raw.mean(axis=0)
        std = raw.std(axis=0)
        self.scale = np.where(std > 0, std, 1.0)
        self.X = (raw - self.mean) / self.scale
        self.labels = [str(label) for label in labels]
        return self

    def distances(self, vector: FeatureVector) -> np.ndarray:
        z = (vector.as_array() - self.mean) / self.scale
        return np.abs(self.X - z).sum(axis=1)

    def neighbours(self, vector: FeatureVector) -> list[tuple[float, str, int]]:
        dist = self.distances(vector)
        order = sorted(range(len(dist)), key=lambda i: (dist[i], self.labels[i], i))
        return [(float(dist[i]), self.labels[i], i) for i in order[: self.k]]

    def classify(self, vector: FeatureVector) -> str:
        votes = Counter(label for _, label, _ in self.neighbours(vector))
        best = max(votes.values())
        return min(label for label, n in votes.items() if n == best)


def wf_train(examples: Iterable[tuple[TrafficTrace, str]], k: int = 1) -> WFModel:
    examples = list(examples)
    return WFModel(k).fit([extract_features(t) for t, _ in examples], [label for _, label in examples])


def wf_classify(model: WFModel, trace: TrafficTrace) -> str:
    return model.classify(extract_features(trace))
