"""Attack reports with deterministic JSON serialization."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field


def _clean(value):
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite value in report: {value}")
        return round(value, 9)
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


@dataclass
class AttackReport:
    kind: str
    seed: int
    params: dict = field(default_factory=dict)
    scores: dict = field(default_factory=dict)
    ranking: list = field(default_factory=list)
    accuracy: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    verdict: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return _clean(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
