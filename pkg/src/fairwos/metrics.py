"""Accuracy, statistical parity and equal opportunity from explicit tallies.

This is the only module that reads a sensitive attribute.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

UNDEFINED = None


@dataclass(frozen=True)
class GroupTally:
    count: int
    pred_pos: int
    label_pos: int
    true_pos: int
    correct: int


@dataclass(frozen=True)
class FairnessReport:
    accuracy: float
    delta_sp: float | None
    delta_eo: float | None
    groups: dict[int, GroupTally]
    total: int
    correct: int
    split: str = "test"

    @property
    def error_rate(self) -> float:
        return (self.total - self.correct) / self.total

    def to_dict(self) -> dict:
        d = asdict(self)
        d["groups"] = {str(k): asdict(v) for k, v in self.groups.items()}
        return d


def _rate(num: int, den: int) -> float | None:
    return num / den if den else None


def fairness_metrics(y_hat, y, s, eval_mask=None, split: str = "test") -> FairnessReport:
    """Empirical accuracy, |P(ŷ=1|s=0) - P(ŷ=1|s=1)| and the same restricted to y=1.

    A metric whose required group is absent from the mask is ``None`` rather than 0.
    """
    y_hat, y, s = (np.asarray(a, dtype=np.int64) for a in (y_hat, y, s))
    mask = np.ones(len(y), dtype=bool) if eval_mask is None else np.asarray(eval_mask)
    if mask.dtype != bool:
        m = np.zeros(len(y), dtype=bool)
        m[mask] = True
        mask = m
    mask = mask & (y >= 0) & (s >= 0)
    if not mask.any():
        raise ValueError("evaluation mask selects no labeled nodes")
    yh, yy, ss = y_hat[mask], y[mask], s[mask]
    groups = {}
    for g in (0, 1):
        sel = ss == g
        groups[g] = GroupTally(
            count=int(sel.sum()),
            pred_pos=int((yh[sel] == 1).sum()),
            label_pos=int((yy[sel] == 1).sum()),
            true_pos=int(((yh[sel] == 1) & (yy[sel] == 1)).sum()),
            correct=int((yh[sel] == yy[sel]).sum()),
        )
    total = int(mask.sum())
    correct = groups[0].correct + groups[1].correct
    return FairnessReport(
        accuracy=correct / total,
        delta_sp=_delta(groups, "pred_pos", "count"),
        delta_eo=_delta(groups, "true_pos", "label_pos"),
        groups=groups,
        total=total,
        correct=correct,
        split=split,
    )


def _delta(groups: dict[int, GroupTally], num: str, den: str) -> float | None:
    r0 = _rate(getattr(groups[0], num), getattr(groups[0], den))
    r1 = _rate(getattr(groups[1], num), getattr(groups[1], den))
    if r0 is None or r1 is None:
        return UNDEFINED
    return abs(r0 - r1)
