"""Cross-task importance accumulation and importance-guided model merging."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Model
from .errors import ArchMismatchError, ConfigError
from .localization import UnitScoreMap
from .partition import SkillPartition

# Merge cases, indexed by (prev important, cur important).
BLEND, KEEP_PREV, TAKE_CUR, AVERAGE = 1, 2, 3, 4


@dataclass
class CumulativeImportance:
    scores: np.ndarray
    upto_task: int


@dataclass(frozen=True)
class MergeConfig:
    gamma: float = 0.7
    beta: float = 0.7
    quantile_fraction: float = 0.2
    lam: float = 0.5

    def __post_init__(self):
        for name in ("gamma", "beta", "lam"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if not 0.0 < self.quantile_fraction <= 1.0:
            raise ConfigError(f"quantile_fraction={self.quantile_fraction} outside (0, 1]")


@dataclass
class ImportanceFlags:
    flags: np.ndarray

    def __len__(self) -> int:
        return len(self.flags)

    @property
    def count(self) -> int:
        return int(self.flags.sum())


def _scores_of(obj) -> np.ndarray:
    return np.asarray(getattr(obj, "scores", obj), dtype=np.float64)


def normalize(score_map: UnitScoreMap | np.ndarray) -> UnitScoreMap:
    """Min-max to [0, 1]; an all-equal map becomes all 0.5."""
    x = _scores_of(score_map)
    if len(x) < 1:
        raise ConfigError("cannot normalise an empty score map")
    lo, hi = x.min(), x.max()
    out = np.full_like(x, 0.5) if hi == lo else (x - lo) / (hi - lo)
    return UnitScoreMap(out, getattr(score_map, "task_id", None), normalized=True)


def init_cumulative(first: UnitScoreMap) -> CumulativeImportance:
    # Stored normalised; every consumer normalises first, and min-max is idempotent.
    return CumulativeImportance(normalize(first).scores, upto_task=1)


def accumulate(prev: CumulativeImportance, current: UnitScoreMap, beta: float) -> CumulativeImportance:
    """``beta * Norm(prev) + (1 - beta) * Norm(current)``; the result is not re-normalised."""
    if len(prev.scores) != len(current.scores):
        raise ArchMismatchError(f"score maps differ in length: {len(prev.scores)} vs {len(current.scores)}")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta={beta} outside [0, 1]")
    out = beta * normalize(prev.scores).scores + (1.0 - beta) * normalize(current).scores
    return CumulativeImportance(out, prev.upto_task + 1)


def important_count(n: int, fraction: float) -> int:
    # round() guards against 0.1 * 30 = 3.0000000000000004 style ceilings
    return min(n, max(1, math.ceil(round(fraction * n, 9))))


def threshold(score_map, quantile_fraction: float = 0.2) -> ImportanceFlags:
    """Flag the ``ceil(fraction * n)`` highest scores; ties go to the lower unit id."""
    if not 0.0 < quantile_fraction <= 1.0:
        raise ConfigError(f"quantile fraction {quantile_fraction} outside (0, 1]")
    x = _scores_of(score_map)
    if len(x) < 1:
        raise ConfigError("cannot threshold an empty score map")
    m = important_count(len(x), quantile_fraction)
    order = np.lexsort((np.arange(len(x)), -x))
    flags = np.zeros(len(x), dtype=bool)
    flags[order[:m]] = True
    return ImportanceFlags(flags)


def merge_cases(prev_flags: ImportanceFlags, cur_flags: ImportanceFlags) -> np.ndarray:
    p, c = np.asarray(prev_flags.flags), np.asarray(cur_flags.flags)
    if p.shape != c.shape:
        raise ArchMismatchError("flag vectors differ in length")
    return np.where(p, np.where(c, BLEND, KEEP_PREV), np.where(c, TAKE_CUR, AVERAGE))


def _check_pair(prev: Model, cur: Model) -> None:
    if prev.layout() != cur.layout():
        raise ArchMismatchError("models have different tensor layouts")


def merge_fine(prev: Model, cur: Model, partition: SkillPartition, prev_flags: ImportanceFlags,
               cur_flags: ImportanceFlags, gamma: float) -> Model:
    """Per-unit merge of the accumulated model ``prev`` with the new task model ``cur``.

    important in both     -> gamma * prev + (1 - gamma) * cur
    important in prev only -> prev unchanged
    important in cur only  -> cur unchanged
    important in neither   -> (prev + cur) / 2
    """
    _check_pair(prev, cur)
    partition.check_model(prev)
    if len(prev_flags) != len(partition) or len(cur_flags) != len(partition):
        raise ArchMismatchError("flag vectors do not match the partition")
    cases = merge_cases(prev_flags, cur_flags)
    values: dict[str, np.ndarray] = {}
    for unit, case in zip(partition.units, cases):
        for name in unit.member_tensors:
            p, c = prev[name].values, cur[name].values
            if case == BLEND:
                values[name] = gamma * p + (1.0 - gamma) * c
            elif case == KEEP_PREV:
                values[name] = p.copy()
            elif case == TAKE_CUR:
                values[name] = c.copy()
            else:
                values[name] = 0.5 * (p + c)
    return prev.with_values(values)


def merge_coarse(prev: Model, cur: Model, lam: float) -> Model:
    """``lam * prev + (1 - lam) * cur`` over every parameter."""
    _check_pair(prev, cur)
    return prev.with_values({n: lam * p.values + (1.0 - lam) * cur[n].values
                             for n, p in prev.params.items()})


def ema_weights_update(running: Model, cur: Model, decay: float) -> Model:
    """``decay * running + (1 - decay) * cur``."""
    return merge_coarse(running, cur, decay)
