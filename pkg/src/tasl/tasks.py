"""Seeded synthetic task streams.

rotated-gaussians
    2-D blobs, one per class, on a circle of ``radius`` whose centre sits
    ``offset`` to the right of the origin; task ``k`` of ``K`` rotates the whole
    problem about the origin by ``k * 180 / K`` degrees.  With a non-zero
    offset the tasks overlap partially but stay jointly solvable.
permuted-features
    One fixed blob problem in ``features`` dimensions; task 0 is the identity
    and every later task permutes the feature columns with its own seed.
slot-fill-toy
    Token sequences over a small vocabulary with per-token labels.  A trigger
    token marks the next token as a slot value; label 0 is "outside".  Labels
    1..3 are slots shared by every task, and task ``k`` adds two slots of its
    own (labels ``4 + 2k`` and ``5 + 2k``) with task-specific trigger tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .autodiff import Batch
from .errors import ConfigError

KINDS = ("rotated-gaussians", "permuted-features", "slot-fill-toy")

# slot-fill-toy vocabulary layout
_FILLERS = range(0, 10)
_SHARED_TRIGGERS = (10, 11, 12)
_TASK_TRIGGERS = range(13, 23)
_VALUES = range(23, 30)
SLOT_VOCAB = 30
SHARED_LABELS = 4


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kind: str
    train: Batch
    val: Batch
    test: Batch
    num_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.train.inputs.shape[1]


@dataclass(frozen=True)
class TaskStream:
    """``order`` indexes into ``tasks``; each TaskSpec keeps its original ``task_id``."""

    tasks: tuple[TaskSpec, ...]
    order: tuple[int, ...]
    seed: int
    kind: str

    def __len__(self) -> int:
        return len(self.tasks)

    def sequence(self) -> list[TaskSpec]:
        return [self.tasks[i] for i in self.order]

    def truncated(self, k: int) -> TaskStream:
        """Stream restricted to the first ``k`` tasks of the current order."""
        return TaskStream(tuple(self.sequence()[:k]), tuple(range(k)), self.seed, self.kind)

    @property
    def num_classes(self) -> int:
        return self.tasks[0].num_classes


def _split(inputs: np.ndarray, targets: np.ndarray, sizes: Sequence[int]) -> tuple[Batch, Batch, Batch]:
    a, b = sizes[0], sizes[0] + sizes[1]
    return (Batch(inputs[:a], targets[:a]), Batch(inputs[a:b], targets[a:b]),
            Batch(inputs[b:], targets[b:]))


def _balanced_labels(rng: np.random.Generator, n: int, classes: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def _blob_points(rng, labels, centers, noise):
    return centers[labels] + noise * rng.standard_normal((len(labels), centers.shape[1]))


def _rotated_gaussians(K, sizes, seed, classes=4, radius=1.5, noise=0.5, offset=3.0):
    angles = 2 * np.pi * np.arange(classes) / classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    centers[:, 0] += offset
    tasks = []
    for k in range(K):
        rng = np.random.default_rng([seed, 1, k])
        deg = k * 180.0 / K
        theta = math.radians(deg)
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        splits = []
        for n in sizes:
            y = _balanced_labels(rng, n, classes)
            splits.append((_blob_points(rng, y, centers, noise) @ rot.T, y))
        x = np.concatenate([s[0] for s in splits])
        y = np.concatenate([s[1] for s in splits])
        tasks.append(TaskSpec(k, "rotated-gaussians", *_split(x, y, sizes), classes,
                              {"rotation_deg": deg}))
    return tasks


def feature_permutation(seed: int, task_id: int, features: int) -> np.ndarray:
    if task_id == 0:
        return np.arange(features)
    return np.random.default_rng([seed, 2, task_id]).permutation(features)


def _permuted_features(K, sizes, seed, classes=4, features=8, noise=1.0):
    centers = 1.5 * np.random.default_rng([seed, 0]).standard_normal((classes, features))
    tasks = []
    for k in range(K):
        rng = np.random.default_rng([seed, 1, k])
        perm = feature_permutation(seed, k, features)
        n = sum(sizes)
        y = _balanced_labels(rng, n, classes)
        x = _blob_points(rng, y, centers, noise)[:, perm]
        tasks.append(TaskSpec(k, "permuted-features", *_split(x, y, sizes), classes,
                              {"permutation": perm.tolist()}))
    return tasks


def slot_triggers(seed: int, task_id: int) -> tuple[int, int]:
    pick = np.random.default_rng([seed, 3, task_id]).choice(list(_TASK_TRIGGERS), 2, replace=False)
    return int(pick[0]), int(pick[1])


def _slot_sequences(rng, n, seq_len, triggers: dict[int, int]):
    """``triggers`` maps trigger token -> slot label."""
    trig_tokens = np.array(list(triggers))
    tokens = rng.choice(list(_FILLERS), size=(n, seq_len))
    labels = np.zeros((n, seq_len), dtype=np.int64)
    for i in range(n):
        n_slots = rng.integers(1, seq_len // 4 + 1)
        starts = rng.choice(np.arange(0, seq_len - 1, 2), size=n_slots, replace=False)
        for s in starts:
            t = rng.choice(trig_tokens)
            tokens[i, s] = t
            tokens[i, s + 1] = rng.choice(list(_VALUES))
            labels[i, s + 1] = triggers[int(t)]
    return tokens, labels


def _slot_fill(K, sizes, seed, seq_len=8):
    tasks = []
    classes = SHARED_LABELS + 2 * K
    for k in range(K):
        rng = np.random.default_rng([seed, 1, k])
        own = slot_triggers(seed, k)
        triggers = {t: i + 1 for i, t in enumerate(_SHARED_TRIGGERS)}
        # a token shared with a slot of this task takes the task-specific label
        triggers.update({own[0]: SHARED_LABELS + 2 * k, own[1]: SHARED_LABELS + 2 * k + 1})
        x, y = _slot_sequences(rng, sum(sizes), seq_len, triggers)
        tasks.append(TaskSpec(k, "slot-fill-toy", *_split(x, y, sizes), classes,
                              {"task_triggers": list(own), "vocab": SLOT_VOCAB}))
    return tasks


def gen_stream(kind: str, K: int = 5, sizes: Sequence[int] = (200, 50, 100), seed: int = 0,
               **params) -> TaskStream:
    """Generate ``K`` tasks with train/val/test splits of the given sizes."""
    if K < 1:
        raise ConfigError("K must be >= 1")
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != 3 or min(sizes) < 1:
        raise ConfigError(f"sizes must be three positive ints, got {sizes}")
    if kind == "rotated-gaussians":
        tasks = _rotated_gaussians(K, sizes, seed, **params)
    elif kind == "permuted-features":
        tasks = _permuted_features(K, sizes, seed, **params)
    elif kind == "slot-fill-toy":
        if params.get("seq_len", 8) < 2:
            raise ConfigError("slot-fill-toy needs seq_len >= 2")
        tasks = _slot_fill(K, sizes, seed, **params)
    else:
        raise ConfigError(f"unknown task kind {kind!r}")
    return TaskStream(tuple(tasks), tuple(range(K)), seed, kind)


def check_permutation(order: Sequence[int], K: int) -> tuple[int, ...]:
    order = tuple(int(i) for i in order)
    if sorted(order) != list(range(K)):
        raise ConfigError(f"{list(order)} is not a permutation of 0..{K - 1}")
    return order


def reorder(stream: TaskStream, order: Sequence[int]) -> TaskStream:
    """Permute the visiting order; position ``i`` now visits old position ``order[i]``."""
    order = check_permutation(order, len(stream.order))
    return replace(stream, order=tuple(stream.order[i] for i in order))


def default_orders(K: int, count: int = 3) -> list[tuple[int, ...]]:
    """Identity, reversed, then seeded shuffles, de-duplicated."""
    out = [tuple(range(K))]
    candidates = [tuple(reversed(range(K)))]
    rng = np.random.default_rng(12345)
    for _ in range(50):
        candidates.append(tuple(int(i) for i in rng.permutation(K)))
    for c in candidates:
        if len(out) >= count:
            break
        if c not in out:
            out.append(c)
    return out
