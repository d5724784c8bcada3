"""Continual-learning loop, baselines, evaluation and CL metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .autodiff import ArchDescriptor, Batch, Model, init_model, predict
from .consolidation import (
    CumulativeImportance,
    ImportanceFlags,
    accumulate,
    ema_weights_update,
    init_cumulative,
    merge_cases,
    merge_coarse,
    merge_fine,
    threshold,
)
from .errors import ConfigError, TaslError
from .localization import SCORING_VARIANTS, UnitScoreMap, run_localization
from .partition import SCHEMES, SkillPartition, build_partition
from .tasks import KINDS, SLOT_VOCAB, TaskSpec, TaskStream, check_permutation, default_orders, \
    gen_stream, reorder

log = logging.getLogger(__name__)

METHODS = ("tasl", "finetune", "replay", "weight-ensemble", "ema")
ARCHS = ("mlp", "tiny-transformer")


@dataclass(frozen=True)
class RunConfig:
    method: str = "tasl"
    # model
    arch: str = "mlp"
    hidden: tuple[int, ...] = (32, 32, 32)
    d_model: int = 16
    heads: int = 2
    ff: int = 32
    blocks: int = 1
    partition_scheme: str = "per-tensor"
    # stream
    stream: str = "rotated-gaussians"
    num_tasks: int = 5
    train_size: int = 200
    val_size: int = 50
    test_size: int = 100
    num_classes: int = 4
    blob_radius: float = 1.5
    blob_noise: float = 0.5
    blob_offset: float = 3.0
    # training
    steps: int = 300
    lr: float = 0.1
    batch_size: int = 32
    # importance + merging
    alpha1: float = 0.85
    alpha2: float = 0.85
    beta: float = 0.7
    gamma: float = 0.7
    quantile: float = 0.2
    scoring_variant: str = "iu"
    # baselines
    lam: float = 0.5
    ema_decay: float = 0.99
    memory_per_task: int = 20
    # grid
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    orders: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        choices = {"method": METHODS, "arch": ARCHS, "stream": KINDS,
                   "partition_scheme": SCHEMES, "scoring_variant": SCORING_VARIANTS}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name}={getattr(self, name)!r} not in {allowed}")
        for name in ("alpha1", "alpha2", "beta", "gamma", "lam", "ema_decay"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.quantile <= 1.0:
            raise ConfigError("quantile must lie in (0, 1]")
        for name in ("num_tasks", "train_size", "val_size", "test_size", "steps", "batch_size",
                     "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.blob_radius < 0 or self.blob_noise < 0:
            raise ConfigError("blob_radius and blob_noise must be >= 0")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError("lr must be finite and >= 0")
        if self.memory_per_task < 0:
            raise ConfigError("memory_per_task must be >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for order in self.orders:
            check_permutation(order, self.num_tasks)
        if self.arch == "tiny-transformer" and self.stream != "slot-fill-toy":
            raise ConfigError("tiny-transformer runs need the slot-fill-toy stream")
        if self.arch == "mlp" and self.stream == "slot-fill-toy":
            raise ConfigError("slot-fill-toy needs arch = tiny-transformer")

    def resolved_orders(self) -> tuple[tuple[int, ...], ...]:
        return self.orders or tuple(default_orders(self.num_tasks))

    def make_stream(self, seed: int) -> TaskStream:
        sizes = (self.train_size, self.val_size, self.test_size)
        if self.stream == "slot-fill-toy":
            return gen_stream(self.stream, self.num_tasks, sizes, seed)
        if self.stream == "rotated-gaussians":
            return gen_stream(self.stream, self.num_tasks, sizes, seed, classes=self.num_classes,
                              radius=self.blob_radius, noise=self.blob_noise, offset=self.blob_offset)
        return gen_stream(self.stream, self.num_tasks, sizes, seed, classes=self.num_classes)

    def make_arch(self, stream: TaskStream, seed: int) -> ArchDescriptor:
        if self.arch == "mlp":
            return ArchDescriptor.mlp((stream.tasks[0].input_dim, *self.hidden, stream.num_classes), seed)
        return ArchDescriptor.transformer(self.d_model, self.heads, self.ff, self.blocks,
                                          stream.num_classes, vocab=SLOT_VOCAB, seed=seed)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def evaluate(model: Model, task: TaskSpec) -> float:
    """Test accuracy; token tasks count a sequence only if every token is right."""
    preds = predict(model, task.test)
    correct = preds == task.test.targets
    if correct.ndim == 2:
        correct = correct.all(axis=1)
    return float(correct.mean())


@dataclass
class CLReport:
    avg: float
    fwt: float | None = None
    bwt: float | None = None

    def as_dict(self) -> dict[str, float | None]:
        return {"avg": self.avg, "fwt": self.fwt, "bwt": self.bwt}


def cl_metrics(matrix) -> CLReport:
    """Avg / FWT / BWT from ``a[j][i]``, accuracy on task i after training through task j."""
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ConfigError(f"accuracy matrix must be square and non-empty, got shape {a.shape}")
    K = a.shape[0]
    avg = float(a[K - 1].mean())
    if K == 1:
        return CLReport(avg)
    fwt = float(np.mean([a[i - 1, i] for i in range(1, K)]))
    bwt = float(np.mean([a[K - 1, i] - a[i, i] for i in range(K - 1)]))
    return CLReport(avg, fwt, bwt)


@dataclass
class Aggregate:
    mean: dict[str, float]
    stderr: dict[str, float]
    n: int


def aggregate(reports: Sequence[CLReport]) -> Aggregate:
    """Per-metric mean and standard error (sample std / sqrt(n)); absent metrics skipped."""
    if not reports:
        raise ConfigError("nothing to aggregate")
    mean, stderr = {}, {}
    for key in ("avg", "fwt", "bwt"):
        vals = np.array([r.as_dict()[key] for r in reports if r.as_dict()[key] is not None])
        if len(vals) == 0:
            continue
        mean[key] = float(vals.mean())
        stderr[key] = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return Aggregate(mean, stderr, len(reports))


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------


@dataclass
class MergeRecord:
    position: int
    prev_flags: ImportanceFlags
    cur_flags: ImportanceFlags
    cases: np.ndarray


@dataclass
class RunResult:
    config: RunConfig
    seed: int
    order: tuple[int, ...]
    task_ids: tuple[int, ...]
    matrix: np.ndarray
    report: CLReport
    final_model: Model
    partition: SkillPartition
    score_maps: list[UnitScoreMap] = field(default_factory=list)
    merges: list[MergeRecord] = field(default_factory=list)

    @property
    def trajectory(self) -> np.ndarray:
        """Accuracy on the first task of the order after each task."""
        return self.matrix[:, 0].copy()


def _task_rng(seed: int, position: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, position, purpose])


def run_stream(config: RunConfig, stream: TaskStream, seed: int) -> RunResult:
    """Train sequentially through ``stream`` in its order with ``config.method``."""
    seq = stream.sequence()
    K = len(seq)
    arch = config.make_arch(stream, seed)
    model = init_model(arch)
    partition = build_partition(model, config.partition_scheme)
    method = config.method

    matrix = np.zeros((K, K))
    score_maps: list[UnitScoreMap] = []
    merges: list[MergeRecord] = []
    merged: Model | None = None  # f-hat for tasl / weight-ensemble
    cumulative: CumulativeImportance | None = None
    memories: list[Batch] = []
    running: Model | None = model.copy() if method == "ema" else None

    def ema_hook(current: Model) -> None:
        nonlocal running
        running = ema_weights_update(running, current, config.ema_decay)

    for pos, task in enumerate(seq):
        data = task.train
        if method == "replay" and memories:
            data = Batch.concat([data, *memories])
        try:
            trained, cur_map = run_localization(
                model, data, config.steps, config.lr, config.alpha1, config.alpha2, partition,
                batch_size=config.batch_size, rng=_task_rng(seed, pos, 0),
                variant=config.scoring_variant, task_id=task.task_id,
                on_step=ema_hook if method == "ema" else None)
        except TaslError as exc:
            raise TaslError(f"task at position {pos} (id {task.task_id}) failed: {exc}") from exc
        score_maps.append(cur_map)

        if method == "tasl":
            if pos == 0:
                merged, cumulative = trained, init_cumulative(cur_map)
            else:
                prev_flags = threshold(cumulative, config.quantile)
                cur_flags = threshold(cur_map, config.quantile)
                merged = merge_fine(merged, trained, partition, prev_flags, cur_flags, config.gamma)
                merges.append(MergeRecord(pos, prev_flags, cur_flags, merge_cases(prev_flags, cur_flags)))
                cumulative = accumulate(cumulative, cur_map, config.beta)
            model, evaluated = merged, merged
        elif method == "weight-ensemble":
            merged = trained if pos == 0 else merge_coarse(merged, trained, config.lam)
            model, evaluated = merged, merged
        elif method == "ema":
            model, evaluated = trained, running
        else:
            model, evaluated = trained, trained
            if method == "replay" and config.memory_per_task > 0:
                rng = _task_rng(seed, pos, 1)
                n = len(task.train)
                keep = rng.choice(n, size=min(config.memory_per_task, n), replace=False)
                memories.append(task.train.take(np.sort(keep)))

        matrix[pos] = [evaluate(evaluated, t) for t in seq]
        log.debug("%s seed=%d pos=%d row=%s", method, seed, pos, np.round(matrix[pos], 3))

    return RunResult(config, seed, tuple(stream.order), tuple(t.task_id for t in seq), matrix,
                     cl_metrics(matrix), evaluated.copy(), partition, score_maps, merges)


def run_tasl(config: RunConfig, order: Sequence[int] | None = None, seed: int | None = None) -> RunResult:
    if config.method != "tasl":
        raise ConfigError("run_tasl needs method = tasl")
    return run_one(config, order, seed)


def run_baseline(config: RunConfig, order: Sequence[int] | None = None, seed: int | None = None) -> RunResult:
    if config.method == "tasl":
        raise ConfigError("run_baseline needs a baseline method")
    return run_one(config, order, seed)


def run_one(config: RunConfig, order: Sequence[int] | None = None, seed: int | None = None) -> RunResult:
    seed = config.seeds[0] if seed is None else seed
    order = config.resolved_orders()[0] if order is None else order
    stream = reorder(config.make_stream(seed), order)
    return run_stream(config, stream, seed)


def run_grid(config: RunConfig) -> list[RunResult]:
    """Every (order, seed) pair, orders outermost."""
    return [run_one(config, order, seed) for order in config.resolved_orders() for seed in config.seeds]


def with_method(config: RunConfig, method: str, **overrides) -> RunConfig:
    return replace(config, method=method, **overrides)


def config_fields() -> list[str]:
    return [f.name for f in fields(RunConfig)]
