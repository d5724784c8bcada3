"""Importance tracking during fine-tuning.

Per parameter the tracker keeps a smoothed sensitivity and an uncertainty
term, both exponential moving averages starting from zero:

    I_t    = |w * g|
    Ibar_t = a1 * Ibar_{t-1} + (1 - a1) * I_t
    Ubar_t = a2 * Ubar_{t-1} + (1 - a2) * |I_t - Ibar_t|
    s      = Ibar_t * Ubar_t

and a skill unit's score is the mean of ``s`` over its parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Batch, Model, backward, forward_loss, sgd_step
from .errors import ConfigError, NonFiniteError, TaslError
from .partition import SkillPartition

SCORING_VARIANTS = ("iu", "sensitivity-only", "grad-only")


def sensitivity(w, g):
    """First-order loss change from zeroing a weight: ``|w * g|``."""
    return np.abs(np.multiply(w, g))


@dataclass
class ImportanceState:
    ibar: np.ndarray
    ubar: np.ndarray
    alpha1: float = 0.85
    alpha2: float = 0.85
    step: int = 0
    last_abs_grad: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def zeros(cls, num_params: int, alpha1: float = 0.85, alpha2: float = 0.85) -> ImportanceState:
        for a in (alpha1, alpha2):
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"smoothing factor {a} outside [0, 1]")
        return cls(np.zeros(num_params), np.zeros(num_params), alpha1, alpha2)

    def observe(self, sens: np.ndarray, abs_grad: np.ndarray | None = None) -> ImportanceState:
        """Fold one step of per-parameter sensitivities into the averages."""
        if not np.all(np.isfinite(sens)):
            raise NonFiniteError("non-finite sensitivity")
        a1, a2 = self.alpha1, self.alpha2
        self.ibar = a1 * self.ibar + (1.0 - a1) * sens
        self.ubar = a2 * self.ubar + (1.0 - a2) * np.abs(sens - self.ibar)
        self.last_abs_grad = abs_grad
        self.step += 1
        return self


def update(state: ImportanceState, model: Model) -> ImportanceState:
    """Update from the model's current weights and freshly populated grads."""
    w = model.flat_values()
    g = model.flat_grads()
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite gradient")
    if w.shape != state.ibar.shape:
        raise ConfigError("importance state is not aligned with the model parameters")
    return state.observe(sensitivity(w, g), np.abs(g))


def param_scores(state: ImportanceState, variant: str = "iu") -> np.ndarray:
    if state.step < 1:
        raise TaslError("no importance observations yet (step 0)")
    if variant == "iu":
        return state.ibar * state.ubar
    if variant == "sensitivity-only":
        return state.ibar
    if variant == "grad-only":
        return state.last_abs_grad
    raise ConfigError(f"unknown scoring variant {variant!r}")


@dataclass
class UnitScoreMap:
    scores: np.ndarray
    task_id: int | None = None
    normalized: bool = False

    def __len__(self) -> int:
        return len(self.scores)


def unit_scores(state: ImportanceState, partition: SkillPartition, variant: str = "iu",
                task_id: int | None = None) -> UnitScoreMap:
    s = param_scores(state, variant)
    if len(s) != partition.total_params:
        raise ConfigError("importance state size does not match the partition")
    scores = np.array([s[idx].mean() for idx in partition.flat_indices()])
    return UnitScoreMap(scores, task_id)


def run_localization(
    model: Model,
    data: Batch,
    steps: int,
    lr: float,
    alpha1: float,
    alpha2: float,
    partition: SkillPartition,
    *,
    batch_size: int = 32,
    rng: np.random.Generator | int = 0,
    variant: str = "iu",
    task_id: int | None = None,
    on_step: Callable[[Model], None] | None = None,
) -> tuple[Model, UnitScoreMap]:
    """Fine-tune a copy of ``model`` on ``data`` while scoring skill units.

    Each iteration samples a minibatch with replacement, computes gradients at
    the current weights, updates the importance averages and only then takes
    the SGD step.  ``on_step`` sees the model after every step.
    """
    if steps < 1 or batch_size < 1:
        raise ConfigError("steps and batch_size must be >= 1")
    partition.check_model(model)
    rng = np.random.default_rng(rng)
    trained = model.copy()
    state = ImportanceState.zeros(trained.num_params, alpha1, alpha2)
    n = len(data)
    for t in range(steps):
        batch = data.take(rng.integers(0, n, size=batch_size))
        loss, _ = forward_loss(trained, batch)
        if not np.isfinite(loss):
            raise NonFiniteError(f"loss diverged at step {t}")
        backward(trained, batch)
        update(state, trained)
        sgd_step(trained, lr)
        if on_step is not None:
            on_step(trained)
    return trained, unit_scores(state, partition, variant, task_id)
