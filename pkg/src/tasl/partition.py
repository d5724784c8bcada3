"""Grouping of model tensors into skill units."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Model
from .errors import ArchMismatchError, ConfigError

SCHEMES = ("per-tensor", "per-layer-group")

_BLOCK_GROUPS = {"attn": "attention", "mlp": "mlp", "norm1": "norms", "norm2": "norms"}


@dataclass(frozen=True)
class SkillUnit:
    id: int
    label: str
    member_tensors: tuple[str, ...]
    param_count: int


@dataclass(frozen=True)
class SkillPartition:
    units: tuple[SkillUnit, ...]
    scheme: str
    # (tensor name, shape) in model declaration order
    layout: tuple[tuple[str, tuple[int, ...]], ...]

    def __len__(self) -> int:
        return len(self.units)

    @property
    def labels(self) -> list[str]:
        return [u.label for u in self.units]

    @property
    def total_params(self) -> int:
        return sum(u.param_count for u in self.units)

    def flat_indices(self) -> list[np.ndarray]:
        """Per-unit indices into the model's flattened parameter vector."""
        offsets, pos = {}, 0
        for name, shape in self.layout:
            size = math.prod(shape)
            offsets[name] = (pos, pos + size)
            pos += size
        return [np.concatenate([np.arange(*offsets[t]) for t in u.member_tensors])
                for u in self.units]

    def check_model(self, model: Model) -> None:
        if model.layout() != self.layout:
            raise ArchMismatchError("model tensor layout does not match the partition")


def _group_key(name: str, scheme: str) -> str:
    if scheme == "per-tensor":
        return name
    head, _, rest = name.partition(".")
    if head.startswith("block") and rest:
        return f"{head}.{_BLOCK_GROUPS.get(rest.split('.')[0], rest.split('.')[0])}"
    return head


def build_partition(model: Model, scheme: str = "per-tensor") -> SkillPartition:
    """One unit per tensor, or one per (layer, functional group).

    Unit ids follow first appearance in tensor declaration order.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown partition scheme {scheme!r}")
    if not model.params:
        raise ConfigError("cannot partition an empty model")
    groups: dict[str, list[str]] = {}
    for name in model.params:
        if not name:
            raise ConfigError("unnamed tensor")
        groups.setdefault(_group_key(name, scheme), []).append(name)
    units = tuple(
        SkillUnit(i, label, tuple(members), sum(model[m].size for m in members))
        for i, (label, members) in enumerate(groups.items())
    )
    return SkillPartition(units, scheme, model.layout())


class UnitSlice(NamedTuple):
    values: np.ndarray
    grads: np.ndarray


def unit_slice(partition: SkillPartition, unit_id: int, model: Model) -> UnitSlice:
    """Read-only copies of one unit's values and grads, member tensors in order."""
    if not 0 <= unit_id < len(partition):
        raise IndexError(f"unit id {unit_id} out of range [0, {len(partition)})")
    partition.check_model(model)
    unit = partition.units[unit_id]
    values = np.concatenate([model[t].values.ravel() for t in unit.member_tensors])
    grads = np.concatenate([model[t].grad.ravel() for t in unit.member_tensors])
    values.flags.writeable = False
    grads.flags.writeable = False
    return UnitSlice(values, grads)
