"""Checkpoints, config files, CSV exports and stream serialisation.

Checkpoint layout (all integers little-endian u32, floats little-endian f64)::

    b"TASLCKPT" | version | len(arch) | arch text (UTF-8 key=value lines)
    then per tensor: len(name) | name | ndim | dims... | values (row-major)
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ArchDescriptor, Batch, Model, ParamTensor, init_model
from .consolidation import ImportanceFlags, normalize, threshold
from .errors import ArchMismatchError, CheckpointError, ConfigError, DataFormatError
from .localization import UnitScoreMap
from .partition import SkillPartition
from .runner import RunConfig, RunResult
from .tasks import TaskSpec, TaskStream

MAGIC = b"TASLCKPT"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")
_MAX_DIM = 1 << 28


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _arch_to_text(arch: ArchDescriptor) -> str:
    lines = []
    for f in dataclasses.fields(arch):
        v = getattr(arch, f.name)
        lines.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


def _arch_from_text(text: str) -> ArchDescriptor:
    kw = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"bad arch line {line!r}")
        kw[key.strip()] = value.strip()
    try:
        return ArchDescriptor(
            kind=kw["kind"],
            layer_sizes=tuple(int(v) for v in kw.get("layer_sizes", "").split(",") if v),
            **{k: int(kw[k]) for k in ("d_model", "heads", "ff", "blocks", "classes", "vocab", "seed")},
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"bad arch block: {exc}") from exc


def checkpoint_bytes(model: Model) -> bytes:
    arch = _arch_to_text(model.arch).encode("utf-8")
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(arch)), arch]
    for p in model.params.values():
        name = p.name.encode("utf-8")
        parts += [_U32.pack(len(name)), name, _U32.pack(p.values.ndim)]
        parts += [_U32.pack(d) for d in p.shape]
        parts.append(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("corrupt checkpoint: truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def model_from_bytes(buf: bytes) -> Model:
    r = _Reader(buf)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        arch = _arch_from_text(r.take(r.u32()).decode("utf-8"))
        params = []
        while not r.done:
            name = r.take(r.u32()).decode("utf-8")
            ndim = r.u32()
            if ndim > 8:
                raise CheckpointError(f"corrupt checkpoint: ndim {ndim}")
            dims = [r.u32() for _ in range(ndim)]
            count = math.prod(dims)
            if count > _MAX_DIM:
                raise CheckpointError(f"corrupt checkpoint: tensor {name!r} too large {dims}")
            values = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
            params.append(ParamTensor(name, values))
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    model = Model(arch, params)
    expected = init_model(arch).layout()
    if model.layout() != expected:
        raise CheckpointError("corrupt checkpoint: tensors do not match the arch descriptor")
    return model


def load_checkpoint(path, expect: ArchDescriptor | None = None) -> Model:
    """Load a checkpoint; with ``expect``, refuse a different architecture."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    model = model_from_bytes(buf)
    if expect is not None:
        a, b = model.arch, expect
        if dataclasses.replace(a, seed=0) != dataclasses.replace(b, seed=0):
            raise ArchMismatchError(f"checkpoint holds a {a.kind} {a}, expected {b.kind} {b}")
    return model


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def _parse_value(field: dataclasses.Field, raw: str):
    raw = raw.strip()
    name = field.name
    try:
        if name == "hidden":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if name == "seeds":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if name == "orders":
            return tuple(tuple(int(v) for v in grp.split(",")) for grp in raw.split(";") if grp.strip())
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
        return raw.strip("\"'")
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def _format_value(v) -> str:
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(",".join(map(str, o)) for o in v)
        return ",".join(map(str, v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, **overrides) -> RunConfig:
    """Flat ``key = value`` lines (``#`` comments); unknown keys are rejected."""
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    kw = {}
    for key, raw in cp["run"].items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        kw[key] = _parse_value(fields[key], raw)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**kw)


def load_config(path, **overrides) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, **overrides)


def format_config(config: RunConfig) -> str:
    """Every field, resolved orders included, in file order."""
    config = dataclasses.replace(config, orders=config.resolved_orders())
    return "".join(f"{f.name} = {_format_value(getattr(config, f.name))}\n"
                   for f in dataclasses.fields(RunConfig))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_partition_csv(partition: SkillPartition, path) -> None:
    write_csv(path, ["unit_id", "label", "param_count"],
              [(u.id, u.label, u.param_count) for u in partition.units])


def write_importance_csv(score_map: UnitScoreMap, partition: SkillPartition, path,
                         quantile: float = 0.2) -> None:
    if len(score_map) != len(partition):
        raise ArchMismatchError("score map and partition differ in length")
    norm = normalize(score_map).scores
    flags = threshold(score_map, quantile).flags
    write_csv(path, ["unit_id", "label", "raw_score", "normalized_score", "important_flag"],
              [(u.id, u.label, score_map.scores[u.id], norm[u.id], flags[u.id]) for u in partition.units])


def read_importance_csv(path) -> UnitScoreMap:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        rows.sort(key=lambda r: int(r["unit_id"]))
        if [int(r["unit_id"]) for r in rows] != list(range(len(rows))) or not rows:
            raise DataFormatError(f"{path}: unit ids must be 0..n-1")
        return UnitScoreMap(np.array([float(r["raw_score"]) for r in rows]))
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DataFormatError(f"cannot read importance CSV {path}: {exc}") from exc


def write_merge_report(partition: SkillPartition, prev_flags: ImportanceFlags, cur_flags: ImportanceFlags,
                       cases: np.ndarray, path) -> None:
    write_csv(path, ["unit_id", "label", "prev_flag", "cur_flag", "case"],
              [(u.id, u.label, prev_flags.flags[u.id], cur_flags.flags[u.id], int(cases[u.id]))
               for u in partition.units])


def write_matrix_csv(matrix: np.ndarray, path) -> None:
    K = len(matrix)
    write_csv(path, ["after_task", *[f"task{i + 1}" for i in range(K)]],
              [(j + 1, *matrix[j]) for j in range(K)])


def read_matrix_csv(path) -> np.ndarray:
    """Square accuracy matrix; a header row and a leading row-label column are optional."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc}") from exc

    def numeric(cells):
        try:
            [float(c) for c in cells]
            return True
        except ValueError:
            return False

    if rows and not numeric(rows[0]):
        header, rows = rows[0], rows[1:]
        if header[0].strip() == "after_task":
            rows = [r[1:] for r in rows]
    try:
        a = np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise DataFormatError(f"{path}: non-numeric matrix entry ({exc})") from exc
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.size == 0:
        raise DataFormatError(f"{path}: accuracy matrix must be square, got {a.shape}")
    return a


def write_run_outputs(result: RunResult, out_dir) -> None:
    """matrix.csv, metrics.csv, trajectory.csv, order.csv, importance_*.csv, merge_*.csv, final.ckpt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(result.matrix, out / "matrix.csv")
    write_csv(out / "metrics.csv", ["metric", "value"], list(result.report.as_dict().items()))
    write_csv(out / "trajectory.csv", ["after_task", "task1_accuracy"],
              [(k + 1, v) for k, v in enumerate(result.trajectory)])
    write_csv(out / "order.csv", ["position", "task_id"],
              [(i + 1, t) for i, t in enumerate(result.task_ids)])
    write_partition_csv(result.partition, out / "partition.csv")
    for pos, m in enumerate(result.score_maps):
        write_importance_csv(m, result.partition, out / f"importance_task{pos + 1}.csv",
                             result.config.quantile)
    for rec in result.merges:
        write_merge_report(result.partition, rec.prev_flags, rec.cur_flags, rec.cases,
                           out / f"merge_task{rec.position + 1}.csv")
    save_checkpoint(result.final_model, out / "final.ckpt")


# ---------------------------------------------------------------------------
# Streams
# ---------------------------------------------------------------------------


def write_stream(stream: TaskStream, out_dir) -> None:
    """``stream.json`` manifest plus one file per task and split.

    Feature tasks: ``task{id}_{split}.csv`` with columns ``x0..x{D-1},label``.
    Token tasks: ``task{id}_{split}.jsonl``, one ``{"tokens": [...], "labels": [...]}`` per line.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"format_version": 1, "kind": stream.kind, "seed": stream.seed,
                "order": list(stream.order), "tasks": []}
    for task in stream.tasks:
        files = {}
        for split in ("train", "val", "test"):
            b: Batch = getattr(task, split)
            if b.targets.ndim == 2:
                fname = f"task{task.task_id}_{split}.jsonl"
                with open(out / fname, "w") as fh:
                    for x, y in zip(b.inputs, b.targets):
                        fh.write(json.dumps({"tokens": x.tolist(), "labels": y.tolist()}) + "\n")
            else:
                fname = f"task{task.task_id}_{split}.csv"
                write_csv(out / fname, [*[f"x{i}" for i in range(b.inputs.shape[1])], "label"],
                          [(*x, int(y)) for x, y in zip(b.inputs, b.targets)])
            files[split] = fname
        manifest["tasks"].append({"task_id": task.task_id, "num_classes": task.num_classes,
                                  "meta": task.meta, "files": files})
    (out / "stream.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _read_split(path: Path) -> Batch:
    if path.suffix == ".jsonl":
        recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        return Batch(np.array([r["tokens"] for r in recs]), np.array([r["labels"] for r in recs]))
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    data = np.array([[float(c) for c in r] for r in rows])
    return Batch(data[:, :-1], data[:, -1].astype(np.int64))


def read_stream(in_dir) -> TaskStream:
    d = Path(in_dir)
    try:
        manifest = json.loads((d / "stream.json").read_text())
        tasks = []
        for t in manifest["tasks"]:
            splits = [_read_split(d / t["files"][s]) for s in ("train", "val", "test")]
            tasks.append(TaskSpec(int(t["task_id"]), manifest["kind"], *splits, int(t["num_classes"]),
                                  t.get("meta", {})))
        return TaskStream(tuple(tasks), tuple(manifest["order"]), int(manifest["seed"]), manifest["kind"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise DataFormatError(f"cannot read stream from {d}: {exc}") from exc
