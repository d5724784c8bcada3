import dataclasses
import struct

import numpy as np
import pytest

from tasl import io
from tasl.autodiff import ArchDescriptor, init_model
from tasl.errors import ArchMismatchError, CheckpointError, ConfigError, DataFormatError
from tasl.localization import UnitScoreMap
from tasl.partition import build_partition
from tasl.runner import RunConfig, run_one
from tasl.tasks import gen_stream

MLP = ArchDescriptor.mlp([2, 5, 3], seed=3)
TRANSFORMER = ArchDescriptor.transformer(8, 2, 16, 2, 6, vocab=30, seed=1)


@pytest.mark.parametrize("arch", [MLP, TRANSFORMER])
def test_checkpoint_roundtrip(tmp_path, arch):
    m = init_model(arch)
    m["layer0.weight" if arch.kind == "mlp" else "embed"].values.ravel()[0] = 1 / 3
    io.save_checkpoint(m, tmp_path / "a.ckpt")
    back = io.load_checkpoint(tmp_path / "a.ckpt", expect=arch)
    assert back.arch == arch
    assert back.layout() == m.layout()
    assert back.flat_values().tobytes() == m.flat_values().tobytes()
    assert io.checkpoint_bytes(back) == (tmp_path / "a.ckpt").read_bytes()


def test_checkpoint_header():
    buf = io.checkpoint_bytes(init_model(MLP))
    assert buf[:8] == b"TASLCKPT"
    assert struct.unpack("<I", buf[8:12])[0] == 1


def test_corrupt_checkpoints():
    buf = io.checkpoint_bytes(init_model(MLP))
    for bad in (buf[:-3], buf[:20], b"", b"NOTACKPT" + buf[8:], buf[:8] + struct.pack("<I", 9) + buf[12:]):
        with pytest.raises(CheckpointError):
            io.model_from_bytes(bad)
    with pytest.raises(CheckpointError):
        io.model_from_bytes(buf + b"\0")


def test_checkpoint_arch_mismatch(tmp_path):
    io.save_checkpoint(init_model(MLP), tmp_path / "m.ckpt")
    with pytest.raises(ArchMismatchError):
        io.load_checkpoint(tmp_path / "m.ckpt", expect=TRANSFORMER)
    with pytest.raises(ArchMismatchError):
        io.load_checkpoint(tmp_path / "m.ckpt", expect=ArchDescriptor.mlp([2, 6, 3]))
    # seed is provenance, not shape
    io.load_checkpoint(tmp_path / "m.ckpt", expect=dataclasses.replace(MLP, seed=99))


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        io.load_checkpoint(tmp_path / "none.ckpt")


def test_config_parse_and_echo():
    cfg = io.parse_config("""
# comment
method = weight-ensemble
hidden = 8, 8
lam = 0.25   # inline
seeds = 3
orders = 0,1,2; 2,1,0
num_tasks = 3
""")
    assert cfg.method == "weight-ensemble" and cfg.hidden == (8, 8) and cfg.lam == 0.25
    assert cfg.seeds == (3,) and cfg.orders == ((0, 1, 2), (2, 1, 0))
    assert io.parse_config(io.format_config(cfg)) == cfg
    default = RunConfig()
    echoed = io.parse_config(io.format_config(default))
    assert echoed == dataclasses.replace(default, orders=default.resolved_orders())


def test_config_overrides_and_errors():
    assert io.parse_config("steps = 5", seeds=(7,)).seeds == (7,)
    for text in ("colour = red", "steps = many", "quantile = 2", "method = lwf", "not a line"):
        with pytest.raises(ConfigError):
            io.parse_config(text)


def test_importance_csv_roundtrip(tmp_path):
    m = init_model(MLP)
    p = build_partition(m)
    io.write_importance_csv(UnitScoreMap(np.array([0.1, 0.4, 0.2, 0.3])), p, tmp_path / "i.csv", 0.5)
    lines = (tmp_path / "i.csv").read_text().splitlines()
    assert lines[0] == "unit_id,label,raw_score,normalized_score,important_flag"
    assert lines[2] == "1,layer0.bias,0.4,1.0,1"
    np.testing.assert_array_equal(io.read_importance_csv(tmp_path / "i.csv").scores, [0.1, 0.4, 0.2, 0.3])
    (tmp_path / "bad.csv").write_text("unit_id,raw_score\n0,1\n2,3\n")
    with pytest.raises(DataFormatError):
        io.read_importance_csv(tmp_path / "bad.csv")


def test_matrix_csv(tmp_path):
    a = np.array([[0.5, 0.25], [0.75, 1.0]])
    io.write_matrix_csv(a, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "after_task,task1,task2"
    np.testing.assert_array_equal(io.read_matrix_csv(tmp_path / "m.csv"), a)
    (tmp_path / "plain.csv").write_text("0.5,0.25\n0.75,1.0\n")
    np.testing.assert_array_equal(io.read_matrix_csv(tmp_path / "plain.csv"), a)
    (tmp_path / "ragged.csv").write_text("0.5,0.25\n0.75\n")
    with pytest.raises(DataFormatError):
        io.read_matrix_csv(tmp_path / "ragged.csv")


def test_run_outputs(tmp_path):
    cfg = RunConfig(num_tasks=3, train_size=40, test_size=20, steps=20, hidden=(8,), seeds=(0,))
    r = run_one(cfg)
    io.write_run_outputs(r, tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["final.ckpt", "importance_task1.csv", "importance_task2.csv", "importance_task3.csv",
                     "matrix.csv", "merge_task2.csv", "merge_task3.csv", "metrics.csv", "order.csv",
                     "partition.csv", "trajectory.csv"]
    assert (tmp_path / "merge_task2.csv").read_text().startswith("unit_id,label,prev_flag,cur_flag,case\n")
    back = io.load_checkpoint(tmp_path / "final.ckpt")
    assert back.flat_values().tobytes() == r.final_model.flat_values().tobytes()


@pytest.mark.parametrize("kind", ["rotated-gaussians", "slot-fill-toy"])
def test_stream_roundtrip(tmp_path, kind):
    s = gen_stream(kind, 2, (10, 3, 4), seed=5)
    io.write_stream(s, tmp_path)
    back = io.read_stream(tmp_path)
    assert back.kind == kind and back.order == s.order and back.seed == 5
    for a, b in zip(s.tasks, back.tasks):
        assert a.task_id == b.task_id and a.num_classes == b.num_classes
        for split in ("train", "val", "test"):
            np.testing.assert_array_equal(getattr(a, split).inputs, getattr(b, split).inputs)
            np.testing.assert_array_equal(getattr(a, split).targets, getattr(b, split).targets)


def test_read_stream_missing(tmp_path):
    with pytest.raises(DataFormatError):
        io.read_stream(tmp_path)
