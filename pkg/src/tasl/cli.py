"""Command-line entry point: ``tasl {run,merge,importance,report,gen-tasks}``.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import io
from .autodiff import ArchDescriptor
from .consolidation import merge_cases, merge_fine, threshold
from .errors import ArchMismatchError, ConfigError, DataFormatError, NonFiniteError, TaslError
from .localization import SCORING_VARIANTS, run_localization
from .partition import SCHEMES, build_partition
from .runner import RunConfig, aggregate, cl_metrics, run_one
from .tasks import KINDS, TaskSpec, check_permutation, gen_stream

log = logging.getLogger("tasl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _parse_order(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad order {text!r}; expected e.g. 2,0,1")


def cmd_run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = (args.seed,)
    if args.order is not None:
        overrides["orders"] = (args.order,)
    config = io.load_config(args.config, **overrides) if args.config else RunConfig(**overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(io.format_config(config))

    rows, reports = [], []
    for oi, order in enumerate(config.resolved_orders()):
        check_permutation(order, config.num_tasks)
        for seed in config.seeds:
            result = run_one(config, order, seed)
            io.write_run_outputs(result, out / f"order{oi + 1}_seed{seed}")
            r = result.report
            reports.append(r)
            rows.append((oi + 1, " ".join(map(str, order)), seed, r.avg, r.fwt, r.bwt))
            log.info("order %s seed %d: avg=%.4f fwt=%s bwt=%s", order, seed, r.avg, r.fwt, r.bwt)
    io.write_csv(out / "runs.csv", ["order_index", "order", "seed", "avg", "fwt", "bwt"], rows)
    agg = aggregate(reports)
    io.write_csv(out / "summary.csv", ["metric", "mean", "stderr", "n"],
                 [(k, agg.mean[k], agg.stderr[k], agg.n) for k in agg.mean])
    print(" ".join(f"{k.upper() if k != 'avg' else 'Avg'}={agg.mean[k]:.4f}±{agg.stderr[k]:.4f}"
                   for k in agg.mean))
    return EXIT_OK


def cmd_merge(args) -> int:
    prev = io.load_checkpoint(args.prev)
    cur = io.load_checkpoint(args.cur, expect=prev.arch)
    partition = build_partition(prev, args.scheme)
    prev_map, cur_map = io.read_importance_csv(args.prev_imp), io.read_importance_csv(args.cur_imp)
    for m, src in ((prev_map, args.prev_imp), (cur_map, args.cur_imp)):
        if len(m) != len(partition):
            raise DataFormatError(f"{src} has {len(m)} units, the model has {len(partition)}")
    pf, cf = threshold(prev_map, args.quantile), threshold(cur_map, args.quantile)
    merged = merge_fine(prev, cur, partition, pf, cf, args.gamma)
    io.save_checkpoint(merged, args.out)
    report = args.report or f"{args.out}.cases.csv"
    io.write_merge_report(partition, pf, cf, merge_cases(pf, cf), report)
    print(f"wrote {args.out} and {report}")
    return EXIT_OK


def _resolve_task(spec: str) -> TaskSpec:
    """``DIR`` or ``DIR#ID`` from gen-tasks, or ``kind=...,k=...,task=...,seed=...``."""
    path, _, tid = spec.partition("#")
    if Path(path).is_dir():
        stream = io.read_stream(path)
        wanted = int(tid) if tid else stream.tasks[0].task_id
        for t in stream.tasks:
            if t.task_id == wanted:
                return t
        raise ConfigError(f"task {wanted} not in {path}")
    try:
        kv = dict(item.split("=", 1) for item in spec.split(",") if item)
        kind = kv.pop("kind")
        K, task, seed = int(kv.pop("k", 5)), int(kv.pop("task", 0)), int(kv.pop("seed", 0))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad task spec {spec!r}: {exc}") from exc
    if kv:
        raise ConfigError(f"unknown task spec keys {sorted(kv)}")
    if not 0 <= task < K:
        raise ConfigError(f"task {task} outside 0..{K - 1}")
    return gen_stream(kind, K, seed=seed).tasks[task]


def _check_task_fits(arch: ArchDescriptor, task: TaskSpec) -> None:
    token_task = task.train.targets.ndim == 2
    if (arch.kind == "tiny-transformer") != token_task:
        raise ArchMismatchError(f"a {arch.kind} checkpoint cannot train on {task.kind} data")
    if arch.kind == "mlp" and arch.layer_sizes[0] != task.input_dim:
        raise ArchMismatchError(f"checkpoint expects {arch.layer_sizes[0]} features, task has {task.input_dim}")
    if task.num_classes > arch.num_classes:
        raise ArchMismatchError(f"task has {task.num_classes} classes, model only {arch.num_classes}")


def cmd_importance(args) -> int:
    model = io.load_checkpoint(args.ckpt)
    task = _resolve_task(args.task)
    _check_task_fits(model.arch, task)
    partition = build_partition(model, args.scheme)
    _, scores = run_localization(model, task.train, args.steps, args.lr, args.alpha1, args.alpha2,
                                 partition, batch_size=args.batch_size, rng=args.seed,
                                 variant=args.variant, task_id=task.task_id)
    io.write_importance_csv(scores, partition, args.out, args.quantile)
    print(f"wrote {args.out} ({len(partition)} units)")
    return EXIT_OK


def cmd_report(args) -> int:
    r = cl_metrics(io.read_matrix_csv(args.matrix))

    def fmt(v):
        return "n/a" if v is None else f"{v:.6g}"

    print(f"Avg={fmt(r.avg)} FWT={fmt(r.fwt)} BWT={fmt(r.bwt)}")
    return EXIT_OK


def cmd_gen_tasks(args) -> int:
    sizes = (args.train_size, args.val_size, args.test_size)
    stream = gen_stream(args.kind, args.k, sizes, args.seed)
    io.write_stream(stream, args.out)
    print(f"wrote {len(stream)} {args.kind} tasks to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tasl", description="Skill localization and consolidation for continual learning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a continual-learning grid from a config file")
    r.add_argument("--config", help="key = value config file (defaults if omitted)")
    r.add_argument("--order", type=_parse_order, help="single task order, e.g. 2,0,1,4,3")
    r.add_argument("--seed", type=int, help="single seed")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    m = sub.add_parser("merge", help="fine-grained merge of two checkpoints")
    m.add_argument("--prev", required=True)
    m.add_argument("--cur", required=True)
    m.add_argument("--prev-imp", required=True)
    m.add_argument("--cur-imp", required=True)
    m.add_argument("--gamma", type=float, default=0.7)
    m.add_argument("--quantile", type=float, default=0.2)
    m.add_argument("--scheme", choices=SCHEMES, default="per-tensor")
    m.add_argument("--report", help="case report CSV (default: <out>.cases.csv)")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    i = sub.add_parser("importance", help="score skill units while fine-tuning on one task")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--task", required=True, help="DIR[#ID] from gen-tasks or kind=..,k=..,task=..,seed=..")
    i.add_argument("--steps", type=int, required=True)
    i.add_argument("--lr", type=float, default=0.1)
    i.add_argument("--alpha1", type=float, default=0.85)
    i.add_argument("--alpha2", type=float, default=0.85)
    i.add_argument("--batch-size", type=int, default=32)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--variant", choices=SCORING_VARIANTS, default="iu")
    i.add_argument("--scheme", choices=SCHEMES, default="per-tensor")
    i.add_argument("--quantile", type=float, default=0.2)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_importance)

    rep = sub.add_parser("report", help="Avg/FWT/BWT of an accuracy matrix CSV")
    rep.add_argument("--matrix", required=True)
    rep.set_defaults(func=cmd_report)

    g = sub.add_parser("gen-tasks", help="write a synthetic task stream")
    g.add_argument("--kind", choices=KINDS, required=True)
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-size", type=int, default=200)
    g.add_argument("--val-size", type=int, default=50)
    g.add_argument("--test-size", type=int, default=100)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_tasks)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except TaslError as exc:
        if isinstance(exc.__cause__, NonFiniteError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
