"""Command line entry point: ``sdr <subcommand> --config C --out DIR``.

Artifacts live in the ``--out`` directory and each stage reads the previous
stage's output from there (``--input`` overrides the primary input)::

    data/train.csv  data/tasks/<name>.{train,eval}.csv      gen-data
    base.ckpt  base.log                                     pretrain-base
    features.ckpt                                           extract-features
    split.tsv                                               cluster
    sdr.ckpt  sdr.log                                       pretrain-sdr
    bn.ckpt  routes/<task>.txt                              route
    export/path<i>.ckpt                                     export
    report.txt  [report.dat]                                report
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .clustering import (EmptyClusterError, FeatureTable, InvalidConfigError, ZeroFeatureError, read_split,
                         write_split)
from .config import Config, ConfigError, apply_override, load_config
from .data import gen_data
from .io import Checkpoint, Dataset, FormatError, ParseError, atomic_write, ingest, read_csv, write_csv
from .routing import DownstreamTask, RouteReport, export_subnet, route
from .sdrnet import FULL, BnStats, CalibrationRequired, SdrNet, bn_calibrate, path_decode
from .ssl import write_log

log = logging.getLogger("sdr")


class MissingArtifact(RuntimeError):
    def __init__(self, path, stage):
        super().__init__(f"missing {path}; run `sdr {stage}` first")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, stage)
    return path


def _config(args) -> Config:
    cfg = load_config(args.config)
    for item in args.set or []:
        key, _, value = item.partition("=")
        cfg = apply_override(cfg, key.strip(), value.strip())
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg.validate()


def _train_data(cfg: Config, out: Path, override: str | None = None) -> Dataset:
    path = override or cfg.input
    if path:
        return ingest(path, cfg.input_format or None)
    return read_csv(_require(out / "data" / "train.csv", "gen-data"))


def _tasks(out: Path, names=None) -> list[DownstreamTask]:
    tdir = _require(out / "data" / "tasks", "gen-data")
    found = sorted(p.name[:-len(".train.csv")] for p in tdir.glob("*.train.csv"))
    if names:
        missing = set(names) - set(found)
        if missing:
            raise SystemExit(f"unknown task(s) {sorted(missing)}; available: {found}")
        found = [n for n in found if n in names]
    tasks = []
    for name in found:
        tr = read_csv(tdir / f"{name}.train.csv")
        ev = read_csv(_require(tdir / f"{name}.eval.csv", "gen-data"))
        tasks.append(DownstreamTask(name, tr.samples, tr.labels, ev.samples, ev.labels))
    return tasks


# ------------------------------------------------------------- commands --

def cmd_gen_data(cfg: Config, out: Path, args) -> None:
    data = gen_data(cfg.data)
    write_csv(out / "data" / "train.csv", data.train)
    for task in data.tasks:
        write_csv(out / "data" / "tasks" / f"{task.name}.train.csv", Dataset(task.train_x, task.train_y))
        write_csv(out / "data" / "tasks" / f"{task.name}.eval.csv", Dataset(task.eval_x, task.eval_y))
    print(f"wrote {len(data.train)} samples and {len(data.tasks)} tasks to {out / 'data'}")


def cmd_pretrain_base(cfg: Config, out: Path, args) -> None:
    data = _train_data(cfg, out, args.input)
    state = pipeline.pretrain_base(cfg, data.samples)
    meta = cfg.snapshot()
    meta.update({"kind": "base", "step": str(state.step), "phase": str(state.phase)})
    state.net.to_checkpoint(meta).save(out / "base.ckpt")
    write_log(out / "base.log", state.log)
    print(f"base net trained for {state.step} steps -> {out / 'base.ckpt'}")


def cmd_extract_features(cfg: Config, out: Path, args) -> None:
    ckpt = Checkpoint.load(_require(Path(args.input) if args.input else out / "base.ckpt", "pretrain-base"))
    net = SdrNet.from_checkpoint(ckpt)
    data = _train_data(cfg, out)
    table, _ = pipeline.base_features(net, data.samples, cfg.bn_batch)
    Checkpoint({"kind": "features", "n": str(len(table)), "d": str(table.features.shape[1])},
               {"features": table.features, "sample_ids": table.sample_ids[None, :].astype(np.float64)}
               ).save(out / "features.ckpt")
    print(f"{len(table)} x {table.features.shape[1]} features -> {out / 'features.ckpt'}")


def load_features(path: Path) -> FeatureTable:
    ckpt = Checkpoint.load(path)
    return FeatureTable(ckpt.tensors["features"], ckpt.tensors["sample_ids"].reshape(-1).astype(np.int64))


def cmd_cluster(cfg: Config, out: Path, args) -> None:
    table = load_features(_require(Path(args.input) if args.input else out / "features.ckpt",
                                   "extract-features"))
    model, split = pipeline.cluster_features(cfg, table)
    write_split(out / "split.tsv", split, table.sample_ids)
    sizes = ", ".join(str(len(s)) for s in split.subsets)
    print(f"k={split.k} clusters (sizes {sizes}) -> {out / 'split.tsv'}")


def cmd_pretrain_sdr(cfg: Config, out: Path, args) -> None:
    split, _ = read_split(_require(Path(args.input) if args.input else out / "split.tsv", "cluster"), cfg.k)
    data = _train_data(cfg, out)
    state = pipeline.pretrain_sdr(cfg, split, data.samples)
    meta = cfg.snapshot()
    meta.update({"kind": "sdr", "step": str(state.step), "phase": str(state.phase)})
    state.net.to_checkpoint(meta).save(out / "sdr.ckpt")
    write_log(out / "sdr.log", state.log)
    print(f"SDR net trained for {state.step} steps over {state.phase + 1} phases -> {out / 'sdr.ckpt'}")


def _load_sdr(out: Path, override=None):
    ckpt = Checkpoint.load(_require(Path(override) if override else out / "sdr.ckpt", "pretrain-sdr"))
    net = SdrNet.from_checkpoint(ckpt)
    bn_path = out / "bn.ckpt"
    bn = BnStats.from_tensors(Checkpoint.load(bn_path).tensors) if bn_path.exists() else BnStats()
    return net, bn


def cmd_route(cfg: Config, out: Path, args) -> None:
    net, bn = _load_sdr(out, args.input)
    split, _ = read_split(_require(out / "split.tsv", "cluster"), cfg.k)
    data = _train_data(cfg, out)
    base = None
    if (out / "base.ckpt").exists():
        base = SdrNet.from_checkpoint(Checkpoint.load(out / "base.ckpt"))
        base_bn = BnStats()
        bn_calibrate(base, FULL, data.samples, cfg.bn_batch, base_bn)
    for task in _tasks(out, args.task):
        baseline = pipeline.baseline_accuracy(base, base_bn, task, cfg.knn_k, cfg.knn_weighted) if base else None
        report = route(net, bn, split, data.samples, task, cfg.knn_k, cfg.seed, cfg.bn_batch, baseline,
                       weighted=cfg.knn_weighted)
        atomic_write(out / "routes" / f"{task.name}.txt", report.to_text().encode("utf-8"))
        print(f"{task.name}: best path {report.best} acc={report.best_accuracy:.4f}"
              + (f" (baseline {baseline:.4f})" if baseline is not None else ""))
    Checkpoint({"kind": "bnstats"}, bn.to_tensors()).save(out / "bn.ckpt")


def cmd_export(cfg: Config, out: Path, args) -> None:
    net, bn = _load_sdr(out, args.input)
    path = path_decode(args.path, net.config.g, net.config.L)
    if path not in bn:
        split, _ = read_split(_require(out / "split.tsv", "cluster"), cfg.k)
        data = _train_data(cfg, out)
        bn_calibrate(net, path, data.samples[split.subset(args.path + 1)], cfg.bn_batch, bn)
    dest = out / "export" / f"path{args.path}.ckpt"
    export_subnet(net, path, bn, {"seed": str(cfg.seed)}).save(dest)
    print(f"path {args.path} ({path}) with {net.param_count(path)} parameters -> {dest}")


def _collect_reports(inputs) -> dict:
    groups = {}
    for item in inputs:
        p = Path(item)
        files = sorted(p.glob("*.txt")) if p.is_dir() else [p]
        if not files:
            raise MissingArtifact(p, "route")
        groups[str(item)] = [RouteReport.from_text(f.read_text(encoding="utf-8")) for f in files]
    return groups


def render_report(groups: dict, bins: int = 10) -> tuple[str, str]:
    lines, dat = [], ["# run task path acc gain_vs_baseline"]
    gains_all = []
    for run, reports in groups.items():
        lines.append(f"== {run}")
        for r in reports:
            accs = r.path_accuracies
            base = "n/a" if r.baseline is None else f"{r.baseline:.4f}"
            lines.append(f"task {r.task}: best={r.best} acc={r.best_accuracy:.4f} baseline={base} "
                         f"path_std={np.std(accs):.4f}")
            for e in r.entries:
                name = "full" if e.index is None else str(e.index)
                gain = "" if r.baseline is None else f" gain={e.accuracy - r.baseline:+.4f}"
                lines.append(f"  path={name:>4} acc={e.accuracy:.4f}{gain}")
                if e.index is not None and r.baseline is not None:
                    gains_all.append(e.accuracy - r.baseline)
                    dat.append(f"{run} {r.task} {e.index} {e.accuracy:.6f} {e.accuracy - r.baseline:.6f}")
        spread = np.mean([np.std(r.path_accuracies) for r in reports])
        lines.append(f"per-path accuracy std (mean over tasks): {spread:.4f}")
    if gains_all:
        counts, edges = np.histogram(gains_all, bins=bins)
        lines.append("== histogram of per-path gains over baseline")
        width = max(counts.max(), 1)
        for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
            lines.append(f"[{lo:+.3f}, {hi:+.3f}) {c:4d} " + "#" * int(round(40 * c / width)))
        dat.append("")
        dat.append("# bin_lo bin_hi count")
        dat += [f"{lo:.6f} {hi:.6f} {c}" for c, lo, hi in zip(counts, edges[:-1], edges[1:])]
    return "\n".join(lines) + "\n", "\n".join(dat) + "\n"


def cmd_report(cfg: Config, out: Path, args) -> None:
    inputs = args.input_list or [str(_require(out / "routes", "route"))]
    text, dat = render_report(_collect_reports(inputs))
    atomic_write(out / "report.txt", text.encode("utf-8"))
    if args.gnuplot:
        atomic_write(out / "report.dat", dat.encode("utf-8"))
    sys.stdout.write(text)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-base": cmd_pretrain_base,
    "extract-features": cmd_extract_features,
    "cluster": cmd_cluster,
    "pretrain-sdr": cmd_pretrain_sdr,
    "route": cmd_route,
    "export": cmd_export,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdr", description="Scalable dynamic routing pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default="sdr_out", help="artifact directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("--input", dest="input_list", action="append",
                           help="route report file or directory (repeatable)")
            p.add_argument("--gnuplot", action="store_true", help="also write report.dat")
        else:
            p.add_argument("--input", help="primary input artifact (defaults to the --out layout)")
        if name == "route":
            p.add_argument("--task", action="append", help="route only this task (repeatable)")
        if name == "export":
            p.add_argument("--path", type=int, required=True, help="path index to export")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
    except (MissingArtifact, ConfigError, InvalidConfigError, FormatError, ParseError, EmptyClusterError,
            CalibrationRequired, ZeroFeatureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
