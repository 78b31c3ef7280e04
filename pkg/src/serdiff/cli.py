"""Command-line driver.

Exit codes: 0 success, 2 usage or config error, 3 missing prerequisite,
4 numerical failure during training.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import config as cfgmod
from .continual import STRATEGIES, TrainingDivergence, evaluate, first_stage, run_sequence
from .nets import fingerprint, load_checkpoint, save_checkpoint
from .phantom import dataset_checksum, generate_task, load_dataset, save_dataset
from .report import ReportError, build_report, write_report

log = logging.getLogger("serdiff")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
SPLITS = ("train", "val", "test")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_config(path: str, overrides: list[str] | None = None) -> cfgmod.RunConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_USAGE)
    except yaml.YAMLError as exc:
        raise CliError(f"could not parse {path}: {exc}", EXIT_USAGE)
    if not isinstance(doc, dict):
        raise CliError(f"{path}: config must be a mapping", EXIT_USAGE)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"override {item!r} is not of the form key=value", EXIT_USAGE)
        node = doc
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = yaml.safe_load(value)
    try:
        return cfgmod.from_dict(doc)
    except cfgmod.ConfigError as exc:
        raise CliError(str(exc), EXIT_USAGE)


def _task_dir(cfg: cfgmod.RunConfig, k: int, split: str) -> Path:
    return cfg.data_dir / f"task{k}" / split


def _load_tasks(cfg: cfgmod.RunConfig):
    specs = cfg.manifest("naive", 0).task_specs()
    tasks = []
    for k, spec in enumerate(specs, start=1):
        splits = []
        for split in SPLITS:
            d = _task_dir(cfg, k, split)
            if not (d / "manifest.json").exists():
                raise CliError(f"missing dataset {d}; run gen-data first", EXIT_MISSING)
            try:
                ds = load_dataset(d)
            except ValueError as exc:
                raise CliError(str(exc), EXIT_MISSING)
            stored = json.loads((d / "manifest.json").read_text())["spec"]
            if stored != spec.to_dict():
                raise CliError(f"dataset {d} was generated from a different config", EXIT_MISSING)
            splits.append(ds)
        tasks.append(tuple(splits))
    return tasks


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config, args.override)
    specs = cfg.manifest("naive", 0).task_specs()
    verified = written = 0
    for k, spec in enumerate(specs, start=1):
        for split, ds in zip(SPLITS, generate_task(spec, tuple(cfg.raw["split"]))):
            d = _task_dir(cfg, k, split)
            if (d / "manifest.json").exists():
                stored = json.loads((d / "manifest.json").read_text())
                if stored.get("checksum") != dataset_checksum(ds):
                    raise CliError(f"existing data in {d} does not match the config", EXIT_MISSING)
                load_dataset(d, verify=True)
                verified += 1
            else:
                save_dataset(ds, d, spec)
                written += 1
    summary = {"format": "serdiff-data/1", "config_sha256": cfg.digest(),
               "task_specs": [s.to_dict() for s in specs]}
    (cfg.data_dir / "manifest.json").write_text(json.dumps(summary, indent=2))
    if verified and not written:
        print(f"verified {verified} existing datasets in {cfg.data_dir}")
    else:
        print(f"wrote {written} datasets ({verified} verified) to {cfg.data_dir}")
    return EXIT_OK


@contextlib.contextmanager
def _run_lock(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{directory} is locked by another process ({lock})", EXIT_USAGE)
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _teacher_path(cfg: cfgmod.RunConfig, seed: int) -> Path:
    return cfg.output_dir / "teachers" / f"seed{seed}" / "teacher"


def _fit_teacher(cfg: cfgmod.RunConfig, seed: int, tasks) -> Path:
    manifest = cfg.manifest("ser_diff", seed)
    _, teacher = first_stage(manifest, tasks[0][0], with_teacher=True)
    path = _teacher_path(cfg, seed)
    save_checkpoint(teacher, path, stage=1, seed=seed, config_sha256=cfg.digest())
    return path


def _cached_teacher(cfg: cfgmod.RunConfig, seed: int):
    path = _teacher_path(cfg, seed)
    meta = path.with_suffix(".json")
    if not meta.exists() or json.loads(meta.read_text()).get("config_sha256") != cfg.digest():
        return None
    return load_checkpoint(path)


def cmd_train_teacher(args) -> int:
    cfg = _load_config(args.config, args.override)
    tasks = _load_tasks(cfg)
    with _run_lock(_teacher_path(cfg, args.seed).parent):
        try:
            path = _fit_teacher(cfg, args.seed, tasks)
        except TrainingDivergence as exc:
            raise CliError(f"training diverged: {exc} (step {exc.step})", EXIT_NUMERIC)
    print(f"teacher written to {path.with_suffix('.pt')}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.override)
    tasks = _load_tasks(cfg)
    run_dir = cfg.run_dir(args.strategy, args.seed)
    manifest = cfg.manifest(args.strategy, args.seed)
    with _run_lock(run_dir):
        teacher = _cached_teacher(cfg, args.seed) if args.strategy == "ser_diff" else None
        try:
            result = run_sequence(manifest, run_dir, tasks=tasks, surface_metrics=cfg.surface, teacher=teacher)
        except TrainingDivergence as exc:
            raise CliError(f"training diverged: {exc} (step {exc.step})", EXIT_NUMERIC)
        (run_dir / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True))
    print(f"{args.strategy} seed {args.seed}: FR={result.fr:.4f}; artifacts in {run_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config, args.override)
    tasks = _load_tasks(cfg)
    run_dir = cfg.run_dir(args.strategy, args.seed)
    ckpt = run_dir / "checkpoints" / f"student_stage{len(tasks)}"
    if not ckpt.with_suffix(".json").exists():
        raise CliError(f"missing checkpoint {ckpt.with_suffix('.pt')}; run train first", EXIT_MISSING)
    student = load_checkpoint(ckpt)
    scores = {str(k): asdict(evaluate(student, t[2], surface=True)) for k, t in enumerate(tasks, start=1)}
    out = {"format": "serdiff-eval/1", "fingerprint": fingerprint(student), "final": scores}
    (run_dir / "eval.json").write_text(json.dumps(out, indent=2))
    for k, s in scores.items():
        print(f"task {k}: dice={s['dice']:.4f} iou={s['iou']:.4f} hd95={s['hd95']:.2f}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        report = build_report(args.run_dirs)
    except ReportError as exc:
        raise CliError(str(exc), EXIT_MISSING)
    paths = write_report(report, args.out, plots=not args.no_plots)
    sys.stdout.write(report.text_table())
    print(f"wrote {', '.join(p.name for p in paths)} to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="serdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="YAML experiment config")
        sp.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, dotted for nesting (train.epochs=5)")
        return sp

    with_config(sub.add_parser("gen-data", help="generate and store the task datasets")).set_defaults(func=cmd_gen_data)
    sp = with_config(sub.add_parser("train-teacher", help="fit the task-1 diffusion teacher"))
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_train_teacher)
    sp = with_config(sub.add_parser("train", help="run the full task sequence for one strategy"))
    sp.add_argument("--strategy", required=True, choices=STRATEGIES)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_train)
    sp = with_config(sub.add_parser("evaluate", help="re-score a finished run's final student"))
    sp.add_argument("--strategy", required=True, choices=STRATEGIES)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_evaluate)
    sp = sub.add_parser("report", help="tabulate finished runs")
    sp.add_argument("run_dirs", nargs="+", type=Path)
    sp.add_argument("--out", type=Path, default=Path("report"))
    sp.add_argument("--no-plots", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
