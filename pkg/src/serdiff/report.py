"""Aggregate finished runs into a per-strategy, per-task results table."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import subprocess
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import AccMatrix, forgetting_rate

REPORT_FORMAT = "serdiff-report/1"
REQUIRED_ARTIFACTS = ("manifest.json", "acc_matrix.csv", "report.json")


class ReportError(RuntimeError):
    """A run directory is incomplete or inconsistent with the others."""


@dataclass
class RunRecord:
    run_dir: Path
    strategy: str
    seed: int
    acc: AccMatrix
    fr: float
    final: dict[int, dict[str, float]]
    manifest_sha256: str


def load_run(run_dir: str | Path) -> RunRecord:
    run_dir = Path(run_dir)
    for name in REQUIRED_ARTIFACTS:
        if not (run_dir / name).exists():
            raise ReportError(f"{run_dir}: missing artifact {name}")
    manifest_bytes = (run_dir / "manifest.json").read_bytes()
    manifest = json.loads(manifest_bytes)
    stored = json.loads((run_dir / "report.json").read_text())
    acc = AccMatrix.load(run_dir / "acc_matrix.csv")
    if not acc.is_complete():
        raise ReportError(f"{run_dir}: acc_matrix.csv is incomplete")
    final = {int(k): v for k, v in stored["final"].items()}
    return RunRecord(
        run_dir=run_dir,
        strategy=manifest["strategy"]["kind"],
        seed=int(manifest["seed"]),
        acc=acc,
        fr=forgetting_rate(acc),
        final=final,
        manifest_sha256=hashlib.sha256(manifest_bytes).hexdigest(),
    )


def _mean_sd(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    sd = float(a.std(ddof=1)) if len(a) > 1 else 0.0
    return float(a.mean()), sd


@dataclass
class Report:
    n_tasks: int
    rows: dict[str, dict] = field(default_factory=dict)  # strategy -> cells
    provenance: dict = field(default_factory=dict)
    curves: dict[str, np.ndarray] = field(default_factory=dict)  # strategy -> mean acc matrix

    def csv_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {REPORT_FORMAT}\n")
        w = csv.writer(buf, lineterminator="\n")
        header = ["strategy", "n_seeds"]
        for k in range(1, self.n_tasks + 1):
            for m in ("dice", "iou", "hd95"):
                header += [f"task{k}_{m}_mean", f"task{k}_{m}_sd"]
        header += ["fr_mean", "fr_sd"]
        w.writerow(header)
        for name, row in self.rows.items():
            cells = [name, row["n_seeds"]]
            for k in range(1, self.n_tasks + 1):
                for m in ("dice", "iou", "hd95"):
                    cells += list(row[f"task{k}"][m])
            cells += list(row["fr"])
            w.writerow([c if isinstance(c, (str, int)) else repr(float(c)) for c in cells])
        return buf.getvalue()

    def text_table(self) -> str:
        def pct(ms):
            return f"{100 * ms[0]:5.1f}±{100 * ms[1]:4.1f}"

        def mm(ms):
            return f"{ms[0]:5.2f}±{ms[1]:4.2f}"

        task_w = 3 * 12 + 2
        lines = [f"# {REPORT_FORMAT}"]
        head1 = f"{'Method':<10} " + " ".join(f"{'Task ' + str(k):^{task_w}}" for k in range(1, self.n_tasks + 1))
        head2 = f"{'':<10} " + " ".join(
            f"{'Dice (%)':^12} {'IoU (%)':^12} {'HD95 (mm)':^12}" for _ in range(self.n_tasks)
        )
        lines += [head1 + f" {'FR (%)':^12}", head2]
        lines.append("-" * len(head2 + " " * 13))
        for name, row in self.rows.items():
            cells = []
            for k in range(1, self.n_tasks + 1):
                t = row[f"task{k}"]
                cells.append(f"{pct(t['dice']):^12} {pct(t['iou']):^12} {mm(t['hd95']):^12}")
            lines.append(f"{name:<10} " + " ".join(cells) + f" {pct(row['fr']):^12}")
        lines.append("")
        lines.append(f"code version: {self.provenance['code_version']}")
        for rd, digest in self.provenance["manifests"].items():
            lines.append(f"manifest {digest[:16]}  {rd}")
        return "\n".join(lines) + "\n"


def _code_version() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def build_report(run_dirs: list[str | Path]) -> Report:
    if not run_dirs:
        raise ReportError("no run directories given")
    records = [load_run(rd) for rd in run_dirs]
    counts = {r.acc.K for r in records}
    if len(counts) != 1:
        detail = ", ".join(f"{r.run_dir}: {r.acc.K}" for r in records)
        raise ReportError(f"runs disagree on the number of tasks ({detail})")
    K = counts.pop()
    groups: dict[str, list[RunRecord]] = defaultdict(list)
    for r in records:
        groups[r.strategy].append(r)

    report = Report(n_tasks=K)
    for name, runs in groups.items():
        row: dict = {"n_seeds": len(runs)}
        for k in range(1, K + 1):
            row[f"task{k}"] = {
                "dice": _mean_sd([r.acc.acc[k - 1, K - 1] for r in runs]),
                "iou": _mean_sd([r.final[k]["iou"] for r in runs]),
                "hd95": _mean_sd([r.final[k]["hd95"] for r in runs]),
            }
        row["fr"] = _mean_sd([r.fr for r in runs])
        report.rows[name] = row
        report.curves[name] = np.mean([r.acc.acc for r in runs], axis=0)
    report.provenance = {
        "code_version": _code_version(),
        "manifests": {str(r.run_dir): r.manifest_sha256 for r in records},
    }
    return report


def write_plots(report: Report, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    K = report.n_tasks
    fig, axes = plt.subplots(1, K, figsize=(4 * K, 3.2), sharey=True)
    for k, ax in enumerate(np.atleast_1d(axes)):
        for name, curve in report.curves.items():
            stages = np.arange(k + 1, K + 1)
            ax.plot(stages, curve[k, k:], marker="o", label=name)
        ax.set_title(f"task {k + 1}")
        ax.set_xlabel("after stage")
        ax.set_xticks(range(1, K + 1))
    np.atleast_1d(axes)[0].set_ylabel("mean class Dice")
    np.atleast_1d(axes)[-1].legend(fontsize=8)
    fig.tight_layout()
    paths.append(out_dir / "dice_per_stage.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4, 3))
    names = list(report.rows)
    means = [report.rows[n]["fr"][0] for n in names]
    sds = [report.rows[n]["fr"][1] for n in names]
    ax.bar(names, means, yerr=sds, capsize=4)
    ax.set_ylabel("forgetting rate")
    fig.tight_layout()
    paths.append(out_dir / "forgetting_rate.png")
    fig.savefig(paths[-1], dpi=100)
    plt.close(fig)
    return paths


def write_report(report: Report, out_dir: str | Path, plots: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "report.csv", out_dir / "report.txt", out_dir / "provenance.json"]
    written[0].write_text(report.csv_text())
    written[1].write_text(report.text_table())
    written[2].write_text(json.dumps({"format": REPORT_FORMAT, **report.provenance}, indent=2))
    if plots:
        written += write_plots(report, out_dir)
    return written
