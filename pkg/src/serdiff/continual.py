"""Task-sequential training: naive, KD, EWC and synthetic-error-replay students."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .diffusion import ErrorMap, NoiseSchedule, compute_error_map, linear_schedule, p_sample, teacher_loss
from .losses import bce_loss, dual_loss, soft_dice_loss
from .nets import Denoiser, NetConfig, Segmenter, build_denoiser, build_segmenter, fingerprint, freeze
from .phantom import N_CLASSES, Dataset, TaskSpec, generate_task, make_task_spec

log = logging.getLogger(__name__)

StrategyKind = Literal["naive", "kd", "ewc", "ser_diff"]
STRATEGIES: tuple[str, ...] = ("naive", "kd", "ewc", "ser_diff")


class TrainingDivergence(RuntimeError):
    def __init__(self, stage: int, step: int, value: float):
        super().__init__(f"non-finite loss {value} at stage {stage}, step {step}")
        self.stage = stage
        self.step = step


@dataclass
class StrategyConfig:
    kind: StrategyKind = "naive"
    lam: float = 1.0
    kd_weight: float = 1.0
    ewc_strength: float = 1000.0
    replay_ratio: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; choose from {STRATEGIES}")
        if min(self.lam, self.kd_weight, self.ewc_strength) < 0:
            raise ValueError("strategy weights must be non-negative")
        if not 0.0 <= self.replay_ratio <= 1.0:
            raise ValueError("replay_ratio must lie in [0, 1]")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-4
    cosine: bool = True
    teacher_epochs: int = 40
    teacher_lr: float = 1e-3
    teacher_snapshot_frac: float = 0.5
    teacher_freeze_encoder: bool = True
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    fisher_batches: int = 16
    base_channels: int = 16
    depth: int = 3
    embed_dim: int = 64

    def net_config(self) -> NetConfig:
        return NetConfig(base_channels=self.base_channels, depth=self.depth, embed_dim=self.embed_dim)

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end)


@dataclass
class RunManifest:
    base_seed: int = 0
    seed: int = 0
    n_tasks: int = 3
    n_samples: int = 200
    image_size: int = 64
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage_fingerprints: list[dict] = field(default_factory=list)

    def task_specs(self) -> list[TaskSpec]:
        return [
            make_task_spec(k, self.base_seed, self.n_samples, self.image_size)
            for k in range(1, self.n_tasks + 1)
        ]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        d["task_specs"] = [s.to_dict() for s in self.task_specs()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        d = dict(d)
        d.pop("task_specs", None)
        d.pop("format", None)
        d["strategy"] = StrategyConfig(**d.get("strategy", {}))
        d["train"] = TrainConfig(**d.get("train", {}))
        d["split"] = tuple(d.get("split", (0.8, 0.1, 0.1)))
        return cls(**d)


@dataclass
class AccessRecord:
    stage: int
    task_id: int
    split: str
    purpose: str
    n: int


class DataAudit:
    """Log of every dataset read, used to check replay and evaluation isolation."""

    def __init__(self) -> None:
        self.records: list[AccessRecord] = []

    def record(self, stage: int, ds: Dataset, purpose: str, n: int) -> None:
        self.records.append(AccessRecord(stage, ds.task_id, ds.split, purpose, n))

    def gradient_reads(self) -> list[AccessRecord]:
        return [r for r in self.records if r.purpose != "eval"]

    def old_task_reads(self) -> list[AccessRecord]:
        """Gradient-path reads of a task other than the stage's own task."""
        return [r for r in self.gradient_reads() if r.task_id != r.stage]

    def test_split_gradient_reads(self) -> list[AccessRecord]:
        return [r for r in self.gradient_reads() if r.split == "test"]


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _tensors(ds: Dataset, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    x, y = ds.arrays()
    return torch.as_tensor(x, dtype=dtype), torch.as_tensor(y, dtype=dtype)


def _batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def student_input(modalities: torch.Tensor, error_slot: torch.Tensor | None = None) -> torch.Tensor:
    if error_slot is None:
        error_slot = modalities.new_zeros((modalities.shape[0], N_CLASSES, *modalities.shape[-2:]))
    return torch.cat([modalities, error_slot], dim=1)


def current_task_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    return soft_dice_loss(torch.softmax(logits, dim=1), gt) + bce_loss(logits, gt)


def _optimizer(params, lr: float, total_steps: int, cosine: bool):
    opt = torch.optim.Adam(params, lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(total_steps, 1)) if cosine else None
    return opt, sched


@dataclass
class EWCState:
    fisher_diag: dict[str, torch.Tensor]
    param_anchor: dict[str, torch.Tensor]
    anchor_fingerprint: str

    def penalty(self, net: torch.nn.Module) -> torch.Tensor:
        terms = [
            (self.fisher_diag[n] * (p - self.param_anchor[n]) ** 2).sum()
            for n, p in net.named_parameters()
        ]
        return torch.stack(terms).sum()

    def merged(self, newer: "EWCState") -> "EWCState":
        """Accumulate importance across tasks; the anchor moves to the newer parameters."""
        fisher = {n: self.fisher_diag[n] + newer.fisher_diag[n] for n in self.fisher_diag}
        return EWCState(fisher, newer.param_anchor, newer.anchor_fingerprint)


def fisher_estimate(
    student: Segmenter,
    data: Dataset,
    n_batches: int,
    batch_size: int = 4,
    seed: int = 0,
    audit: DataAudit | None = None,
    stage: int = 0,
) -> EWCState:
    """Diagonal empirical Fisher: mean over batches of squared loss gradients."""
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    x, y = _tensors(data)
    rng = np.random.default_rng(seed)
    was_training = student.training
    student.eval()
    fisher = {n: torch.zeros_like(p) for n, p in student.named_parameters()}
    for b in range(n_batches):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        if audit is not None:
            audit.record(stage, data, "fisher", len(idx))
        student.zero_grad()
        logits, _ = student(student_input(x[idx]))
        current_task_loss(logits, y[idx]).backward()
        for n, p in student.named_parameters():
            if p.grad is not None:
                fisher[n] += p.grad.detach() ** 2 / n_batches
    student.zero_grad()
    student.train(was_training)
    anchor = {n: p.detach().clone() for n, p in student.named_parameters()}
    return EWCState(fisher, anchor, fingerprint(student))


def build_replay_batch(
    teacher: Denoiser,
    c_batch: torch.Tensor,
    sched: NoiseSchedule,
    seed: int,
    indices=None,
) -> list[ErrorMap]:
    """One synthetic error map per conditioning image.

    Element ``i`` is sampled with a seed derived from ``(seed, indices[i])``
    (``indices`` defaults to ``range(B)``), so results do not depend on batching.
    """
    indices = range(c_batch.shape[0]) if indices is None else indices
    seeds = [_seed(seed, i) for i in indices]
    maps = p_sample(teacher, c_batch, sched, seeds).values
    return [ErrorMap(m, "synthetic") for m in maps]


def synthesize_replay_bank(
    teacher: Denoiser, c_all: torch.Tensor, sched: NoiseSchedule, seed: int, chunk: int = 64
) -> torch.Tensor:
    out = []
    for start in range(0, c_all.shape[0], chunk):
        idx = range(start, min(start + chunk, c_all.shape[0]))
        maps = build_replay_batch(teacher, c_all[idx.start : idx.stop], sched, seed, idx)
        out.append(torch.stack([m.values for m in maps]))
    return torch.cat(out)


def train_task(
    student: Segmenter,
    task: Dataset,
    strategy: StrategyConfig,
    cfg: TrainConfig,
    seed: int,
    teacher: Denoiser | None = None,
    prev_student: Segmenter | None = None,
    ewc: EWCState | None = None,
    replay_bank: torch.Tensor | None = None,
    stage: int = 1,
    audit: DataAudit | None = None,
    on_step: Callable[[dict], None] | None = None,
    on_epoch: Callable[[int], None] | None = None,
    plain: bool = False,
) -> Segmenter:
    """Train ``student`` in place on one task and return it.

    ``plain=True`` forces current-task loss only (first stage of every strategy).
    For ``ser_diff`` a ``replay_bank`` of teacher maps aligned with ``task``'s
    samples may be passed; otherwise one is synthesized here.
    """
    kind = "naive" if plain else strategy.kind
    if kind == "kd" and prev_student is None:
        raise ValueError("the kd strategy needs prev_student")
    if kind == "ewc" and ewc is None:
        raise ValueError("the ewc strategy needs an EWCState")
    replay = kind == "ser_diff" and strategy.lam > 0 and strategy.replay_ratio > 0
    if kind == "ser_diff" and teacher is None:
        raise ValueError("the ser_diff strategy needs a frozen teacher")
    sched = cfg.schedule()
    x, y = _tensors(task)
    if replay and replay_bank is None:
        replay_bank = synthesize_replay_bank(teacher, x, sched, _seed(seed, stage, 17))
    n_rep = 0
    if replay:
        n_rep = min(cfg.batch_size, max(2, round(strategy.replay_ratio * cfg.batch_size)))

    rng = np.random.default_rng(_seed(seed, stage))
    steps_per_epoch = math.ceil(len(task) / cfg.batch_size)
    opt, lr_sched = _optimizer([p for p in student.parameters() if p.requires_grad], cfg.lr, cfg.epochs * steps_per_epoch, cfg.cosine)
    student.train()
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batch_order(len(task), cfg.batch_size, rng):
            if audit is not None:
                audit.record(stage, task, "train", len(idx))
            xb, yb = x[idx], y[idx]
            logits, _ = student(student_input(xb))
            if kind == "ser_diff":
                f_s = f_t = None
                if replay and len(idx) >= 2:
                    r = idx[:n_rep]
                    e_old = replay_bank[r]
                    _, f_s = student(student_input(x[r], e_old))
                    with torch.no_grad():
                        _, f_t, _ = teacher.features(e_old, 1, x[r])
                br = dual_loss(logits, yb, f_s, f_t, lam=strategy.lam)
                loss, terms = br.total, br.as_floats()
            else:
                base = current_task_loss(logits, yb)
                extra = logits.new_zeros(())
                if kind == "kd":
                    with torch.no_grad():
                        prev_logits, _ = prev_student(student_input(xb))
                    extra = strategy.kd_weight * F.mse_loss(logits, prev_logits)
                elif kind == "ewc":
                    extra = strategy.ewc_strength * ewc.penalty(student)
                loss = base + extra
                terms = {"task": base.item(), "reg": extra.item(), "total": loss.item()}
            if not torch.isfinite(loss):
                raise TrainingDivergence(stage, step, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            if lr_sched is not None:
                lr_sched.step()
            if on_step is not None:
                on_step({"stage": stage, "epoch": epoch, "step": step, **terms})
            step += 1
        if on_epoch is not None:
            on_epoch(epoch + 1)
    student.eval()
    return student


def harvest_error_maps(student: Segmenter, data: Dataset) -> tuple[torch.Tensor, torch.Tensor]:
    """(conditioning images, computed error maps) for every sample of ``data``."""
    x, y = _tensors(data)
    student.eval()
    with torch.no_grad():
        logits, _ = student(student_input(x))
    return x, compute_error_map(logits, y).values


def train_teacher(
    task1_train: Dataset,
    cfg: TrainConfig,
    seed: int,
    snapshot: Segmenter | None = None,
    warm_start: Segmenter | None = None,
    audit: DataAudit | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> Denoiser:
    """Fit the conditional error-map denoiser on task-1 data and return it frozen.

    ``snapshot`` is a partially trained task-1 student whose residuals form the
    training targets; when absent one is trained here. ``warm_start`` copies a
    segmenter's encoder (and embedding head) into the denoiser.
    """
    if len(task1_train) == 0:
        raise ValueError("task-1 training data is empty")
    net_cfg = cfg.net_config()
    if snapshot is None:
        snapshot = build_segmenter(net_cfg, seed)
        half = dict(asdict(cfg), epochs=max(1, round(cfg.epochs * cfg.teacher_snapshot_frac)))
        train_task(snapshot, task1_train, StrategyConfig("naive"), TrainConfig(**half), seed, stage=1, audit=audit, plain=True)
    if audit is not None:
        audit.record(1, task1_train, "teacher", len(task1_train))
    c, e = harvest_error_maps(snapshot, task1_train)

    sched = cfg.schedule()
    teacher = build_denoiser(net_cfg, sched.T, _seed(seed, 101))
    trainable = list(teacher.parameters())
    if warm_start is not None:
        encoder_keys = {k for k in warm_start.state_dict() if k.startswith(("down.", "mid.", "embed."))}
        teacher.load_state_dict({k: v for k, v in warm_start.state_dict().items() if k in encoder_keys}, strict=False)
        if cfg.teacher_freeze_encoder:
            for name, p in teacher.named_parameters():
                if name in encoder_keys:
                    p.requires_grad_(False)
            trainable = [p for p in teacher.parameters() if p.requires_grad]

    g = torch.Generator().manual_seed(_seed(seed, 102))
    rng = np.random.default_rng(_seed(seed, 103))
    steps_per_epoch = math.ceil(len(c) / cfg.batch_size)
    opt, lr_sched = _optimizer(trainable, cfg.teacher_lr, cfg.teacher_epochs * steps_per_epoch, cfg.cosine)
    teacher.train()
    step = 0
    for _ in range(cfg.teacher_epochs):
        for idx in _batch_order(len(c), cfg.batch_size, rng):
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=g)
            noise = torch.randn(e[idx].shape, generator=g)
            loss = teacher_loss(teacher, e[idx], c[idx], t, noise, sched)
            if not torch.isfinite(loss):
                raise TrainingDivergence(1, step, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            if lr_sched is not None:
                lr_sched.step()
            if on_step is not None:
                on_step({"stage": 1, "phase": "teacher", "step": step, "teacher_loss": loss.item()})
            step += 1
    return freeze(teacher)


@dataclass
class TaskScores:
    dice: float
    iou: float
    hd95: float


def predict_one_hot(student: Segmenter, modalities: torch.Tensor) -> np.ndarray:
    student.eval()
    with torch.no_grad():
        logits, _ = student(student_input(modalities))
    labels = logits.argmax(dim=1).numpy()
    return np.eye(logits.shape[1], dtype=np.float32)[labels].transpose(0, 3, 1, 2)


def evaluate(
    student: Segmenter,
    data: Dataset,
    audit: DataAudit | None = None,
    stage: int = 0,
    surface: bool = False,
) -> TaskScores:
    """Mean per-sample tumor-class Dice (and optionally IoU, HD95) on ``data``.

    HD95 pairs where exactly one mask is empty score the image diagonal; pairs
    where both are empty are skipped.
    """
    if audit is not None:
        audit.record(stage, data, "eval", len(data))
    x, y = _tensors(data)
    pred = predict_one_hot(student, x)
    gt = y.numpy()
    dices, ious, hds = [], [], []
    worst = math.hypot(*gt.shape[-2:])
    for p, g in zip(pred, gt):
        dices.append(metrics.mean_class_dice(p, g))
        if surface:
            ious.append(np.mean([metrics.iou(p[k], g[k]) for k in range(1, p.shape[0])]))
            for k in range(1, p.shape[0]):
                pk, gk = p[k] > 0, g[k] > 0
                if pk.any() and gk.any():
                    hds.append(metrics.hd95(pk, gk))
                elif pk.any() or gk.any():
                    hds.append(worst)
    return TaskScores(
        float(np.mean(dices)),
        float(np.mean(ious)) if ious else float("nan"),
        float(np.mean(hds)) if hds else float("nan"),
    )


@dataclass
class RunResult:
    acc: metrics.AccMatrix
    fr: float
    scores: dict[int, TaskScores]  # final-stage scores per task
    manifest: RunManifest
    audit: DataAudit
    teacher_fingerprints: list[str]
    student: Segmenter
    teacher: Denoiser | None = None

    def report(self) -> dict:
        return {
            "strategy": self.manifest.strategy.kind,
            "seed": self.manifest.seed,
            "forgetting_rate": self.fr,
            "final": {str(k): asdict(v) for k, v in self.scores.items()},
            "acc_matrix": [[None if math.isnan(v) else v for v in row] for row in self.acc.acc.tolist()],
        }


RUN_FORMAT = "serdiff-run/1"
METRICS_FORMAT = "serdiff-metrics/1"


class _JsonLines:
    def __init__(self, path: Path | None):
        self._fh = open(path, "w") if path is not None else None
        self({"format": METRICS_FORMAT})

    def __call__(self, rec: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(rec) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def first_stage(
    manifest: RunManifest,
    train: Dataset,
    audit: DataAudit | None = None,
    on_step: Callable[[dict], None] | None = None,
    with_teacher: bool | None = None,
) -> tuple[Segmenter, Denoiser | None]:
    """Stage 1 of every strategy: plain training on task 1, plus the teacher for ser_diff.

    The teacher's targets come from the student snapshot taken at
    ``teacher_snapshot_frac`` of the task-1 epochs.
    """
    cfg, seed = manifest.train, manifest.seed
    if with_teacher is None:
        with_teacher = manifest.strategy.kind == "ser_diff"
    student = build_segmenter(cfg.net_config(), _seed(seed, 1))
    snapshot: dict = {}
    snap_epoch = max(1, round(cfg.epochs * cfg.teacher_snapshot_frac))

    def keep_snapshot(epoch: int) -> None:
        if with_teacher and epoch == snap_epoch:
            snapshot["net"] = copy.deepcopy(student)

    train_task(student, train, manifest.strategy, cfg, seed, stage=1, audit=audit,
               on_step=on_step, on_epoch=keep_snapshot, plain=True)
    teacher = None
    if with_teacher:
        teacher = train_teacher(train, cfg, _seed(seed, 2), snapshot=snapshot["net"],
                                warm_start=student, audit=audit, on_step=on_step)
    return student, teacher


def run_sequence(
    manifest: RunManifest,
    out_dir: str | Path | None = None,
    tasks: list[tuple[Dataset, Dataset, Dataset]] | None = None,
    surface_metrics: bool = True,
    teacher: Denoiser | None = None,
) -> RunResult:
    """Train through all tasks, filling the accuracy matrix after every stage.

    ``tasks`` may supply pre-generated (train, val, test) splits; by default
    they are generated from the manifest. A previously fitted ``teacher`` skips
    the teacher phase. With ``out_dir`` set, checkpoints, the accuracy matrix,
    the metrics stream, the manifest and a report are written there.
    """
    from .nets import save_checkpoint

    K = manifest.n_tasks
    if K < 2:
        raise ValueError("a continual run needs at least two tasks")
    cfg, strategy, seed = manifest.train, manifest.strategy, manifest.seed
    if tasks is None:
        tasks = [generate_task(spec, manifest.split) for spec in manifest.task_specs()]
    if len(tasks) != K:
        raise ValueError(f"expected {K} tasks, got {len(tasks)}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    stream = _JsonLines(out / "metrics.jsonl" if out is not None else None)

    audit = DataAudit()
    acc = metrics.AccMatrix(K)
    teacher_fp: list[str] = []
    prev_student: Segmenter | None = None
    ewc: EWCState | None = None
    sched = cfg.schedule()
    manifest.stage_fingerprints = []

    try:
        for k in range(1, K + 1):
            train = tasks[k - 1][0]
            if k == 1:
                need_teacher = strategy.kind == "ser_diff" and teacher is None
                student, fitted = first_stage(manifest, train, audit, stream, need_teacher)
                teacher = teacher if fitted is None else fitted
            else:
                bank = None
                if strategy.kind == "ser_diff" and strategy.lam > 0 and strategy.replay_ratio > 0:
                    c_cur, _ = _tensors(train)
                    bank = synthesize_replay_bank(teacher, c_cur, sched, _seed(seed, k, 17))
                train_task(student, train, strategy, cfg, seed, teacher=teacher,
                           prev_student=prev_student, ewc=ewc, replay_bank=bank,
                           stage=k, audit=audit, on_step=stream)
            if strategy.kind == "ewc":
                new = fisher_estimate(student, train, cfg.fisher_batches, cfg.batch_size,
                                      _seed(seed, k, 29), audit, k)
                ewc = new if ewc is None else ewc.merged(new)
            if strategy.kind == "kd":
                prev_student = freeze(copy.deepcopy(student))
            if strategy.kind == "ser_diff":
                teacher_fp.append(fingerprint(teacher))

            for i in range(1, k + 1):
                acc.set(i - 1, k - 1, evaluate(student, tasks[i - 1][2], audit, k).dice)
            stage_fp = {"stage": k, "student": fingerprint(student)}
            if teacher_fp:
                stage_fp["teacher"] = teacher_fp[-1]
            manifest.stage_fingerprints.append(stage_fp)
            log.info("stage %d/%d %s acc=%s", k, K, strategy.kind, acc.acc[:, k - 1].round(4).tolist())
            if out is not None:
                save_checkpoint(student, out / "checkpoints" / f"student_stage{k}", stage=k, seed=seed)
                if teacher_fp and k == 1:
                    save_checkpoint(teacher, out / "checkpoints" / "teacher", stage=1, seed=seed)
    finally:
        stream.close()

    scores = {
        i: evaluate(student, tasks[i - 1][2], audit, K, surface=surface_metrics) for i in range(1, K + 1)
    }
    result = RunResult(acc, metrics.forgetting_rate(acc), scores, manifest, audit, teacher_fp, student,
                       teacher if strategy.kind == "ser_diff" else None)
    if out is not None:
        acc.save(out / "acc_matrix.csv")
        (out / "manifest.json").write_text(json.dumps({"format": RUN_FORMAT, **manifest.to_dict()}, indent=2))
        (out / "report.json").write_text(json.dumps({"format": RUN_FORMAT, **result.report()}, indent=2))
    return result
