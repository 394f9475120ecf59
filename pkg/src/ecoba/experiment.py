"""Batch attack runs, aggregation into step-size tables and confidence curves."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import METHODS, MODES, AttackTrace, run_attack
from .dataset import DatasetSplit, LabeledSample
from .images import write_image
from .model import Model, predict

SUMMARY_HEADER = "method,arch,dataset,mean_success_step,success_rate,mean_l0_at_success"
CURVE_HEADER = "method,k,mean_conf_true,accuracy"


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    arch: str = "mlp2"
    methods: tuple[str, ...] = METHODS
    sample_count: int = 100
    k_max: int = 30
    seed: int = 0
    mode: str = "static"
    threads: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


class NotEnoughSamples(RuntimeError):
    pass


def select_samples(model: Model, split: DatasetSplit, n: int, seed: int = 0) -> list[LabeledSample]:
    """First ``n`` test samples, in seeded shuffle order, that ``model`` classifies correctly."""
    if n <= 0:
        return []
    order = np.random.default_rng(seed).permutation(len(split.test_x))
    chosen: list[LabeledSample] = []
    for start in range(0, len(order), 1024):
        idx = order[start:start + 1024]
        ok = predict(model, split.test_x[idx]).argmax(axis=1) == split.test_y[idx]
        chosen.extend(split.test_sample(int(i)) for i in idx[ok])
        if len(chosen) >= n:
            return chosen[:n]
    raise NotEnoughSamples(f"only {len(chosen)} correctly classified test samples, wanted {n}")


@dataclass
class MethodSummary:
    method: str
    mean_success_step: float
    success_rate: float
    mean_l0_at_success: float
    mean_conf: list[float]  # index k = 0..k_max
    accuracy: list[float]
    mean_l0: list[float]


@dataclass
class ExperimentReport:
    dataset: str
    arch: str
    k_max: int
    sample_ids: list[int] = field(default_factory=list)
    traces: dict[str, list[AttackTrace]] = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return list(self.traces)

    def summary(self, method: str) -> MethodSummary:
        return summarize(method, self.traces[method], self.k_max)


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else math.nan


def summarize(method: str, traces: list[AttackTrace], k_max: int) -> MethodSummary:
    """Pure fold over traces. Success-step means are over successful samples only."""
    steps = [t.success_step for t in traces]
    won = [(t, s) for t, s in zip(traces, steps) if s is not None]
    ks = range(k_max + 1)
    return MethodSummary(
        method=method,
        mean_success_step=_mean([s for _, s in won]),
        success_rate=len(won) / len(traces) if traces else math.nan,
        mean_l0_at_success=_mean([t.step_at(s).l0 for t, s in won]),
        mean_conf=[_mean([t.conf_true(k) for t in traces]) for k in ks],
        accuracy=[_mean([t.step_at(k).predicted == t.ground_truth for t in traces]) for k in ks],
        mean_l0=[_mean([t.step_at(k).l0 for t in traces]) for k in ks],
    )


def run_experiment(cfg: ExperimentConfig, model: Model, split: DatasetSplit,
                   samples: list[LabeledSample] | None = None) -> ExperimentReport:
    """Attack every selected sample with every enabled method up to ``k_max``."""
    if samples is None:
        samples = select_samples(model, split, cfg.sample_count, cfg.seed)
    report = ExperimentReport(split.name, model.arch_id, cfg.k_max, [s.index for s in samples])

    def job(args):
        method, s = args
        return run_attack(model, s.image, s.label, cfg.k_max, method, cfg.mode)

    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        for method in cfg.methods:
            # map preserves sample order, so the fold below is deterministic
            report.traces[method] = list(pool.map(job, [(method, s) for s in samples]))
    return report


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def summary_rows(report: ExperimentReport) -> list[str]:
    rows = []
    for method in report.methods:
        s = report.summary(method)
        rows.append(f"{method},{report.arch},{report.dataset},{_fmt(s.mean_success_step)},"
                    f"{_fmt(s.success_rate)},{_fmt(s.mean_l0_at_success)}")
    return rows


def curve_rows(report: ExperimentReport) -> list[str]:
    rows = []
    for method in report.methods:
        s = report.summary(method)
        for k in range(report.k_max + 1):
            rows.append(f"{method},{k},{_fmt(s.mean_conf[k])},{_fmt(s.accuracy[k])}")
    return rows


def write_csv(path, header: str, rows: list[str]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join([header] + rows) + "\n", encoding="ascii", newline="\n")


def emit_report(report: ExperimentReport, path) -> tuple[Path, Path]:
    """Write ``summary.csv`` and ``curves.csv`` into directory ``path``."""
    path = Path(path)
    write_csv(path / "summary.csv", SUMMARY_HEADER, summary_rows(report))
    write_csv(path / "curves.csv", CURVE_HEADER, curve_rows(report))
    return path / "summary.csv", path / "curves.csv"


def interpolation_strip(classifier, x, y: int, method: str, ks, out_dir=None,
                        mode: str = "static", trace: AttackTrace | None = None):
    """Adversarial image at each ``k`` in ``ks`` with its predicted label.

    Returns ``[(k, image, predicted), ...]``. With ``out_dir`` each frame is
    written as ``<method>_k<k>_pred<label>.{pgm,png}``.
    """
    ks = sorted(set(int(k) for k in ks))
    if trace is None:
        trace = run_attack(classifier, x, y, max(ks, default=0), method, mode)
    frames = [(k, trace.image_at(k), trace.step_at(k).predicted) for k in ks]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for k, img, pred in frames:
            write_image(out_dir / f"{method}_k{k:03d}_pred{pred}", img)
    return frames
