"""Leave-out experiments: splits, training runs, TRE reports and the ablation table."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import models, svf_baseline
from .phantom import Dataset4D, gt_deform, read_dataset
from .sampling import SurrogatePath

log = logging.getLogger(__name__)

SCENARIOS = ("MI", "ME", "EE")
MODES = ("sequential", "integrated", "trajectory", "identity", "oracle")
ABLATIONS = ("full", "spatial_only", "temporal_only", "none")
ALPHA = 0.05


class ProtocolViolation(RuntimeError):
    """A held-out frame's image or landmarks were read during training."""


# --- metric ------------------------------------------------------------------------

@dataclass
class TreResult:
    distances: np.ndarray
    mean: float
    std: float


def tre(predicted, target) -> TreResult:
    """Per-landmark Euclidean distances (mm), mean and population std."""
    p = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    q = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if p.shape != q.shape:
        raise ValueError(f"landmark lists differ in shape: {p.shape} vs {q.shape}")
    d = np.linalg.norm(p - q, axis=1)
    return TreResult(d, float(d.mean()), float(d.std()))


def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided paired t-test over matched per-landmark errors; returns (t, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    if np.allclose(a, b):
        return 0.0, 1.0
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


# --- split protocol --------------------------------------------------------------------

@dataclass(frozen=True)
class Split:
    scenario: str
    train: tuple
    held_out: tuple
    target: int
    reference: int

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def neighbours_per_phase(n_frames: int) -> int:
    """Extra frames omitted per breathing phase for the end-exhale scenario (1 for 10, 2 for 14)."""
    return max(1, (n_frames - 2) // 6)


def build_split(dataset: Dataset4D, scenario: str) -> Split:
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}")
    phases = [f.phase for f in dataset.frames]
    for needed in ("EI", scenario):
        if needed not in phases:
            raise ValueError(f"dataset lacks the {needed!r} phase label")
    ref = dataset.reference
    target = dataset.by_phase(scenario)
    held = {target.frame_id}
    if scenario == "EE":
        k = neighbours_per_phase(dataset.n)
        v_ee = target.volume_norm
        for inhale in (True, False):
            cands = [f for f in dataset.frames
                     if f.phase not in ("EI", "EE") and f.is_inhale == inhale and f.flow != 0]
            cands.sort(key=lambda f: (abs(f.volume_norm - v_ee), f.time))
            held.update(f.frame_id for f in cands[:k])
    train = tuple(f.frame_id for f in dataset.frames if f.frame_id not in held)
    return Split(scenario, train, tuple(sorted(held)), target.frame_id, ref.frame_id)


# --- access tracking ---------------------------------------------------------------------

class _TrackedFrame:
    def __init__(self, frame, tracker: "AccessTracker"):
        self._frame = frame
        self._tracker = tracker

    def __getattr__(self, name):
        return getattr(self._frame, name)

    @property
    def image(self):
        self._tracker.record(self._frame.frame_id, "image")
        return self._frame.image

    @property
    def landmarks(self):
        self._tracker.record(self._frame.frame_id, "landmarks")
        return self._frame.landmarks


class AccessTracker:
    """Records every image / landmark read through a wrapped dataset.

    Frames listed in ``forbidden`` raise :class:`ProtocolViolation` when
    ``strict`` is set; otherwise the read is only recorded.
    """

    def __init__(self, forbidden=(), strict: bool = True):
        self.forbidden = set(forbidden)
        self.strict = strict
        self.reads: list[tuple[int, str]] = []

    def record(self, frame_id: int, kind: str):
        self.reads.append((frame_id, kind))
        if self.strict and frame_id in self.forbidden:
            raise ProtocolViolation(f"{kind} of held-out frame {frame_id} read during training")

    def wrap(self, dataset: Dataset4D) -> Dataset4D:
        frames = [_TrackedFrame(f, self) for f in dataset.frames]
        return Dataset4D(frames, dataset.period, dataset.lung_mask, dataset.spec, dataset.source)

    def frames_read(self) -> set:
        return {fid for fid, _ in self.reads}

    def violations(self) -> list:
        return [r for r in self.reads if r[0] in self.forbidden]


# --- predictors ------------------------------------------------------------------------

class Predictor:
    """Maps reference-frame points to a target state given its time and surrogate."""

    def warp(self, points, t_to: float, s_to) -> np.ndarray:
        raise NotImplementedError


class IdentityPredictor(Predictor):
    def warp(self, points, t_to, s_to):
        return np.array(points, dtype=np.float64)


class OraclePredictor(Predictor):
    def __init__(self, dataset: Dataset4D):
        if dataset.spec is None:
            raise ValueError("the ground-truth oracle needs a phantom dataset")
        self.spec = dataset.spec
        self.t_ref = dataset.reference.time

    def warp(self, points, t_to, s_to):
        return gt_deform(self.spec, points, self.t_ref, t_to)


class SequentialPredictor(Predictor):
    def __init__(self, model: svf_baseline.SequentialModel):
        self.model = model

    def warp(self, points, t_to, s_to):
        return self.model.deformation(s_to)(points)


class NeuralPredictor(Predictor):
    def __init__(self, state: models.TrainState, path: SurrogatePath):
        self.state = state
        self.path = path
        self.nets = state.best_nets()

    def warp(self, points, t_to, s_to):
        st = self.state
        if st.mode == "trajectory":
            return models.predict_motion(st, points, st.reference_time, t_to, path=self.path, nets=self.nets)
        return models.predict_motion(st, points, st.reference_time, s_to=s_to, nets=self.nets)


# --- experiments -------------------------------------------------------------------------

def ablation_weights(weights, ablation: str):
    from dataclasses import replace
    if ablation == "full":
        return weights
    if ablation == "spatial_only":
        return replace(weights, alpha_t=0.0)
    if ablation == "temporal_only":
        return replace(weights, alpha_ph=0.0)
    if ablation == "none":
        return replace(weights, alpha_ph=0.0, alpha_t=0.0)
    raise ValueError(f"ablation must be one of {ABLATIONS}")


@dataclass
class ExperimentSpec:
    scenario: str
    dataset: str | None = None
    mode: str = "trajectory"
    ablation: str = "full"
    overrides: dict = field(default_factory=dict)
    seed: int = 0
    registration: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")

    def model_config(self) -> models.ModelConfig:
        cfg = models.ModelConfig.from_dict({**self.overrides, "mode": self.mode, "seed": self.seed})
        return cfg.with_overrides(weights=ablation_weights(cfg.weights, self.ablation))

    def registration_config(self) -> svf_baseline.RegistrationConfig:
        return svf_baseline.RegistrationConfig(**self.registration)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedRun:
    spec: ExperimentSpec
    split: Split
    predictor: Predictor
    state: models.TrainState | None = None
    sequential: svf_baseline.SequentialModel | None = None
    tracker: AccessTracker | None = None
    train_seconds: float = 0.0


@dataclass
class ExperimentReport:
    scenario: str
    mode: str
    ablation: str
    seed: int
    per_landmark: list
    mean: float
    std: float
    initial_per_landmark: list
    initial_mean: float
    initial_std: float
    runtime_s: float
    config: dict
    split: dict
    best_epoch: int | None = None
    best_val_tre: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(**d)

    def check_integrity(self, tol: float = 1e-9) -> bool:
        d = np.asarray(self.per_landmark)
        d0 = np.asarray(self.initial_per_landmark)
        return (abs(d.mean() - self.mean) <= tol and abs(d.std() - self.std) <= tol
                and abs(d0.mean() - self.initial_mean) <= tol and abs(d0.std() - self.initial_std) <= tol)


def full_path(dataset: Dataset4D) -> SurrogatePath:
    """Surrogate path through every acquired state (the signal exists even where images are withheld)."""
    return SurrogatePath.from_frames(dataset.frames, dataset.period)


def train_experiment(spec: ExperimentSpec, dataset: Dataset4D | None = None, progress=None,
                     strict: bool = True) -> TrainedRun:
    """Train the selected model on the split, with held-out frames guarded by an access tracker."""
    dataset = dataset if dataset is not None else read_dataset(spec.dataset)
    split = build_split(dataset, spec.scenario)
    tracker = AccessTracker(split.held_out, strict=strict)
    guarded = tracker.wrap(dataset)
    t0 = time.perf_counter()
    state = seq = None
    if spec.mode == "identity":
        predictor = IdentityPredictor()
    elif spec.mode == "oracle":
        predictor = OraclePredictor(dataset)
    elif spec.mode == "sequential":
        seq = svf_baseline.fit_sequential(guarded, split.train, spec.registration_config(), progress)
        predictor = SequentialPredictor(seq)
    else:
        state = models.train(guarded, split.train, spec.model_config(), progress=progress)
        predictor = NeuralPredictor(state, full_path(dataset))
    return TrainedRun(spec, split, predictor, state, seq, tracker, time.perf_counter() - t0)


def evaluate(run: TrainedRun, dataset: Dataset4D) -> ExperimentReport:
    ref = dataset.frame(run.split.reference)
    target = dataset.frame(run.split.target)
    t0 = time.perf_counter()
    warped = run.predictor.warp(ref.landmarks, target.time, target.surrogate)
    res = tre(warped, target.landmarks)
    init = tre(ref.landmarks, target.landmarks)
    spec = run.spec
    if spec.mode in ("integrated", "trajectory"):
        config = run.state.config.to_dict() if run.state else spec.model_config().to_dict()
    elif spec.mode == "sequential":
        config = spec.registration_config().to_dict()
    else:
        config = {}
    st = run.state
    return ExperimentReport(
        spec.scenario, spec.mode, spec.ablation, spec.seed, res.distances.tolist(), res.mean, res.std,
        init.distances.tolist(), init.mean, init.std, run.train_seconds + time.perf_counter() - t0,
        config, run.split.to_dict(),
        best_epoch=st.best_epoch if st else None,
        best_val_tre=(st.best_val_tre if st and np.isfinite(st.best_val_tre) else None))


def run_experiment(spec: ExperimentSpec, dataset: Dataset4D | None = None, progress=None) -> ExperimentReport:
    dataset = dataset if dataset is not None else read_dataset(spec.dataset)
    return evaluate(train_experiment(spec, dataset, progress), dataset)


# --- ablation table --------------------------------------------------------------------

VARIANTS = ("full", "spatial_only", "temporal_only")


def run_ablation(dataset: Dataset4D, scenarios=("MI", "ME", "EE"), overrides: dict | None = None,
                 seed: int = 0, variants=VARIANTS, progress=None) -> dict:
    """Trajectory model under each regularizer variant; returns a JSON-ready table."""
    overrides = dict(overrides or {})
    cells = {}
    for sc in scenarios:
        for var in variants:
            spec = ExperimentSpec(sc, mode="trajectory", ablation=var, overrides=overrides, seed=seed)
            rep = run_experiment(spec, dataset, progress)
            cells[f"{sc}/{var}"] = rep.to_dict()
    return ablation_table(cells, scenarios, variants)


def ablation_table(cells: dict, scenarios, variants) -> dict:
    tests = {}
    for sc in scenarios:
        for a, b in (("full", "spatial_only"), ("temporal_only", "spatial_only"), ("full", "temporal_only")):
            ka, kb = f"{sc}/{a}", f"{sc}/{b}"
            if ka in cells and kb in cells:
                t, p = paired_ttest(cells[ka]["per_landmark"], cells[kb]["per_landmark"])
                tests[f"{sc}: {a} vs {b}"] = {"t": t, "p": p, "significant": bool(p < ALPHA)}
    return {
        "scenarios": list(scenarios),
        "variants": list(variants),
        "rows": {
            "mean": {k: c["mean"] for k, c in cells.items()},
            "std": {k: c["std"] for k, c in cells.items()},
        },
        "initial": {sc: next(c["initial_mean"] for k, c in cells.items() if k.startswith(sc + "/"))
                    for sc in scenarios if any(k.startswith(sc + "/") for k in cells)},
        "paired_tests": tests,
        "cells": cells,
    }


# --- output formats --------------------------------------------------------------------

def format_report_text(report: ExperimentReport) -> str:
    lines = [
        f"scenario  {report.scenario}",
        f"mode      {report.mode} ({report.ablation})",
        f"seed      {report.seed}",
        "",
        f"{'':<10}{'mean':>10}{'std':>10}",
        f"{'initial':<10}{report.initial_mean:>10.3f}{report.initial_std:>10.3f}",
        f"{'model':<10}{report.mean:>10.3f}{report.std:>10.3f}",
        "",
        f"runtime   {report.runtime_s:.1f} s",
    ]
    return "\n".join(lines) + "\n"


def format_report_csv(report: ExperimentReport) -> str:
    rows = ["landmark,initial_tre_mm,tre_mm"]
    for i, (a, b) in enumerate(zip(report.initial_per_landmark, report.per_landmark)):
        rows.append(f"{i},{a!r},{b!r}")
    return "\n".join(rows) + "\n"


def format_table_text(table: dict) -> str:
    cols = [f"{sc}/{v}" for sc in table["scenarios"] for v in table["variants"]]
    cols = [c for c in cols if c in table["rows"]["mean"]]
    width = max(12, max(len(c) for c in cols) + 2) if cols else 12
    head = f"{'':<6}" + "".join(f"{c:>{width}}" for c in cols)
    lines = [head]
    for row in ("mean", "std"):
        lines.append(f"{row:<6}" + "".join(f"{table['rows'][row][c]:>{width}.3f}" for c in cols))
    if table.get("paired_tests"):
        lines.append("")
        for name, t in table["paired_tests"].items():
            lines.append(f"{name:<36} t={t['t']:+.3f}  p={t['p']:.4f}")
    return "\n".join(lines) + "\n"


def format_table_csv(table: dict) -> str:
    rows = ["scenario,variant,mean_mm,std_mm"]
    for sc in table["scenarios"]:
        for v in table["variants"]:
            k = f"{sc}/{v}"
            if k in table["rows"]["mean"]:
                rows.append(f"{sc},{v},{table['rows']['mean'][k]!r},{table['rows']['std'][k]!r}")
    return "\n".join(rows) + "\n"


def write_report(report: ExperimentReport, path) -> list[Path]:
    """``report.json`` plus ``.txt`` and ``.csv`` siblings."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    txt = p.with_suffix(".txt")
    txt.write_text(format_report_text(report), encoding="utf-8")
    csv = p.with_suffix(".csv")
    csv.write_text(format_report_csv(report), encoding="utf-8")
    return [p, txt, csv]


def write_table(table: dict, path) -> list[Path]:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(table, indent=2), encoding="utf-8")
    txt = p.with_suffix(".txt")
    txt.write_text(format_table_text(table), encoding="utf-8")
    csv = p.with_suffix(".csv")
    csv.write_text(format_table_csv(table), encoding="utf-8")
    return [p, txt, csv]
