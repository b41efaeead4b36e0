"""Analytic 4D breathing phantom with exact ground-truth motion.

Motion is the flow of a known time-dependent velocity field

    v(x, t) = a'(t) d(x) + h'(t) e(x),
    a(t) = a_max (1 - cos(2 pi t / T)) / 2,   h(t) = h_max sin(2 pi t / T),

with ``d`` a superior-inferior bump and ``e`` an anterior-posterior bump, both
vanishing on the box boundary. End-exhale (t = 0) is the rest anatomy, end-inhale
sits at t = T/2. The second mode makes inhale and exhale paths differ at equal
lung volume.

Axes: 0 = left-right, 1 = anterior-posterior, 2 = superior-inferior.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid_image import (LandmarkSet, Volume, read_landmarks, read_metaimage,
                         write_landmarks, write_metaimage)

SCHEMA_VERSION = 1
PHASES_FIXED = ("EE", "EI", "MI", "ME")


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: float = 2.0
    period: float = 4.0
    a_max: float = 16.0
    h_max: float = 4.0
    frames_per_cycle: int = 10
    n_landmarks: int = 60
    seed: int = 0
    render_steps: int = 32

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if min(self.dims) < 8 or self.spacing <= 0 or self.period <= 0:
            raise ValueError("phantom grid too small or non-positive spacing/period")
        if self.frames_per_cycle < 4 or self.frames_per_cycle % 2:
            raise ValueError("frames_per_cycle must be an even number >= 4")
        extent = min(self.extent)
        if not (0 <= self.a_max < extent / 4) or not (0 <= self.h_max < extent / 4):
            raise ValueError(f"amplitudes must stay below a quarter of the domain extent ({extent / 4:.1f} mm)")
        if self.n_landmarks < 1:
            raise ValueError("need at least one landmark")

    @property
    def extent(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * self.spacing

    @property
    def origin(self) -> np.ndarray:
        return -self.extent / 2

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + self.extent

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# --- analytic motion ---------------------------------------------------------

def _unit(spec: PhantomSpec, x):
    lo, _ = spec.box
    return (np.asarray(x, dtype=np.float64) - lo) / spec.extent


def _bumps(spec: PhantomSpec, x):
    u = np.clip(_unit(spec, x), 0.0, 1.0)
    sn = np.where((u > 0.0) & (u < 1.0), np.sin(np.pi * u), 0.0)  # exact zeros on the faces
    flat = sn * (2.0 - sn)  # quartic plateau around the box centre
    d = flat[..., 0] * flat[..., 1] * flat[..., 2]
    e = sn[..., 0] * sn[..., 1] * sn[..., 2]
    return d, e * e


def amplitude(spec: PhantomSpec, t):
    """a(t) / a_max: normalised lung volume, 0 at end-exhale, 1 at end-inhale."""
    return 0.5 * (1.0 - np.cos(2 * np.pi * np.asarray(t) / spec.period))


def amplitude_rate(spec: PhantomSpec, t):
    """d/dt of :func:`amplitude` (1/s)."""
    return (np.pi / spec.period) * np.sin(2 * np.pi * np.asarray(t) / spec.period)


def gt_velocity(spec: PhantomSpec, x, t) -> np.ndarray:
    """Ground-truth velocity (mm/s) at world points ``x`` (..., 3) and time ``t``."""
    x = np.asarray(x, dtype=np.float64)
    d, e = _bumps(spec, x)
    w = 2 * np.pi / spec.period
    ad = spec.a_max * 0.5 * w * np.sin(w * t)
    hd = spec.h_max * w * np.cos(w * t)
    v = np.zeros(x.shape)
    v[..., 1] = hd * e
    v[..., 2] = ad * d
    return v


def gt_velocity_from_surrogate(spec: PhantomSpec, x, volume, flow) -> np.ndarray:
    """Same field written as a function of the surrogate (V, dV/dt)."""
    x = np.asarray(x, dtype=np.float64)
    d, e = _bumps(spec, x)
    w = 2 * np.pi / spec.period
    v = np.zeros(x.shape)
    v[..., 1] = spec.h_max * w * (1.0 - 2.0 * np.asarray(volume)) * e
    v[..., 2] = spec.a_max * np.asarray(flow) * d
    return v


def gt_deform(spec: PhantomSpec, x, t_from, t_to, steps: int = 1024) -> np.ndarray:
    """Position at ``t_to`` of the particles at ``x`` at ``t_from`` (classical RK4)."""
    y = np.array(x, dtype=np.float64, copy=True)
    if t_from == t_to:
        return y
    h = (t_to - t_from) / steps
    t = t_from
    for _ in range(steps):
        k1 = gt_velocity(spec, y, t)
        k2 = gt_velocity(spec, y + 0.5 * h * k1, t + 0.5 * h)
        k3 = gt_velocity(spec, y + 0.5 * h * k2, t + 0.5 * h)
        k4 = gt_velocity(spec, y + h * k3, t + h)
        y += (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y


# --- anatomy -------------------------------------------------------------------

LUNG_AXES = np.array([0.30, 0.26, 0.34])  # semi-axes as fraction of the extent
BODY_AXES = np.array([0.44, 0.40, 0.47])
BLOB_COUNT = 28
BLOB_SIGMA_MM = (6.0, 10.0)


@dataclass
class Anatomy:
    lung_center: np.ndarray
    lung_axes: np.ndarray
    body_axes: np.ndarray
    blob_centers: np.ndarray
    blob_sigma: np.ndarray
    blob_amp: np.ndarray
    tumor_center: np.ndarray
    tumor_radius: float

    @classmethod
    def build(cls, spec: PhantomSpec) -> "Anatomy":
        rng = np.random.default_rng([spec.seed, 1])
        ext = spec.extent
        axes = LUNG_AXES * ext
        n_blobs = BLOB_COUNT
        centers = _inside_ellipsoid(rng, np.zeros(3), axes * 0.95, n_blobs)
        sig = rng.uniform(*BLOB_SIGMA_MM, n_blobs)
        amp = rng.uniform(0.25, 0.6, n_blobs)
        tumor = np.array([0.35, -0.2, -0.25]) * axes
        return cls(np.zeros(3), axes, BODY_AXES * ext, centers, sig, amp, tumor,
                   2.5 * spec.spacing)

    def lung_level(self, p):
        r = np.sqrt(np.sum(((p - self.lung_center) / self.lung_axes) ** 2, axis=-1))
        return r

    def intensity(self, p, spacing):
        edge = 0.75 * spacing
        r_body = np.sqrt(np.sum((p / self.body_axes) ** 2, axis=-1))
        r_lung = self.lung_level(p)
        mean_axis = float(np.mean(self.lung_axes))
        body = 0.5 * (1 - np.tanh((r_body - 1) * float(np.mean(self.body_axes)) / edge))
        lung = 0.5 * (1 - np.tanh((r_lung - 1) * mean_axis / edge))
        img = 0.1 + 0.9 * body - 0.7 * lung
        blobs = np.zeros(p.shape[:-1])
        for c, s, a in zip(self.blob_centers, self.blob_sigma, self.blob_amp):
            blobs += a * np.exp(-np.sum((p - c) ** 2, axis=-1) / (2 * s * s))
        img = img + lung * blobs
        dt = np.linalg.norm(p - self.tumor_center, axis=-1)
        img = img + 0.8 * 0.5 * (1 - np.tanh((dt - self.tumor_radius) / edge))
        return img

    def lung_mask(self, p):
        return self.lung_level(p) <= 1.0


def _inside_ellipsoid(rng, center, axes, count):
    out = []
    while len(out) < count:
        cand = rng.uniform(-1, 1, size=(4 * count, 3))
        cand = cand[np.sum(cand ** 2, axis=1) <= 1.0]
        out.extend(cand[: count - len(out)])
    return center + np.asarray(out) * axes


# --- dataset -------------------------------------------------------------------

@dataclass
class Frame:
    frame_id: int
    time: float
    volume_norm: float
    flow: float
    phase: str
    image: Volume | None
    landmarks: np.ndarray | None

    @property
    def surrogate(self) -> np.ndarray:
        return np.array([self.volume_norm, self.flow])

    @property
    def is_inhale(self) -> bool:
        return phase_of_flow(self.flow) == "inhale"


def phase_of_flow(flow: float) -> str:
    """Inhale/exhale sub-model selection by flow sign; zero flow counts as inhale."""
    return "inhale" if flow >= 0 else "exhale"


@dataclass
class Dataset4D:
    frames: list[Frame]
    period: float
    lung_mask: Volume | None = None
    spec: PhantomSpec | None = None
    source: Path | None = field(default=None, repr=False)

    def __post_init__(self):
        self.frames = sorted(self.frames, key=lambda f: f.time)
        phases = [f.phase for f in self.frames]
        for p in ("EI", "EE"):
            if phases.count(p) != 1:
                raise ValueError(f"dataset needs exactly one {p} frame, found {phases.count(p)}")

    @property
    def n(self) -> int:
        return len(self.frames)

    def by_phase(self, phase: str) -> Frame:
        for f in self.frames:
            if f.phase == phase:
                return f
        raise KeyError(phase)

    def frame(self, frame_id: int) -> Frame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    def index_of(self, frame_id: int) -> int:
        return [f.frame_id for f in self.frames].index(frame_id)

    @property
    def reference(self) -> Frame:
        return self.by_phase("EI")

    def surrogates(self) -> np.ndarray:
        return np.array([f.surrogate for f in self.frames])

    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])

    def world_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.reference.image.box


def frame_schedule(spec: PhantomSpec) -> list[tuple[float, str]]:
    """Acquisition times and phase labels for one cycle.

    Intermediate states sit at equidistant amplitude levels that include the
    half-amplitude level (MI / ME).
    """
    k = (spec.frames_per_cycle - 2) // 2
    denom = k + 1 if k % 2 else k + 2
    levels = np.arange(1, k + 1) / denom
    T = spec.period
    t_in = T / (2 * np.pi) * np.arccos(1.0 - 2.0 * levels)
    sched = [(0.0, "EE")]
    for i, (lv, t) in enumerate(zip(levels, t_in), 1):
        sched.append((float(t), "MI" if np.isclose(lv, 0.5) else f"inhale{i}"))
    sched.append((T / 2, "EI"))
    for i, (lv, t) in enumerate(zip(levels[::-1], t_in[::-1]), 1):
        sched.append((float(T - t), "ME" if np.isclose(lv, 0.5) else f"exhale{i}"))
    return sched


def generate(spec: PhantomSpec) -> Dataset4D:
    anatomy = Anatomy.build(spec)
    grid = Volume.from_array(np.zeros(spec.dims), (spec.spacing,) * 3, spec.origin)
    nodes = grid.world_grid()
    rng = np.random.default_rng([spec.seed, 2])
    rest_lm = _inside_ellipsoid(rng, anatomy.lung_center, anatomy.lung_axes * 0.8, spec.n_landmarks)
    frames = []
    mask = None
    for fid, (t, phase) in enumerate(frame_schedule(spec)):
        rest_pos = gt_deform(spec, nodes, t, 0.0, steps=spec.render_steps)
        img = anatomy.intensity(rest_pos, spec.spacing)
        vol = Volume(spec.dims, (spec.spacing,) * 3, tuple(spec.origin), img)
        lm = gt_deform(spec, rest_lm, 0.0, t)
        frames.append(Frame(fid, t, float(amplitude(spec, t)), float(amplitude_rate(spec, t)),
                            phase, vol, lm))
        if phase == "EI":
            mask = Volume(spec.dims, (spec.spacing,) * 3, tuple(spec.origin),
                          anatomy.lung_mask(rest_pos).astype(np.float64))
    ds = Dataset4D(frames, spec.period, mask, spec)
    return ds


def min_jacobian_determinant(spec: PhantomSpec, t_from, t_to, n=16, h=0.25, steps=256) -> float:
    """Smallest central-difference det(d gt_deform / dx) on an ``n``^3 probe grid."""
    lo, hi = spec.box
    axes = [np.linspace(lo[a] + h, hi[a] - h, n) for a in range(3)]
    p = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    jac = np.empty((len(p), 3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        jac[:, :, j] = (gt_deform(spec, p + e, t_from, t_to, steps)
                        - gt_deform(spec, p - e, t_from, t_to, steps)) / (2 * h)
    return float(np.linalg.det(jac).min())


# --- files -------------------------------------------------------------------------

def write_dataset(ds: Dataset4D, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for f in ds.frames:
        img = f"frame_{f.frame_id:03d}.mhd"
        lm = f"lm_{f.frame_id:03d}.csv"
        write_metaimage(f.image, out / img)
        write_landmarks(f.landmarks, out / lm)
        entries.append({"frame_id": f.frame_id, "time_s": f.time, "volume": f.volume_norm,
                        "flow": f.flow, "phase": f.phase, "image": img, "landmarks": lm})
    lo, hi = ds.world_box()
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "spec": ds.spec.to_dict() if ds.spec else None,
        "period_s": ds.period,
        "frames": entries,
        "world_box": {"min": lo.tolist(), "max": hi.tolist()},
    }
    if ds.lung_mask is not None:
        write_metaimage(ds.lung_mask, out / "lung_mask.mhd")
        manifest["lung_mask"] = "lung_mask.mhd"
    path = out / "dataset.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def read_dataset(path) -> Dataset4D:
    path = Path(path)
    if path.is_dir():
        path = path / "dataset.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema {manifest.get('schema_version')!r}")
    root = path.parent
    frames = []
    for e in manifest["frames"]:
        frames.append(Frame(int(e["frame_id"]), float(e["time_s"]), float(e["volume"]),
                            float(e["flow"]), e["phase"], read_metaimage(root / e["image"]),
                            read_landmarks(root / e["landmarks"], e["frame_id"]).points))
    mask = read_metaimage(root / manifest["lung_mask"]) if manifest.get("lung_mask") else None
    spec = PhantomSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None
    period = manifest.get("period_s") or (spec.period if spec else None)
    return Dataset4D(frames, float(period), mask, spec, source=path)


def landmark_set(frame: Frame) -> LandmarkSet:
    return LandmarkSet(frame.landmarks, frame.frame_id)


def spec_key(spec: PhantomSpec) -> str:
    import hashlib
    blob = json.dumps(spec.to_dict(), sort_keys=True).encode()
    return hashlib.sha1(blob).hexdigest()[:12]


def cached_phantom(spec: PhantomSpec, cache_dir) -> Dataset4D:
    """Generate once per spec under ``cache_dir`` and reload afterwards."""
    target = Path(cache_dir) / f"phantom_{spec_key(spec)}"
    manifest = target / "dataset.json"
    if not manifest.exists():
        write_dataset(generate(spec), target)
    return read_dataset(manifest)
