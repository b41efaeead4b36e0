"""Sequential two-stage baseline: SVF registration to a reference, then OLS.

Velocities live on a coarse control grid. The exponential is computed by
scaling and squaring on that grid, with compositions done by trilinear
interpolation of the displacement grid. Gradients for registration are
propagated back through every squaring step by hand.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .diff_net import Adam, NonFiniteError, read_container, write_container
from .grid_image import Volume, sample_trilinear, sample_with_gradient
from .losses import ncc
from .phantom import Dataset4D, phase_of_flow

log = logging.getLogger(__name__)

TURNING_FLOW = 1e-9


# --- vector fields on a regular grid ---------------------------------------------

class _Stencil:
    """Trilinear weights of a set of points on a grid, reusable for the adjoint."""

    def __init__(self, dims, origin, spacing, points):
        dims = np.asarray(dims)
        q = (np.asarray(points, dtype=np.float64) - origin) / spacing
        upper = dims - 1
        self.clamped = (q < 0) | (q > upper)
        q = np.clip(q, 0, upper)
        i0 = np.minimum(np.floor(q).astype(np.int64), upper - 1)
        f = q - i0
        self.f = f
        self.spacing = np.asarray(spacing, dtype=np.float64)
        nx, ny = dims[0], dims[1]
        base = i0[:, 0] + nx * (i0[:, 1] + ny * i0[:, 2])
        offs = []
        wts = []
        for cz in (0, 1):
            for cy in (0, 1):
                for cx in (0, 1):
                    offs.append(base + cx + nx * (cy + ny * cz))
                    wx = f[:, 0] if cx else 1 - f[:, 0]
                    wy = f[:, 1] if cy else 1 - f[:, 1]
                    wz = f[:, 2] if cz else 1 - f[:, 2]
                    wts.append(wx * wy * wz)
        self.idx = np.stack(offs, axis=1)      # (N, 8)
        self.w = np.stack(wts, axis=1)         # (N, 8)
        self.size = int(np.prod(dims))

    def sample(self, flat):
        """``flat`` is (size, C); returns (N, C)."""
        return (self.w[:, :, None] * flat[self.idx]).sum(axis=1)

    def adjoint(self, g):
        """Transpose of :meth:`sample`: scatter (N, C) back to (size, C)."""
        out = np.empty((self.size, g.shape[1]))
        idx = self.idx.ravel()
        for c in range(g.shape[1]):
            out[:, c] = np.bincount(idx, weights=(self.w * g[:, c:c + 1]).ravel(), minlength=self.size)
        return out

    def spatial_jacobian(self, flat):
        """d sample / d point, (N, C, 3); zero along clamped axes."""
        f = self.f
        v = flat[self.idx].reshape(len(f), 2, 2, 2, flat.shape[1])  # [n, cz, cy, cx, c]
        wx = np.stack([1 - f[:, 0], f[:, 0]], axis=1)
        wy = np.stack([1 - f[:, 1], f[:, 1]], axis=1)
        wz = np.stack([1 - f[:, 2], f[:, 2]], axis=1)
        wzy = (wz[:, :, None] * wy[:, None, :])[..., None]
        wzx = (wz[:, :, None] * wx[:, None, :])[..., None]
        wyx = (wy[:, :, None] * wx[:, None, :])[..., None]
        dx = ((v[:, :, :, 1] - v[:, :, :, 0]) * wzy).sum(axis=(1, 2))
        dy = ((v[:, :, 1, :] - v[:, :, 0, :]) * wzx).sum(axis=(1, 2))
        dz = ((v[:, 1] - v[:, 0]) * wyx).sum(axis=(1, 2))
        jac = np.stack([dx, dy, dz], axis=2) / self.spacing
        jac *= ~self.clamped[:, None, :]
        return jac


@dataclass
class SvfGrid:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    velocities: np.ndarray  # (prod(dims), 3), x-fastest node order
    step_spacing: float | None = None  # length scale bounding one squaring step (mm)
    refine: int = 2                    # squaring grid = control grid refined by this factor

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        self.velocities = np.asarray(self.velocities, dtype=np.float64).reshape(-1, 3)
        if self.velocities.shape[0] != int(np.prod(self.dims)):
            raise ValueError("velocity count does not match control grid")
        if not np.all(np.isfinite(self.velocities)):
            raise ValueError("velocities must be finite")

    @classmethod
    def covering(cls, vol: Volume, stride: int = 4, refine: int = 2) -> "SvfGrid":
        """Zero field on a control grid of ``stride`` voxels that covers ``vol``."""
        dims = tuple(int(math.ceil((d - 1) / stride)) + 1 for d in vol.dims)
        spacing = tuple(s * stride for s in vol.spacing)
        return cls(dims, spacing, vol.origin, np.zeros((int(np.prod(dims)), 3)),
                   step_spacing=min(vol.spacing), refine=max(1, min(refine, stride)))

    def with_velocities(self, v) -> "SvfGrid":
        return SvfGrid(self.dims, self.spacing, self.origin, np.array(v, dtype=np.float64),
                       self.step_spacing, self.refine)

    def nodes(self) -> np.ndarray:
        return _grid_nodes(self.dims, self.spacing, self.origin)

    def stencil(self, points) -> _Stencil:
        return _Stencil(self.dims, np.asarray(self.origin), np.asarray(self.spacing), points)

    def fine(self) -> "_Lattice":
        r = self.refine
        return _Lattice(tuple((d - 1) * r + 1 for d in self.dims),
                        tuple(s / r for s in self.spacing), self.origin)

    def squarings(self) -> int:
        """Step bound ``ceil(log2(max|v| / (0.5 h)))`` plus two accuracy squarings."""
        vmax = float(np.max(np.linalg.norm(self.velocities, axis=1))) if self.velocities.size else 0.0
        unit = 0.5 * (self.step_spacing or min(self.spacing))
        if vmax == 0.0:
            return 0
        return max(0, int(math.ceil(math.log2(vmax / unit)))) + EXTRA_SQUARINGS


EXTRA_SQUARINGS = 2


def _grid_nodes(dims, spacing, origin):
    axes = [origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel(order="F") for a in g], axis=1)


@dataclass(frozen=True)
class _Lattice:
    dims: tuple
    spacing: tuple
    origin: tuple

    def nodes(self):
        return _grid_nodes(self.dims, self.spacing, self.origin)

    def stencil(self, points) -> _Stencil:
        return _Stencil(self.dims, np.asarray(self.origin), np.asarray(self.spacing), points)


@dataclass
class Deformation:
    """Dense map ``x -> x + u(x)`` with ``u`` trilinear on a lattice."""
    lattice: _Lattice
    displacement: np.ndarray  # (nodes, 3)

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts + self.lattice.stencil(pts).sample(self.displacement)


@dataclass
class _SquaringTape:
    scale: float
    upsample: _Stencil
    stencils: list = field(default_factory=list)
    fields: list = field(default_factory=list)


def _exp_forward(svf: SvfGrid, K: int, keep=False):
    lat = svf.fine()
    nodes = lat.nodes()
    up = svf.stencil(nodes)
    scale = 2.0 ** (-K)
    u = up.sample(svf.velocities) * scale
    tape = _SquaringTape(scale, up) if keep else None
    for _ in range(K):
        st = lat.stencil(nodes + u)
        if keep:
            tape.stencils.append(st)
            tape.fields.append(u)
        u = u + st.sample(u)
    return lat, u, tape


def _exp_backward(tape: _SquaringTape, g_u):
    for st, u in zip(reversed(tape.stencils), reversed(tape.fields)):
        jac = st.spatial_jacobian(u)                 # (m, 3, 3) d w / d y
        g_u = g_u + st.adjoint(g_u) + np.einsum("nij,ni->nj", jac, g_u)
    return tape.upsample.adjoint(g_u * tape.scale)


def exp_svf(svf: SvfGrid, squarings: int | None = None) -> Deformation:
    """Group exponential of a stationary velocity field by scaling and squaring.

    The control velocities are interpolated onto the refined squaring lattice,
    scaled by ``2**-K`` and composed with themselves ``K`` times.
    """
    K = svf.squarings() if squarings is None else squarings
    lat, u, _ = _exp_forward(svf, K)
    return Deformation(lat, u)


def euler_flow(svf: SvfGrid, points, steps: int = 4096) -> np.ndarray:
    """Reference flow of the interpolated stationary field over unit time."""
    y = np.array(points, dtype=np.float64, copy=True).reshape(-1, 3)
    h = 1.0 / steps
    for _ in range(steps):
        y += h * svf.stencil(y).sample(svf.velocities)
    return y


# --- registration ----------------------------------------------------------------

@dataclass
class RegistrationConfig:
    """Registration settings.

    Optimisation runs in ``len(smoothing)`` stages of equal length; stage ``i``
    compares Gaussian-smoothed copies of both images (sigma in voxels, 0 = raw)
    and restarts the cosine learning-rate decay. The returned grid uses
    ``refine`` for its exponential; the optimisation loop uses ``opt_refine``.
    """
    stride: int = 4
    alpha: float = 0.05
    iterations: int = 300
    lr_voxels: float = 1.0
    final_lr_fraction: float = 0.01
    mask_dilation: int = 2
    smoothing: tuple = (4.0, 2.0, 0.0)
    refine: int = 2
    opt_refine: int = 1
    adam_eps: float = 1e-6  # above round-off gradients near a perfect match

    def __post_init__(self):
        self.smoothing = tuple(float(x) for x in self.smoothing)
        if self.iterations < 0 or self.stride < 1 or self.alpha < 0 or self.lr_voxels <= 0 or self.adam_eps <= 0:
            raise ValueError("invalid registration config")
        if not self.smoothing or min(self.smoothing) < 0:
            raise ValueError("smoothing schedule must be a non-empty list of sigmas >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _diffusion(v, dims, spacing):
    """Mean squared forward-difference gradient of the field and its gradient."""
    f = v.reshape(dims[2], dims[1], dims[0], 3)  # [k, j, i] view of x-fastest nodes
    grad = np.zeros_like(f)
    total = 0.0
    count = 0
    for axis, h in zip((2, 1, 0), spacing):
        d = np.diff(f, axis=axis) / h
        total += float(np.sum(d * d))
        count += d.size
        gd = 2.0 * d / h
        pad = [(0, 0)] * 4
        pad[axis] = (1, 0)
        grad -= np.pad(gd, [(0, 0) if a != axis else (0, 1) for a in range(4)])
        grad += np.pad(gd, pad)
    return total / count, grad.reshape(-1, 3) / count


def registration_points(fixed: Volume, mask: Volume | None, dilation: int = 2) -> np.ndarray:
    if mask is None:
        return fixed.world_grid()
    m = mask.data > 0.5
    if dilation:
        m = ndimage.binary_dilation(m, iterations=dilation)
    idx = np.flatnonzero(m.ravel(order="F"))
    return fixed.world_grid()[idx]


def registration_loss(svf: SvfGrid, fixed_vals, moving: Volume, points, alpha, K, with_grad=True):
    lat, u, tape = _exp_forward(svf, K, keep=with_grad)
    st = lat.stencil(points)
    warped_pts = points + st.sample(u)
    vals, grad_img, flag = sample_with_gradient(moving, warped_pts)
    keep = ~flag
    if keep.sum() < 2:
        raise NonFiniteError("all registration points left the image domain")
    value, g_vals, degenerate = ncc(fixed_vals[keep], vals[keep], return_grad=True)
    reg, g_reg = _diffusion(svf.velocities, svf.dims, svf.spacing)
    loss = (1.0 - value) + alpha * reg
    if not with_grad:
        return loss, None
    g_m = np.zeros(len(points))
    g_m[keep] = -g_vals
    g_pts = g_m[:, None] * grad_img
    g_u = st.adjoint(g_pts)
    g_v = _exp_backward(tape, g_u) + alpha * g_reg
    return loss, g_v


def _smoothed(vol: Volume, sigma: float) -> Volume:
    return vol.with_data(ndimage.gaussian_filter(vol.data, sigma, mode="nearest")) if sigma else vol


def register_pair(fixed: Volume, moving: Volume, config: RegistrationConfig | None = None,
                  mask: Volume | None = None) -> SvfGrid:
    """Fit ``fixed ~ moving o exp(v)`` by Adam over control-grid velocities."""
    config = config or RegistrationConfig()
    if not fixed.same_grid(moving):
        raise ValueError("fixed and moving volumes must share a grid")
    svf = SvfGrid.covering(fixed, config.stride, refine=config.opt_refine)
    points = registration_points(fixed, mask, config.mask_dilation)
    v = svf.velocities.copy()
    lr0 = config.lr_voxels * min(fixed.spacing)
    opt = Adam([v], lr=lr0, eps=config.adam_eps)
    stages = len(config.smoothing)
    per_stage = [config.iterations // stages + (i < config.iterations % stages) for i in range(stages)]
    best_loss, best_v = np.inf, v.copy()
    it = 0
    for sigma, n_it in zip(config.smoothing, per_stage):
        f_s, m_s = _smoothed(fixed, sigma), _smoothed(moving, sigma)
        fixed_vals = sample_trilinear(f_s, points)
        # the best iterate is tracked on the final (unsmoothed) objective only
        track = sigma == config.smoothing[-1]
        for i in range(n_it):
            cur = svf.with_velocities(v)
            loss, g = registration_loss(cur, fixed_vals, m_s, points, config.alpha, cur.squarings())
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise NonFiniteError(f"registration diverged at iteration {it} (loss={loss})")
            if track and loss < best_loss:
                best_loss, best_v = loss, v.copy()
            frac = i / max(1, n_it - 1)
            decay = config.final_lr_fraction + (1 - config.final_lr_fraction) * 0.5 * (1 + math.cos(math.pi * frac))
            opt.step([v], [g], lr=lr0 * decay)
            it += 1
        if not track:
            best_v = v.copy()
    fixed_vals = sample_trilinear(_smoothed(fixed, config.smoothing[-1]), points)
    final = svf.with_velocities(v)
    loss, _ = registration_loss(final, fixed_vals, _smoothed(moving, config.smoothing[-1]), points,
                                config.alpha, final.squarings(), False)
    if loss < best_loss:
        best_loss, best_v = loss, v
    log.debug("registration finished: best loss %.5f", best_loss)
    out = svf.with_velocities(best_v)
    out.refine = max(1, min(config.refine, config.stride))
    return out


# --- correspondence model ----------------------------------------------------------

@dataclass
class LinearCorrespondence:
    B: np.ndarray      # (3m, n_s)
    b0: np.ndarray     # (3m,)
    rank_deficient: bool = False

    @property
    def m(self) -> int:
        return self.b0.size // 3

    def predict(self, s) -> np.ndarray:
        return self.B @ np.asarray(s, dtype=np.float64) + self.b0


def fit_ols(targets, surrogates, ridge: float = 1e-8) -> LinearCorrespondence:
    """Least squares ``V_j ~ B s_j + b0`` over stacked targets (n, 3m) or SvfGrids."""
    Y = np.array([t.velocities.ravel() if isinstance(t, SvfGrid) else np.ravel(t) for t in targets])
    S = np.atleast_2d(np.asarray(surrogates, dtype=np.float64))
    n, n_s = S.shape
    if Y.shape[0] != n:
        raise ValueError("one surrogate vector per target is required")
    if n < n_s + 1:
        raise ValueError(f"need at least {n_s + 1} observations, got {n}")
    X = np.hstack([S, np.ones((n, 1))])
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    if diag.min() > 1e-10 * max(1.0, diag.max()):
        coef = np.linalg.solve(R, Q.T @ Y)
        return LinearCorrespondence(coef[:n_s].T.copy(), coef[n_s].copy(), False)
    s_mean = S.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Sc = S - s_mean
    B = np.linalg.solve(Sc.T @ Sc + ridge * np.eye(n_s), Sc.T @ (Y - y_mean))
    b0 = y_mean - s_mean @ B
    log.warning("rank-deficient surrogate design; ridge fallback with delta=%g", ridge)
    return LinearCorrespondence(B.T.copy(), b0, True)


@dataclass
class SequentialModel:
    grid: SvfGrid
    models: dict[str, LinearCorrespondence]

    def sub_model(self, s) -> str:
        flow = float(np.asarray(s)[1])
        return phase_of_flow(0.0 if abs(flow) < TURNING_FLOW else flow)

    def velocity(self, s) -> SvfGrid:
        lc = self.models[self.sub_model(s)]
        return self.grid.with_velocities(lc.predict(s).reshape(-1, 3))

    def deformation(self, s) -> Deformation:
        return exp_svf(self.velocity(s))

    def save(self, path, **meta):
        arrays = {}
        header = {"mode": "OLS", "grid": {"dims": list(self.grid.dims), "spacing": list(self.grid.spacing),
                                          "origin": list(self.grid.origin),
                                          "step_spacing": self.grid.step_spacing,
                                          "refine": self.grid.refine},
                  "phases": sorted(self.models), **meta}
        for k, lc in self.models.items():
            arrays[f"{k}/B"] = lc.B.astype(np.float32)
            arrays[f"{k}/b0"] = lc.b0.astype(np.float32)
        return write_container(path, header, arrays)

    @classmethod
    def load(cls, path) -> "SequentialModel":
        header, arrays = read_container(path)
        if header.get("mode") != "OLS":
            raise ValueError(f"{path}: not an OLS container")
        g = header["grid"]
        grid = SvfGrid(g["dims"], g["spacing"], g["origin"], np.zeros((int(np.prod(g["dims"])), 3)),
                       g.get("step_spacing"), g.get("refine", 2))
        models = {k: LinearCorrespondence(arrays[f"{k}/B"].astype(np.float64),
                                          arrays[f"{k}/b0"].astype(np.float64)) for k in header["phases"]}
        return cls(grid, models)


def predict_sequential(model: SequentialModel, s_new) -> Deformation:
    return model.deformation(s_new)


def save_svf(svf: SvfGrid, path, **meta):
    header = {"mode": "SVF", "grid": {"dims": list(svf.dims), "spacing": list(svf.spacing),
                                      "origin": list(svf.origin), "step_spacing": svf.step_spacing,
                                      "refine": svf.refine},
              **meta}
    return write_container(path, header, {"velocities": svf.velocities.astype(np.float32)})


def load_svf(path) -> SvfGrid:
    header, arrays = read_container(path)
    if header.get("mode") != "SVF":
        raise ValueError(f"{path}: not an SVF container")
    g = header["grid"]
    return SvfGrid(g["dims"], g["spacing"], g["origin"], arrays["velocities"].astype(np.float64),
                   g.get("step_spacing"), g.get("refine", 2))


def fit_sequential(dataset: Dataset4D, train_ids, config: RegistrationConfig | None = None,
                   progress=None) -> SequentialModel:
    """Register every training frame to the EI reference and fit per-phase OLS models."""
    config = config or RegistrationConfig()
    ref = dataset.reference
    fixed = ref.image
    grid = SvfGrid.covering(fixed, config.stride, refine=config.refine)
    svfs, surr, phases = [], [], []
    for fid in sorted(train_ids):
        f = dataset.frame(fid)
        if f.frame_id == ref.frame_id:
            svf = grid
        else:
            svf = register_pair(fixed, f.image, config, dataset.lung_mask)
        if progress:
            progress(fid)
        svfs.append(svf)
        surr.append(f.surrogate)
        phases.append(f.flow)
    max_flow = max(abs(p) for p in phases) or 1.0
    models = {}
    for phase in ("inhale", "exhale"):
        sel = [i for i, fl in enumerate(phases)
               if abs(fl) <= TURNING_FLOW * max_flow or phase_of_flow(fl) == phase]
        models[phase] = fit_ols([svfs[i] for i in sel], [surr[i] for i in sel])
    return SequentialModel(grid, models)
