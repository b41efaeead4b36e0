"""Surrogate-driven neural motion models.

``integrated``: two displacement networks (inhale / exhale) registering every
frame to the end-inhale reference, ``phi(x, s) = x + f(x, s)``.

``trajectory``: one velocity network ``v(x, s(t))`` whose flow, integrated by
explicit Euler between any two acquisition times, maps frame ``j`` onto frame
``k``. Training differentiates through the whole Euler chain, including the
per-node Jacobian and temporal-derivative regularizers.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .diff_net import Adam, FieldNet, NonFiniteError, net_arrays, net_from_arrays, read_container, write_container
from .grid_image import sample_trilinear, sample_with_gradient
from .losses import LossWeights, ncc, neo_hookean, temporal_tv
from .phantom import Dataset4D, phase_of_flow
from .sampling import SpatialSampler, SurrogatePath, epoch_rng, surrogate_sample

log = logging.getLogger(__name__)

MODES = ("integrated", "trajectory")
LOG_COLUMNS = ("epoch", "loss", "ncc_term", "rph_term", "rt_term", "val_tre_mean")
CONTAINER_TAGS = {"integrated": "INTEGRATED", "trajectory": "TRAJECTORY"}


class ConfigError(ValueError):
    """Invalid model configuration."""


class NonReferenceSource(ValueError):
    """The integrated model only maps out of its reference state."""


class TrainingDiverged(NonFiniteError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class ModelConfig:
    mode: str = "trajectory"
    hidden: tuple = (256, 256, 256)
    omega0: float = 30.0
    points_per_epoch: int = 10000
    image_fraction: float = 0.4
    euler_steps: int = 8
    inference_steps: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-5
    epochs: int = 2000
    seed: int = 0
    val_every: int = 25
    init_scale: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.euler_steps < 1 or self.inference_steps < 1:
            raise ConfigError("euler_steps and inference_steps must be >= 1")
        if self.points_per_epoch < 1:
            raise ConfigError("points_per_epoch must be >= 1")
        if not 0.0 < self.image_fraction <= 1.0:
            raise ConfigError("image_fraction must lie in (0, 1]")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden layer widths must be positive")
        if self.lr <= 0 or self.epochs < 0 or self.val_every < 1:
            raise ConfigError("lr must be positive, epochs >= 0, val_every >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def phase_split(self) -> bool:
        return self.mode == "integrated"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **kw) -> "ModelConfig":
        if "weights" in kw and isinstance(kw["weights"], dict):
            kw["weights"] = replace(self.weights, **kw["weights"])
        return replace(self, **kw)


# --- network construction ----------------------------------------------------------

def _scalers(dataset: Dataset4D, path: SurrogatePath, mode: str, init_scale: float):
    lo, hi = dataset.world_box()
    half = (hi - lo) / 2
    s_lo, s_hi = path.values.min(axis=0), path.values.max(axis=0)
    s_half = np.maximum((s_hi - s_lo) / 2, 1e-6)
    in_center = np.concatenate([(lo + hi) / 2, (s_lo + s_hi) / 2])
    in_scale = np.concatenate([half, s_half])
    out = half / dataset.period if mode == "velocity" else half.copy()
    return in_center, in_scale, out * init_scale


def make_net(dataset: Dataset4D, path: SurrogatePath, config: ModelConfig, kind: str, seed: int) -> FieldNet:
    """Fresh network for ``kind`` in {"velocity", "displacement"} with zero output bias."""
    c, s, o = _scalers(dataset, path, kind, config.init_scale)
    net = FieldNet.create(n_s=path.n_s, hidden=config.hidden, omega0=config.omega0, seed=seed,
                          in_center=c, in_scale=s, out_scale=o, mode=kind, dtype=np.dtype(config.dtype))
    net.biases[-1][:] = 0
    return net


# --- integrated model -------------------------------------------------------------

def integrated_warp(net: FieldNet, x, s) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return x + net.forward(x, s)


def _world_jacobian(net: FieldNet, tan):
    """Raw output tangents (K>=3, N, 3) -> world d out / d x, (N, 3, 3)."""
    jac = np.transpose(tan[:3].astype(np.float64), (1, 2, 0))
    return jac * net.out_scale[None, :, None] / net.in_scale[None, None, :3]


def _jacobian_tangent_grad(net: FieldNet, g_jac):
    """Adjoint of :func:`_world_jacobian`: (N, 3, 3) -> (3, N, 3)."""
    g = g_jac * net.out_scale[None, :, None] / net.in_scale[None, None, :3]
    return np.transpose(g, (2, 0, 1))


def _spatial_seed_block(net: FieldNet, n):
    seeds = np.zeros((3, n, 3 + net.n_s))
    for a in range(3):
        seeds[a, :, a] = 1.0
    return seeds


# --- Euler integration --------------------------------------------------------------

@dataclass
class NodeRecords:
    """Per-node quantities along Euler trajectories; leading axis is the step."""
    x: np.ndarray          # (n_steps, N, 3)
    s: np.ndarray          # (n_steps, N, n_s)
    tau: np.ndarray        # (n_steps, N)
    dt: np.ndarray         # (N,)
    jac_v: np.ndarray | None = None     # (n_steps, N, 3, 3)
    dv_dt: np.ndarray | None = None     # (n_steps, N, 3)
    tapes: list | None = None


def euler_integrate(net: FieldNet, x, path: SurrogatePath, t_from, t_to, n_steps: int,
                    records: bool = True, keep_tape: bool = False):
    """Explicit Euler flow of ``v(x, s(tau))`` from ``t_from`` to ``t_to`` (per point allowed).

    ``x_{i+1} = x_i + dt * v(x_i, s(tau_i))`` with ``dt = (t_to - t_from) / n_steps``
    and ``tau_i = t_from + i dt``. Returns the end points and, if requested, the
    node records (position, surrogate, J_v, temporal derivative).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = np.array(np.atleast_2d(x), dtype=np.float64)
    n = x.shape[0]
    t0 = np.broadcast_to(np.asarray(t_from, dtype=np.float64), (n,))
    t1 = np.broadcast_to(np.asarray(t_to, dtype=np.float64), (n,))
    dt = (t1 - t0) / n_steps
    rec = None
    if records:
        rec = NodeRecords(np.empty((n_steps, n, 3)), np.empty((n_steps, n, path.n_s)),
                          np.empty((n_steps, n)), dt, np.empty((n_steps, n, 3, 3)),
                          np.empty((n_steps, n, 3)), [] if keep_tape else None)
    moving = dt != 0
    if not moving.any():
        if rec is not None:
            for i in range(n_steps):
                rec.x[i], rec.tau[i] = x, t0
                rec.s[i] = path(t0).reshape(n, -1)
            rec.jac_v[:] = np.nan
            rec.dv_dt[:] = np.nan
        return x, rec
    for i in range(n_steps):
        tau = t0 + i * dt
        s = path(tau).reshape(n, -1)
        u = net.normalize(x, s)
        seeds = None
        if records:
            seeds = np.concatenate([_spatial_seed_block(net, n), net.surrogate_seeds(path.rate(tau))])
            rec.x[i], rec.s[i], rec.tau[i] = x, s, tau
        raw, tan, tape = net.propagate(u, seeds, keep_tape=keep_tape)
        v = raw.astype(np.float64) * net.out_scale
        if records:
            rec.jac_v[i] = _world_jacobian(net, tan)
            rec.dv_dt[i] = tan[3].astype(np.float64) * net.out_scale
            if keep_tape:
                rec.tapes.append(tape)
        x = x + dt[:, None] * v
    return x, rec


def flow_jacobian(net: FieldNet, x, path: SurrogatePath, t_from, t_to, n_steps: int) -> np.ndarray:
    """Jacobian of the discrete Euler map, ``prod_i (I + dt_i J_v(x_i))``, shape (N, 3, 3)."""
    _, rec = euler_integrate(net, x, path, t_from, t_to, n_steps)
    n = rec.dt.shape[0]
    acc = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if np.all(rec.dt == 0):
        return acc
    for i in range(n_steps):
        step = np.eye(3) + rec.dt[:, None, None] * rec.jac_v[i]
        acc = step @ acc
    return acc


# --- regularizers in normalized units ------------------------------------------------

class _RegTerms:
    """Neo-Hookean on per-step maps and temporal TV, with gradients w.r.t. J_v and dv/dt.

    Space is measured in units of the half-extent of the box, time in units of
    the period; per-step Jacobians ``I + dt J_v`` are dimensionless either way.
    """

    def __init__(self, net: FieldNet, period: float, weights: LossWeights):
        self.L = net.in_scale[:3]
        self.T = period
        self.w = weights

    def node(self, jac_v, dv_dt, dt):
        """Per-node R_ph value, R_t contribution, and their gradients.

        ``jac_v`` (N, 3, 3), ``dv_dt`` (N, 3), ``dt`` (N,). Returns
        (rph (N,), rt (N,), d rph / d jac_v, d rt / d dv_dt).
        """
        n = len(dt)
        rph = np.zeros(n)
        rt = np.zeros(n)
        g_j = np.zeros((n, 3, 3))
        g_t = np.zeros((n, 3))
        if self.w.alpha_ph > 0:
            J = np.eye(3) + dt[:, None, None] * jac_v
            rph, gJ, _ = neo_hookean(J, self.w.lambda_nh, return_grad=True)
            g_j = gJ * dt[:, None, None]
        if self.w.alpha_t > 0:
            gn = dv_dt * (self.T ** 2) / self.L
            dtn = dt / self.T
            root = np.sqrt(np.sum(gn * gn, axis=1) + self.w.eps_tv)
            rt = 0.5 * np.abs(dtn) * root
            g_t = (0.5 * np.abs(dtn) / root)[:, None] * gn * (self.T ** 2) / self.L
        return rph, rt, g_j, g_t


def _tangent_grads(net: FieldNet, g_j, g_t, seeds_rows):
    """Pack regularizer gradients into raw-tangent upstream gradients (K, N, 3)."""
    parts = []
    if seeds_rows >= 3:
        parts.append(_jacobian_tangent_grad(net, g_j))
    if seeds_rows == 4:
        parts.append((g_t * net.out_scale)[None])
    return np.concatenate(parts) if parts else None


def _add(acc, grads):
    if acc is None:
        return [g.astype(np.float64) for g in grads]
    for a, g in zip(acc, grads):
        a += g
    return acc


# --- training state ---------------------------------------------------------------

@dataclass
class TrainState:
    config: ModelConfig
    nets: dict                      # name -> FieldNet
    optimizers: dict                # name -> Adam
    path: SurrogatePath             # training surrogate path (training knots only)
    reference_time: float
    reference_surrogate: np.ndarray
    train_ids: list
    epoch: int = 0
    best_val_tre: float = float("inf")
    best_epoch: int = -1
    best_params: dict = field(default_factory=dict)
    log: list = field(default_factory=list)
    last_val: float = float("nan")

    @property
    def mode(self) -> str:
        return self.config.mode

    def best_nets(self) -> dict:
        out = {}
        for name, net in self.nets.items():
            n = net.copy()
            if name in self.best_params:
                n.set_params(self.best_params[name])
            out[name] = n
        return out

    def snapshot_best(self):
        self.best_params = {k: [p.copy() for p in n.params()] for k, n in self.nets.items()}


def _new_state(dataset: Dataset4D, train_ids, config: ModelConfig) -> TrainState:
    ids = sorted(train_ids)
    frames = [dataset.frame(i) for i in ids]
    ref = dataset.reference
    if ref.frame_id not in ids:
        raise ValueError("the end-inhale reference frame must be part of the training set")
    if len(frames) < 2:
        raise ValueError("training needs at least two frames")
    path = SurrogatePath.from_frames(frames, dataset.period)
    if config.mode == "integrated":
        names = ("inhale", "exhale")
        nets = {nm: make_net(dataset, path, config, "displacement", config.seed * 2 + k)
                for k, nm in enumerate(names)}
    else:
        nets = {"velocity": make_net(dataset, path, config, "velocity", config.seed)}
    opts = {k: Adam(n.params(), lr=config.lr) for k, n in nets.items()}
    st = TrainState(config, nets, opts, path, float(ref.time), ref.surrogate.copy(), ids)
    st.snapshot_best()
    return st


class _Context:
    """Per-run read-only training data (images, sampler, validation targets)."""

    def __init__(self, dataset: Dataset4D, state: TrainState):
        ref = dataset.reference
        self.period = dataset.period
        self.frames = [dataset.frame(i) for i in state.train_ids]
        self.frames.sort(key=lambda f: f.time)
        self.images = [f.image for f in self.frames]
        self.ref_index = [f.frame_id for f in self.frames].index(ref.frame_id)
        mask = dataset.lung_mask
        if mask is None:
            mask = np.ones(int(np.prod(ref.image.dims)))
        self.sampler = SpatialSampler(self.images[self.ref_index], mask)
        self.val = []
        ref_lm = ref.landmarks
        if ref_lm is not None:
            for f in self.frames:
                if f.frame_id != ref.frame_id and f.landmarks is not None:
                    self.val.append((f, f.landmarks))
        self.ref_landmarks = ref_lm


# --- loss evaluation --------------------------------------------------------------

@dataclass
class EpochResult:
    loss: float
    ncc_term: float
    rph_term: float
    rt_term: float
    grads: dict
    pairs: list = field(default_factory=list)  # (source, target) frame indices with an NCC term


def _ncc_group(fixed_vals, image, pts, n_groups):
    """(1 - NCC)/n_groups and its gradient w.r.t. the points; None if flagged."""
    vals, grad_img, out = sample_with_gradient(image, pts)
    keep = ~out
    if keep.sum() < 2:
        return None
    value, g_vals, flagged = ncc(fixed_vals[keep], vals[keep], return_grad=True)
    if flagged:
        return None
    g = np.zeros(len(pts))
    g[keep] = -g_vals / n_groups
    return (1.0 - value) / n_groups, g[:, None] * grad_img


def trajectory_objective(net: FieldNet, ctx: _Context, config: ModelConfig, epoch: int,
                         with_grad: bool = True) -> EpochResult:
    rng = epoch_rng(config.seed, epoch)
    n_total = config.points_per_epoch
    path = SurrogatePath.from_frames(ctx.frames, ctx.period)
    draw = surrogate_sample(path, n_total, config.image_fraction, rng)
    pts = ctx.sampler.sample(n_total, rng)
    img = draw.has_image
    n_frames = len(ctx.frames)
    # one uniformly drawn target per source frame present in the batch
    src = draw.knot[img]
    offs = rng.integers(1, n_frames, size=n_frames)
    dst_of = (np.arange(n_frames) + offs) % n_frames
    dst = dst_of[src]
    pairs = sorted(set(zip(src.tolist(), dst.tolist())))
    w = config.weights
    reg = _RegTerms(net, ctx.period, w)
    need_j, need_t = w.alpha_ph > 0, w.alpha_t > 0
    n_seed_rows = 4 if need_t else (3 if need_j else 0)

    x0 = pts[img]
    t0 = path.times[src]
    t1 = path.times[dst]
    steps = config.euler_steps
    dt = (t1 - t0) / steps
    # forward Euler with tapes
    xs, tapes, jacs, dvs = [], [], [], []
    x = x0.copy()
    for i in range(steps):
        tau = t0 + i * dt
        s = path(tau).reshape(len(x), -1)
        seeds = None
        if n_seed_rows:
            seeds = np.concatenate([_spatial_seed_block(net, len(x)), net.surrogate_seeds(path.rate(tau))])
            seeds = seeds[:n_seed_rows]
        raw, tan, tape = net.propagate(net.normalize(x, s), seeds, keep_tape=with_grad)
        xs.append(x)
        tapes.append(tape)
        jacs.append(_world_jacobian(net, tan) if n_seed_rows else None)
        dvs.append(tan[3].astype(np.float64) * net.out_scale if n_seed_rows == 4 else None)
        x = x + dt[:, None] * (raw.astype(np.float64) * net.out_scale)
    x_end = x

    # similarity per ordered pair
    sim = 0.0
    lam = np.zeros_like(x_end)
    pair_idx = src * n_frames + dst
    for j, k in pairs:
        sel = pair_idx == j * n_frames + k
        fixed_vals = sample_trilinear(ctx.images[j], x0[sel])
        r = _ncc_group(fixed_vals, ctx.images[k], x_end[sel], len(pairs))
        if r is None:
            continue
        sim += r[0]
        lam[sel] = r[1]

    n_img = len(x0)
    rph_sum = rt_sum = 0.0
    grads = None
    # reverse sweep through the Euler chain
    node_rph = []
    for i in range(steps - 1, -1, -1):
        if n_seed_rows:
            rph, rt, g_j, g_t = reg.node(jacs[i], dvs[i] if dvs[i] is not None else np.zeros((n_img, 3)), dt)
            rph_sum += float(rph.sum()) / steps
            rt_sum += float(rt.sum())
            g_j = g_j * (w.alpha_ph / (steps * n_total))
            g_t = g_t * (w.alpha_t / n_total)
            g_tan = _tangent_grads(net, g_j, g_t, n_seed_rows)
        else:
            g_tan = None
        if not with_grad:
            continue
        g_out = (dt[:, None] * lam) * net.out_scale
        pg, g_u = net.backprop(tapes[i], g_out.astype(net.dtype),
                               None if g_tan is None else g_tan.astype(net.dtype))
        grads = _add(grads, pg)
        lam = lam + g_u[:, :3].astype(np.float64) / net.in_scale[:3]
        tapes[i] = None

    # no-image samples: single regularization nodes
    n_reg = n_total - n_img
    if n_reg and n_seed_rows:
        tau = draw.t[~img]
        xr = pts[~img]
        s = draw.s[~img]
        seeds = np.concatenate([_spatial_seed_block(net, n_reg), net.surrogate_seeds(path.rate(tau))])[:n_seed_rows]
        raw, tan, tape = net.propagate(net.normalize(xr, s), seeds, keep_tape=with_grad)
        dtr = np.full(n_reg, ctx.period / (2 * steps))
        jac = _world_jacobian(net, tan)
        dv = tan[3].astype(np.float64) * net.out_scale if n_seed_rows == 4 else np.zeros((n_reg, 3))
        rph, rt, g_j, g_t = reg.node(jac, dv, dtr)
        rph_sum += float(rph.sum())
        rt_sum += float(rt.sum())
        if with_grad:
            g_tan = _tangent_grads(net, g_j * (w.alpha_ph / n_total), g_t * (w.alpha_t / n_total), n_seed_rows)
            pg, _ = net.backprop(tape, np.zeros((n_reg, 3), dtype=net.dtype), g_tan.astype(net.dtype))
            grads = _add(grads, pg)
    rph_term = w.alpha_ph * rph_sum / n_total
    rt_term = w.alpha_t * rt_sum / n_total
    loss = sim + rph_term + rt_term
    return EpochResult(loss, sim, rph_term, rt_term, {"velocity": grads} if with_grad else {}, pairs)


def integrated_objective(nets: dict, ctx: _Context, config: ModelConfig, epoch: int,
                         with_grad: bool = True) -> EpochResult:
    rng = epoch_rng(config.seed, epoch)
    n_total = config.points_per_epoch
    path = SurrogatePath.from_frames(ctx.frames, ctx.period)
    draw = surrogate_sample(path, n_total, config.image_fraction, rng)
    pts = ctx.sampler.sample(n_total, rng)
    w = config.weights
    ref_img = ctx.images[ctx.ref_index]
    flows = draw.s[:, 1] if draw.s.shape[1] > 1 else np.zeros(n_total)
    turning = np.zeros(n_total, dtype=bool)
    if draw.s.shape[1] > 1:
        max_flow = np.max(np.abs(path.values[:, 1])) or 1.0
        turning = np.abs(flows) <= 1e-9 * max_flow
    sim_total = rph_total = 0.0
    grads = {}
    for name, net in nets.items():
        sel = turning | (np.where(flows >= 0, "inhale", "exhale") == name)
        if not sel.any():
            grads[name] = [np.zeros(p.shape) for p in net.params()]
            continue
        x = pts[sel]
        s = draw.s[sel]
        has = draw.has_image[sel]
        knot = draw.knot[sel]
        n = len(x)
        need_j = w.alpha_ph > 0
        seeds = _spatial_seed_block(net, n) if need_j else None
        raw, tan, tape = net.propagate(net.normalize(x, s), seeds, keep_tape=with_grad)
        disp = raw.astype(np.float64) * net.out_scale
        g_disp = np.zeros((n, 3))
        groups = sorted(set(knot[has].tolist()))
        sim = 0.0
        for j in groups:
            gsel = has & (knot == j)
            fixed_vals = sample_trilinear(ref_img, x[gsel])
            r = _ncc_group(fixed_vals, ctx.images[j], x[gsel] + disp[gsel], len(groups))
            if r is None:
                continue
            sim += r[0]
            g_disp[gsel] = r[1]
        g_tan = None
        rph_mean = 0.0
        if need_j:
            J = np.eye(3) + _world_jacobian(net, tan)
            rph, gJ, _ = neo_hookean(J, w.lambda_nh, return_grad=True)
            rph_mean = float(rph.mean())
            g_tan = _jacobian_tangent_grad(net, gJ * (w.alpha_ph / n))
        sim_total += sim
        rph_total += w.alpha_ph * rph_mean
        if with_grad:
            pg, _ = net.backprop(tape, (g_disp * net.out_scale).astype(net.dtype),
                                 None if g_tan is None else g_tan.astype(net.dtype))
            grads[name] = [g.astype(np.float64) for g in pg]
    return EpochResult(sim_total + rph_total, sim_total, rph_total, 0.0, grads)


# --- validation and prediction ---------------------------------------------------------

def _warp_reference(nets: dict, mode: str, path: SurrogatePath, ref_time: float, x, target_time,
                    target_s, steps: int):
    if mode == "trajectory":
        end, _ = euler_integrate(nets["velocity"], x, path, ref_time, target_time, steps, records=False)
        return end
    return integrated_warp(nets[_sub_model(target_s)], x, target_s)


def _sub_model(s) -> str:
    s = np.asarray(s, dtype=np.float64).ravel()
    return phase_of_flow(float(s[1]) if s.size > 1 else 0.0)


def validation_tre(state: TrainState, ctx: _Context, nets: dict | None = None) -> float:
    if not ctx.val:
        return float("nan")
    nets = nets or state.nets
    errs = []
    for f, lm in ctx.val:
        warped = _warp_reference(nets, state.mode, state.path, state.reference_time,
                                 ctx.ref_landmarks, f.time, f.surrogate, state.config.inference_steps)
        errs.append(np.linalg.norm(warped - lm, axis=1))
    return float(np.mean(np.concatenate(errs)))


def predict_motion(state: TrainState, x, t_from=None, t_to=None, *, s_to=None,
                   path: SurrogatePath | None = None, steps: int | None = None, nets=None) -> np.ndarray:
    """Warp points from time ``t_from`` to ``t_to`` with the best networks.

    ``path`` is the surrogate path used for the query (defaults to the
    training path). The integrated model only accepts the reference time as
    source; its target may be given as a surrogate ``s_to``.
    """
    path = path or state.path
    nets = nets or state.best_nets()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if state.mode == "trajectory":
        if t_from is None or t_to is None:
            raise ValueError("trajectory prediction needs t_from and t_to")
        if t_from == t_to:
            return x.copy()
        end, _ = euler_integrate(nets["velocity"], x, path, t_from, t_to,
                                 steps or state.config.inference_steps, records=False)
        return end
    if t_from is not None and not np.isclose(t_from, state.reference_time, atol=1e-9):
        raise NonReferenceSource(
            f"integrated model maps from its reference (t={state.reference_time:g} s) only; "
            f"got source time {t_from:g} s")
    if s_to is None:
        if t_to is None:
            raise ValueError("need a target time or surrogate")
        s_to = path(t_to)
    return integrated_warp(nets[_sub_model(s_to)], x, s_to)


# --- training loops ------------------------------------------------------------------

def _check_finite(res: EpochResult, epoch: int, state: TrainState):
    ok = np.isfinite(res.loss) and all(np.all(np.isfinite(g)) for gs in res.grads.values() for g in gs)
    if not ok:
        raise TrainingDiverged(f"non-finite loss or gradient at epoch {epoch} (loss={res.loss})", state)


def train(dataset: Dataset4D, train_ids, config: ModelConfig, state: TrainState | None = None,
          epochs: int | None = None, progress=None) -> TrainState:
    """Train (or resume) a model. ``epochs`` overrides the number of epochs to run now."""
    state = state or _new_state(dataset, train_ids, config)
    config = state.config
    ctx = _Context(dataset, state)
    stop = config.epochs if epochs is None else state.epoch + epochs
    while state.epoch < stop:
        e = state.epoch
        if config.mode == "trajectory":
            res = trajectory_objective(state.nets["velocity"], ctx, config, e)
        else:
            res = integrated_objective(state.nets, ctx, config, e)
        _check_finite(res, e, state)
        last_good = {k: [p.copy() for p in n.params()] for k, n in state.nets.items()}
        try:
            for name, net in state.nets.items():
                params = net.params()
                state.optimizers[name].step(params, res.grads[name])
                if not all(np.all(np.isfinite(p)) for p in params):
                    raise NonFiniteError("non-finite parameters after update")
        except NonFiniteError as exc:
            for k, n in state.nets.items():
                n.set_params(last_good[k])
            raise TrainingDiverged(f"epoch {e}: {exc}", state) from exc
        state.epoch += 1
        val = ""
        if state.epoch % config.val_every == 0 or state.epoch == config.epochs:
            v = validation_tre(state, ctx)
            val = v
            state.last_val = v
            if np.isfinite(v) and v < state.best_val_tre:
                state.best_val_tre, state.best_epoch = v, state.epoch
                state.snapshot_best()
        state.log.append((state.epoch, res.loss, res.ncc_term, res.rph_term, res.rt_term, val))
        if progress:
            progress(state)
    if not ctx.val or state.best_epoch < 0:
        state.snapshot_best()
    return state


def integrated_train(dataset: Dataset4D, train_ids, config: ModelConfig, **kw) -> TrainState:
    if config.mode != "integrated":
        config = config.with_overrides(mode="integrated")
    return train(dataset, train_ids, config, **kw)


def trajectory_train(dataset: Dataset4D, train_ids, config: ModelConfig, **kw) -> TrainState:
    if config.mode != "trajectory":
        config = config.with_overrides(mode="trajectory")
    return train(dataset, train_ids, config, **kw)


# --- logs and checkpoints ------------------------------------------------------------

def format_log(state: TrainState) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for row in state.log:
        e, *vals = row
        cells = [str(e)] + ["" if v == "" else repr(float(v)) for v in vals]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_log(state: TrainState, path):
    from pathlib import Path
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(format_log(state), encoding="utf-8")
    return p


def _path_dict(path: SurrogatePath) -> dict:
    return {"times": path.times.tolist(), "values": path.values.tolist(), "period": path.period}


def path_from_dict(d: dict) -> SurrogatePath:
    return SurrogatePath(np.array(d["times"]), np.array(d["values"]), float(d["period"]))


def save_state(state: TrainState, path, prediction_path: SurrogatePath | None = None, **meta):
    """PRISMNET container with mode tag, networks, best networks and optimizer state."""
    arrays = {}
    header = {
        "mode": CONTAINER_TAGS[state.mode],
        "config": state.config.to_dict(),
        "seed": state.config.seed,
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_tre": None if not np.isfinite(state.best_val_tre) else state.best_val_tre,
        "last_val": None if not np.isfinite(state.last_val) else state.last_val,
        "reference_time": state.reference_time,
        "reference_surrogate": state.reference_surrogate.tolist(),
        "train_ids": list(state.train_ids),
        "path": _path_dict(state.path),
        "prediction_path": _path_dict(prediction_path or state.path),
        "networks": {},
        "optimizers": {},
        "log": [list(r) for r in state.log],
        **meta,
    }
    for name, net in state.nets.items():
        header["networks"][name] = net.architecture()
        arrays.update(net_arrays(net, f"{name}/"))
        best = net.copy()
        best.set_params(state.best_params[name])
        arrays.update(net_arrays(best, f"{name}/best/"))
        opt = state.optimizers[name]
        header["optimizers"][name] = opt.state()
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"{name}/adam/m{i}"] = m
            arrays[f"{name}/adam/v{i}"] = v
    return write_container(path, header, arrays)


def load_state(path) -> tuple[TrainState, SurrogatePath]:
    """Inverse of :func:`save_state`; returns the state and the prediction path."""
    header, arrays = read_container(path)
    tags = {v: k for k, v in CONTAINER_TAGS.items()}
    if header.get("mode") not in tags:
        raise ValueError(f"{path}: not a model checkpoint (mode={header.get('mode')!r})")
    config = ModelConfig.from_dict(header["config"])
    dtype = np.dtype(config.dtype)
    nets, opts, best = {}, {}, {}
    for name, arch in header["networks"].items():
        net = net_from_arrays(arch, arrays, f"{name}/", dtype=dtype)
        nets[name] = net
        best[name] = net_from_arrays(arch, arrays, f"{name}/best/", dtype=dtype).params()
        os_ = header["optimizers"][name]
        opt = Adam(net.params(), lr=os_["lr"], beta1=os_["beta1"], beta2=os_["beta2"], eps=os_["eps"])
        opt.step_count = os_["step"]
        opt.m = [arrays[f"{name}/adam/m{i}"].astype(np.float64) for i in range(len(opt.m))]
        opt.v = [arrays[f"{name}/adam/v{i}"].astype(np.float64) for i in range(len(opt.v))]
        opts[name] = opt
    bv = header.get("best_val_tre")
    lv = header.get("last_val")
    state = TrainState(config, nets, opts, path_from_dict(header["path"]), header["reference_time"],
                       np.array(header["reference_surrogate"]), list(header["train_ids"]),
                       epoch=header["epoch"], best_val_tre=float("inf") if bv is None else bv,
                       best_epoch=header["best_epoch"], best_params=best,
                       log=[tuple(r) for r in header["log"]],
                       last_val=float("nan") if lv is None else lv)
    return state, path_from_dict(header["prediction_path"])


def clone_state(state: TrainState) -> TrainState:
    return copy.deepcopy(state)
