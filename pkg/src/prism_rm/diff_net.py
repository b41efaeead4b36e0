"""Sinusoidal coordinate network with hand-written differentiation.

The network maps a world point and a surrogate vector to a 3-vector. Input
derivatives are obtained in forward mode: every requested direction is a
tangent row pushed through the layers alongside the primal values (dual
numbers, batched). Parameter gradients are obtained by a reverse sweep over
that same dual computation, so losses built on Jacobians or temporal
derivatives are differentiated exactly, including their dependence on the
input point.

Internally the network sees normalised inputs ``u = (in - center) / scale``
and produces raw outputs; world outputs are ``raw * out_scale``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"PRISMNET"


class NonFiniteError(FloatingPointError):
    """Raised when a non-finite value reaches the network or optimizer."""


@dataclass
class DualBatch:
    """Primal inputs plus per-direction tangent seeds in normalised input space.

    ``tangents`` has shape ``(K, N, d)``; a ``(K, d)`` array is broadcast to
    every point.
    """
    values: np.ndarray
    tangents: np.ndarray

    def __post_init__(self):
        self.values = np.atleast_2d(self.values)
        t = np.asarray(self.tangents)
        if t.ndim == 2:
            t = np.broadcast_to(t[:, None, :], (t.shape[0],) + self.values.shape)
        if t.shape[1:] != self.values.shape:
            raise ValueError(f"tangent shape {t.shape} does not match values {self.values.shape}")
        self.tangents = t

    @classmethod
    def unit(cls, values, dims):
        """Seeds along coordinate axes ``dims`` of the input."""
        values = np.atleast_2d(values)
        seeds = np.zeros((len(dims), values.shape[1]), dtype=values.dtype)
        for k, d in enumerate(dims):
            seeds[k, d] = 1.0
        return cls(values, seeds)


@dataclass
class Tape:
    """Activations kept by :meth:`FieldNet.propagate` for the reverse sweep."""
    inputs: list = field(default_factory=list)   # stacked (K+1, N, fan_in) per layer
    sin: list = field(default_factory=list)
    cos: list = field(default_factory=list)
    dpre: list = field(default_factory=list)     # tangent pre-activations (K, N, w)


class FieldNet:
    def __init__(self, weights, biases, *, omega0=30.0, n_s=2,
                 in_center=None, in_scale=None, out_scale=None,
                 activation="sine", mode="velocity", dtype=np.float32, fixed_order=False):
        self.dtype = np.dtype(dtype)
        self.fixed_order = bool(fixed_order)
        self.weights = [np.ascontiguousarray(w, dtype=self.dtype) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=self.dtype) for b in biases]
        if len(self.weights) != len(self.biases) or len(self.weights) < 1:
            raise ValueError("weights and biases must pair up")
        for w, b in zip(self.weights, self.biases):
            if w.shape[0] != b.shape[0]:
                raise ValueError(f"bias {b.shape} does not match weight {w.shape}")
        self.omega0 = float(omega0)
        self.n_s = int(n_s)
        d_in = 3 + self.n_s
        if self.weights[0].shape[1] != d_in:
            raise ValueError(f"first layer expects {self.weights[0].shape[1]} inputs, need {d_in}")
        if self.weights[-1].shape[0] != 3:
            raise ValueError("output layer must produce 3 components")
        self.in_center = np.zeros(d_in) if in_center is None else np.asarray(in_center, dtype=np.float64)
        self.in_scale = np.ones(d_in) if in_scale is None else np.asarray(in_scale, dtype=np.float64)
        self.out_scale = np.ones(3) if out_scale is None else np.asarray(out_scale, dtype=np.float64)
        if np.any(self.in_scale <= 0):
            raise ValueError("input scales must be positive")
        self.activation = activation
        self.mode = mode

    # -- construction --------------------------------------------------------

    @classmethod
    def create(cls, n_s=2, hidden=(256, 256, 256), omega0=30.0, seed=0, **kwargs):
        """Random sinusoidal-network initialisation.

        First layer weights are uniform in ``+-1/fan_in``; later layers in
        ``+-sqrt(6/fan_in)/omega0``. Biases are uniform in ``+-1/sqrt(fan_in)``.
        """
        rng = np.random.default_rng(seed)
        sizes = [3 + n_s, *hidden, 3]
        weights, biases = [], []
        for layer, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / fan_in if layer == 0 else np.sqrt(6.0 / fan_in) / omega0
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            bb = 1.0 / np.sqrt(fan_in)
            biases.append(rng.uniform(-bb, bb, size=fan_out))
        return cls(weights, biases, omega0=omega0, n_s=n_s, **kwargs)

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights[:-1])

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params):
        params = list(params)
        self.weights = [np.ascontiguousarray(p, dtype=self.dtype) for p in params[0::2]]
        self.biases = [np.ascontiguousarray(p, dtype=self.dtype) for p in params[1::2]]

    def copy(self) -> "FieldNet":
        return FieldNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        omega0=self.omega0, n_s=self.n_s, in_center=self.in_center.copy(),
                        in_scale=self.in_scale.copy(), out_scale=self.out_scale.copy(),
                        activation=self.activation, mode=self.mode, dtype=self.dtype,
                        fixed_order=self.fixed_order)

    def astype(self, dtype) -> "FieldNet":
        net = self.copy()
        net.dtype = np.dtype(dtype)
        net.set_params(self.params())
        return net

    def architecture(self) -> dict:
        return {
            "hidden": list(self.hidden), "omega0": self.omega0, "n_s": self.n_s,
            "activation": self.activation, "mode": self.mode,
            "in_center": self.in_center.tolist(), "in_scale": self.in_scale.tolist(),
            "out_scale": self.out_scale.tolist(),
        }

    # -- normalisation -------------------------------------------------------

    def normalize(self, x, s) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        s = np.asarray(s, dtype=np.float64)
        if s.ndim == 1:
            s = np.broadcast_to(s, (x.shape[0], self.n_s))
        inp = np.concatenate([x, s], axis=1)
        if not np.all(np.isfinite(inp)):
            raise NonFiniteError("non-finite network input")
        return ((inp - self.in_center) / self.in_scale).astype(self.dtype)

    # -- dual forward / reverse sweep ---------------------------------------

    def propagate(self, u, seeds=None, keep_tape=False):
        """Push primal rows ``u`` (N, d) and tangent ``seeds`` (K, N, d) through.

        Returns raw outputs (N, 3), raw output tangents (K, N, 3) and the tape.
        """
        u = np.asarray(u, dtype=self.dtype)
        n = u.shape[0]
        if seeds is None:
            seeds = np.zeros((0, n, u.shape[1]), dtype=self.dtype)
        seeds = np.asarray(seeds, dtype=self.dtype)
        if seeds.ndim == 2:
            seeds = np.broadcast_to(seeds[:, None, :], (seeds.shape[0], n, u.shape[1]))
        k = seeds.shape[0]
        z = np.empty((k + 1, n, u.shape[1]), dtype=self.dtype)
        z[0] = u
        z[1:] = seeds
        tape = Tape() if keep_tape else None
        om = self.omega0
        last = len(self.weights) - 1
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            if tape is not None:
                tape.inputs.append(z)
            pre = self._affine(z.reshape(-1, z.shape[2]), w).reshape(k + 1, n, w.shape[0])
            pre[0] += b
            if layer == last:
                return pre[0], pre[1:], tape
            if self.activation == "sine":
                sn = np.sin(om * pre[0])
                cs = np.cos(om * pre[0])
                znew = np.empty_like(pre)
                znew[0] = sn
                znew[1:] = (om * cs) * pre[1:]
                if tape is not None:
                    tape.sin.append(sn)
                    tape.cos.append(cs)
                    tape.dpre.append(pre[1:])
            else:
                znew = pre
                if tape is not None:
                    tape.sin.append(None)
                    tape.cos.append(None)
                    tape.dpre.append(None)
            z = znew
        raise AssertionError("unreachable")

    def _affine(self, z, w):
        if not self.fixed_order:
            return z @ w.T
        # sequential accumulation over the fan-in: every row sees the same
        # operation order regardless of batch size
        acc = np.zeros((z.shape[0], w.shape[0]), dtype=self.dtype)
        for j in range(w.shape[1]):
            acc += z[:, j:j + 1] * w[:, j]
        return acc

    def backprop(self, tape: Tape, g_out, g_tan=None):
        """Reverse sweep. Returns parameter gradients and d loss / d u (primal)."""
        k = tape.inputs[0].shape[0] - 1
        n = tape.inputs[0].shape[1]
        g = np.zeros((k + 1, n, 3), dtype=self.dtype)
        g[0] = g_out
        if g_tan is not None and k:
            g[1:] = g_tan
        om = self.omega0
        grads = [None] * (2 * len(self.weights))
        for layer in range(len(self.weights) - 1, -1, -1):
            w = self.weights[layer]
            z = tape.inputs[layer]
            # parameter reductions over the batch accumulate in float64
            g64 = g.reshape(-1, g.shape[2]).astype(np.float64)
            grads[2 * layer] = g64.T @ z.reshape(-1, z.shape[2]).astype(np.float64)
            grads[2 * layer + 1] = g64[:n].sum(axis=0)
            if layer == 0:
                g_u = g[0] @ w
                return grads, g_u
            gz = (g.reshape(-1, g.shape[2]) @ w).reshape(k + 1, n, w.shape[1])
            if self.activation == "sine":
                sn, cs, dpre = tape.sin[layer - 1], tape.cos[layer - 1], tape.dpre[layer - 1]
                gpre = np.empty_like(gz)
                gpre[0] = (om * cs) * gz[0]
                if k:
                    gpre[0] -= (om * om) * sn * np.einsum("knw,knw->nw", gz[1:], dpre)
                    gpre[1:] = (om * cs) * gz[1:]
                g = gpre
            else:
                g = gz
        raise AssertionError("unreachable")

    # -- world-unit operations ----------------------------------------------

    def forward(self, x, s) -> np.ndarray:
        out, _, _ = self.propagate(self.normalize(x, s))
        return out.astype(np.float64) * self.out_scale

    __call__ = forward

    def spatial_seeds(self) -> np.ndarray:
        seeds = np.zeros((3, 3 + self.n_s))
        seeds[0, 0] = seeds[1, 1] = seeds[2, 2] = 1.0
        return seeds

    def input_jacobian(self, x, s) -> np.ndarray:
        """d output / d x in world units, shape (N, 3, 3) with [n, i, j] = d out_i / d x_j."""
        _, tan, _ = self.propagate(self.normalize(x, s), self.spatial_seeds())
        jac = np.transpose(tan.astype(np.float64), (1, 2, 0))
        return jac * self.out_scale[None, :, None] / self.in_scale[None, None, :3]

    def surrogate_seeds(self, ds_dt) -> np.ndarray:
        ds_dt = np.atleast_2d(np.asarray(ds_dt, dtype=np.float64))
        seeds = np.zeros((1, ds_dt.shape[0], 3 + self.n_s))
        seeds[0, :, 3:] = ds_dt / self.in_scale[3:]
        return seeds

    def surrogate_directional_derivative(self, x, s, ds_dt) -> np.ndarray:
        """(d output / d s) . ds_dt in world units, shape (N, 3)."""
        u = self.normalize(x, s)
        ds_dt = np.broadcast_to(np.asarray(ds_dt, dtype=np.float64), (u.shape[0], self.n_s))
        _, tan, _ = self.propagate(u, self.surrogate_seeds(ds_dt))
        return tan[0].astype(np.float64) * self.out_scale

    def backward(self, x, s, upstream):
        """Parameter gradients of ``sum(upstream * forward(x, s))``."""
        u = self.normalize(x, s)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (u.shape[0], 3):
            raise ValueError(f"upstream gradient shape {upstream.shape} != {(u.shape[0], 3)}")
        _, _, tape = self.propagate(u, keep_tape=True)
        grads, _ = self.backprop(tape, (upstream * self.out_scale).astype(self.dtype))
        return grads


# --- optimizer ---------------------------------------------------------------

class Adam:
    """Plain Adam with bias correction; moments kept in float64."""

    def __init__(self, params, lr=1e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]

    def step(self, params, grads, lr=None):
        """Update ``params`` in place. Non-finite gradients leave everything untouched."""
        if len(grads) != len(params):
            raise ValueError("gradient list does not match parameters")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("non-finite gradient; Adam step rejected")
        lr = self.lr if lr is None else lr
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            g = np.asarray(g, dtype=np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            with np.errstate(over="ignore", invalid="ignore"):  # callers check finiteness
                p -= upd.astype(p.dtype)
        return params

    def state(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step_count}


def adam_step(optimizer: Adam, params, grads, lr=None):
    return optimizer.step(params, grads, lr)


# --- container files ----------------------------------------------------------

def write_container(path, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    """``PRISMNET`` magic, u64 header length, JSON header, float32 LE payload.

    float64 arrays are stored losslessly: their bytes are reinterpreted as
    pairs of float32 words and tagged ``"dtype": "f8"`` in the header.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(header)
    header["arrays"] = []
    chunks = []
    for k, a in arrays.items():
        a = np.asarray(a)
        wide = a.dtype == np.float64
        header["arrays"].append({"name": k, "shape": list(a.shape), "dtype": "f8" if wide else "f4"})
        chunks.append(np.ascontiguousarray(a, dtype="<f8" if wide else "<f4").tobytes())
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[16 + hlen:], dtype="<f4")
    words = [int(np.prod(a["shape"])) * (2 if a.get("dtype") == "f8" else 1) for a in header["arrays"]]
    if payload.size * 4 != len(raw) - 16 - hlen or payload.size != sum(words):
        raise ValueError(f"{path}: payload holds {(len(raw) - 16 - hlen) / 4:g} floats, "
                         f"header declares {sum(words)}")
    arrays, off = {}, 0
    for a, n in zip(header["arrays"], words):
        chunk = payload[off:off + n]
        if a.get("dtype") == "f8":
            chunk = chunk.view("<f8")
        arrays[a["name"]] = chunk.reshape(a["shape"]).astype(chunk.dtype.newbyteorder("="))
        off += n
    return header, arrays


def net_arrays(net: FieldNet, prefix="") -> dict[str, np.ndarray]:
    out = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out[f"{prefix}W{i}"] = w
        out[f"{prefix}b{i}"] = b
    return out


def net_from_arrays(arch: dict, arrays: dict, prefix="", dtype=np.float32) -> FieldNet:
    n_layers = len(arch["hidden"]) + 1
    return FieldNet([arrays[f"{prefix}W{i}"] for i in range(n_layers)],
                    [arrays[f"{prefix}b{i}"] for i in range(n_layers)],
                    omega0=arch["omega0"], n_s=arch["n_s"], in_center=arch["in_center"],
                    in_scale=arch["in_scale"], out_scale=arch["out_scale"],
                    activation=arch.get("activation", "sine"), mode=arch.get("mode", "velocity"),
                    dtype=dtype)


def save_checkpoint(path, net: FieldNet, **meta) -> Path:
    header = {"kind": "FieldNet", "architecture": net.architecture(), **meta}
    return write_container(path, header, net_arrays(net))


def load_checkpoint(path) -> tuple[FieldNet, dict]:
    header, arrays = read_container(path)
    return net_from_arrays(header["architecture"], arrays), header
