"""Rectified-flow primitives and a small dense velocity network.

The network maps ``(z, t, c)`` to a velocity of the same dimension as ``z``.
Gradients are backpropagated by hand, so every objective in the package can be
checked against central finite differences in double precision.

Trainable parameters depend on the model:

* no adapter: every base weight and bias (used to pretrain the base model);
* with adapter: only the low-rank factors ``A`` (out x r) and ``B`` (r x in)
  of each weight matrix, effective weight ``W + A @ B``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import AdapterError, NonFiniteError, ShapeError

CHECKPOINT_FORMAT = "ipalab.velocity_field"
CHECKPOINT_VERSION = 1

N_TIME_FEATURES = 8
_TIME_FREQS = np.array([1.0, 2.0, 4.0, 8.0])


def _as_vec(x, name):
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return x


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or not np.all(np.isfinite(t)):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t


def interpolate(z0, z1, t):
    """Point on the straight path ``t * z1 + (1 - t) * z0``.

    Works row-wise when ``z0``/``z1`` are ``(N, D)`` and ``t`` is ``(N,)``.
    """
    z0 = _as_vec(z0, "z0")
    z1 = _as_vec(z1, "z1")
    if z0.shape != z1.shape:
        raise ShapeError(f"z0 {z0.shape} and z1 {z1.shape} differ")
    t = _check_t(t)
    if t.ndim == 1 and z0.ndim == 2:
        t = t[:, None]
    return t * z1 + (1.0 - t) * z0


def target_velocity(z0, z1):
    """Constant velocity ``z1 - z0`` of the straight path."""
    z0 = _as_vec(z0, "z0")
    z1 = _as_vec(z1, "z1")
    if z0.shape != z1.shape:
        raise ShapeError(f"z0 {z0.shape} and z1 {z1.shape} differ")
    return z1 - z0


@dataclass
class FlowBatch:
    """A batch of flow-matching tuples stored as stacked arrays.

    Row ``i`` is one sample ``(z0, z1, t, zt, v, c, mask)``. Build through
    :meth:`from_endpoints` so ``zt`` and ``v`` are consistent with the path.
    """

    z0: np.ndarray
    z1: np.ndarray
    t: np.ndarray
    zt: np.ndarray
    v: np.ndarray
    c: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_endpoints(cls, z0, z1, t, c, mask=None):
        z0 = np.atleast_2d(_as_vec(z0, "z0"))
        z1 = np.atleast_2d(_as_vec(z1, "z1"))
        c = np.atleast_2d(_as_vec(c, "c"))
        t = np.atleast_1d(_check_t(t)).astype(np.float64)
        n = z0.shape[0]
        if z1.shape != z0.shape:
            raise ShapeError(f"z0 {z0.shape} and z1 {z1.shape} differ")
        if t.shape != (n,) or c.shape[0] != n:
            raise ShapeError("t and c must have one row per sample")
        if mask is None:
            mask = np.zeros_like(z0)
        mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), z0.shape).copy()
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError("mask entries must be 0 or 1")
        zt = interpolate(z0, z1, t)
        v = target_velocity(z0, z1)
        return cls(z0=z0, z1=z1, t=t, zt=zt, v=v, c=c, mask=mask)

    def __len__(self):
        return self.z0.shape[0]

    def subset(self, idx):
        return FlowBatch(*(getattr(self, f)[idx] for f in
                           ("z0", "z1", "t", "zt", "v", "c", "mask")))

    def with_t(self, t):
        """Same endpoints re-interpolated at new times."""
        return FlowBatch.from_endpoints(self.z0, self.z1, t, self.c, self.mask)


def time_features(t):
    """Sinusoidal encoding of ``t`` into ``N_TIME_FEATURES`` columns."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    arg = np.pi * t * _TIME_FREQS
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class VelocityField:
    """Dense tanh network ``v(z; t, c)`` with an optional low-rank adapter.

    ``role`` is ``"reference"`` or ``"policy"``. Reference models hold
    read-only arrays, so any in-place update raises.
    """

    dim: int
    cond_dim: int
    weights: list
    biases: list
    role: str = "policy"
    adapter: list | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ("reference", "policy"):
            raise ValueError(f"unknown role {self.role!r}")
        if self.role == "reference":
            for a in self._all_arrays():
                a.flags.writeable = False

    # construction

    @classmethod
    def init(cls, dim, cond_dim, hidden=(64, 64, 64), seed=0, role="policy"):
        rng = np.random.default_rng(seed)
        sizes = [dim + N_TIME_FEATURES + cond_dim, *hidden, dim]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(dim, cond_dim, weights, biases, role=role)

    def _all_arrays(self):
        arrays = list(self.weights) + list(self.biases)
        if self.adapter is not None:
            for a, b in self.adapter:
                arrays.extend((a, b))
        return arrays

    def copy(self, role=None):
        adapter = None
        if self.adapter is not None:
            adapter = [(a.copy(), b.copy()) for a, b in self.adapter]
        return VelocityField(
            self.dim, self.cond_dim,
            [w.copy() for w in self.weights], [b.copy() for b in self.biases],
            role=role or self.role, adapter=adapter, meta=dict(self.meta),
        )

    def frozen(self):
        """Read-only reference copy."""
        return self.copy(role="reference")

    def with_adapter(self, rank=8, seed=0, scale=None):
        """Policy copy carrying a fresh adapter; ``B = 0`` so outputs are unchanged."""
        if rank < 1:
            raise ValueError("adapter rank must be >= 1")
        rng = np.random.default_rng(seed)
        adapter = []
        for w in self.weights:
            out_f, in_f = w.shape
            r = min(rank, out_f, in_f)
            s = scale if scale is not None else 1.0 / np.sqrt(r)
            adapter.append((rng.normal(0.0, s, (out_f, r)), np.zeros((r, in_f))))
        model = self.copy(role="policy")
        model.adapter = adapter
        return model

    @property
    def hidden(self):
        return tuple(w.shape[0] for w in self.weights[:-1])

    def effective_weights(self):
        if self.adapter is None:
            return list(self.weights)
        return [w + a @ b for w, (a, b) in zip(self.weights, self.adapter)]

    # parameter vector

    def trainable_arrays(self):
        if self.adapter is not None:
            return [m for pair in self.adapter for m in pair]
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def get_params(self):
        """Flat copy of the trainable parameters."""
        return np.concatenate([a.ravel() for a in self.trainable_arrays()])

    def set_params(self, flat):
        if self.role == "reference":
            raise AdapterError("reference model parameters are frozen")
        flat = np.asarray(flat, dtype=np.float64)
        arrays = self.trainable_arrays()
        n = sum(a.size for a in arrays)
        if flat.shape != (n,):
            raise ShapeError(f"expected {n} parameters, got {flat.shape}")
        pos = 0
        for a in arrays:
            a[...] = flat[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    @property
    def n_params(self):
        return sum(a.size for a in self.trainable_arrays())

    # evaluation

    def _inputs(self, z, t, c):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        n = z.shape[0]
        if t.size == 1:
            t = np.broadcast_to(t, (n,))
        elif t.size != n:
            raise ShapeError(f"{t.size} times for {n} states")
        if z.shape[1] != self.dim:
            raise ShapeError(f"z has dimension {z.shape[1]}, model expects {self.dim}")
        if c.shape[1] != self.cond_dim:
            raise ShapeError(f"c has dimension {c.shape[1]}, model expects {self.cond_dim}")
        if c.shape[0] == 1 and n > 1:
            c = np.broadcast_to(c, (n, self.cond_dim))
        return np.concatenate([z, time_features(t), c], axis=1)

    def forward(self, z, t, c):
        """Return ``(output, cache)``; the cache feeds :meth:`backward`."""
        x = self._inputs(z, t, c)
        weights = self.effective_weights()
        acts = [x]
        h = x
        for w, b in zip(weights[:-1], self.biases[:-1]):
            h = np.tanh(h @ w.T + b)
            acts.append(h)
        out = h @ weights[-1].T + self.biases[-1]
        return out, (acts, weights)

    def predict(self, z, t, c):
        return self.forward(z, t, c)[0]

    __call__ = predict

    def backward(self, cache, grad_out):
        """Gradient of ``sum(grad_out * output)`` w.r.t. the trainable parameters."""
        acts, weights = cache
        grad_w = [None] * len(weights)
        grad_b = [None] * len(weights)
        g = grad_out
        for i in range(len(weights) - 1, -1, -1):
            grad_w[i] = g.T @ acts[i]
            grad_b[i] = g.sum(axis=0)
            if i > 0:
                g = (g @ weights[i]) * (1.0 - acts[i] ** 2)
        if self.adapter is None:
            parts = []
            for gw, gb in zip(grad_w, grad_b):
                parts.extend((gw.ravel(), gb.ravel()))
            return np.concatenate(parts)
        parts = []
        for gw, (a, b) in zip(grad_w, self.adapter):
            parts.extend(((gw @ b.T).ravel(), (a.T @ gw).ravel()))
        return np.concatenate(parts)


def _check_finite_rows(out, what):
    bad = ~np.all(np.isfinite(out), axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite {what} at sample {idx}", index=idx)


def fm_loss(model, batch):
    """Mean squared velocity error over the batch, and its gradient."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if model.role != "policy":
        raise AdapterError("fm_loss trains a policy-role model")
    out, cache = model.forward(batch.zt, batch.t, batch.c)
    _check_finite_rows(out, "model output")
    resid = out - batch.v
    n = len(batch)
    loss = float(np.sum(resid ** 2) / n)
    grad = model.backward(cache, 2.0 * resid / n)
    return loss, grad


def sample_ode(model, z0, c, n_steps):
    """Euler-integrate ``dz/dt = v(z; t, c)`` from ``t = 0`` to ``t = 1``.

    ``model`` is anything with ``predict(z, t, c)``. Rows of ``z0`` are
    integrated together. Velocities are taken at the left end of each step.
    """
    if int(n_steps) != n_steps or n_steps < 1:
        raise ValueError("n_steps must be a positive integer")
    z = np.array(np.atleast_2d(z0), dtype=np.float64)
    squeeze = np.ndim(z0) == 1
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    dt = 1.0 / n_steps
    for k in range(int(n_steps)):
        t = np.full(z.shape[0], k * dt)
        z = z + dt * model.predict(z, t, c)
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"state went non-finite at step {k}", step=k)
    return z[0] if squeeze else z


def adapter_merge(model):
    """Fold ``A @ B`` into the base weights and drop the adapter."""
    if model.adapter is None:
        raise AdapterError("model has no adapter to merge")
    return VelocityField(
        model.dim, model.cond_dim, model.effective_weights(),
        [b.copy() for b in model.biases], role=model.role, meta=dict(model.meta),
    )


def save_checkpoint(model, path):
    """Write ``model`` to an ``.npz`` container.

    Layout: a JSON ``header`` (format, version, dims, hidden sizes, role,
    adapter ranks, meta), then arrays ``W{i}``, ``b{i}`` and, when an adapter
    is present, ``A{i}``, ``B{i}``.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dim": model.dim,
        "cond_dim": model.cond_dim,
        "hidden": list(model.hidden),
        "role": model.role,
        "adapter_ranks": None if model.adapter is None else [a.shape[1] for a, _ in model.adapter],
        "meta": model.meta,
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    if model.adapter is not None:
        for i, (a, b) in enumerate(model.adapter):
            arrays[f"A{i}"] = a
            arrays[f"B{i}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a velocity-field checkpoint")
        if header["version"] > CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {header['version']} is newer than supported")
        n_layers = len(header["hidden"]) + 1
        weights = [data[f"W{i}"].copy() for i in range(n_layers)]
        biases = [data[f"b{i}"].copy() for i in range(n_layers)]
        adapter = None
        if header["adapter_ranks"] is not None:
            adapter = [(data[f"A{i}"].copy(), data[f"B{i}"].copy()) for i in range(n_layers)]
    return VelocityField(header["dim"], header["cond_dim"], weights, biases,
                         role=header["role"], adapter=adapter, meta=header["meta"])
