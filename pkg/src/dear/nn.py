"""Minimal reverse-mode differentiable building blocks.

Dense layers, GRU cells with backpropagation through time, Adam, and a
central-finite-difference gradient checker. All math is float64; everything
here is exactly what the Q-network needs and nothing more (no general graphs,
no convolutions).

Parameters live in plain numpy arrays. A network exposes them as a flat
``{name: array}`` mapping; gradient bundles are dicts with the same keys and
shapes. Optimizer updates mutate the arrays in place so that layer objects
and the flat mapping always agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as _sigmoid

from .errors import ConsistencyError, ContractError, ShapeError

ACTIVATIONS = ("identity", "relu", "tanh")


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "identity":
        return a
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    raise ContractError(f"unknown activation {name!r}")


def _activate_grad(name: str, y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    """Gradient through the activation, expressed via the output y."""
    if name == "identity":
        return dy
    if name == "relu":
        return dy * (y > 0.0)
    if name == "tanh":
        return dy * (1.0 - y * y)
    raise ContractError(f"unknown activation {name!r}")


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """Fully connected layer y = act(W x + b).

    ``apply`` accepts a single vector (in_dim,) or a batch (B, in_dim).
    ``apply_cached`` additionally returns the cache needed by ``backward``.
    """

    def __init__(self, weights: np.ndarray, bias: np.ndarray, activation: str = "identity"):
        weights = np.asarray(weights, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weights.ndim != 2 or bias.ndim != 1 or weights.shape[0] != bias.shape[0]:
            raise ShapeError(
                f"dense layer needs weights (out,in) and bias (out,), got {weights.shape} / {bias.shape}"
            )
        if activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.weights = weights
        self.bias = bias
        self.activation = activation

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, out_dim: int, activation: str = "identity") -> "Dense":
        w = uniform_fan_in(rng, in_dim, (out_dim, in_dim))
        b = uniform_fan_in(rng, in_dim, (out_dim,))
        return cls(w, b, activation)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"dense input width {x.shape[-1]} != {self.in_dim}")
        return x

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = self._check_input(x)
        return _activate(self.activation, x @ self.weights.T + self.bias)

    def apply_cached(self, x: np.ndarray):
        x = self._check_input(x)
        pre = x @ self.weights.T + self.bias
        y = _activate(self.activation, pre)
        return y, (x, pre, y)

    def backward(self, cache, dy: np.ndarray):
        """Returns (dx, dw, db) for a cached forward pass."""
        x, _pre, y = cache
        dpre = _activate_grad(self.activation, y, np.asarray(dy, dtype=np.float64))
        if x.ndim == 1:
            dw = np.outer(dpre, x)
            db = dpre.copy()
        else:
            dw = dpre.T @ x
            db = dpre.sum(axis=0)
        dx = dpre @ self.weights
        return dx, dw, db

    def param_items(self, prefix: str):
        return [(f"{prefix}.w", self.weights), (f"{prefix}.b", self.bias)]


def dense_apply(layer: Dense, x: np.ndarray) -> np.ndarray:
    return layer.apply(x)


class GRUCell:
    """Gated recurrent unit with update gate z, reset gate r, candidate c.

        z = sigmoid(Wz x + Uz h + bz)
        r = sigmoid(Wr x + Ur h + br)
        c = tanh(Wh x + Uh (r*h) + bh)
        h' = (1 - z)*h + z*c

    Encoding folds the recurrence over a sequence starting from h0 (zeros by
    default) and returns the final hidden state. Batched encoding takes
    end-padded sequences (B, T, D) plus per-row lengths; padded steps leave
    the hidden state untouched.
    """

    GATES = ("z", "r", "h")

    def __init__(self, input_dim: int, hidden_dim: int, params: dict | None = None,
                 rng: np.random.Generator | None = None):
        if input_dim <= 0 or hidden_dim <= 0:
            raise ShapeError("GRU dims must be positive")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        if params is not None:
            for g in self.GATES:
                setattr(self, "w" + g, np.asarray(params["w" + g], dtype=np.float64))
                setattr(self, "u" + g, np.asarray(params["u" + g], dtype=np.float64))
                setattr(self, "b" + g, np.asarray(params["b" + g], dtype=np.float64))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            for g in self.GATES:
                setattr(self, "w" + g, uniform_fan_in(rng, input_dim, (hidden_dim, input_dim)))
                setattr(self, "u" + g, uniform_fan_in(rng, hidden_dim, (hidden_dim, hidden_dim)))
                setattr(self, "b" + g, uniform_fan_in(rng, hidden_dim, (hidden_dim,)))
        self._validate_shapes()

    def _validate_shapes(self):
        for g in self.GATES:
            w, u, b = getattr(self, "w" + g), getattr(self, "u" + g), getattr(self, "b" + g)
            if w.shape != (self.hidden_dim, self.input_dim) or u.shape != (self.hidden_dim, self.hidden_dim) \
                    or b.shape != (self.hidden_dim,):
                raise ShapeError(f"GRU gate {g} parameter shapes inconsistent")

    def step(self, x: np.ndarray, h: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        h = np.asarray(h, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"GRU input width {x.shape[-1]} != {self.input_dim}")
        if h.shape[-1] != self.hidden_dim:
            raise ShapeError(f"GRU hidden width {h.shape[-1]} != {self.hidden_dim}")
        z = _sigmoid(x @ self.wz.T + h @ self.uz.T + self.bz)
        r = _sigmoid(x @ self.wr.T + h @ self.ur.T + self.br)
        c = np.tanh(x @ self.wh.T + (r * h) @ self.uh.T + self.bh)
        return (1.0 - z) * h + z * c

    def encode(self, sequence, h0: np.ndarray | None = None) -> np.ndarray:
        """Final hidden state after folding the recurrence over ``sequence``."""
        h = np.zeros(self.hidden_dim) if h0 is None else np.asarray(h0, dtype=np.float64)
        if h.shape != (self.hidden_dim,):
            raise ShapeError(f"h0 width {h.shape} != ({self.hidden_dim},)")
        for x in sequence:
            h = self.step(x, h)
        return h

    def encode_batch(self, xs: np.ndarray, lengths: np.ndarray):
        """Encode end-padded sequences; returns (h_final (B,H), cache).

        Input projections do not depend on the hidden state, so they are
        hoisted into one (B*T, D) matmul per gate; the time loop only runs
        the recurrent parts.
        """
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 3 or xs.shape[2] != self.input_dim:
            raise ShapeError(f"batched GRU input must be (B,T,{self.input_dim}), got {xs.shape}")
        lengths = np.asarray(lengths)
        b, t_max = xs.shape[0], xs.shape[1]
        h = np.zeros((b, self.hidden_dim))
        if t_max == 0:
            return h, (xs, lengths, [])
        flat = xs.reshape(b * t_max, self.input_dim)
        xz = (flat @ self.wz.T + self.bz).reshape(b, t_max, -1)
        xr = (flat @ self.wr.T + self.br).reshape(b, t_max, -1)
        xh = (flat @ self.wh.T + self.bh).reshape(b, t_max, -1)
        steps = []
        for t in range(t_max):
            m = (t < lengths).astype(np.float64)[:, None]
            h_prev = h
            z = _sigmoid(xz[:, t] + h_prev @ self.uz.T)
            r = _sigmoid(xr[:, t] + h_prev @ self.ur.T)
            c = np.tanh(xh[:, t] + (r * h_prev) @ self.uh.T)
            # h' = (1-z)h + zc, masked: h + m*z*(c - h)
            h = h_prev + (m * z) * (c - h_prev)
            steps.append((h_prev, z, r, c, m))
        return h, (xs, lengths, steps)

    def backward_batch(self, cache, dh: np.ndarray) -> dict:
        """BPTT over a cached encode_batch; returns gate-parameter gradients.

        Per-step gate deltas are collected and the weight gradients reduce to
        one matmul per parameter block after the time loop.
        """
        if cache is None:
            raise ContractError("backward_batch called without a cached forward pass")
        xs, lengths, steps = cache
        zero = {("w" + g): np.zeros_like(getattr(self, "w" + g)) for g in self.GATES}
        zero.update({("u" + g): np.zeros_like(getattr(self, "u" + g)) for g in self.GATES})
        zero.update({("b" + g): np.zeros_like(getattr(self, "b" + g)) for g in self.GATES})
        if not steps:
            return zero
        b, t_max = xs.shape[0], xs.shape[1]
        hdim = self.hidden_dim
        d_az = np.empty((b, t_max, hdim))
        d_ar = np.empty((b, t_max, hdim))
        d_ah = np.empty((b, t_max, hdim))
        h_prevs = np.empty((b, t_max, hdim))
        rh_prevs = np.empty((b, t_max, hdim))
        dh = np.asarray(dh, dtype=np.float64)
        for t in range(t_max - 1, -1, -1):
            h_prev, z, r, c, m = steps[t]
            dh_cell = dh * m
            dz = dh_cell * (c - h_prev)
            dc = dh_cell * z
            dah = dc * (1.0 - c * c)
            daz = dz * z * (1.0 - z)
            duh = dah @ self.uh            # gradient w.r.t. (r * h_prev)
            dar = (duh * h_prev) * r * (1.0 - r)
            d_az[:, t] = daz
            d_ar[:, t] = dar
            d_ah[:, t] = dah
            h_prevs[:, t] = h_prev
            rh_prevs[:, t] = r * h_prev
            dh = (dh_cell * (1.0 - z) + daz @ self.uz + dar @ self.ur + duh * r
                  + dh * (1.0 - m))
        flat_x = xs.reshape(b * t_max, self.input_dim)
        flat_h = h_prevs.reshape(b * t_max, hdim)
        flat_rh = rh_prevs.reshape(b * t_max, hdim)
        out = {}
        for name, delta in (("z", d_az), ("r", d_ar), ("h", d_ah)):
            flat_d = delta.reshape(b * t_max, hdim)
            out["w" + name] = flat_d.T @ flat_x
            out["u" + name] = flat_d.T @ (flat_rh if name == "h" else flat_h)
            out["b" + name] = delta.sum(axis=(0, 1))
        return out

    def param_items(self, prefix: str):
        out = []
        for g in self.GATES:
            out.append((f"{prefix}.w{g}", getattr(self, "w" + g)))
            out.append((f"{prefix}.u{g}", getattr(self, "u" + g)))
            out.append((f"{prefix}.b{g}", getattr(self, "b" + g)))
        return out


def gru_encode(cell: GRUCell, sequence, h0: np.ndarray | None = None) -> np.ndarray:
    return cell.encode(sequence, h0)


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus hyperparameters."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict, learning_rate: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One Adam update, in place. Raises if grads do not cover params exactly."""
    missing = set(params) - set(grads)
    extra = set(grads) - set(params)
    if missing or extra:
        raise ConsistencyError(
            f"gradient bundle mismatch: missing={sorted(missing)} extra={sorted(extra)}"
        )
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConsistencyError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        upd = np.sqrt(v)                      # one temporary per block
        upd *= 1.0 / math.sqrt(b2c)
        upd += state.eps
        np.divide(m, upd, out=upd)
        upd *= state.learning_rate / b1c
        p -= upd


def global_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scales all gradients in place so the global norm is at most max_norm."""
    norm = global_norm(grads)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class FiniteDiffReport:
    """Per-parameter-block max relative errors from a finite-difference check."""

    block_errors: dict
    tolerance: float
    step_size: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.block_errors.values())

    @property
    def worst(self):
        name = max(self.block_errors, key=self.block_errors.get)
        return name, self.block_errors[name]

    def failing_blocks(self):
        return sorted(n for n, e in self.block_errors.items() if e > self.tolerance)

    def summary(self) -> str:
        name, err = self.worst
        status = "PASS" if self.passed else "FAIL"
        return f"{status}: worst block {name} rel_err={err:.3e} (tol {self.tolerance:g}, step {self.step_size:g})"


def finite_diff_check(params: dict, loss_fn, analytic: dict, *, tolerance: float = 1e-4,
                      step: float = 1e-3, rel_floor: float = 1e-4,
                      block_floor_frac: float = 0.05) -> FiniteDiffReport:
    """Central finite differences against an analytic gradient bundle.

    ``loss_fn`` must recompute the scalar loss from the current contents of
    ``params`` (which are perturbed in place, one entry at a time).

    The per-entry relative error is |a - n| / max(|a|, |n|, floor) where the
    floor is max(rel_floor, block_floor_frac * block gradient magnitude).
    Entries whose gradients sit far below the block scale carry central-
    difference truncation error that is absolute, not relative, so comparing
    them against their own magnitude would flag correct gradients; the floor
    keeps the check meaningful there while still catching corruption at or
    above the floor. Each block reports its max entry error.
    """
    missing = set(params) - set(analytic)
    if missing:
        raise ConsistencyError(f"analytic bundle missing blocks: {sorted(missing)}")
    block_errors = {}
    for name, p in params.items():
        a = analytic[name]
        if a.shape != p.shape:
            raise ConsistencyError(f"analytic gradient shape mismatch for {name}")
        worst = 0.0
        flat = p.reshape(-1)
        aflat = a.reshape(-1)
        block_scale = float(np.abs(a).max()) if a.size else 0.0
        floor = max(rel_floor, block_floor_frac * block_scale)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn()
            flat[i] = orig - step
            f_minus = loss_fn()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise ContractError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(aflat[i]), abs(numeric), floor)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
        block_errors[name] = worst
    return FiniteDiffReport(block_errors=block_errors, tolerance=tolerance, step_size=step)
