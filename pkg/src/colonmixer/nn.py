"""Minimal dense-network kernel with hand-written backward passes.

Layers follow a column convention: a fully connected layer maps an
(in_dim, k) matrix to (out_dim, k), treating each of the k columns as an
independent vector. All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf

__all__ = [
    "LAYER_NORM_EPS",
    "Adam",
    "DenseLayer",
    "Dropout",
    "GradCheckReport",
    "LayerNorm",
    "check_gradients",
    "gelu",
    "gelu_grad",
    "glorot_uniform",
    "mse_loss",
]

LAYER_NORM_EPS = 1e-5

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def glorot_uniform(out_dim: int, in_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot init for an (out_dim, in_dim) weight matrix."""
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


class DenseLayer:
    """Fully connected layer y = W x + b, caching its input for backward.

    W has shape (out_dim, in_dim). Accepts an (in_dim,) vector or an
    (in_dim, k) matrix of column vectors. Weights start at Glorot uniform
    when an rng is given, zero otherwise; biases start at zero.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None):
        if in_dim < 1 or out_dim < 1:
            raise ValueError(f"dense layer dims must be >= 1, got {in_dim}x{out_dim}")
        if rng is None:
            self.w = np.zeros((out_dim, in_dim))
        else:
            self.w = glorot_uniform(out_dim, in_dim, rng)
        self.b = np.zeros(out_dim)
        self.w_grad = np.zeros_like(self.w)
        self.b_grad = np.zeros_like(self.b)
        self._x: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        as_vector = x.ndim == 1
        if as_vector:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != self.in_dim:
            raise ValueError(
                f"dense forward: weight is {self.w.shape}, input is {x.shape}; "
                f"input must be ({self.in_dim},) or ({self.in_dim}, k)"
            )
        self._x = x
        y = self.w @ x + self.b[:, None]
        return y[:, 0] if as_vector else y

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        """Accumulate w/b gradients from the cached input; return d_input."""
        if self._x is None:
            raise RuntimeError("dense backward called before forward")
        d_out = np.asarray(d_out, dtype=np.float64)
        as_vector = d_out.ndim == 1
        if as_vector:
            d_out = d_out[:, None]
        self.w_grad += d_out @ self._x.T
        self.b_grad += d_out.sum(axis=1)
        d_x = self.w.T @ d_out
        return d_x[:, 0] if as_vector else d_x

    def zero_grad(self) -> None:
        self.w_grad[...] = 0.0
        self.b_grad[...] = 0.0


class LayerNorm:
    """Normalizes each row to zero mean / unit variance, then applies a
    learnable per-column gain and bias."""

    def __init__(self, dim: int, eps: float = LAYER_NORM_EPS):
        if dim < 2:
            raise ValueError(f"layer norm needs rows of length >= 2, got {dim}")
        self.dim = dim
        self.eps = eps
        self.gain = np.ones(dim)
        self.bias = np.zeros(dim)
        self.gain_grad = np.zeros(dim)
        self.bias_grad = np.zeros(dim)
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"layer norm expects (rows, {self.dim}), got {x.shape}")
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xn = xc * inv
        self._cache = (xn, inv)
        return xn * self.gain + self.bias

    def normalized(self, x: np.ndarray) -> np.ndarray:
        """Forward without the affine part (the pre-gain/bias rows)."""
        y = self.forward(x)
        return (y - self.bias) / self.gain

    def backward(self, d_y: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("layer norm backward called before forward")
        xn, inv = self._cache
        self.gain_grad += (d_y * xn).sum(axis=0)
        self.bias_grad += d_y.sum(axis=0)
        d_xn = d_y * self.gain
        return inv * (
            d_xn
            - d_xn.mean(axis=1, keepdims=True)
            - xn * (d_xn * xn).mean(axis=1, keepdims=True)
        )

    def zero_grad(self) -> None:
        self.gain_grad[...] = 0.0
        self.bias_grad[...] = 0.0


class Dropout:
    """Inverted dropout: kept entries are scaled by 1/(1-p) in train mode;
    inference mode is the identity."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._mask: np.ndarray | None = None

    def forward(self, x: np.ndarray, train: bool, rng: np.random.Generator | None = None) -> np.ndarray:
        if not train or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        keep = 1.0 - self.p
        self._mask = (rng.random(np.shape(x)) < keep) / keep
        return x * self._mask

    def backward(self, d_y: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return d_y
        return d_y * self._mask


def gelu(x):
    """Exact GELU x * Phi(x), with Phi the standard normal CDF (erf form)."""
    arr = np.asarray(x, dtype=np.float64)
    out = 0.5 * arr * (1.0 + erf(arr * _INV_SQRT2))
    return float(out) if np.ndim(x) == 0 else out


def gelu_grad(x):
    """Derivative of the exact GELU: Phi(x) + x * pdf(x)."""
    arr = np.asarray(x, dtype=np.float64)
    pdf = np.exp(-0.5 * arr * arr) * _INV_SQRT_2PI
    out = 0.5 * (1.0 + erf(arr * _INV_SQRT2)) + arr * pdf
    return float(out) if np.ndim(x) == 0 else out


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over all entries of the squared difference.

    Returns (loss, d_loss/d_pred) with the gradient 2*(pred-target)/count.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.size) * diff
    return loss, grad


@dataclass
class _AdamSlot:
    m: np.ndarray
    v: np.ndarray


class Adam:
    """Adam with bias correction. Updates the given parameter arrays in place,
    so anything holding a reference to them sees the new values."""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._slots = {
            name: _AdamSlot(np.zeros_like(p), np.zeros_like(p)) for name, p in params.items()
        }

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads[name]
            if np.isnan(g).any():
                raise FloatingPointError(f"NaN gradient in tensor '{name}'")
            slot = self._slots[name]
            slot.m *= self.beta1
            slot.m += (1.0 - self.beta1) * g
            slot.v *= self.beta2
            slot.v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (slot.m / bc1) / (np.sqrt(slot.v / bc2) + self.eps)


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    passed: bool
    max_rel_err: float
    worst_tensor: str
    worst_index: tuple
    tol: float
    n_checked: int

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"grad check {status}: max relative error {self.max_rel_err:.3e} "
            f"at {self.worst_tensor}{list(self.worst_index)} "
            f"(tol {self.tol:.1e}, {self.n_checked} entries)"
        )


def check_gradients(
    loss_fn: Callable[[str | None], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    rel_floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic parameter gradients against central finite differences.

    Every entry of every tensor in `params` is perturbed by +-h in place and
    `loss_fn(name)` re-evaluates the scalar loss; `name` is the touched tensor
    so callers that cache intermediate stages may skip recomputing what did
    not change, but the returned value must equal a full re-evaluation.
    Relative error uses max(|analytic|, |numeric|, rel_floor) as denominator,
    so gradients below the floor are compared absolutely.
    """
    worst = 0.0
    worst_tensor = ""
    worst_index: tuple = ()
    n_checked = 0
    for name, p in params.items():
        a = analytic[name]
        if a.shape != p.shape:
            raise ValueError(f"analytic gradient for '{name}' has shape {a.shape}, param has {p.shape}")
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            loss_plus = loss_fn(name)
            p[idx] = orig - h
            loss_minus = loss_fn(name)
            p[idx] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * h)
            rel = abs(a[idx] - numeric) / max(abs(a[idx]), abs(numeric), rel_floor)
            if rel > worst:
                worst = rel
                worst_tensor = name
                worst_index = idx
            n_checked += 1
    return GradCheckReport(
        passed=worst <= tol,
        max_rel_err=worst,
        worst_tensor=worst_tensor,
        worst_index=worst_index,
        tol=tol,
        n_checked=n_checked,
    )
