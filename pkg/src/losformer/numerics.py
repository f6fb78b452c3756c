"""Dense float64 numerical primitives for the encoder and baseline.

Matrices are plain C-contiguous float64 numpy arrays; every op here is a
thin contract layer (shape checks, determinism, finite-value guards) over
either numpy/BLAS or the kernel backends in `losformer.kernels`.

Set LOSFORMER_CHECK_FINITE=1 (or call set_finite_checks(True)) to make
every op assert its output is finite; useful when chasing a divergence,
too slow to leave on.
"""

from __future__ import annotations

import os

import numpy as np

from . import kernels


class ShapeError(ValueError):
    pass


class NumericsError(ValueError):
    pass


_check_finite = os.environ.get("LOSFORMER_CHECK_FINITE", "") not in ("", "0")


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


def guard_finite(x, label: str):
    if _check_finite and not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {label}")
    return x


def matrix(data) -> np.ndarray:
    out = np.ascontiguousarray(data, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"expected a rank-2 matrix, got shape {out.shape}")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    return guard_finite(a @ b, "matmul")


def add_bias(x: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != bias.shape[-1]:
        raise ShapeError(f"bias length {bias.shape} does not match {x.shape}")
    return x + bias


def transpose(a: np.ndarray) -> np.ndarray:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got shape {a.shape}")
    return a.T


def _rows_view(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64).reshape(-1, x.shape[-1])


def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis (any rank), max-shifted for stability."""
    flat = kernels.softmax_rows(_rows_view(x))
    return guard_finite(flat.reshape(x.shape), "softmax")


def softmax_backward(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    flat = kernels.softmax_rows_backward(_rows_view(p), _rows_view(dp))
    return flat.reshape(p.shape)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    y, _, _ = layer_norm_stats(x, gain, bias, eps)
    return y


def layer_norm_stats(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-12):
    """Row layer norm returning (y, mean, rstd); the saved statistics feed
    the backward pass. Rows are the last axis of x."""
    if x.shape[-1] < 2:
        raise ShapeError(f"layer norm needs rows of length >= 2, got shape {x.shape}")
    y, mean, rstd = kernels.layer_norm_rows(_rows_view(x), gain, bias, float(eps))
    return guard_finite(y.reshape(x.shape), "layer_norm"), mean, rstd


def layer_norm_backward(x: np.ndarray, gain: np.ndarray, mean: np.ndarray,
                        rstd: np.ndarray, dy: np.ndarray):
    dx, dgain, dbias = kernels.layer_norm_rows_backward(
        _rows_view(x), gain, mean, rstd, _rows_view(dy))
    return dx.reshape(x.shape), dgain, dbias


def gelu(x: np.ndarray) -> np.ndarray:
    return guard_finite(kernels.gelu(_rows_view(x)).reshape(x.shape), "gelu")


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return kernels.gelu_backward(_rows_view(x), _rows_view(dy)).reshape(x.shape)


def dropout(x: np.ndarray, p: float, rng: np.random.Generator, train: bool):
    """Inverted dropout. Returns (y, mask); mask is None when nothing was
    dropped (eval mode or p=0) and otherwise multiplies to 0 or 1/(1-p),
    so backward is simply dy * mask."""
    if not 0.0 <= p < 1.0:
        raise NumericsError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


class Parameter:
    """A trainable tensor with its gradient and Adam state.

    `decay` marks whether decoupled weight decay applies; layer-norm gains
    and all biases set it False.
    """

    __slots__ = ("name", "value", "grad", "m", "v", "step", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool = True):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0
        self.decay = decay

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def _as2d(self, arr: np.ndarray) -> np.ndarray:
        return arr.reshape(1, -1) if arr.ndim == 1 else arr


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One in-place bias-corrected Adam update over `params`, with decoupled
    weight decay on parameters whose `decay` flag is set."""
    for p in params:
        p.step += 1
        wd = weight_decay if p.decay else 0.0
        kernels.adam_update(
            p._as2d(p.value), p._as2d(p.grad), p._as2d(p.m), p._as2d(p.v),
            p.step, float(lr), float(beta1), float(beta2), float(eps), float(wd),
        )
        guard_finite(p.value, f"parameter {p.name}")


def finite_diff_check(loss_fn, params, n_samples: int = 100, h: float = 1e-5,
                      rng: np.random.Generator | None = None) -> float:
    """Max relative error between `params[i].grad` and central differences
    of `loss_fn` over `n_samples` randomly sampled coordinates.

    The caller computes the analytic gradients (one backward pass) before
    calling. `loss_fn` must be deterministic; it is invoked twice up front
    and a bitwise mismatch is refused, which catches live dropout.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    first, second = float(loss_fn()), float(loss_fn())
    if first != second:
        raise NumericsError(
            "loss_fn is not deterministic (two calls disagree); disable dropout "
            "and any other randomness before gradient checking")
    # snapshot now: perturbed evaluations below may overwrite grads when
    # loss_fn runs its own backward pass
    analytic = [p.grad.copy() for p in params]

    coords = []
    for pi, p in enumerate(params):
        coords.extend((pi, fi) for fi in range(p.value.size))
    if not coords:
        raise NumericsError("no parameters to check")
    take = min(n_samples, len(coords))
    chosen = rng.choice(len(coords), size=take, replace=False)

    worst = 0.0
    for ci in chosen:
        pi, fi = coords[int(ci)]
        flat = params[pi].value.reshape(-1)
        original = flat[fi]
        flat[fi] = original + h
        loss_plus = float(loss_fn())
        flat[fi] = original - h
        loss_minus = float(loss_fn())
        flat[fi] = original
        g_fd = (loss_plus - loss_minus) / (2.0 * h)
        g = analytic[pi].reshape(-1)[fi]
        rel = abs(g_fd - g) / max(abs(g_fd), abs(g), 1e-8)
        worst = max(worst, rel)
    return worst
