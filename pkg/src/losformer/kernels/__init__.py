"""Hot numeric kernels with two interchangeable backends.

The compiled Cython backend fuses the elementwise-heavy inner loops
(GELU, row softmax, row layer norm and their backward passes, plus the
Adam update). The pure-numpy backend implements the same contracts and
is used automatically when the extension is not built.

Backend choice, in order:
  1. the LOSFORMER_KERNELS environment variable ("c" or "python"),
  2. the compiled extension if it imports,
  3. the numpy fallback.

Matrix products are deliberately not a kernel: both backends leave them
to numpy's BLAS, which is already compiled and tuned.

All kernels take C-contiguous float64 arrays of rank 2 and are
deterministic (single-threaded, fixed summation order per backend).
"""

from __future__ import annotations

import os

from . import pybackend

_BACKENDS = {"python": pybackend}
_c_import_error = None
try:
    from . import _ckernels

    _BACKENDS["c"] = _ckernels
except ImportError as exc:  # extension not built on this install
    _c_import_error = exc


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def get_backend(name: str):
    if name not in ("c", "python"):
        raise ValueError(f"unknown kernel backend {name!r}; expected 'c' or 'python'")
    if name not in _BACKENDS:
        raise ImportError(
            f"kernel backend {name!r} is not available: {_c_import_error}"
        )
    return _BACKENDS[name]


def _initial_backend() -> str:
    forced = os.environ.get("LOSFORMER_KERNELS")
    if forced:
        get_backend(forced)  # raises with a clear message if unusable
        return forced
    return "c" if "c" in _BACKENDS else "python"


_active_name = _initial_backend()
_active = _BACKENDS[_active_name]


def active_backend() -> str:
    return _active_name


def set_backend(name: str) -> None:
    global _active, _active_name
    _active = get_backend(name)
    _active_name = name


def gelu(x):
    return _active.gelu(x)


def gelu_backward(x, dy):
    return _active.gelu_backward(x, dy)


def softmax_rows(x):
    return _active.softmax_rows(x)


def softmax_rows_backward(p, dp):
    return _active.softmax_rows_backward(p, dp)


def layer_norm_rows(x, gain, bias, eps):
    return _active.layer_norm_rows(x, gain, bias, eps)


def layer_norm_rows_backward(x, gain, mean, rstd, dy):
    return _active.layer_norm_rows_backward(x, gain, mean, rstd, dy)


def adam_update(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
    return _active.adam_update(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay)
