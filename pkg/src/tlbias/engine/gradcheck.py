"""Central finite differences, used as the independent gradient oracle."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5,
                     indices: Iterable[int] | None = None) -> np.ndarray:
    """Estimate df/dx by ``(f(x + h e) - f(x - h e)) / 2h`` per element.

    ``x.data`` is perturbed in place and restored. With ``indices`` (flat
    offsets into ``x``) only those entries are estimated and a 1-D array is
    returned; otherwise the result has ``x``'s shape.
    """
    flat = x.data.reshape(-1)
    picks = range(flat.size) if indices is None else list(indices)
    est = np.zeros(len(picks), dtype=np.float64)
    with no_grad():
        for n, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(x))
            flat[i] = orig - h
            fm = _scalar(f(x))
            flat[i] = orig
            est[n] = (fp - fm) / (2.0 * h)
    return est.reshape(x.shape) if indices is None else est


def _scalar(v) -> float:
    return float(v.data) if isinstance(v, Tensor) else float(v)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-8) -> float:
    """Largest elementwise relative error over entries with ``|analytic| >= abs_floor``.

    The remaining entries are judged absolutely by :func:`small_entries_ok`.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    err = np.abs(a - n)
    small = np.abs(a) < abs_floor
    rel = np.where(small, 0.0, err / np.maximum(np.abs(a), np.abs(n)).clip(min=1e-300))
    return float(rel.max(initial=0.0))


def small_entries_ok(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-8) -> bool:
    """True when every entry with ``|analytic| < abs_floor`` is within ``abs_floor``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    small = np.abs(a) < abs_floor
    return bool(np.all(np.abs(a[small] - n[small]) <= abs_floor))
