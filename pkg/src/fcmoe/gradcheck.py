"""Finite-difference verification of analytic gradients.

The generic helpers compare tape gradients against central differences on
arbitrary scalar-valued functions. :func:`check_model` runs the comparison
over every parameter group of a full model forward+loss, and is what the CLI
``gradcheck`` command executes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
_DENOM_FLOOR = 1e-8


def finite_difference(f, x: np.ndarray, h: float = DEFAULT_STEP, elements=None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` must not mutate its argument. ``elements`` optionally restricts the
    sweep to a subset of flat indices; unchecked entries come back as NaN so
    callers cannot mistake them for verified zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.full(x.size, np.nan)
    flat = x.reshape(-1)
    indices = range(x.size) if elements is None else elements
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise relative error with the denominator floored at 1e-8.

    NaN entries of ``numeric`` mark unchecked coordinates and are skipped.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    checked = ~np.isnan(numeric)
    if not checked.any():
        return 0.0
    a = analytic[checked]
    n = numeric[checked]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _DENOM_FLOOR)
    return float((np.abs(a - n) / denom).max())


@dataclass
class GroupResult:
    group: str
    max_rel_err: float
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_err < DEFAULT_TOLERANCE


def _sample_elements(size: int, limit: int | None, seed: int) -> list[int] | None:
    if limit is None or size <= limit:
        return None
    rng = np.random.default_rng(seed)
    return sorted(rng.choice(size, size=limit, replace=False).tolist())


def check_model(
    params,
    loss_fn,
    h: float = DEFAULT_STEP,
    max_elements_per_tensor: int | None = None,
    seed: int = 0,
    recheck_step: float | None = 1e-4,
    tolerance: float = DEFAULT_TOLERANCE,
) -> list[GroupResult]:
    """Compare tape gradients of ``loss_fn(params)`` with central differences.

    ``loss_fn`` takes the parameter mapping and returns a scalar
    :class:`~fcmoe.numerics.Tensor`. Results are reported per parameter
    group, the prefix before the first dot in each parameter name.

    Coordinates whose gradient is tiny (around 1e-7 and below) can exceed
    the tolerance at the primary step size through cancellation round-off
    alone, so failures are re-measured at ``recheck_step``: round-off shrinks
    with the larger step while a genuinely wrong backward rule keeps its
    error. Pass ``recheck_step=None`` for the strict single-step metric.
    """
    nm.zero_grads(params)
    with nm.Tape() as tape:
        loss = loss_fn(params)
    nm.backward(loss, tape)

    groups: dict[str, tuple[float, int]] = {}
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"gradcheck: no gradient reached parameter {name!r}")

        def eval_at(x, _p=p):
            saved = _p.data
            _p.data = np.ascontiguousarray(x)
            try:
                return loss_fn(params).item()
            finally:
                _p.data = saved

        elements = _sample_elements(p.size, max_elements_per_tensor, seed)
        numeric = finite_difference(eval_at, p.data.copy(), h=h, elements=elements)
        err = relative_error(p.grad, numeric)
        if err >= tolerance and recheck_step is not None:
            flat_a = p.grad.reshape(-1)
            flat_n = numeric.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(flat_a), np.abs(flat_n)), _DENOM_FLOOR)
            suspects = [
                int(i)
                for i in np.flatnonzero(~np.isnan(flat_n))
                if abs(flat_a[i] - flat_n[i]) / denom[i] >= tolerance
            ]
            redo = finite_difference(eval_at, p.data.copy(), h=recheck_step, elements=suspects)
            flat_n = flat_n.copy()
            flat_n[suspects] = redo.reshape(-1)[suspects]
            err = relative_error(flat_a, flat_n)
        checked = p.size if elements is None else len(elements)
        group = name.split(".", 1)[0]
        worst, count = groups.get(group, (0.0, 0))
        groups[group] = (max(worst, err), count + checked)

    return [GroupResult(g, worst, count) for g, (worst, count) in groups.items()]
