"""Central-difference gradient checking for named-parameter models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .trajectory import derive_rng

LossAndGrad = Callable[[Mapping[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    n_checked: int
    worst: tuple[str, int]
    tolerance: float
    floor: float = 1e-8

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def sample_entries(params: Mapping[str, np.ndarray], n: int, seed: int = 0) -> list[tuple[str, int]]:
    """Uniform sample (without replacement) of flat entries across all tensors."""
    names = sorted(params)
    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    flat = derive_rng(seed, "gradcheck").choice(total, size=min(n, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out = []
    for f in np.sort(flat):
        i = int(np.searchsorted(offsets, f, side="right") - 1)
        out.append((names[i], int(f - offsets[i])))
    return out


def check_gradients(
    loss_and_grad: LossAndGrad,
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    n: int = 200,
    tolerance: float = 1e-4,
    seed: int = 0,
    analytic: Mapping[str, np.ndarray] | None = None,
    floor: float | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with ``(f(x+h) - f(x-h)) / 2h``.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. The default floor
    is the central difference's own rounding noise, ``8 eps max(1, |f|) / h``,
    divided by the tolerance, so entries whose true gradient is near zero are
    judged on absolute error at the level the difference quotient can
    resolve. Parameters must be float64 and are restored after each probe.
    """
    params = {k: v for k, v in params.items()}
    for k, v in params.items():
        if v.dtype != np.float64:
            raise TypeError(f"gradient check needs float64 parameters; {k} is {v.dtype}")
    f0, grads0 = loss_and_grad(params)
    if analytic is None:
        analytic = grads0
    if floor is None:
        noise = 8.0 * np.finfo(np.float64).eps * max(1.0, abs(f0)) / h
        floor = float(max(1e-8, noise / tolerance))
    worst, max_rel, max_abs = ("", -1), 0.0, 0.0
    entries = sample_entries(params, n, seed)
    for name, i in entries:
        arr = params[name]
        flat = arr.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        f_plus, _ = loss_and_grad(params)
        flat[i] = orig - h
        f_minus, _ = loss_and_grad(params)
        flat[i] = orig
        num = (f_plus - f_minus) / (2 * h)
        ana = float(analytic[name].reshape(-1)[i])
        abs_err = abs(ana - num)
        rel = abs_err / max(abs(ana), abs(num), floor)
        max_abs = max(max_abs, abs_err)
        if rel > max_rel:
            max_rel, worst = rel, (name, i)
    return GradCheckReport(float(max_rel), float(max_abs), len(entries), worst, tolerance, floor)
