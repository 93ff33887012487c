"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Tensor, precision


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    max_abs_error: float = 0.0
    failures: list = field(default_factory=list)


def finite_diff_check(op, inputs, tolerance: float = 1e-3, abs_floor: float = 1e-4, n_coords: int = 100,
                      h: float = 1e-3, seed: int = 0, dtype=np.float64) -> GradCheckReport:
    """Compare tape gradients of ``op(*inputs)`` against central differences.

    The op output is reduced to a scalar by a fixed random projection. Inputs
    are numpy arrays; those listed as float arrays all get requires_grad.
    Coordinates are sampled uniformly over all input elements. A coordinate
    passes when ``|a - n| <= tolerance * max(|a|, |n|)`` or ``|a - n| <= abs_floor``.
    """
    rng = np.random.default_rng(seed)
    with precision(dtype):
        arrays = [np.array(a, dtype=dtype) for a in inputs]
        tensors = [Tensor(a, requires_grad=True) for a in arrays]
        out = op(*tensors)
        proj = rng.standard_normal(out.shape)
        loss = (out * proj).sum()
        loss.backward()

        def f():
            with precision(dtype):
                return float((op(*[Tensor(a) for a in arrays]).data * proj).sum())

        sizes = np.array([a.size for a in arrays])
        picks = rng.integers(0, sizes.sum(), size=n_coords)
        offsets = np.cumsum(sizes) - sizes
        worst = worst_abs = 0.0
        failures = []
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = np.unravel_index(int(flat - offsets[which]), arrays[which].shape)
            orig = arrays[which][idx]
            arrays[which][idx] = orig + h
            fp = f()
            arrays[which][idx] = orig - h
            fm = f()
            arrays[which][idx] = orig
            num = (fp - fm) / (2 * h)
            ana = float(tensors[which].grad[idx])
            diff = abs(ana - num)
            rel = diff / max(abs(ana), abs(num), 1e-12)
            worst_abs = max(worst_abs, diff)
            if diff > abs_floor:
                worst = max(worst, rel)
                if rel > tolerance:
                    failures.append((which, idx, ana, num))
    return GradCheckReport(not failures, worst, len(picks), worst_abs, failures)
