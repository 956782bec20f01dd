"""Central finite-difference verification of tape gradients.

Checks run in float64: pass 64-bit tensors, or the harness refuses. The
error measure for a coordinate is |analytic - numeric| scaled by the larger
gradient magnitude, with the denominator floored so that finite-difference
truncation noise on near-zero coordinates cannot produce false alarms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, no_grad, zero_grads


@dataclass
class GradCheckResult:
    max_rel_err: float = 0.0
    checked: int = 0
    excluded: int = 0
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(build_loss: Callable[[], Tensor], tensors: list[Tensor], *,
                    step: float = 1e-3, rtol: float = 1e-4,
                    denom_floor: float = 1e-2,
                    max_coords_per_tensor: int | None = None,
                    kink_filter: bool = False,
                    max_excluded_fraction: float = 0.3,
                    rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare tape gradients of ``build_loss()`` against central differences.

    ``build_loss`` must be a pure function of the current ``tensors`` data.
    With ``max_coords_per_tensor`` set, a random subset of coordinates is
    checked per tensor (all coordinates otherwise).

    ``kink_filter`` re-evaluates each coordinate at half the step and
    excludes coordinates where the two estimates disagree: there the
    perturbation crosses a relu/max kink and the central difference does
    not converge, so it cannot measure the one-sided tape gradient. The
    consistent coordinates are compared against the Richardson
    extrapolation of the two estimates. The excluded fraction is capped so
    the check keeps teeth.
    """
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ValueError("gradient checks require float64 tensors")
        if not t.requires_grad:
            raise ValueError("all checked tensors must set requires_grad")
    if rng is None:
        rng = np.random.default_rng(0)

    zero_grads(tensors)
    with Tape():
        loss = build_loss()
        loss.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]

    def eval_loss() -> float:
        with no_grad():
            return build_loss().item()

    def central(flat, i, h) -> float:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = eval_loss()
        flat[i] = orig - h
        f_minus = eval_loss()
        flat[i] = orig
        return (f_plus - f_minus) / (2.0 * h)

    result = GradCheckResult()
    for t, a in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        a_flat = a.reshape(-1)
        for i in coords:
            numeric = central(flat, i, step)
            if kink_filter:
                half = central(flat, i, step / 2.0)
                gap = abs(numeric - half)
                if gap > 1e-4 * max(abs(numeric), abs(half), denom_floor):
                    result.excluded += 1
                    continue
                numeric = (4.0 * half - numeric) / 3.0
            err = abs(a_flat[i] - numeric)
            rel = err / max(abs(a_flat[i]), abs(numeric), denom_floor)
            result.checked += 1
            result.max_rel_err = max(result.max_rel_err, rel)
            if rel >= rtol:
                name = t.name or f"tensor{tensors.index(t)}"
                result.failures.append(
                    f"{name}[{i}]: analytic={a_flat[i]:.8g} numeric={numeric:.8g} "
                    f"rel={rel:.3g}")
    if (kink_filter and result.excluded >
            max_excluded_fraction * (result.checked + result.excluded)):
        result.failures.append(
            f"{result.excluded}/{result.checked + result.excluded} coordinates "
            f"were non-smooth under the finite-difference step")
    return result


def assert_gradients_match(build_loss, tensors, **kwargs) -> GradCheckResult:
    res = check_gradients(build_loss, tensors, **kwargs)
    if not res.ok:
        shown = "\n  ".join(res.failures[:10])
        raise AssertionError(
            f"{len(res.failures)}/{res.checked} coordinates failed the "
            f"finite-difference check (max rel err {res.max_rel_err:.3g}):\n  {shown}")
    return res
