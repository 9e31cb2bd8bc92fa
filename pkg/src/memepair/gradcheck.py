"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import InputError, InvariantError
from .tensor import Graph, Tensor


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    num_coords: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    @property
    def worst(self) -> str | None:
        if not self.max_rel_error:
            return None
        return max(self.max_rel_error, key=self.max_rel_error.__getitem__)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max rel err {self.max_error:.3e} "
                f"(tol {self.tol:.1e}, worst {self.worst}, {sum(self.num_coords.values())} coords "
                f"over {len(self.num_coords)} arrays)")


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    coords_per_array: int = 32,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autodiff gradients of ``f()`` against central differences.

    ``f`` takes no arguments and reads the current values of ``params``;
    it must build its forward pass from scratch on every call. Up to
    ``coords_per_array`` coordinates are sampled per array (all of them when
    the array is smaller). The relative error of one coordinate is
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise InputError(f"finite_diff_check: eps={eps} outside [1e-7, 1e-3]")

    base1 = f().item()
    base2 = f().item()
    if base1 != base2:
        raise InvariantError(f"finite_diff_check: f is not deterministic ({base1!r} != {base2!r})")

    for t in params.values():
        t.zero_grad()
    with Graph() as g:
        loss = f()
    g.backward(loss)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, eps=eps)
    for name in sorted(params):
        t = params[name]
        ad = t.grad if t.grad is not None else np.zeros(t.shape)
        flat = t.data.reshape(-1)
        if flat.size <= coords_per_array:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=coords_per_array, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f().item()
            flat[c] = orig - eps
            fm = f().item()
            flat[c] = orig
            g_fd = (fp - fm) / (2.0 * eps)
            g_ad = float(ad.reshape(-1)[c])
            err = abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))
            worst = max(worst, err)
        report.max_rel_error[name] = worst
        report.num_coords[name] = int(coords.size)
    return report
