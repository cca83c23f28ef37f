"""Error budget of the mean-field sandwich and covers of gradient ranges."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .functionals import Functional, FunctionalBounds, QuadraticFunctional, LinearFunctional, ConstantFunctional
from .measures import ProductMeasure, support_box


@dataclass(frozen=True)
class ErrorBudget:
    B1: float
    B2: float
    log_cover_term: float
    lower_slack: float
    epsilon: float
    n: int
    M: float
    a: float
    sum_b2: float
    sum_c_diag: float
    sum_c2: float
    cover_mode: str = "given"

    @property
    def upper_total(self) -> float:
        return self.B1 + self.B2 + self.log_cover_term

    def as_dict(self) -> dict:
        d = asdict(self)
        d["upper_total"] = self.upper_total
        return d

    def to_text(self) -> str:
        return "\n".join(f"{k} = {_fmt(v)}" for k, v in self.as_dict().items()) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.as_dict())


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


def error_budget(fb: FunctionalBounds, epsilon: float, n: int | None = None, cover_size: int | None = None,
                 log_cover_size: float | None = None, cover_mode: str = "given") -> ErrorBudget:
    """Evaluate ``B1``, ``B2``, the covering term ``log 2 + log|D|`` and the lower slack.

    Give the cover either as ``cover_size`` or, for astronomically large covers, as
    ``log_cover_size``.  All double sums run over the full ``n x n`` index set.
    """
    b, c, a, M = fb.b, fb.c, fb.a, fb.M
    n = b.size if n is None else n
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if log_cover_size is None:
        if cover_size is None or cover_size < 1:
            raise ValueError("cover size must be at least 1")
        log_cover_size = math.log(cover_size)
    diag = np.diag(c)
    sum_b2 = float(b @ b)
    sum_cd = float(diag.sum())
    sum_c2 = float((c * c).sum())
    inner = (
        M**2 * (a * sum_cd + sum_b2)
        + M**3 * float(b @ c.sum(axis=1))
        + M**4 * (a * sum_c2 + float(b @ c @ b))
    )
    B1 = 4.0 * math.sqrt(inner)
    B2 = (
        4.0 * math.sqrt(sum_b2 + epsilon**2 * n) * (M**3 * math.sqrt(float(diag @ diag)) + M**2 * math.sqrt(n) * epsilon)
        + M**2 * sum_cd
        + M * n * epsilon
    )
    return ErrorBudget(
        B1=B1,
        B2=B2,
        log_cover_term=math.log(2.0) + log_cover_size,
        lower_slack=0.5 * M**2 * sum_cd,
        epsilon=float(epsilon),
        n=int(n),
        M=M,
        a=a,
        sum_b2=sum_b2,
        sum_c_diag=sum_cd,
        sum_c2=sum_c2,
        cover_mode=cover_mode,
    )


# ---------------------------------------------------------------------------
# covers


@dataclass(frozen=True)
class CoverEstimate:
    size: int
    epsilon: float
    sample_count: int
    residual_max: float
    centers: np.ndarray
    assignment: np.ndarray


def cover_distance(g, centers) -> np.ndarray:
    """``sum_i ||g_i - d_i||^2`` in the dual (max) norm, for each center ``d``."""
    return (np.abs(np.asarray(g)[None] - centers).max(axis=-1) ** 2).sum(axis=-1)


def farthest_first_order(samples) -> tuple[np.ndarray, np.ndarray]:
    """Farthest-first traversal of the samples under ``cover_distance``.

    Returns the visiting order and ``resid[k]``, the largest distance from any sample to the
    first ``k + 1`` visited points.  ``resid`` is nonincreasing, which makes the net size
    below monotone in ``epsilon``.
    """
    samples = np.asarray(samples, dtype=float)
    order = [0]
    near = _dist_to(samples, samples[0])
    resid = [float(near.max())]
    while resid[-1] > 0 and len(order) < len(samples):
        k = int(np.argmax(near))
        order.append(k)
        near = np.minimum(near, _dist_to(samples, samples[k]))
        resid.append(float(near.max()))
    return np.asarray(order), np.asarray(resid)


def _dist_to(samples, center):
    return (np.abs(samples - center[None]).max(axis=-1) ** 2).sum(axis=-1)


def greedy_cover(samples, epsilon: float) -> CoverEstimate:
    """Greedy net: the shortest farthest-first prefix leaving every sample within ``eps^2 n``.

    The traversal starts at the first sample, so the result depends only on the sample order.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 2:
        samples = samples[..., None]
    if len(samples) == 0:
        raise ValueError("no gradient samples")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    n = samples.shape[1]
    radius = epsilon**2 * n
    order, resid = farthest_first_order(samples)
    k = int(np.argmax(resid <= radius)) if np.any(resid <= radius) else len(resid) - 1
    centers = samples[order[: k + 1]]
    dist = np.stack([_dist_to(samples, c) for c in centers], axis=1)
    # first-come assignment: the earliest center (in visiting order) within the radius
    within = dist <= radius
    assign = np.where(within.any(axis=1), within.argmax(axis=1), dist.argmin(axis=1))
    worst = float(dist[np.arange(len(samples)), assign].max())
    residual = worst / radius if radius > 0 else (0.0 if worst == 0 else math.inf)
    return CoverEstimate(len(centers), float(epsilon), len(samples), residual, centers, assign)


def covering_estimate(gradient_sampler: Callable[[np.random.Generator], np.ndarray], epsilon: float,
                      num_samples: int, rng: np.random.Generator) -> CoverEstimate:
    """Empirical cover of the gradient field from ``num_samples`` sampled gradients.

    The size is a lower bound on any true cover of the full gradient range.
    """
    if num_samples < 1:
        raise ValueError("need at least one sample")
    samples = np.stack([np.asarray(gradient_sampler(rng), dtype=float) for _ in range(num_samples)])
    return greedy_cover(samples, epsilon)


@dataclass(frozen=True)
class GridCover:
    """Axis-aligned grid over a box containing every gradient; cell half-width ``epsilon``."""

    lo: np.ndarray
    hi: np.ndarray
    epsilon: float
    counts: np.ndarray
    log_size: float

    def nearest(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        if self.epsilon == 0:
            return self.lo.copy()
        cell = np.clip(np.floor((g - self.lo) / (2 * self.epsilon)), 0, self.counts - 1)
        return np.minimum(self.lo + (cell + 0.5) * 2 * self.epsilon, np.maximum(self.hi, self.lo))


def grid_cover(lo, hi, epsilon: float) -> GridCover:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    width = hi - lo
    if epsilon == 0:
        counts = np.ones_like(width)
        log_size = 0.0 if np.all(width == 0) else math.inf
    else:
        counts = np.maximum(1.0, np.ceil(width / (2 * epsilon)))
        log_size = float(np.log(counts).sum())
    return GridCover(lo, hi, float(epsilon), counts, log_size)


def gradient_box(functional: Functional, mu: ProductMeasure):
    """Coordinate box ``(lo, hi)`` of shape ``(n, d)`` containing every gradient over the support hull."""
    if isinstance(functional, (LinearFunctional, ConstantFunctional)):
        g = functional.gradient(None)
        return g, g
    if isinstance(functional, QuadraticFunctional):
        boxes = [support_box(s) for s in mu.sites]
        lo = np.array([b[0][0] for b in boxes])
        hi = np.array([b[1][0] for b in boxes])
        Q = functional.Q
        top = np.maximum(Q * hi, Q * lo).sum(axis=1) + functional.theta
        bot = np.minimum(Q * hi, Q * lo).sum(axis=1) + functional.theta
        return bot[:, None], top[:, None]
    b = functional.bounds(mu).b
    box = np.repeat(b[:, None], functional.dim, axis=1)
    return -box, box


def analytic_cover(functional: Functional, mu: ProductMeasure, epsilon: float) -> GridCover:
    lo, hi = gradient_box(functional, mu)
    return grid_cover(lo, hi, epsilon)


# ---------------------------------------------------------------------------
# sandwich


@dataclass(frozen=True)
class SandwichReport:
    lower_ok: bool
    upper_ok: bool
    lower_gap: float
    upper_gap: float
    tol: float
    cover_mode: str
    heuristic_mf: bool

    def as_dict(self) -> dict:
        return asdict(self)


def sandwich(logZ_exact: float, mf_value: float, budget: ErrorBudget, mf_upper: float | None = None,
             mf_certified: bool = True) -> SandwichReport:
    """Check ``mf - slack <= logZ <= mf_upper + B1 + B2 + log 2 + log|D|``.

    ``mf_upper`` defaults to ``mf_value``: a lower estimate of the mean-field supremum makes
    the upper check stricter, never looser.
    """
    tol = 1e-9 * (1.0 + abs(logZ_exact))
    upper = mf_value if mf_upper is None else mf_upper
    lower_gap = logZ_exact - (mf_value - budget.lower_slack)
    upper_gap = upper + budget.upper_total - logZ_exact
    return SandwichReport(
        lower_ok=bool(lower_gap >= -tol),
        upper_ok=bool(upper_gap >= -tol),
        lower_gap=float(lower_gap),
        upper_gap=float(upper_gap),
        tol=tol,
        cover_mode=budget.cover_mode,
        heuristic_mf=not mf_certified,
    )
