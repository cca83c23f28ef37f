"""Compact-support site measures, exponential tilts and the truncated-exponential family.

Two kinds of site measure are supported:

* :class:`FiniteSupport` -- finitely many atoms in ``R^d`` with weights.
* :class:`TruncatedExponential` -- density ``lam * exp(-lam z) / (1 - exp(-lam))`` on ``(0, 1)``.

Points are always numpy arrays of shape ``(d,)``; the truncated exponential lives in ``d = 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import logsumexp

# below this |lam| the closed forms lose digits to cancellation; the series error is < 1e-16
_SERIES_CUTOFF = 0.2
_BISECT_START = 60.0
_BISECT_MAX_ITER = 200


class ConvergenceError(RuntimeError):
    pass


class _Singular(float):
    """``+inf`` marker for KL divergences whose first argument is not absolutely continuous."""

    def __repr__(self) -> str:
        return "KL_SINGULAR"


KL_SINGULAR = _Singular("inf")


def is_singular(value: float) -> bool:
    return isinstance(value, _Singular)


@dataclass(frozen=True, eq=False)
class FiniteSupport:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.array(self.weights, dtype=float)
        if atoms.ndim != 2 or weights.shape != (atoms.shape[0],):
            raise ValueError("atoms must be (K, d) and weights (K,)")
        if atoms.shape[0] == 0:
            raise ValueError("empty support")
        if not np.all(np.isfinite(atoms)):
            raise ValueError("atoms must be finite")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @classmethod
    def uniform(cls, atoms) -> "FiniteSupport":
        atoms = np.asarray(atoms, dtype=float)
        k = atoms.shape[0]
        return cls(atoms, np.full(k, 1.0 / k))

    @classmethod
    def simplex_vertices(cls, l: int) -> "FiniteSupport":
        """Uniform measure on the ``l`` standard basis vectors of ``R^l``."""
        return cls.uniform(np.eye(l))

    @classmethod
    def point_mass(cls, atoms, index: int) -> "FiniteSupport":
        atoms = np.asarray(atoms, dtype=float)
        w = np.zeros(atoms.shape[0])
        w[index] = 1.0
        return cls(atoms, w)

    def same_support(self, other: "FiniteSupport") -> bool:
        return self.atoms.shape == other.atoms.shape and bool(np.array_equal(self.atoms, other.atoms))

    def __eq__(self, other):
        if not isinstance(other, FiniteSupport):
            return NotImplemented
        return self.same_support(other) and bool(np.array_equal(self.weights, other.weights))

    def __hash__(self):
        return hash((self.atoms.tobytes(), self.weights.tobytes()))


@dataclass(frozen=True)
class TruncatedExponential:
    lam: float = 0.0

    def __post_init__(self):
        if not math.isfinite(self.lam):
            raise ValueError("lambda must be finite")
        object.__setattr__(self, "lam", float(self.lam))

    @property
    def dim(self) -> int:
        return 1

    @classmethod
    def with_mean(cls, a: float) -> "TruncatedExponential":
        return cls(lambda_for_mean(a))

    def log_density(self, z):
        return log_norm_const(self.lam) - self.lam * np.asarray(z, dtype=float)


SiteMeasure = Union[FiniteSupport, TruncatedExponential]


@dataclass(frozen=True)
class LinearTilt:
    """The linear functional ``z -> <coefficients, z>`` on a site space."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.array(self.coefficients, dtype=float))
        if not np.all(np.isfinite(c)):
            raise ValueError("tilt coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    def __call__(self, z):
        return np.asarray(z, dtype=float) @ self.coefficients


@dataclass(frozen=True, eq=False)
class ProductMeasure:
    sites: tuple = field(default_factory=tuple)

    def __post_init__(self):
        sites = tuple(self.sites)
        if len(sites) < 1:
            raise ValueError("a product measure needs at least one site")
        for s in sites:
            if not isinstance(s, (FiniteSupport, TruncatedExponential)):
                raise TypeError(f"not a site measure: {s!r}")
        dims = {s.dim for s in sites}
        if len(dims) != 1:
            raise ValueError("all sites must live in the same dimension")
        object.__setattr__(self, "sites", sites)

    @classmethod
    def iid(cls, site: SiteMeasure, n: int) -> "ProductMeasure":
        return cls((site,) * n)

    @property
    def n(self) -> int:
        return len(self.sites)

    @property
    def dim(self) -> int:
        return self.sites[0].dim

    def shared_atoms(self) -> np.ndarray | None:
        """Common atom array when every site is finite-support on the same atoms, else ``None``."""
        first = self.sites[0]
        if not isinstance(first, FiniteSupport):
            return None
        for s in self.sites[1:]:
            if not (isinstance(s, FiniteSupport) and s.same_support(first)):
                return None
        return first.atoms

    def all_truncexp(self) -> bool:
        return all(isinstance(s, TruncatedExponential) for s in self.sites)

    def weight_matrix(self) -> np.ndarray:
        return np.stack([s.weights for s in self.sites])

    def lambdas(self) -> np.ndarray:
        return np.array([s.lam for s in self.sites])

    def means(self) -> np.ndarray:
        return np.stack([mean(s) for s in self.sites])

    def tilt_stats(self, tilts):
        """Means, normalizers and KL divergences of every site tilted by ``tilts`` (shape ``(n, d)``).

        Returns ``(means, log_norm, kl)`` where ``log_norm[i] = lambda(p_i)`` and
        ``kl[i] = lambda(p_i) + <d_i, p_i>``.
        """
        D = np.asarray(tilts, dtype=float).reshape(self.n, self.dim)
        atoms = self.shared_atoms()
        if atoms is not None:
            logw = _safe_log(self.weight_matrix())
            logits = logw + D @ atoms.T
            L = logsumexp(logits, axis=1)
            P = np.exp(logits - L[:, None])
            means = P @ atoms
            lam = -L
        elif self.all_truncexp():
            base = self.lambdas()
            new = base - D[:, 0]
            means = truncexp_mean(new)[:, None]
            lam = log_norm_const(new) - log_norm_const(base)
        else:
            out = [tilt_stats(s, d) for s, d in zip(self.sites, D)]
            means = np.stack([o[0] for o in out])
            lam = np.array([o[1] for o in out])
        kl = lam + np.einsum("ij,ij->i", D, means)
        return means, lam, np.maximum(kl, 0.0)

    def tilted(self, tilts) -> "ProductMeasure":
        D = np.asarray(tilts, dtype=float).reshape(self.n, self.dim)
        return ProductMeasure(tuple(exponential_tilt(s, d)[0] for s, d in zip(self.sites, D)))


def _safe_log(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


# ---------------------------------------------------------------------------
# truncated exponential helpers (vectorised, stable through lam = 0)


def truncexp_mean(lam):
    """Mean ``1/lam - 1/(e^lam - 1)`` of the truncated exponential; ``1/2`` at ``lam = 0``."""
    lam = np.asarray(lam, dtype=float)
    small = np.abs(lam) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, lam)
    with np.errstate(over="ignore"):
        big = 1.0 / safe - 1.0 / np.expm1(safe)
    l2 = lam * lam
    series = 0.5 - lam * (1 / 12 - l2 * (1 / 720 - l2 * (1 / 30240 - l2 * (1 / 1209600 - l2 / 47900160))))
    out = np.where(small, series, big)
    return out if out.ndim else float(out)


def truncexp_mean_slope(lam):
    """Derivative of :func:`truncexp_mean`, i.e. ``-Var(z)`` under the density."""
    lam = np.asarray(lam, dtype=float)
    small = np.abs(lam) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, lam)
    # e^lam/(e^lam-1)^2 = 1/(4 sinh^2(lam/2))
    with np.errstate(over="ignore"):
        big = -1.0 / safe**2 + 1.0 / (4.0 * np.sinh(safe / 2.0) ** 2)
    l2 = lam * lam
    series = -1 / 12 + l2 * (1 / 240 - l2 * (1 / 6048 - l2 * (1 / 172800 - l2 / 5322240)))
    out = np.where(small, series, big)
    return out if out.ndim else float(out)


def log_norm_const(lam):
    """``log(lam / (1 - e^-lam))``, the log of the density's normalising factor (0 at ``lam = 0``)."""
    lam = np.asarray(lam, dtype=float)
    small = np.abs(lam) < _SERIES_CUTOFF
    a = np.abs(np.where(small, 1.0, lam))
    # for lam < 0: log|lam| + lam - log(1 - e^lam); for lam > 0: log lam - log(1 - e^-lam)
    big = np.log(a) - np.log(-np.expm1(-a)) + np.where(lam < 0, lam, 0.0)
    l2 = lam * lam
    series = lam / 2 - l2 * (1 / 24 - l2 * (1 / 2880 - l2 * (1 / 181440 - l2 / 9676800)))
    out = np.where(small, series, big)
    return out if out.ndim else float(out)


def truncexp_kl(lam):
    """KL divergence of the truncated exponential with parameter ``lam`` from the uniform law."""
    lam = np.asarray(lam, dtype=float)
    small = np.abs(lam) < _SERIES_CUTOFF
    big = log_norm_const(lam) - lam * truncexp_mean(lam)
    l2 = lam * lam
    series = l2 * (1 / 24 - l2 * (1 / 960 - l2 * (1 / 36288 - l2 / 1382400)))
    out = np.maximum(np.where(small, series, big), 0.0)
    return out if out.ndim else float(out)


def _bisect_lambda(a: np.ndarray) -> np.ndarray:
    lo = np.full(a.shape, -_BISECT_START)
    hi = np.full(a.shape, _BISECT_START)
    # truncexp_mean is decreasing: mean(lo) > a > mean(hi) is the bracket
    for _ in range(60):
        need_lo = truncexp_mean(lo) <= a
        need_hi = truncexp_mean(hi) >= a
        if not (need_lo.any() or need_hi.any()):
            break
        lo = np.where(need_lo, lo * 2.0, lo)
        hi = np.where(need_hi, hi * 2.0, hi)
    for _ in range(_BISECT_MAX_ITER):
        mid = 0.5 * (lo + hi)
        above = truncexp_mean(mid) > a
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.all(hi - lo <= 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(mid))):
            break
    else:
        raise ConvergenceError("bisection for lambda did not converge")
    mid = 0.5 * (lo + hi)
    return np.where(a == 0.5, 0.0, mid)


def lambda_for_mean(a):
    """The unique ``lam`` whose truncated exponential has mean ``a``; vectorised over ``a``."""
    arr = np.asarray(a, dtype=float)
    if np.any(~(arr > 0.0) | ~(arr < 1.0)):
        raise ValueError("mean must lie strictly inside (0, 1)")
    # reflection z -> 1 - z maps lam to -lam, so solve on a <= 1/2 only
    flip = arr > 0.5
    lam = _bisect_lambda(np.where(flip, 1.0 - arr, arr))
    out = np.where(flip, -lam, lam)
    return out if out.ndim else float(out)


def kl_truncexp(a):
    """KL divergence from uniform of the truncated exponential with mean ``a``."""
    return truncexp_kl(lambda_for_mean(a))


# ---------------------------------------------------------------------------
# operations on single site measures


def mean(m: SiteMeasure) -> np.ndarray:
    if isinstance(m, FiniteSupport):
        return m.weights @ m.atoms
    return np.array([truncexp_mean(m.lam)])


def _as_coeffs(d, dim: int) -> np.ndarray:
    if isinstance(d, LinearTilt):
        d = d.coefficients
    c = np.atleast_1d(np.asarray(d, dtype=float))
    if c.shape != (dim,):
        raise ValueError(f"tilt has shape {c.shape}, site dimension is {dim}")
    return c


def exponential_tilt(mu: SiteMeasure, d) -> tuple[SiteMeasure, float]:
    """Tilt ``mu`` by ``exp(d(z))``; returns the tilted measure and ``lambda(p) = -log E_mu[e^d]``."""
    c = _as_coeffs(d, mu.dim)
    if isinstance(mu, FiniteSupport):
        logits = _safe_log(mu.weights) + mu.atoms @ c
        L = float(logsumexp(logits))
        w = np.exp(logits - L)
        w = w / w.sum()
        return FiniteSupport(mu.atoms, w), -L
    new = mu.lam - c[0]
    return TruncatedExponential(new), float(log_norm_const(new) - log_norm_const(mu.lam))


def tilt_stats(mu: SiteMeasure, d) -> tuple[np.ndarray, float]:
    nu, lam = exponential_tilt(mu, d)
    return mean(nu), lam


def tilt_mean(mu: SiteMeasure, d) -> np.ndarray:
    return tilt_stats(mu, d)[0]


def kl_divergence(nu: SiteMeasure, mu: SiteMeasure) -> float:
    """``D(nu || mu)``; :data:`KL_SINGULAR` when ``nu`` is not absolutely continuous w.r.t. ``mu``."""
    if isinstance(nu, TruncatedExponential) and isinstance(mu, TruncatedExponential):
        # log-density ratio is affine: log C(l1) - log C(l2) - (l1 - l2) z
        val = log_norm_const(nu.lam) - log_norm_const(mu.lam) - (nu.lam - mu.lam) * truncexp_mean(nu.lam)
        return max(float(val), 0.0)
    if isinstance(nu, FiniteSupport) and isinstance(mu, FiniteSupport):
        if nu.same_support(mu):
            mu_w = mu.weights
        else:
            mu_w = np.zeros(len(nu.weights))
            for k, atom in enumerate(nu.atoms):
                hit = np.all(mu.atoms == atom, axis=1)
                mu_w[k] = mu.weights[hit].sum()
        pos = nu.weights > 0
        if np.any(mu_w[pos] == 0):
            return KL_SINGULAR
        p = nu.weights[pos]
        return max(float(np.sum(p * (np.log(p) - np.log(mu_w[pos])))), 0.0)
    return KL_SINGULAR


def sample(m: SiteMeasure, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from ``m``; returns shape ``(d,)`` or ``(size, d)``."""
    k = 1 if size is None else size
    u = rng.random(k)
    if isinstance(m, FiniteSupport):
        cum = np.cumsum(m.weights)
        idx = np.minimum(np.searchsorted(cum, u * cum[-1], side="right"), len(cum) - 1)
        out = m.atoms[idx]
    else:
        out = truncexp_inverse_cdf(m.lam, u)[:, None]
    return out[0] if size is None else out


def truncexp_inverse_cdf(lam, u):
    lam = np.asarray(lam, dtype=float)
    u = np.asarray(u, dtype=float)
    small = np.abs(lam) < 1e-12
    safe = np.where(small, 1.0, lam)
    # F(z) = (1 - e^{-lam z}) / (1 - e^{-lam})
    with np.errstate(over="ignore", invalid="ignore"):
        z = -np.log1p(u * np.expm1(-safe)) / safe
    return np.clip(np.where(small, u, z), 0.0, 1.0)


# ---------------------------------------------------------------------------
# serialisation


def to_record(m: SiteMeasure) -> dict:
    if isinstance(m, FiniteSupport):
        return {"kind": "finite", "atoms": m.atoms.tolist(), "weights": m.weights.tolist()}
    return {"kind": "truncexp", "lambda": m.lam}


def from_record(rec: dict) -> SiteMeasure:
    kind = rec.get("kind")
    if kind == "finite":
        return FiniteSupport(np.array(rec["atoms"], dtype=float), np.array(rec["weights"], dtype=float))
    if kind == "truncexp":
        return TruncatedExponential(float(rec["lambda"]))
    raise ValueError(f"unknown measure kind {kind!r}")


def dumps(m: SiteMeasure) -> str:
    # json writes floats with repr, which round-trips exactly
    return json.dumps(to_record(m))


def loads(text: str) -> SiteMeasure:
    return from_record(json.loads(text))


def l1_diameter(m: SiteMeasure) -> float:
    """Diameter of the convex hull of the support in the L1 norm."""
    if isinstance(m, TruncatedExponential):
        return 1.0
    a = m.atoms
    diffs = np.abs(a[:, None, :] - a[None, :, :]).sum(-1)
    return float(diffs.max())


def support_box(m: SiteMeasure) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(m, TruncatedExponential):
        return np.zeros(1), np.ones(1)
    return m.atoms.min(axis=0), m.atoms.max(axis=0)
