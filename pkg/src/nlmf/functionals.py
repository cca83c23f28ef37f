"""Functionals on product spaces and their derivative bounds.

Every functional acts on points ``x`` of shape ``(n, d)`` (one row per site) and accepts
extra leading batch axes in :meth:`Functional.value`.  Site spaces carry the L1 norm, so
gradients are measured in the dual max-norm and second derivatives in the max-entry norm.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .measures import FiniteSupport, ProductMeasure, l1_diameter, support_box

RESOURCE_LIMIT = 10**9

SMOOTHSTEP_D1_MAX = 15.0 / 8.0
SMOOTHSTEP_D2_MAX = 10.0 / math.sqrt(3.0)


class ResourceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# pattern graphs and edge arrays


@dataclass(frozen=True)
class PatternGraph:
    k: int
    edges: tuple

    def __post_init__(self):
        edges = tuple(tuple(sorted((int(u), int(v)))) for u, v in self.edges)
        if self.k < 2:
            raise ValueError("pattern graph needs at least two vertices")
        if any(u == v for u, v in edges):
            raise ValueError("pattern graph has a loop")
        if len(set(edges)) != len(edges):
            raise ValueError("pattern graph has a duplicate edge")
        used = {v for e in edges for v in e}
        if used != set(range(1, self.k + 1)):
            raise ValueError("vertices must be labelled 1..k and each must lie on an edge")
        object.__setattr__(self, "edges", edges)

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def max_degree(self) -> int:
        deg = [0] * (self.k + 1)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return max(deg)

    @classmethod
    def triangle(cls) -> "PatternGraph":
        return cls(3, ((1, 2), (2, 3), (1, 3)))

    @classmethod
    def single_edge(cls) -> "PatternGraph":
        return cls(2, ((1, 2),))

    @classmethod
    def path(cls, k: int) -> "PatternGraph":
        return cls(k, tuple((i, i + 1) for i in range(1, k)))

    @classmethod
    def cycle(cls, k: int) -> "PatternGraph":
        return cls(k, tuple((i, i % k + 1) for i in range(1, k + 1)))

    @classmethod
    def parse(cls, text: str) -> "PatternGraph":
        """Read the ``"k m"`` header plus ``m`` lines of ``"u v"`` edge-list format."""
        lines = [ln.split("#")[0].strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln]
        if not lines:
            raise ValueError("empty edge list")
        head = lines[0].split()
        if len(head) != 2:
            raise ValueError("header must be 'k m'")
        k, m = int(head[0]), int(head[1])
        body = lines[1:]
        if len(body) != m:
            raise ValueError(f"header declares {m} edges, found {len(body)}")
        edges = []
        for ln in body:
            parts = ln.split()
            if len(parts) != 2:
                raise ValueError(f"bad edge line {ln!r}")
            edges.append((int(parts[0]), int(parts[1])))
        return cls(k, tuple(edges))

    def dumps(self) -> str:
        return "\n".join([f"{self.k} {self.m}"] + [f"{u} {v}" for u, v in self.edges]) + "\n"


@lru_cache(maxsize=None)
def pair_index(N: int) -> np.ndarray:
    """``N x N`` table of pair ids in upper-triangle row-major order; ``-1`` on the diagonal."""
    iu, ju = np.triu_indices(N, 1)
    idx = np.full((N, N), -1, dtype=np.int64)
    idx[iu, ju] = np.arange(len(iu))
    idx[ju, iu] = np.arange(len(iu))
    idx.setflags(write=False)
    return idx


def n_pairs(N: int) -> int:
    return N * (N - 1) // 2


def _dense(x_pairs, N):
    iu, ju = np.triu_indices(N, 1)
    X = np.zeros(x_pairs.shape[:-1] + (N, N), dtype=float)
    X[..., iu, ju] = x_pairs
    X[..., ju, iu] = x_pairs
    return X


@dataclass(frozen=True, eq=False)
class ColorArray:
    """Simplex-valued edge array, upper triangle only: ``values[p]`` is the colour vector of pair ``p``."""

    N: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != n_pairs(self.N):
            raise ValueError("values must have shape (N(N-1)/2, l)")
        if np.any(v < -1e-10) or np.any(np.abs(v.sum(axis=1) - 1.0) > 1e-10):
            raise ValueError("every entry must lie in the probability simplex")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def l(self) -> int:
        return self.values.shape[1]

    @classmethod
    def constant(cls, N: int, z) -> "ColorArray":
        return cls(N, np.tile(np.asarray(z, dtype=float), (n_pairs(N), 1)))

    @classmethod
    def centroid(cls, N: int, l: int) -> "ColorArray":
        return cls.constant(N, np.full(l, 1.0 / l))

    def dense(self) -> np.ndarray:
        """``(N, N, l)`` array with zero diagonal."""
        return np.moveaxis(_dense(self.values.T, self.N), 0, -1)


@dataclass(frozen=True, eq=False)
class WeightArray:
    N: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        if v.shape[0] != n_pairs(self.N):
            raise ValueError("values must have length N(N-1)/2")
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("weights must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, N: int, s: float) -> "WeightArray":
        return cls(N, np.full(n_pairs(N), float(s)))

    def dense(self) -> np.ndarray:
        return _dense(self.values, self.N)


def array_to_csv(arr) -> str:
    rows = [f"N,{arr.N}"]
    iu, ju = np.triu_indices(arr.N, 1)
    vals = arr.values if arr.values.ndim == 2 else arr.values[:, None]
    for i, j, v in zip(iu, ju, vals):
        rows.append(",".join([str(i + 1), str(j + 1)] + [repr(float(t)) for t in v]))
    return "\n".join(rows) + "\n"


def array_from_csv(text: str):
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    head = lines[0].split(",")
    if head[0] != "N" or len(head) != 2:
        raise ValueError("first line must be 'N,<count>'")
    N = int(head[1])
    iu, ju = np.triu_indices(N, 1)
    body = [ln.split(",") for ln in lines[1:]]
    if len(body) != len(iu):
        raise ValueError(f"expected {len(iu)} rows, found {len(body)}")
    vals = []
    for r, (i, j) in enumerate(zip(iu, ju)):
        row = body[r]
        if int(row[0]) != i + 1 or int(row[1]) != j + 1:
            raise ValueError(f"row {r + 2} is not pair ({i + 1},{j + 1})")
        vals.append([float(t) for t in row[2:]])
    vals = np.array(vals)
    if vals.shape[1] == 1:
        return WeightArray(N, vals[:, 0])
    return ColorArray(N, vals)


# ---------------------------------------------------------------------------
# monochromatic homomorphism counts


@lru_cache(maxsize=64)
def _hom_maps(N: int, H: PatternGraph) -> np.ndarray:
    """Pair ids ``(maps, m)`` of every map ``[k] -> [N]`` sending no edge onto the diagonal."""
    if N ** H.k * H.m > RESOURCE_LIMIT:
        raise ResourceError(f"N^k * m = {N ** H.k * H.m} exceeds the enumeration limit")
    q = np.indices((N,) * H.k).reshape(H.k, -1).T
    idx = pair_index(N)
    P = np.stack([idx[q[:, u - 1], q[:, v - 1]] for u, v in H.edges], axis=1)
    P = P[np.all(P >= 0, axis=1)]
    P.setflags(write=False)
    return P


def _check_cost(N, H, l):
    if N ** H.k * H.m * l > RESOURCE_LIMIT:
        raise ResourceError(f"N^k * m * l = {N ** H.k * H.m * l} exceeds the enumeration limit")


def _values(x):
    return x.values if isinstance(x, (ColorArray, WeightArray)) else np.asarray(x, dtype=float)


def mono_hom_count(x, H: PatternGraph, N: int | None = None):
    """Sum over all maps ``[k] -> [N]`` and colours of the product of edge colour weights.

    ``x`` is a :class:`ColorArray` or a raw ``(..., n_pairs, l)`` array (then ``N`` is required).
    """
    if isinstance(x, ColorArray):
        N = x.N
    v = _values(x)
    _check_cost(N, H, v.shape[-1])
    P = _hom_maps(N, H)
    if P.shape[0] == 0:
        return np.zeros(v.shape[:-2]) if v.ndim > 2 else 0.0
    prods = np.prod(v[..., P, :], axis=-2)
    out = prods.sum(axis=(-1, -2))
    return out if np.ndim(out) else float(out)


def _leave_one_out(terms):
    """Products over axis -2 leaving each index out (prefix/suffix products, no division)."""
    m = terms.shape[-2]
    ones = np.ones(terms.shape[:-2] + (1,) + terms.shape[-1:])
    pre = np.concatenate([ones, np.cumprod(terms, axis=-2)[..., :-1, :]], axis=-2)
    suf = np.concatenate([np.cumprod(terms[..., ::-1, :], axis=-2)[..., ::-1, :][..., 1:, :], ones], axis=-2)
    return pre * suf if m else terms


def mono_hom_gradient(x, H: PatternGraph, N: int | None = None) -> np.ndarray:
    """Partial derivatives w.r.t. each pair's colour coordinates, shape ``(n_pairs, l)``."""
    if isinstance(x, ColorArray):
        N = x.N
    v = _values(x)
    _check_cost(N, H, v.shape[-1])
    P = _hom_maps(N, H)
    grad = np.zeros_like(v)
    if P.shape[0] == 0:
        return grad
    loo = _leave_one_out(v[P])
    for e in range(H.m):
        np.add.at(grad, P[:, e], loo[:, e, :])
    return grad


def mono_hom_hessian(x, H: PatternGraph, N: int | None = None) -> np.ndarray:
    """Second derivatives as ``(n_pairs, n_pairs, l)``; mixed colours have zero second derivative."""
    if isinstance(x, ColorArray):
        N = x.N
    v = _values(x)
    _check_cost(N, H, v.shape[-1])
    P = _hom_maps(N, H)
    n, l = v.shape
    hess = np.zeros((n, n, l))
    terms = v[P]
    for e, f in itertools.permutations(range(H.m), 2):
        rest = [g for g in range(H.m) if g not in (e, f)]
        prod = np.prod(terms[:, rest, :], axis=1) if rest else np.ones((len(P), l))
        np.add.at(hess, (P[:, e], P[:, f]), prod)
    return hess


def mono_hom_expectation(N: int, H: PatternGraph, l: int) -> float:
    """Exact mean of the count under i.i.d. uniform colours.

    A map whose edges land on ``d`` distinct pairs is monochromatic with probability ``l^(1-d)``;
    repeated pairs contribute once because colour indicators are idempotent.
    """
    P = _hom_maps(N, H)
    if P.shape[0] == 0:
        return 0.0
    s = np.sort(P, axis=1)
    distinct = 1 + np.count_nonzero(np.diff(s, axis=1), axis=1)
    counts = np.bincount(distinct)
    return float(sum(c * float(l) ** (1 - d) for d, c in enumerate(counts) if c))


# ---------------------------------------------------------------------------
# weighted triangle counts


@lru_cache(maxsize=None)
def _triangles(N: int) -> np.ndarray:
    idx = pair_index(N)
    tri = np.array(list(itertools.combinations(range(N), 3)), dtype=np.int64).reshape(-1, 3)
    out = np.stack([idx[tri[:, 0], tri[:, 1]], idx[tri[:, 1], tri[:, 2]], idx[tri[:, 0], tri[:, 2]]], axis=1)
    out.setflags(write=False)
    return out


def _n_from_pairs(npairs: int) -> int:
    N = int(round((1 + math.sqrt(1 + 8 * npairs)) / 2))
    if n_pairs(N) != npairs:
        raise ValueError(f"{npairs} is not a triangular pair count")
    return N


def triangle_count(x):
    """Number of weighted triangles, ``sum_{i<j<k} x_ij x_jk x_ik``; accepts ``(..., n_pairs)``."""
    v = _values(x)
    N = x.N if isinstance(x, WeightArray) else _n_from_pairs(v.shape[-1])
    tri = _triangles(N)
    if tri.shape[0] == 0:
        return np.zeros(v.shape[:-1]) if v.ndim > 1 else 0.0
    out = np.prod(v[..., tri], axis=-1).sum(axis=-1)
    return out if np.ndim(out) else float(out)


def triangle_gradient(x) -> np.ndarray:
    """``dT/dx_ij = sum_k x_jk x_ki`` for every pair."""
    v = _values(x)
    N = x.N if isinstance(x, WeightArray) else _n_from_pairs(v.shape[-1])
    X = _dense(v, N)
    X2 = X @ X
    iu, ju = np.triu_indices(N, 1)
    return X2[iu, ju]


def triangle_hessian(x) -> np.ndarray:
    v = _values(x)
    N = x.N if isinstance(x, WeightArray) else _n_from_pairs(v.shape[-1])
    tri = _triangles(N)
    n = len(v)
    hess = np.zeros((n, n))
    for a, b, c in ((0, 1, 2), (0, 2, 1), (1, 2, 0)):
        np.add.at(hess, (tri[:, a], tri[:, b]), v[tri[:, c]])
        np.add.at(hess, (tri[:, b], tri[:, a]), v[tri[:, c]])
    return hess


def triangle_expectation(N: int) -> float:
    """Mean under i.i.d. uniform weights, ``C(N,3) / 8``."""
    return N * (N - 1) * (N - 2) / 48.0


# ---------------------------------------------------------------------------
# smoothstep cutoff


def smoothstep(x):
    x = np.asarray(x, dtype=float)
    u = np.clip(x + 1.0, 0.0, 1.0)
    out = u**3 * (10.0 - 15.0 * u + 6.0 * u**2) - 1.0
    return out if out.ndim else float(out)


def smoothstep_prime(x):
    x = np.asarray(x, dtype=float)
    u = np.clip(x + 1.0, 0.0, 1.0)
    out = 30.0 * u**2 * (1.0 - u) ** 2
    return out if out.ndim else float(out)


def smoothstep_second(x):
    x = np.asarray(x, dtype=float)
    u = np.clip(x + 1.0, 0.0, 1.0)
    out = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
    return out if out.ndim else float(out)


def cutoff_functional(T_value, n, K, t, delta):
    """``g = n K h((T/n - t)/delta)`` and its derivative ``dg/dT = (K/delta) h'``."""
    if n <= 0 or K <= 0 or delta <= 0:
        raise ValueError("n, K and delta must be positive")
    arg = (np.asarray(T_value, dtype=float) / n - t) / delta
    return n * K * smoothstep(arg), K / delta * smoothstep_prime(arg)


# ---------------------------------------------------------------------------
# spin systems


@dataclass(frozen=True, eq=False)
class SpinSystem:
    """Hamiltonian ``1/2 sum A_ij x_i^T J x_j + sum x_i^T h`` with shared site measure.

    The diagonal of ``A`` is removed on construction and kept in ``discarded_diagonal``.
    """

    A: np.ndarray
    J: np.ndarray
    h: np.ndarray
    site: FiniteSupport
    discarded_diagonal: np.ndarray = field(init=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        J = np.atleast_2d(np.array(self.J, dtype=float))
        h = np.atleast_1d(np.array(self.h, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if not np.allclose(A, A.T, atol=1e-12, rtol=0):
            raise ValueError("A must be symmetric")
        if J.shape != (h.size, h.size) or not np.allclose(J, J.T, atol=1e-12, rtol=0):
            raise ValueError("J must be a symmetric N x N matrix matching h")
        if self.site.dim != h.size:
            raise ValueError("site measure dimension does not match h")
        diag = np.diag(A).copy()
        np.fill_diagonal(A, 0.0)
        for arr in (A, J, h, diag):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "discarded_diagonal", diag)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def N(self) -> int:
        return self.h.size

    @classmethod
    def curie_weiss(cls, n: int, beta: float, h: float = 0.0) -> "SpinSystem":
        A = np.full((n, n), 1.0 / n)
        return cls(A, [[beta]], [h], FiniteSupport.uniform([[-1.0], [1.0]]))

    def product_measure(self) -> ProductMeasure:
        return ProductMeasure.iid(self.site, self.n)


def spin_hamiltonian(x, sys: SpinSystem):
    """Value and per-site gradient ``sum_j A_ij J x_j + h`` at configuration(s) ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape[-2:] != (sys.n, sys.N):
        raise ValueError(f"configuration has shape {x.shape[-2:]}, expected {(sys.n, sys.N)}")
    field_ = np.einsum("ij,...jt,st->...is", sys.A, x, sys.J)
    value = 0.5 * np.einsum("...is,...is->...", x, field_) + np.einsum("...is,s->...", x, sys.h)
    return (float(value) if np.ndim(value) == 0 else value), field_ + sys.h


def spin_condition_check(A, vertex_limit: int = 20) -> dict:
    """Diagnostics for the admissibility of a coupling matrix.

    ``rowsum_sup_over_n`` is exact (cube vertex enumeration) when ``n <= vertex_limit``; the
    objective is convex in ``x`` so its maximum over ``[0,1]^n`` sits at a vertex.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    tr = float(np.einsum("ij,ji->", A, A))
    if n <= vertex_limit:
        best = 0.0
        chunk = 1 << min(n, 14)
        total = 1 << n
        bits = np.arange(n)
        for start in range(0, total, chunk):
            codes = np.arange(start, min(start + chunk, total))
            X = ((codes[:, None] >> bits) & 1).astype(float)
            best = max(best, float(np.abs(X @ A.T).sum(axis=1).max()))
        exact = True
    else:
        best = float(np.abs(A).sum())
        exact = False
    return {
        "tr_A2_over_n": tr / n,
        "rowsum_sup_over_n": best / n,
        "rowsum_exact": exact,
        "max_abs_entry": float(np.abs(A).max()) if A.size else 0.0,
    }


# ---------------------------------------------------------------------------
# functional objects


@dataclass(frozen=True)
class FunctionalBounds:
    """Uniform bounds ``|f| <= a``, ``||f_i|| <= b_i``, ``||f_ij|| <= c_ij`` and support diameter ``M``."""

    a: float
    b: np.ndarray
    c: np.ndarray
    M: float

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if self.a < 0 or self.M < 0 or np.any(b < 0) or np.any(c < 0):
            raise ValueError("bounds must be nonnegative")
        if c.shape != (b.size, b.size) or not np.allclose(c, c.T):
            raise ValueError("c must be a symmetric n x n matrix")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "M", float(self.M))


class Functional:
    """Base class: ``value`` (batched), ``gradient``, ``hessian`` and ``bounds``."""

    n: int
    dim: int

    def value(self, x):
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, x) -> np.ndarray:
        """Dense ``(n, d, n, d)`` second derivative."""
        raise NotImplementedError

    def bounds(self, mu: ProductMeasure) -> FunctionalBounds:
        raise NotImplementedError

    def __call__(self, x):
        return self.value(x)


def _domain(mu: ProductMeasure):
    boxes = [support_box(s) for s in mu.sites]
    lo = np.stack([b[0] for b in boxes])
    hi = np.stack([b[1] for b in boxes])
    radius = np.array([_l1_radius(s) for s in mu.sites])
    M = max(l1_diameter(s) for s in mu.sites)
    return lo, hi, radius, M


def _l1_radius(site):
    if isinstance(site, FiniteSupport):
        return float(np.abs(site.atoms).sum(axis=1).max())
    return 1.0


def _affine_sup(coef, const, lo, hi):
    """Exact ``sup |coef . x + const|`` over the box ``[lo, hi]`` (rows of ``coef`` are separate forms)."""
    top = np.maximum(coef * hi, coef * lo).sum(axis=-1) + const
    bot = np.minimum(coef * hi, coef * lo).sum(axis=-1) + const
    return np.maximum(np.abs(top), np.abs(bot))


class ConstantFunctional(Functional):
    def __init__(self, const: float, n: int, dim: int = 1):
        self.const, self.n, self.dim = float(const), n, dim

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-2], self.const)
        return out if out.ndim else float(out)

    def gradient(self, x):
        return np.zeros((self.n, self.dim))

    def hessian(self, x):
        return np.zeros((self.n, self.dim, self.n, self.dim))

    def bounds(self, mu):
        _, _, _, M = _domain(mu)
        return FunctionalBounds(abs(self.const), np.zeros(self.n), np.zeros((self.n, self.n)), M)


class LinearFunctional(Functional):
    """``sum_i <theta_i, x_i>``."""

    def __init__(self, theta):
        theta = np.asarray(theta, dtype=float)
        self.theta = theta[:, None] if theta.ndim == 1 else theta
        self.n, self.dim = self.theta.shape

    def value(self, x):
        out = np.einsum("...id,id->...", np.asarray(x, dtype=float), self.theta)
        return out if np.ndim(out) else float(out)

    def gradient(self, x):
        return self.theta.copy()

    def hessian(self, x):
        return np.zeros((self.n, self.dim, self.n, self.dim))

    def bounds(self, mu):
        lo, hi, _, M = _domain(mu)
        a = float(_affine_sup(self.theta.ravel(), 0.0, lo.ravel(), hi.ravel()))
        return FunctionalBounds(a, np.abs(self.theta).max(axis=1), np.zeros((self.n, self.n)), M)


class QuadraticFunctional(Functional):
    """``1/2 x^T Q x + theta^T x`` on scalar sites."""

    def __init__(self, Q, theta=None):
        Q = np.asarray(Q, dtype=float)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or not np.allclose(Q, Q.T):
            raise ValueError("Q must be symmetric")
        self.Q = Q
        self.n, self.dim = Q.shape[0], 1
        self.theta = np.zeros(self.n) if theta is None else np.asarray(theta, dtype=float)

    @classmethod
    def squared_sum(cls, n: int, s: float) -> "QuadraticFunctional":
        """``(s/n) (sum x_i)^2``."""
        return cls(np.full((n, n), 2.0 * s / n))

    def value(self, x):
        v = np.asarray(x, dtype=float)[..., 0]
        out = 0.5 * np.einsum("...i,ij,...j->...", v, self.Q, v) + v @ self.theta
        return out if np.ndim(out) else float(out)

    def gradient(self, x):
        v = np.asarray(x, dtype=float)[..., 0]
        return (self.Q @ v + self.theta)[:, None]

    def hessian(self, x):
        return self.Q[:, None, :, None].copy()

    def bounds(self, mu):
        lo, hi, _, M = _domain(mu)
        lo, hi = lo[:, 0], hi[:, 0]
        R = np.maximum(np.abs(lo), np.abs(hi))
        b = _affine_sup(self.Q, self.theta, lo, hi)
        a = 0.5 * float(np.abs(self.Q) @ R @ R) + float(np.abs(self.theta) @ R)
        return FunctionalBounds(a, b, np.abs(self.Q), M)


class SpinHamiltonian(Functional):
    def __init__(self, system: SpinSystem):
        self.system = system
        self.n, self.dim = system.n, system.N

    def value(self, x):
        return spin_hamiltonian(x, self.system)[0]

    def gradient(self, x):
        return spin_hamiltonian(x, self.system)[1]

    def hessian(self, x):
        return np.einsum("ij,st->isjt", self.system.A, self.system.J)

    def bounds(self, mu):
        lo, hi, rho, M = _domain(mu)
        sysm = self.system
        Jmax = float(np.abs(sysm.J).max())
        # coefficient of x_{j t} in component s of f_i is A_ij J_st
        coef = np.einsum("ij,st->isjt", sysm.A, sysm.J).reshape(self.n, self.dim, -1)
        b = _affine_sup(coef, sysm.h[None, :], lo.ravel(), hi.ravel()).max(axis=1)
        c = np.abs(sysm.A) * Jmax
        hmax = float(np.abs(sysm.h).max())
        a = 0.5 * float(rho @ c @ rho) + hmax * float(rho.sum())
        return FunctionalBounds(a, b, c, M)


class TriangleCount(Functional):
    """Weighted triangle count on ``N`` vertices, times ``scale``."""

    def __init__(self, N: int, scale: float = 1.0):
        self.N, self.scale = N, float(scale)
        self.n, self.dim = n_pairs(N), 1

    def value(self, x):
        out = self.scale * triangle_count(np.asarray(x, dtype=float)[..., 0])
        return out if np.ndim(out) else float(out)

    def gradient(self, x):
        return self.scale * triangle_gradient(np.asarray(x, dtype=float)[:, 0])[:, None]

    def hessian(self, x):
        return self.scale * triangle_hessian(np.asarray(x, dtype=float)[:, 0])[:, None, :, None]

    def bounds(self, mu):
        lo, hi, _, M = _domain(mu)
        R = float(np.maximum(np.abs(lo), np.abs(hi)).max())
        a = self.scale * math.comb(self.N, 3) * R**3
        b = np.full(self.n, self.scale * (self.N - 2) * R**2)
        iu, ju = np.triu_indices(self.N, 1)
        share = (
            (iu[:, None] == iu[None, :]).astype(int)
            + (iu[:, None] == ju[None, :])
            + (ju[:, None] == iu[None, :])
            + (ju[:, None] == ju[None, :])
        )
        c = np.where(share == 1, self.scale * R, 0.0)
        return FunctionalBounds(a, b, c, M)


class MonoHomCount(Functional):
    """Monochromatic homomorphism count of ``H`` on ``N`` vertices with ``l`` colours, times ``scale``."""

    def __init__(self, H: PatternGraph, N: int, l: int, scale: float = 1.0):
        _check_cost(N, H, l)
        self.H, self.N, self.l, self.scale = H, N, l, float(scale)
        self.n, self.dim = n_pairs(N), l

    def value(self, x):
        out = self.scale * mono_hom_count(np.asarray(x, dtype=float), self.H, self.N)
        return out if np.ndim(out) else float(out)

    def gradient(self, x):
        return self.scale * mono_hom_gradient(np.asarray(x, dtype=float), self.H, self.N)

    def hessian(self, x):
        hs = mono_hom_hessian(np.asarray(x, dtype=float), self.H, self.N)
        out = np.zeros((self.n, self.l, self.n, self.l))
        for s in range(self.l):
            out[:, s, :, s] = hs[:, :, s]
        return self.scale * out

    def bounds(self, mu):
        lo, hi, rho, M = _domain(mu)
        if np.any(lo < 0) or np.any(rho > 1 + 1e-12):
            raise ValueError("colour bounds need sites inside the simplex")
        P = _hom_maps(self.N, self.H)
        # every product of coordinates is at most one and colours sum to at most one
        a = self.scale * len(P)
        b = self.scale * np.bincount(P.ravel(), minlength=self.n).astype(float)
        c = np.zeros((self.n, self.n))
        for e, f in itertools.permutations(range(self.H.m), 2):
            np.add.at(c, (P[:, e], P[:, f]), 1.0)
        return FunctionalBounds(a, b, self.scale * c, M)

    def expectation(self) -> float:
        return self.scale * mono_hom_expectation(self.N, self.H, self.l)


class CutoffFunctional(Functional):
    """``g(x) = n K h((F(x)/n - t)/delta)`` for an inner functional ``F``."""

    def __init__(self, inner: Functional, n_scale: float, K: float, t: float, delta: float):
        if n_scale <= 0 or K <= 0 or delta <= 0:
            raise ValueError("n, K and delta must be positive")
        self.inner, self.n_scale, self.K, self.t, self.delta = inner, float(n_scale), K, t, delta
        self.n, self.dim = inner.n, inner.dim

    def _arg(self, F):
        return (F / self.n_scale - self.t) / self.delta

    def value(self, x):
        return cutoff_functional(self.inner.value(x), self.n_scale, self.K, self.t, self.delta)[0]

    def gradient(self, x):
        F = self.inner.value(x)
        return self.K / self.delta * smoothstep_prime(self._arg(F)) * self.inner.gradient(x)

    def hessian(self, x):
        F = self.inner.value(x)
        g = self.inner.gradient(x)
        u = self._arg(F)
        first = self.K / self.delta * smoothstep_prime(u) * self.inner.hessian(x)
        second = self.K / (self.n_scale * self.delta**2) * smoothstep_second(u) * np.einsum("id,je->idje", g, g)
        return first + second

    def bounds(self, mu):
        fb = self.inner.bounds(mu)
        kd = self.K / self.delta
        b = kd * SMOOTHSTEP_D1_MAX * fb.b
        c = kd * SMOOTHSTEP_D1_MAX * fb.c + self.K / (self.n_scale * self.delta**2) * SMOOTHSTEP_D2_MAX * np.outer(fb.b, fb.b)
        return FunctionalBounds(self.n_scale * self.K, b, c, fb.M)


def derivative_bounds(functional: Functional, mu: ProductMeasure) -> FunctionalBounds:
    """Bounds ``a, b_i, c_ij, M`` for a built-in functional over the support of ``mu``."""
    if not isinstance(functional, Functional) or type(functional).bounds is Functional.bounds:
        raise TypeError(f"no derivative bounds known for {type(functional).__name__}")
    if mu.n != functional.n or mu.dim != functional.dim:
        raise ValueError("measure does not match the functional's sites")
    return functional.bounds(mu)


def dual_norm(g) -> np.ndarray:
    """Per-site dual (max) norm of gradient rows."""
    return np.abs(np.asarray(g)).max(axis=-1)


def bilinear_norm(hess) -> np.ndarray:
    """``(n, n)`` max-entry norms of the blocks of an ``(n, d, n, d)`` Hessian."""
    return np.abs(hess).max(axis=(1, 3))
