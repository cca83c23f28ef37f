"""Shared builders for the test modules."""

import numpy as np

from nlmf.functionals import (
    ConstantFunctional,
    CutoffFunctional,
    LinearFunctional,
    MonoHomCount,
    PatternGraph,
    QuadraticFunctional,
    SpinHamiltonian,
    SpinSystem,
    TriangleCount,
)
from nlmf.measures import FiniteSupport, ProductMeasure, TruncatedExponential


def hull_points(mu, rng, size):
    """Random points in the convex hull of each site's support, shape ``(size, n, d)``."""
    out = np.empty((size, mu.n, mu.dim))
    for i, s in enumerate(mu.sites):
        if isinstance(s, TruncatedExponential):
            out[:, i, 0] = rng.uniform(size=size)
        else:
            w = rng.dirichlet(np.full(len(s.weights), 0.5), size=size)
            out[:, i] = w @ s.atoms
    return out


def sym(rng, n):
    Q = rng.normal(size=(n, n))
    return (Q + Q.T) / 2


def builtin_cases(seed=0):
    """``(name, functional, measure)`` for every built-in functional family."""
    rng = np.random.default_rng(seed)
    bern = ProductMeasure.iid(FiniteSupport.uniform([[0.0], [1.0]]), 5)
    three = ProductMeasure.iid(FiniteSupport.uniform([[-1.0], [0.5], [2.0]]), 5)
    plane = FiniteSupport.uniform([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]])
    A = sym(rng, 4)
    spin = SpinSystem(A, sym(rng, 2), rng.normal(size=2), plane)
    tri_mu = ProductMeasure.iid(TruncatedExponential(0.0), 10)
    col3 = ProductMeasure.iid(FiniteSupport.simplex_vertices(3), 10)
    col2 = ProductMeasure.iid(FiniteSupport.simplex_vertices(2), 10)
    return [
        ("constant", ConstantFunctional(-2.5, 5), bern),
        ("linear", LinearFunctional(rng.normal(size=(4, 2))), ProductMeasure.iid(plane, 4)),
        ("quadratic", QuadraticFunctional(sym(rng, 5), rng.normal(size=5)), three),
        ("squared_sum", QuadraticFunctional.squared_sum(5, 1.3), bern),
        ("spin_potts", SpinHamiltonian(spin), spin.product_measure()),
        ("curie_weiss", SpinHamiltonian(SpinSystem.curie_weiss(6, 1.2, 0.3)),
         SpinSystem.curie_weiss(6, 1.2, 0.3).product_measure()),
        ("triangle", TriangleCount(5, 0.7), tri_mu),
        ("hom_triangle", MonoHomCount(PatternGraph.triangle(), 5, 3), col3),
        ("hom_path3", MonoHomCount(PatternGraph.path(3), 5, 2, 0.5), col2),
        ("hom_cycle4", MonoHomCount(PatternGraph.cycle(4), 5, 2), col2),
        ("cutoff_triangle", CutoffFunctional(TriangleCount(5), 10.0, 2.0, 0.05, 0.1), tri_mu),
        ("cutoff_hom", CutoffFunctional(MonoHomCount(PatternGraph.triangle(), 5, 2), 10.0, 1.5, 3.0, 1.0), col2),
    ]
