"""Fixed-point solvers against a direct linear-algebra oracle."""

import numpy as np
import pytest

from deqnca.solvers import (
    DivergenceError,
    SolverConfig,
    SolverResult,
    solve,
    solve_anderson,
    solve_broyden,
    solve_picard,
)


def random_affine_contraction(rng, dim, radius=0.9):
    """f(z) = Az + b with spectral radius scaled to `radius`."""
    a = rng.standard_normal((dim, dim))
    a *= radius / max(np.abs(np.linalg.eigvals(a)))
    b = rng.standard_normal(dim)
    zstar = np.linalg.solve(np.eye(dim) - a, b)
    return (lambda z: a @ z + b), zstar


@pytest.mark.parametrize("method", ["picard", "anderson", "broyden"])
def test_affine_contractions_match_direct_solve(method):
    """All three solvers land within 10*tol of (I-A)^-1 b on 20 systems."""
    rng = np.random.default_rng(42)
    tol = 1e-8
    for trial in range(20):
        dim = int(rng.integers(4, 33))
        f, zstar = random_affine_contraction(rng, dim)
        cfg = SolverConfig(method=method, max_iters=2000, tol=tol,
                           anderson_memory=10, broyden_memory=40)
        res = solve(f, rng.standard_normal(dim), cfg)
        assert res.converged, f"{method} failed on trial {trial}"
        scale = np.linalg.norm(f(res.z_star)) + 1e-8
        assert np.linalg.norm(res.z_star - zstar) <= 10 * tol * scale


def test_broyden_scalar_affine_in_two_iterations():
    f = lambda z: 0.5 * z + 1.0
    res = solve_broyden(f, np.array([0.0]), SolverConfig(
        method="broyden", max_iters=50, tol=1e-10))
    assert res.converged
    assert res.iterations <= 2
    assert res.z_star[0] == pytest.approx(2.0, abs=1e-9)


def test_residual_trace_is_relative_residual():
    f = lambda z: 0.5 * z
    z0 = np.array([8.0])
    res = solve_picard(f, z0, SolverConfig(method="picard", max_iters=3,
                                           tol=1e-30))
    # first iterate: ||f(z)-z|| / (||f(z)|| + 1e-8) = 4 / (4 + 1e-8)
    assert res.residual_trace[0] == pytest.approx(4.0 / (4.0 + 1e-8))
    assert len(res.residual_trace) == 3


def test_best_iterate_is_returned():
    """An oscillating map must not return a worse final iterate."""
    calls = {"n": 0}

    def f(z):
        calls["n"] += 1
        # fixed point at 0; iteration diverges from z0=1
        return -1.5 * z

    res = solve_picard(f, np.array([1.0]), SolverConfig(
        method="picard", max_iters=6, tol=1e-30))
    assert min(res.residual_trace) == pytest.approx(
        res.residual_trace[np.argmin(res.residual_trace)])
    # returned residual equals the best in the trace
    fz = f(res.z_star)
    best = np.linalg.norm(fz - res.z_star) / (np.linalg.norm(fz) + 1e-8)
    assert best == pytest.approx(min(res.residual_trace))


def test_picard_damping_converges_on_expansive_map():
    # |f'| = 1.8 diverges undamped; beta=0.4 gives |1 - 0.4 + 0.4*(-1.8)| < 1
    f = lambda z: -1.8 * z + 2.8
    res = solve_picard(f, np.array([0.0]), SolverConfig(
        method="picard", max_iters=500, tol=1e-9, damping=0.4))
    assert res.converged
    assert res.z_star[0] == pytest.approx(1.0, abs=1e-7)


def test_divergence_raises_with_trace():
    def f(z):
        return np.full_like(z, np.inf)

    with pytest.raises(DivergenceError) as exc:
        solve_picard(f, np.array([1.0]), SolverConfig(
            method="picard", max_iters=50, tol=1e-30))
    assert isinstance(exc.value.residual_trace, list)


@pytest.mark.parametrize("method", ["picard", "anderson", "broyden"])
def test_determinism(method):
    rng = np.random.default_rng(0)
    f, _ = random_affine_contraction(rng, 12)
    z0 = rng.standard_normal(12)
    cfg = SolverConfig(method=method, max_iters=100, tol=1e-9)
    a = solve(f, z0, cfg)
    b = solve(f, z0, cfg)
    assert np.array_equal(a.z_star, b.z_star)
    assert a.residual_trace == b.residual_trace


def test_anderson_solves_non_contractive_affine():
    """Anderson with enough memory handles spectral radius ~1 maps."""
    rng = np.random.default_rng(5)
    dim = 20
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    a = 0.999 * q  # orthogonal => Picard barely moves, Anderson solves it
    b = rng.standard_normal(dim)
    zstar = np.linalg.solve(np.eye(dim) - a, b)
    res = solve_anderson(lambda z: a @ z + b, rng.standard_normal(dim),
                         SolverConfig(method="anderson", max_iters=200,
                                      tol=1e-10, anderson_memory=40))
    assert res.converged
    assert np.max(np.abs(res.z_star - zstar)) < 1e-6


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(method="newton")
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolverConfig(damping=0.0)
    with pytest.raises(ValueError):
        SolverConfig(max_iters=0)


def test_broyden_returns_immediately_at_fixed_point():
    f = lambda z: z.copy()
    res = solve_broyden(f, np.ones(4), SolverConfig(
        method="broyden", max_iters=50, tol=1e-6))
    assert res.converged and res.iterations == 1
    assert np.array_equal(res.z_star, np.ones(4))


def test_solvers_preserve_tensor_shape():
    rng = np.random.default_rng(2)
    target = rng.standard_normal((2, 3, 4, 4))
    f = lambda z: 0.5 * (z + target)
    for method in ("picard", "anderson", "broyden"):
        res = solve(f, np.zeros((2, 3, 4, 4)), SolverConfig(
            method=method, max_iters=200, tol=1e-10))
        assert res.z_star.shape == (2, 3, 4, 4)
        assert np.max(np.abs(res.z_star - target)) < 1e-8
