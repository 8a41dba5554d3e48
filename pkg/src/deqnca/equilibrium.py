"""Equilibrium layer: fixed-point forward pass and implicit backward pass.

The forward pass delegates to a fixed-point solver on one application of the
update map.  The backward pass solves the adjoint system
a = grad_zstar + J_f^T a (the implicit-function-theorem linear system) by a
Neumann series or an Anderson-accelerated fixed point, then pushes the
adjoint through the parameter and injection VJPs.  The injected encoder
features live in the context and are never mutated during a solve.
"""

from dataclasses import dataclass, field

import numpy as np

from .solvers import (
    RESIDUAL_EPS,
    DivergenceError,
    SolverConfig,
    _relres,
    solve,
    solve_anderson,
)


@dataclass
class BackwardConfig:
    method: str = "neumann"          # neumann | adjoint_fixed_point
    max_iters: int = 40
    tol: float = 1e-4
    memory: int = 20                 # Anderson memory for adjoint_fixed_point

    def __post_init__(self):
        if self.method not in ("neumann", "adjoint_fixed_point"):
            raise ValueError(f"unknown backward method '{self.method}'")


@dataclass
class EquilibriumContext:
    """Frozen injected features plus solver settings for one solve.

    cache holds values derived from (injected, params) that stay constant
    across iterations, e.g. the pre-computed convolution of the injected
    features; the update map may populate it lazily.
    """

    injected: np.ndarray
    solver_cfg: SolverConfig = field(default_factory=SolverConfig)
    backward_cfg: BackwardConfig = field(default_factory=BackwardConfig)
    cache: dict = field(default_factory=dict)


class RolloutError(RuntimeError):
    """Rollout hit a non-finite state; .step is the failing step index."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


@dataclass
class RolloutResult:
    residual_trace: list
    states: list  # [z0, z1, ..., z_steps] when kept, else []
    final_state: np.ndarray


def deq_forward(f, ctx, z0):
    """Solve z = f.apply(z, ctx) with the configured solver."""
    return solve(lambda z: f.apply(z, ctx), z0, ctx.solver_cfg)


def deq_backward(f, ctx, z_star, grad_zstar):
    """Implicit gradient at the fixed point.

    Solves the adjoint a = grad_zstar + vjp_z(z_star, a), i.e.
    a^T = grad_zstar^T (I - J_f)^{-1}, then returns
    (vjp_params(z_star, a), vjp_injection(z_star, a)).
    """
    cfg = ctx.backward_cfg
    if cfg.method == "neumann":
        a = grad_zstar.copy()
        term = grad_zstar
        increments = []
        for _ in range(cfg.max_iters):
            term = f.vjp_z(z_star, ctx, term)
            if not np.all(np.isfinite(term)):
                raise DivergenceError("adjoint Neumann series diverged", increments)
            a = a + term
            acc_norm = np.linalg.norm(a.ravel())
            if not np.isfinite(acc_norm):
                # the entries may still be finite while the norm overflows
                raise DivergenceError("adjoint Neumann series diverged", increments)
            inc = float(np.linalg.norm(term.ravel()) / (acc_norm + RESIDUAL_EPS))
            increments.append(inc)
            if inc <= cfg.tol:
                break
    else:
        adj_cfg = SolverConfig(method="anderson", max_iters=cfg.max_iters,
                               tol=cfg.tol, anderson_memory=cfg.memory)
        res = solve_anderson(
            lambda a: grad_zstar + f.vjp_z(z_star, ctx, a), grad_zstar, adj_cfg)
        a = res.z_star
    return f.vjp_params(z_star, ctx, a), f.vjp_injection(z_star, ctx, a)


def nca_rollout(f, ctx, z0, steps, observer=None, keep_states=True):
    """Undamped step-by-step application of the update map.

    This is exactly Picard iteration with beta=1 and no early stopping: the
    trained equilibrium layer run as a cellular automaton.  The observer is
    called synchronously after every application as observer(step, z,
    residual) and must not mutate z.  Residuals match solve_picard's trace
    entry for the same step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.array(z0, dtype=float, copy=True)
    states = [z.copy()] if keep_states else []
    residuals = []
    for step in range(1, steps + 1):
        fz = f.apply(z, ctx)
        if not np.all(np.isfinite(fz)):
            raise RolloutError(f"non-finite state at rollout step {step}", step)
        residuals.append(_relres(fz, z))
        z = fz
        if observer is not None:
            observer(step, z, residuals[-1])
        if keep_states:
            states.append(z.copy())
    return RolloutResult(residuals, states, z)
