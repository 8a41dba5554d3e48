"""Fixed-point solvers for z = f(z) over tensors of any shape.

Three interchangeable algorithms: plain (damped) Picard iteration, Anderson
acceleration, and limited-memory "good Broyden" root finding on
g(z) = f(z) - z.  All of them report a per-iteration relative residual
trace ||f(z)-z|| / (||f(z)|| + 1e-8) and return the iterate with the
smallest residual seen, so the result is never worse than the last step.
"""

from dataclasses import dataclass, field

import numpy as np

RESIDUAL_EPS = 1e-8


class DivergenceError(RuntimeError):
    """A solver produced a non-finite iterate; carries the residual trace."""

    def __init__(self, message, residual_trace):
        super().__init__(message)
        self.residual_trace = list(residual_trace)


@dataclass
class SolverConfig:
    method: str = "broyden"          # picard | anderson | broyden
    max_iters: int = 40
    tol: float = 1e-3                # 1e-4 is the usual evaluation setting
    damping: float = 1.0             # Picard beta in (0, 1]
    anderson_memory: int = 5
    anderson_mixing: float = 1.0
    broyden_memory: int = 20

    def __post_init__(self):
        if self.method not in ("picard", "anderson", "broyden"):
            raise ValueError(f"unknown solver method '{self.method}'")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.anderson_memory < 1 or self.broyden_memory < 1:
            raise ValueError("solver memories must be >= 1")


@dataclass
class SolverResult:
    z_star: np.ndarray
    residual_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def _relres(fz, z):
    num = np.linalg.norm((fz - z).ravel())
    return float(num / (np.linalg.norm(fz.ravel()) + RESIDUAL_EPS))


def solve(f, z0, cfg):
    """Dispatch to the solver named by cfg.method."""
    return {
        "picard": solve_picard,
        "anderson": solve_anderson,
        "broyden": solve_broyden,
    }[cfg.method](f, z0, cfg)


def solve_picard(f, z0, cfg):
    """z <- (1-beta)z + beta*f(z) until tol or max_iters."""
    beta = cfg.damping
    z = np.array(z0, dtype=float, copy=True)
    trace = []
    best_r, best_z = np.inf, z
    for _ in range(cfg.max_iters):
        fz = f(z)
        if not np.all(np.isfinite(fz)):
            raise DivergenceError("picard iterate became non-finite", trace)
        r = _relres(fz, z)
        trace.append(r)
        if r < best_r:
            best_r, best_z = r, z.copy()
        if r <= cfg.tol:
            break
        z = (1.0 - beta) * z + beta * fz
    return SolverResult(best_z, trace, len(trace), trace[-1] <= cfg.tol)


def solve_anderson(f, z0, cfg):
    """Anderson acceleration with memory m over the flattened iterate.

    The mixing weights solve a small least-squares problem in residual
    differences (lstsq with a relative rcond cutoff, which avoids squaring
    the conditioning the way normal equations would); a degenerate system
    falls back to a damped Picard step.
    """
    shape = z0.shape
    beta = cfg.anderson_mixing
    x = np.array(z0, dtype=float, copy=True).ravel()
    xs, gs = [], []
    trace = []
    best_r, best_x = np.inf, x
    for _ in range(cfg.max_iters):
        fx = f(x.reshape(shape)).ravel()
        if not np.all(np.isfinite(fx)):
            raise DivergenceError("anderson iterate became non-finite", trace)
        g = fx - x
        r = _relres(fx, x)
        trace.append(r)
        if r < best_r:
            best_r, best_x = r, x.copy()
        if r <= cfg.tol:
            break
        xs.append(x.copy())
        gs.append(g)
        if len(xs) > cfg.anderson_memory + 1:
            xs.pop(0)
            gs.pop(0)
        mk = len(xs) - 1
        step = None
        if mk > 0:
            dg = np.stack([gs[i + 1] - gs[i] for i in range(mk)], axis=1)
            dx = np.stack([xs[i + 1] - xs[i] for i in range(mk)], axis=1)
            try:
                gamma, _, _, _ = np.linalg.lstsq(dg, g, rcond=1e-12)
                if np.all(np.isfinite(gamma)):
                    step = x + beta * g - (dx + beta * dg) @ gamma
            except np.linalg.LinAlgError:
                step = None
        if step is None:
            step = x + beta * g
        x = step
    return SolverResult(best_x.reshape(shape), trace, len(trace), trace[-1] <= cfg.tol)


def solve_broyden(f, z0, cfg):
    """Limited-memory good Broyden on g(z) = f(z) - z.

    The inverse Jacobian starts at -I and accumulates up to broyden_memory
    rank-one updates stored as vector pairs (oldest dropped).  Steps are
    clipped to max-norm 2*||z0|| (anchored to the starting iterate so the
    iterates cannot run away geometrically); there is no line search.  If
    the starting point already satisfies the tolerance it is returned after
    the single evaluation; otherwise the trace records the residual after
    each step.
    """
    shape = z0.shape
    x = np.array(z0, dtype=float, copy=True).ravel()
    step_limit = 2.0 * np.linalg.norm(x)
    fx = f(x.reshape(shape)).ravel()
    if not np.all(np.isfinite(fx)):
        raise DivergenceError("broyden initial evaluation non-finite", [])
    g = fx - x
    r0 = _relres(fx, x)
    if r0 <= cfg.tol:
        return SolverResult(x.reshape(shape), [r0], 1, True)
    us, vs = [], []

    def inv_jac_apply(vec):
        # Jinv = -I + sum_i u_i v_i^T
        out = -vec
        for u, v in zip(us, vs):
            out += u * (v @ vec)
        return out

    trace = []
    best_r, best_x = r0, x.copy()
    for _ in range(cfg.max_iters):
        d = -inv_jac_apply(g)
        nd = np.linalg.norm(d)
        if step_limit > 0.0 and nd > step_limit:
            d *= step_limit / nd
        x_new = x + d
        fx_new = f(x_new.reshape(shape)).ravel()
        if not np.all(np.isfinite(fx_new)):
            raise DivergenceError("broyden iterate became non-finite", trace)
        g_new = fx_new - x_new
        r = _relres(fx_new, x_new)
        trace.append(r)
        if r < best_r:
            best_r, best_x = r, x_new.copy()
        if r <= cfg.tol:
            break
        dx = x_new - x
        dg = g_new - g
        jinv_dg = inv_jac_apply(dg)
        # v^T = dx^T Jinv, u = (dx - Jinv dg) / (dx^T Jinv dg)
        v = -dx + sum(vi * (ui @ dx) for ui, vi in zip(us, vs)) if us else -dx
        denom = v @ dg
        if abs(denom) > 1e-30:
            us.append((dx - jinv_dg) / denom)
            vs.append(v)
            if len(us) > cfg.broyden_memory:
                us.pop(0)
                vs.pop(0)
        x, g = x_new, g_new
    return SolverResult(best_x.reshape(shape), trace, len(trace), trace[-1] <= cfg.tol)
