"""Full-model finite-difference check of the implicit gradients.

Builds a tiny model, computes every parameter gradient through the
equilibrium layer analytically (the same code path training uses), and
compares against central finite differences of an independently computed
end-to-end loss.  The oracle exploits the structure of the update map: at
the fixed point the tanh pre-activation vanishes, so z* solves a linear
system that dense linear algebra handles exactly — no iterative solver, no
shared code with the analytic path beyond numpy.  Errors are reported per
parameter group as max-abs difference relative to the oracle's largest
entry.
"""

import numpy as np

from .equilibrium import BackwardConfig
from .model import PARAM_FIELDS, init_params
from .solvers import SolverConfig
from .train import batch_loss_and_grads

DEFAULT_TOLERANCE = 1e-3


def relative_error(analytic, numeric):
    """max|a - n| over the scale of the oracle (guards all-zero oracles)."""
    scale = float(np.max(np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric))) / (scale + 1e-12)


def conv_operator_matrix(weight, h, w):
    """Dense matrix of the 3x3 same-padding cross-correlation.

    Maps a flattened [Cin,h,w] vector to a flattened [Cout,h,w] vector;
    assembled entry by entry from the kernel, independent of the package's
    convolution kernels.
    """
    cout, cin = weight.shape[:2]
    mat = np.zeros((cout * h * w, cin * h * w))
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for ki in range(3):
        for kj in range(3):
            si = ii + ki - 1
            sj = jj + kj - 1
            mask = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
            out_idx = (ii * w + jj)[mask]
            in_idx = (si * w + sj)[mask]
            for co in range(cout):
                for ci in range(cin):
                    mat[co * h * w + out_idx, ci * h * w + in_idx] += \
                        weight[co, ci, ki, kj]
    return mat


def oracle_loss(params, x, labels):
    """Mean cross-entropy with z* obtained by a direct dense linear solve.

    z = f(z) forces tanh(K2 * [u, z]) = 0, i.e. Wz z = -(Wu u + b2); the
    oracle assembles both convolutions as dense matrices and solves that
    system exactly.
    """
    b, _, h, w = x.shape
    ce, cz = params.ce, params.cz
    enc = conv_operator_matrix(params.k1_weight, h, w)
    wu = conv_operator_matrix(params.k2_weight[:, :ce], h, w)
    wz = conv_operator_matrix(params.k2_weight[:, ce:], h, w)
    losses = []
    for i in range(b):
        u = np.maximum(enc @ x[i].ravel() + np.repeat(params.k1_bias, h * w), 0.0)
        c0 = wu @ u + np.repeat(params.k2_bias, h * w)
        z_star = np.linalg.solve(wz, -c0)
        pooled = z_star.reshape(cz, h * w).mean(axis=1)
        hidden = np.maximum(params.mlp1_weight @ pooled + params.mlp1_bias, 0.0)
        logits = params.mlp2_weight @ hidden + params.mlp2_bias
        shifted = logits - logits.max()
        losses.append(np.log(np.exp(shifted).sum()) - shifted[labels[i]])
    return float(np.mean(losses))


def finite_difference_grads(params, x, labels, step=1e-6):
    """Central differences of the oracle loss for every parameter."""
    grads = {}
    for name in PARAM_FIELDS:
        tensor = getattr(params, name)
        grad = np.zeros_like(tensor)
        flat = tensor.ravel()
        gflat = grad.ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = oracle_loss(params, x, labels)
            flat[j] = orig - step
            lo = oracle_loss(params, x, labels)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * step)
        grads[name] = grad
    return grads


def full_model_gradcheck(seed, ce=2, cz=3, hm=4, height=6, width=6, batch=2,
                         solver_tol=1e-10, fd_step=1e-6, corrupt_vjp=False):
    """Per-parameter-group relative errors for one random tiny instance.

    corrupt_vjp deliberately perturbs the analytic K2 gradient; it exists so
    the harness can prove it would catch a broken VJP.
    """
    rng = np.random.default_rng(seed)
    params = init_params(seed, ce=ce, cz=cz, hm=hm)
    x = rng.uniform(0.0, 1.0, size=(batch, 1, height, width))
    labels = rng.integers(0, 10, size=batch)
    z0 = rng.standard_normal((batch, cz, height, width))

    # Anderson with generous memory solves the near-affine tiny problem to
    # machine precision; the adjoint system likewise need not be a
    # contraction, so it gets the accelerated treatment too.
    solver_cfg = SolverConfig(method="anderson", max_iters=500, tol=solver_tol,
                              anderson_memory=150)
    backward_cfg = BackwardConfig(method="adjoint_fixed_point", max_iters=500,
                                  tol=1e-12, memory=150)
    _, analytic, _ = batch_loss_and_grads(
        params, x, labels, solver_cfg, backward_cfg, z0=z0)
    if corrupt_vjp:
        # a 1% multiplicative error is far above tolerance at any scale
        analytic["k2_weight"] = analytic["k2_weight"] * 1.01
    numeric = finite_difference_grads(params, x, labels, fd_step)
    return {name: relative_error(analytic[name], numeric[name])
            for name in PARAM_FIELDS}


def run_report(seeds=(0,), tolerance=DEFAULT_TOLERANCE, corrupt_vjp=False,
               emit=print):
    """Run the check over several seeds; returns True when all groups pass."""
    worst = {name: 0.0 for name in PARAM_FIELDS}
    for seed in seeds:
        errs = full_model_gradcheck(seed, corrupt_vjp=corrupt_vjp)
        for name, err in errs.items():
            worst[name] = max(worst[name], err)
    ok = True
    for name in PARAM_FIELDS:
        passed = worst[name] < tolerance
        ok = ok and passed
        emit(f"{'PASS' if passed else 'FAIL'}  {name:12s}  "
             f"max rel error {worst[name]:.3e} (tolerance {tolerance:g})")
    return ok
