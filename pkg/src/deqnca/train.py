"""Training and evaluation loops plus the run configuration.

One training step: solve the equilibrium per batch item (Broyden by
default), read out the loss, pull the loss gradient back through the MLP
and pooling, solve the implicit adjoint per item for the K2 gradients, push
the injection gradient through the encoder for the K1 gradients, and take
one SGD-with-momentum step.  Unconverged forward solves are used as-is but
counted; a non-finite loss aborts.
"""

import logging
import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import ops
from .data import MnistDataset, batch_iter
from .equilibrium import BackwardConfig, DivergenceError, deq_backward
from .model import (
    ModelParams,
    encode_preactivation,
    init_params,
    readout,
    save_checkpoint,
    solve_states,
)
from .solvers import SolverConfig

log = logging.getLogger("deqnca")

DATA_DIR_ENV = "DEQNCA_DATA_DIR"

DEFAULT_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class NumericalError(RuntimeError):
    """Training hit a non-finite quantity it cannot recover from."""


@dataclass
class RunConfig:
    """All knobs for a run; defaults reproduce the published recipe
    (SGD lr 0.005 / momentum 0.9, 10 epochs, Broyden forward, Gaussian z0).
    """

    data_dir: str = ""
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.005
    momentum: float = 0.9
    solver: str = "broyden"
    train_tol: float = 1e-3
    train_max_iters: int = 40
    eval_tol: float = 1e-4
    eval_max_iters: int = 60
    damping: float = 1.0
    anderson_memory: int = 5
    anderson_mixing: float = 1.0
    broyden_memory: int = 20
    backward: str = "neumann"
    backward_tol: float = 1e-4
    backward_max_iters: int = 40
    seed: int = 0
    ce: int = 8
    cz: int = 32
    hm: int = 64
    train_limit: int = 0
    test_limit: int = 0
    out_dir: str = "runs/run"

    def resolve_paths(self):
        """Fill unset data paths from data_dir (flag or env) + stock names."""
        base = self.data_dir or os.environ.get(DATA_DIR_ENV, "data")
        out = {}
        for key, fname in DEFAULT_FILES.items():
            out[key] = getattr(self, key) or os.path.join(base, fname)
        return replace(self, data_dir=base, **out)

    def solver_cfg(self, tol=None, max_iters=None):
        return SolverConfig(
            method=self.solver,
            max_iters=max_iters if max_iters is not None else self.train_max_iters,
            tol=tol if tol is not None else self.train_tol,
            damping=self.damping,
            anderson_memory=self.anderson_memory,
            anderson_mixing=self.anderson_mixing,
            broyden_memory=self.broyden_memory,
        )

    def eval_solver_cfg(self):
        return self.solver_cfg(tol=self.eval_tol, max_iters=self.eval_max_iters)

    def backward_cfg(self):
        return BackwardConfig(method=self.backward, max_iters=self.backward_max_iters,
                              tol=self.backward_tol)


def load_config_file(path):
    """Flat key=value file (#-comments, blank lines ok) -> dict of strings."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def config_from_sources(file_values=None, overrides=None):
    """Defaults < config file < explicit overrides, with type coercion."""
    kwargs = {}
    types = {f.name: f.type for f in fields(RunConfig)}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in types:
                raise ValueError(f"unknown config key '{key}'")
            if isinstance(value, str) and types[key] in ("int", int):
                value = int(value)
            elif isinstance(value, str) and types[key] in ("float", float):
                value = float(value)
            kwargs[key] = value
    return RunConfig(**kwargs)


# ---------------------------------------------------------------------------
# Gradients for one batch
# ---------------------------------------------------------------------------

TRUNCATED_ADJOINT_TERMS = 10


def batch_loss_and_grads(params, x, labels, solver_cfg, backward_cfg, rng=None,
                         z0=None):
    """Loss, gradient dict for every parameter, and solve telemetry."""
    b, _, h, w = x.shape
    if z0 is None:
        z0 = rng.standard_normal((b, params.cz, h, w))
    z_star, contexts, results, f = solve_states(
        params, x, solver_cfg, backward_cfg, z0=z0)

    pooled = ops.global_avg_pool(z_star)
    hidden_pre = ops.linear(pooled, params.mlp1_weight, params.mlp1_bias)
    hidden = ops.relu(hidden_pre)
    logits = ops.linear(hidden, params.mlp2_weight, params.mlp2_bias)
    loss, grad_logits = ops.softmax_cross_entropy(logits, labels)

    grad_hidden, g_mlp2_w, g_mlp2_b = ops.linear_vjp(hidden, params.mlp2_weight,
                                                     grad_logits)
    grad_hidden_pre = ops.relu_vjp(hidden_pre, grad_hidden)
    grad_pooled, g_mlp1_w, g_mlp1_b = ops.linear_vjp(pooled, params.mlp1_weight,
                                                     grad_hidden_pre)
    grad_zstar = ops.global_avg_pool_vjp(grad_pooled, h, w)

    g_k2_w = np.zeros_like(params.k2_weight)
    g_k2_b = np.zeros_like(params.k2_bias)
    grad_injected = np.zeros((b, params.ce, h, w))
    for i, ctx in enumerate(contexts):
        zi = z_star[i:i + 1]
        gi = grad_zstar[i:i + 1]
        try:
            pgrads, ginj = deq_backward(f, ctx, zi, gi)
        except DivergenceError:
            log.warning("adjoint solve diverged; falling back to a %d-term "
                        "truncated Neumann gradient", TRUNCATED_ADJOINT_TERMS)
            truncated = BackwardConfig(method="neumann",
                                       max_iters=TRUNCATED_ADJOINT_TERMS,
                                       tol=backward_cfg.tol)
            ctx.backward_cfg = truncated
            pgrads, ginj = deq_backward(f, ctx, zi, gi)
        g_k2_w += pgrads["k2_weight"]
        g_k2_b += pgrads["k2_bias"]
        grad_injected[i] = ginj[0]

    enc_pre = encode_preactivation(params, x)
    grad_enc_pre = ops.relu_vjp(enc_pre, grad_injected)
    g_k1_w = ops.conv2d_weight_vjp(x, grad_enc_pre)
    g_k1_b = grad_enc_pre.sum(axis=(0, 2, 3))

    grads = {
        "k1_weight": g_k1_w, "k1_bias": g_k1_b,
        "k2_weight": g_k2_w, "k2_bias": g_k2_b,
        "mlp1_weight": g_mlp1_w, "mlp1_bias": g_mlp1_b,
        "mlp2_weight": g_mlp2_w, "mlp2_bias": g_mlp2_b,
    }
    iters = [r.iterations for r in results]
    unconverged = sum(1 for r in results if not r.converged)
    return loss, grads, {"iterations": iters, "unconverged": unconverged,
                         "logits": logits}


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalStats:
    accuracy: float
    mean_iterations: float
    mean_final_residual: float
    max_final_residual: float
    count: int
    confusion: np.ndarray = field(default=None, repr=False)  # [true, predicted]


def evaluate(params, dataset, solver_cfg, seed=0, batch_size=64):
    """Accuracy plus solver telemetry over a dataset.

    Ties in the argmax go to the lowest class index.  z0 noise comes from
    one stream seeded by `seed`, consumed in dataset order.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    rng = np.random.default_rng(seed)
    correct = 0
    iter_sum = 0.0
    residuals = []
    confusion = np.zeros((10, 10), dtype=np.int64)
    n = len(dataset)
    for start in range(0, n, batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        b, _, h, w = x.shape
        z0 = rng.standard_normal((b, params.cz, h, w))
        z_star, _, results, _ = solve_states(params, x, solver_cfg, z0=z0)
        logits = readout(params, ops.global_avg_pool(z_star))
        pred = np.argmax(logits, axis=1)
        correct += int((pred == y).sum())
        iter_sum += sum(r.iterations for r in results)
        residuals.extend(r.residual_trace[-1] for r in results)
        for t, p in zip(y, pred):
            confusion[t, p] += 1
    return EvalStats(
        accuracy=correct / n,
        mean_iterations=iter_sum / n,
        mean_final_residual=float(np.mean(residuals)),
        max_final_residual=float(np.max(residuals)),
        count=n,
        confusion=confusion,
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

METRICS_HEADER = "epoch,train_loss,test_accuracy,mean_forward_iters,unconverged_solves"


@dataclass
class TrainResult:
    params: ModelParams
    history: list            # one metrics row (dict) per epoch
    checkpoint_path: str
    metrics_path: str


def train(cfg, progress=None):
    """Run the full training loop described by cfg.

    Writes metrics.csv and a checkpoint per epoch under cfg.out_dir and
    returns the final state.  Deterministic for a fixed config and seed.
    """
    cfg = cfg.resolve_paths()
    train_ds = MnistDataset.load(cfg.train_images, cfg.train_labels).subset(cfg.train_limit)
    test_ds = MnistDataset.load(cfg.test_images, cfg.test_labels).subset(cfg.test_limit)
    os.makedirs(cfg.out_dir, exist_ok=True)

    params = init_params(cfg.seed, ce=cfg.ce, cz=cfg.cz, hm=cfg.hm)
    pdict = params.to_dict()
    state = ops.SgdState.for_params(pdict, learning_rate=cfg.lr, momentum=cfg.momentum)
    rng_z = np.random.default_rng((cfg.seed, 1))
    solver_cfg = cfg.solver_cfg()
    backward_cfg = cfg.backward_cfg()

    history = []
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    ckpt_path = ""
    for epoch in range(1, cfg.epochs + 1):
        loss_sum = 0.0
        batches = 0
        iter_sum = 0
        solves = 0
        unconverged = 0
        for x, y in batch_iter(train_ds, cfg.batch_size, seed=(cfg.seed, 100 + epoch)):
            loss, grads, stats = batch_loss_and_grads(
                params, x, y, solver_cfg, backward_cfg, rng=rng_z)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {batches}: {loss}")
            pdict, state = ops.sgd_step(pdict, grads, state)
            params = ModelParams.from_dict(pdict)
            loss_sum += loss
            batches += 1
            iter_sum += sum(stats["iterations"])
            solves += len(stats["iterations"])
            unconverged += stats["unconverged"]
        if unconverged:
            log.warning("epoch %d: %d/%d forward solves unconverged",
                        epoch, unconverged, solves)

        stats = evaluate(params, test_ds, cfg.eval_solver_cfg(), seed=(cfg.seed, 2, epoch))
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / max(batches, 1),
            "test_accuracy": stats.accuracy,
            "mean_forward_iters": iter_sum / max(solves, 1),
            "unconverged_solves": unconverged,
        }
        history.append(row)
        _write_metrics(metrics_path, history)
        ckpt_path = os.path.join(cfg.out_dir, f"checkpoint_epoch{epoch:03d}.bin")
        save_checkpoint(ckpt_path, params, epoch=epoch, seed=cfg.seed,
                        accuracy=stats.accuracy)
        if progress is not None:
            progress(row)
    return TrainResult(params, history, ckpt_path, metrics_path)


def _write_metrics(path, history):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(METRICS_HEADER + "\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']:.17g},"
                     f"{row['test_accuracy']:.17g},"
                     f"{row['mean_forward_iters']:.17g},"
                     f"{row['unconverged_solves']}\n")
