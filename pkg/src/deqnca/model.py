"""The classifier: encoder conv, equilibrium layer, global pool, 2-layer MLP.

Readout is y = mlp2(relu(mlp1(avg_pool(z*)))) where z* is the fixed point of
z <- z + tanh(K2 * [u, z]) and u = relu(K1 * x) is computed once per input.
Global pooling makes the whole model agnostic to the spatial input size.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .equilibrium import BackwardConfig, EquilibriumContext, deq_forward
from .solvers import SolverConfig, SolverResult

PARAM_FIELDS = (
    "k1_weight", "k1_bias",
    "k2_weight", "k2_bias",
    "mlp1_weight", "mlp1_bias",
    "mlp2_weight", "mlp2_bias",
)

CHECKPOINT_MAGIC = b"DEQNCA01"
NUM_CLASSES = 10


@dataclass
class ModelParams:
    k1_weight: np.ndarray   # [Ce, 1, 3, 3]
    k1_bias: np.ndarray     # [Ce]
    k2_weight: np.ndarray   # [Cz, Ce+Cz, 3, 3]
    k2_bias: np.ndarray     # [Cz]
    mlp1_weight: np.ndarray  # [Hm, Cz]
    mlp1_bias: np.ndarray    # [Hm]
    mlp2_weight: np.ndarray  # [10, Hm]
    mlp2_bias: np.ndarray    # [10]

    @property
    def ce(self):
        return self.k1_weight.shape[0]

    @property
    def cz(self):
        return self.k2_weight.shape[0]

    @property
    def hm(self):
        return self.mlp1_weight.shape[0]

    def to_dict(self):
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    @classmethod
    def from_dict(cls, d):
        return cls(**{name: d[name] for name in PARAM_FIELDS})


@dataclass
class Checkpoint:
    params: ModelParams
    epoch: int
    seed: int
    accuracy: float


class CheckpointError(ValueError):
    """Bad checkpoint file: wrong magic/version, truncation, or bad shapes."""


def init_params(seed, ce=8, cz=32, hm=64):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.

    k2 is additionally scaled by 0.1 so the update map starts near the
    identity (tanh near zero) and early solves stay contractive.
    """
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ModelParams(
        k1_weight=uniform((ce, 1, 3, 3), fan_in=9),
        k1_bias=np.zeros(ce),
        k2_weight=0.1 * uniform((cz, ce + cz, 3, 3), fan_in=(ce + cz) * 9),
        k2_bias=np.zeros(cz),
        mlp1_weight=uniform((hm, cz), fan_in=cz),
        mlp1_bias=np.zeros(hm),
        mlp2_weight=uniform((NUM_CLASSES, hm), fan_in=hm),
        mlp2_bias=np.zeros(NUM_CLASSES),
    )


def param_count(params):
    return sum(getattr(params, name).size for name in PARAM_FIELDS)


def encode_preactivation(params, x):
    """K1 * x before the ReLU (kept around for the encoder backward pass)."""
    return ops.conv2d(x, params.k1_weight, params.k1_bias)


def encode(params, x):
    """Injected features u = relu(K1 * x), computed once per input."""
    return ops.relu(encode_preactivation(params, x))


class ConvUpdateMap:
    """One application of z <- z + tanh(K2 * concat(injected, z)).

    The convolution of the (constant) injected features is computed once per
    context and cached there, so iterating the map only convolves z.
    """

    def __init__(self, params):
        self.params = params

    def _injected_conv(self, ctx):
        pre = ctx.cache.get("injected_conv")
        if pre is None:
            p = self.params
            pre = ops.conv2d(ctx.injected, p.k2_weight[:, :p.ce], p.k2_bias)
            ctx.cache["injected_conv"] = pre
        return pre

    def _preactivation(self, z, ctx):
        p = self.params
        zero_bias = np.zeros(p.cz)
        return self._injected_conv(ctx) + ops.conv2d(z, p.k2_weight[:, p.ce:], zero_bias)

    def apply(self, z, ctx):
        return z + np.tanh(self._preactivation(z, ctx))

    def _inner_cotangent(self, z, ctx, cotangent):
        t = np.tanh(self._preactivation(z, ctx))
        return (1.0 - t * t) * cotangent

    def vjp_z(self, z, ctx, cotangent):
        # The residual branch contributes the identity.
        inner = self._inner_cotangent(z, ctx, cotangent)
        p = self.params
        return cotangent + ops.conv2d_input_vjp(p.k2_weight[:, p.ce:], inner)

    def vjp_params(self, z, ctx, cotangent):
        inner = self._inner_cotangent(z, ctx, cotangent)
        full_input = ops.concat_channels(ctx.injected, z)
        return {
            "k2_weight": ops.conv2d_weight_vjp(full_input, inner),
            "k2_bias": inner.sum(axis=(0, 2, 3)),
        }

    def vjp_injection(self, z, ctx, cotangent):
        inner = self._inner_cotangent(z, ctx, cotangent)
        p = self.params
        return ops.conv2d_input_vjp(p.k2_weight[:, :p.ce], inner)


def equilibrium_fn(params):
    return ConvUpdateMap(params)


def sample_initial_state(rng, batch, cz, h, w):
    """z0 ~ N(0,1) i.i.d. per element, one shared stream per call."""
    return rng.standard_normal((batch, cz, h, w))


def combine_results(results):
    """Merge per-item solver telemetry into one batch-level SolverResult.

    z_star is the stacked batch fixed point; iterations is the per-item
    maximum; the trace is the per-iteration max residual (shorter traces
    padded with their final value); converged means all items converged.
    """
    z = np.concatenate([r.z_star for r in results], axis=0)
    iters = max(r.iterations for r in results)
    trace = []
    for i in range(iters):
        vals = [r.residual_trace[min(i, r.iterations - 1)] for r in results]
        trace.append(max(vals))
    return SolverResult(z, trace, iters, all(r.converged for r in results))


def solve_states(params, x, solver_cfg=None, backward_cfg=None, seed=0, z0=None):
    """Solve the equilibrium independently for every batch item.

    Returns (z_star [B,Cz,H,W], per-item contexts, per-item SolverResults,
    update map).  Per-item solving keeps batched forwards bitwise equal to
    the concatenation of single-item forwards.
    """
    solver_cfg = solver_cfg or SolverConfig()
    backward_cfg = backward_cfg or BackwardConfig()
    b, _, h, w = x.shape
    if z0 is None:
        rng = np.random.default_rng(seed)
        z0 = sample_initial_state(rng, b, params.cz, h, w)
    injected = encode(params, x)
    f = equilibrium_fn(params)
    contexts, results = [], []
    for i in range(b):
        ctx = EquilibriumContext(injected[i:i + 1], solver_cfg, backward_cfg)
        results.append(deq_forward(f, ctx, z0[i:i + 1]))
        contexts.append(ctx)
    z_star = np.concatenate([r.z_star for r in results], axis=0)
    return z_star, contexts, results, f


def readout(params, pooled):
    """2-layer MLP from pooled features to class logits."""
    hidden = ops.relu(ops.linear(pooled, params.mlp1_weight, params.mlp1_bias))
    return ops.linear(hidden, params.mlp2_weight, params.mlp2_bias)


def forward(params, x, solver_cfg=None, seed=0, z0=None):
    """Classify a batch of any spatial size: logits = MLP(avg_pool(z*)).

    Returns (logits [B,10], combined SolverResult).  Spatial dimensions are
    only ever touched by convolution and pooling, so any H,W works.
    """
    z_star, _, results, _ = solve_states(params, x, solver_cfg, seed=seed, z0=z0)
    logits = readout(params, ops.global_avg_pool(z_star))
    return logits, combine_results(results)


def decode_local(params, z):
    """Apply the MLP readout at every spatial location (1x1-conv semantics).

    [B,Cz,H,W] -> [B,10,H,W] per-pixel label-logit map.
    """
    b, cz, h, w = z.shape
    flat = z.transpose(0, 2, 3, 1).reshape(b * h * w, cz)
    logits = readout(params, flat)
    return logits.reshape(b, h, w, NUM_CLASSES).transpose(0, 3, 1, 2)


# ---------------------------------------------------------------------------
# Checkpoint persistence
# ---------------------------------------------------------------------------

def _expected_shapes(ce, cz, hm):
    return {
        "k1_weight": (ce, 1, 3, 3), "k1_bias": (ce,),
        "k2_weight": (cz, ce + cz, 3, 3), "k2_bias": (cz,),
        "mlp1_weight": (hm, cz), "mlp1_bias": (hm,),
        "mlp2_weight": (NUM_CLASSES, hm), "mlp2_bias": (NUM_CLASSES,),
    }


def save_checkpoint(path, params, epoch=0, seed=0, accuracy=0.0):
    """Magic, (Ce,Cz,Hm,epoch) u32, seed u64, accuracy f64, then tensors.

    Each tensor is u32 rank, u32 dims, raw little-endian f64 data, in
    PARAM_FIELDS order.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIII", params.ce, params.cz, params.hm, epoch))
        fh.write(struct.pack("<Q", seed))
        fh.write(struct.pack("<d", accuracy))
        for name in PARAM_FIELDS:
            t = getattr(params, name)
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint: ran out of bytes in {what}")
        out = data[pos:pos + n]
        pos += n
        return out

    magic = take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        if magic.startswith(b"DEQNCA"):
            raise CheckpointError(
                f"checkpoint version mismatch: {magic!r} (expected {CHECKPOINT_MAGIC!r})")
        raise CheckpointError(f"not a checkpoint file (magic {magic!r})")
    ce, cz, hm, epoch = struct.unpack("<IIII", take(16, "header"))
    (seed,) = struct.unpack("<Q", take(8, "seed"))
    (accuracy,) = struct.unpack("<d", take(8, "accuracy"))
    expected = _expected_shapes(ce, cz, hm)
    tensors = {}
    for name in PARAM_FIELDS:
        (rank,) = struct.unpack("<I", take(4, f"{name} rank"))
        if rank > 4:
            raise CheckpointError(f"{name}: rank {rank} exceeds 4")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        if shape != expected[name]:
            raise CheckpointError(
                f"{name}: shape {shape} does not match header widths "
                f"(expected {expected[name]})")
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = take(8 * count, f"{name} data")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last tensor")
    return Checkpoint(ModelParams.from_dict(tensors), epoch, seed, accuracy)
