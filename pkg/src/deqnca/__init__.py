"""Convolutional deep-equilibrium MNIST classifier with NCA-style rollouts.

The model computes the fixed point of a learned convolutional update map
(z <- z + tanh(K2 * [encode(x), z])) with a pluggable root-finding solver,
trains it with exact implicit gradients, and can replay the trained update
map step by step like a cellular automaton.
"""

from .ops import (
    conv2d,
    conv2d_vjp,
    relu,
    relu_vjp,
    tanh,
    tanh_vjp,
    concat_channels,
    split_channels,
    global_avg_pool,
    global_avg_pool_vjp,
    linear,
    linear_vjp,
    softmax_cross_entropy,
    SgdState,
    sgd_step,
    ShapeError,
)
from .solvers import (
    SolverConfig,
    SolverResult,
    DivergenceError,
    solve,
    solve_picard,
    solve_anderson,
    solve_broyden,
)
from .equilibrium import (
    BackwardConfig,
    EquilibriumContext,
    RolloutResult,
    RolloutError,
    deq_forward,
    deq_backward,
    nca_rollout,
)
from .model import (
    ModelParams,
    Checkpoint,
    CheckpointError,
    init_params,
    param_count,
    encode,
    equilibrium_fn,
    forward,
    decode_local,
    save_checkpoint,
    load_checkpoint,
)
from .data import (
    MnistDataset,
    IdxFormatError,
    load_idx_images,
    load_idx_labels,
    write_idx_images,
    write_idx_labels,
    batch_iter,
    crop,
)
from .viz import FrameSpec, render_frame, write_ppm, read_ppm, write_csv_residuals

__version__ = "0.1.0"
