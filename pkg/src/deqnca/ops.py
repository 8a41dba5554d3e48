"""Dense float64 tensor kernels and their vector-Jacobian products.

Activations use [batch, channel, height, width] layout.  All convolutions
are 3x3 cross-correlations with stride 1 and zero same-padding, so spatial
dimensions are preserved.  Everything here is a pure function; training and
gradient checks run in 64-bit (callers may down-cast for speed, but the
finite-difference tests must not).
"""

from dataclasses import dataclass

import numpy as np

KERNEL = 3
PAD = 1


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _im2col(x):
    """[B,C,H,W] -> [B, C*9, H*W] patch matrix of the zero-padded input."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * KERNEL * KERNEL, h * w)


def conv2d(x, weight, bias):
    """3x3 same-padding cross-correlation.

    x: [B,Cin,H,W], weight: [Cout,Cin,3,3], bias: [Cout] -> [B,Cout,H,W].
    """
    _check(x.ndim == 4, f"conv2d input must be rank 4, got shape {x.shape}")
    _check(
        weight.ndim == 4 and weight.shape[2:] == (KERNEL, KERNEL),
        f"conv2d weight must be [Cout,Cin,{KERNEL},{KERNEL}], got {weight.shape}",
    )
    b, cin, h, w = x.shape
    cout = weight.shape[0]
    _check(
        weight.shape[1] == cin,
        f"conv2d channel mismatch: input has {cin}, weight expects {weight.shape[1]}",
    )
    _check(bias.shape == (cout,), f"conv2d bias must be [{cout}], got {bias.shape}")
    cols = _im2col(x)
    out = np.matmul(weight.reshape(cout, -1), cols)
    out += bias[:, None]
    return out.reshape(b, cout, h, w)


def conv2d_input_vjp(weight, grad_out):
    """VJP of conv2d w.r.t. its input (scatter-add of weighted cotangents)."""
    b, cout, h, w = grad_out.shape
    cin = weight.shape[1]
    gcols = np.matmul(weight.reshape(cout, -1).T, grad_out.reshape(b, cout, h * w))
    gc = gcols.reshape(b, cin, KERNEL, KERNEL, h, w)
    gxp = np.zeros((b, cin, h + 2 * PAD, w + 2 * PAD))
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            gxp[:, :, ki:ki + h, kj:kj + w] += gc[:, :, ki, kj]
    return gxp[:, :, PAD:PAD + h, PAD:PAD + w]


def conv2d_weight_vjp(x, grad_out):
    """VJP of conv2d w.r.t. the kernel."""
    b, cin, h, w = x.shape
    cout = grad_out.shape[1]
    cols = _im2col(x)
    gw = np.einsum("bon,bkn->ok", grad_out.reshape(b, cout, h * w), cols)
    return gw.reshape(cout, cin, KERNEL, KERNEL)


def conv2d_vjp(x, weight, grad_out):
    """VJPs of conv2d w.r.t. (input, weight, bias)."""
    _check(
        grad_out.shape == (x.shape[0], weight.shape[0], x.shape[2], x.shape[3]),
        f"conv2d_vjp cotangent shape {grad_out.shape} does not match forward "
        f"output {(x.shape[0], weight.shape[0], x.shape[2], x.shape[3])}",
    )
    _check(weight.shape[1] == x.shape[1], "conv2d_vjp channel mismatch")
    grad_input = conv2d_input_vjp(weight, grad_out)
    grad_weight = conv2d_weight_vjp(x, grad_out)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# Elementwise activations
# ---------------------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0)


def relu_vjp(x, grad_out):
    # relu'(0) := 0
    return grad_out * (x > 0)


def tanh(x):
    return np.tanh(x)


def tanh_vjp(x, grad_out):
    t = np.tanh(x)
    return grad_out * (1.0 - t * t)


# ---------------------------------------------------------------------------
# Channel concat / split
# ---------------------------------------------------------------------------

def concat_channels(a, b):
    """Stack along the channel axis; a's channels come first."""
    _check(
        a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:],
        f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}",
    )
    return np.concatenate([a, b], axis=1)


def split_channels(x, ca):
    """Inverse of concat_channels: first ca channels, remaining channels."""
    _check(0 <= ca <= x.shape[1], f"split point {ca} out of range for {x.shape}")
    return x[:, :ca].copy(), x[:, ca:].copy()


# ---------------------------------------------------------------------------
# Pooling and linear layers
# ---------------------------------------------------------------------------

def global_avg_pool(x):
    """[B,C,H,W] -> [B,C] spatial mean."""
    return x.mean(axis=(2, 3))


def global_avg_pool_vjp(grad_out, h, w):
    """Broadcast grad/(H*W) back over the spatial dims."""
    b, c = grad_out.shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), (b, c, h, w)).copy()


def linear(x, weight, bias):
    """Affine map: x [.., F] @ weight[G,F]^T + bias[G]."""
    _check(
        x.shape[-1] == weight.shape[1],
        f"linear feature mismatch: input {x.shape} vs weight {weight.shape}",
    )
    return x @ weight.T + bias


def linear_vjp(x, weight, grad_out):
    """VJPs of linear w.r.t. (input, weight, bias); x must be [B,F]."""
    grad_input = grad_out @ weight
    grad_weight = grad_out.T @ x
    grad_bias = grad_out.sum(axis=0)
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits.

    Numerically stable via max subtraction; grad = (softmax - onehot)/B.
    """
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0,{k}), got range "
                         f"[{labels.min()},{labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= b
    return loss, grad


# ---------------------------------------------------------------------------
# SGD with classical momentum
# ---------------------------------------------------------------------------

@dataclass
class SgdState:
    """Velocity buffers plus hyperparameters for momentum SGD."""

    velocity: dict
    learning_rate: float = 0.005
    momentum: float = 0.9

    @classmethod
    def for_params(cls, params, learning_rate=0.005, momentum=0.9):
        vel = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(velocity=vel, learning_rate=learning_rate, momentum=momentum)


def sgd_step(params, grads, state):
    """v <- momentum*v + g; p <- p - lr*v.  Returns (new_params, state)."""
    new_params = {}
    for name, p in params.items():
        g = grads[name]
        _check(
            g.shape == p.shape and state.velocity[name].shape == p.shape,
            f"sgd_step shape mismatch for '{name}': param {p.shape}, grad {g.shape}",
        )
        v = state.momentum * state.velocity[name] + g
        state.velocity[name] = v
        new_params[name] = p - state.learning_rate * v
    return new_params, state
