"""Hidden-channel frame rendering, PPM output, and residual CSVs.

Frames map 3 of the hidden channels (or 3 principal components, or one
channel replicated) to RGB.  PPM (P6, maxval 255) is the bit-exact output
format; residual traces go to CSV as `iter,residual` rows with 17
significant digits.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class FrameSpec:
    channel_map: str = "first3"     # first3 | pca3 | single
    channel: int = 0                # used by "single"
    normalization: str = "fixed"    # fixed: clip to [-1,1]; minmax: per frame

    def __post_init__(self):
        if self.channel_map not in ("first3", "pca3", "single"):
            raise ValueError(f"unknown channel_map '{self.channel_map}'")
        if self.normalization not in ("fixed", "minmax"):
            raise ValueError(f"unknown normalization '{self.normalization}'")


def _pca3(z):
    """Top-3 principal components of this frame's H*W channel vectors."""
    cz, h, w = z.shape
    flat = z.reshape(cz, h * w).T
    centered = flat - flat.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:3]
    # SVD sign is arbitrary; pin it for deterministic colors.
    for j in range(comps.shape[0]):
        k = np.argmax(np.abs(comps[j]))
        if comps[j, k] < 0:
            comps[j] = -comps[j]
    proj = centered @ comps.T
    return proj.T.reshape(3, h, w)


def render_frame(z, spec):
    """[1,Cz,H,W] hidden state -> [H,W,3] uint8 RGB buffer."""
    state = z[0]
    cz = state.shape[0]
    if spec.channel_map == "single":
        if not 0 <= spec.channel < cz:
            raise ValueError(f"channel {spec.channel} out of range [0,{cz})")
        planes = np.repeat(state[spec.channel:spec.channel + 1], 3, axis=0)
    elif spec.channel_map == "first3":
        if cz < 3:
            raise ValueError("first3 needs at least 3 hidden channels")
        planes = state[:3]
    else:
        if cz < 3:
            raise ValueError("pca3 needs at least 3 hidden channels")
        planes = _pca3(state)
    if spec.normalization == "fixed":
        unit = (np.clip(planes, -1.0, 1.0) + 1.0) / 2.0
    else:
        lo, hi = planes.min(), planes.max()
        unit = (planes - lo) / (hi - lo) if hi > lo else np.full_like(planes, 0.5)
    pixels = np.clip(np.floor(unit * 255.0), 0, 255).astype(np.uint8)
    return pixels.transpose(1, 2, 0)


def write_ppm(path, buffer):
    """Binary P6 with maxval 255."""
    h, w, c = buffer.shape
    if c != 3:
        raise ValueError(f"PPM buffer must be [H,W,3], got {buffer.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(buffer, dtype=np.uint8).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError(f"{path}: not a P6/255 PPM written by write_ppm")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def write_csv_residuals(path, trace):
    """One `iter,residual` row per solver/rollout step, 1-based."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("iter,residual\n")
        for i, r in enumerate(trace, start=1):
            fh.write(f"{i},{r:.17g}\n")
