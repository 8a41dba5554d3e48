"""MNIST IDX ingestion, batching, and image cropping.

IDX files are big-endian: u32 magic (0x00000803 for images, 0x00000801 for
labels), then one u32 per dimension, then raw unsigned bytes.  Pixels are
scaled into [0,1] on load.  Writers for the same format exist so tests and
tools can produce synthetic fixtures.
"""

import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# Guard against absurd headers before allocating (bytes, not a real limit).
_MAX_PAYLOAD = 1 << 33


class IdxFormatError(ValueError):
    """Malformed IDX file: bad magic, truncated payload, or bogus dims."""


def _read_header(data, n_dims, expect_magic, path):
    header_len = 4 + 4 * n_dims
    if len(data) < header_len:
        raise IdxFormatError(f"{path}: file too short for IDX header")
    fields = struct.unpack(f">{'i' * (n_dims + 1)}", data[:header_len])
    magic, dims = fields[0], fields[1:]
    if magic != expect_magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{magic & 0xffffffff:08x} "
            f"(expected 0x{expect_magic:08x})")
    if any(d < 0 for d in dims):
        raise IdxFormatError(f"{path}: negative dimension in header {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    if count > _MAX_PAYLOAD:
        raise IdxFormatError(f"{path}: dimension overflow {dims}")
    if len(data) - header_len != count:
        raise IdxFormatError(
            f"{path}: payload is {len(data) - header_len} bytes, "
            f"header promises {count}")
    return dims, data[header_len:]


def load_idx_images(path):
    """Parse an IDX image file into [N,1,H,W] float64 scaled to [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    (n, h, w), payload = _read_header(data, 3, IMAGE_MAGIC, path)
    pixels = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return pixels.reshape(n, 1, h, w)


def load_idx_labels(path):
    """Parse an IDX label file into an int64 vector."""
    with open(path, "rb") as fh:
        data = fh.read()
    (n,), payload = _read_header(data, 1, LABEL_MAGIC, path)
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def write_idx_images(path, images_u8):
    """Write [N,H,W] uint8 pixels as an IDX image file."""
    n, h, w = images_u8.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IMAGE_MAGIC, n, h, w))
        fh.write(np.ascontiguousarray(images_u8, dtype=np.uint8).tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", LABEL_MAGIC, len(labels)))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


@dataclass
class MnistDataset:
    images: np.ndarray  # [N,1,H,W] in [0,1]
    labels: np.ndarray  # [N] ints in [0,10)

    def __len__(self):
        return self.images.shape[0]

    @classmethod
    def load(cls, image_path, label_path):
        images = load_idx_images(image_path)
        labels = load_idx_labels(label_path)
        if images.shape[0] != labels.shape[0]:
            raise IdxFormatError(
                f"image/label count mismatch: {images.shape[0]} images vs "
                f"{labels.shape[0]} labels")
        if labels.size and labels.max() >= 10:
            raise IdxFormatError(f"label {labels.max()} out of range [0,10)")
        return cls(images, labels)

    def subset(self, n):
        """First n examples (0 means everything)."""
        if n <= 0 or n >= len(self):
            return self
        return MnistDataset(self.images[:n], self.labels[:n])


def batch_iter(dataset, batch_size, seed):
    """Seeded shuffle, then (images, labels) batches; short tail kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def crop(image, top, left, h, w):
    """Sub-rectangle copy of a [B,C,H,W] tensor."""
    full_h, full_w = image.shape[2], image.shape[3]
    if h < 1 or w < 1 or top < 0 or left < 0 or top + h > full_h or left + w > full_w:
        raise ValueError(
            f"crop window (top={top}, left={left}, h={h}, w={w}) out of bounds "
            f"for {full_h}x{full_w} image")
    return image[:, :, top:top + h, left:left + w].copy()
