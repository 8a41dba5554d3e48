"""Shared fixtures: a synthetic digit dataset and a small trained model.

Real MNIST is used whenever DEQNCA_DATA_DIR points at the four IDX files;
otherwise the suite renders digits 0-9 with system fonts into the same IDX
format so every data-dependent test still runs.  Either way the directory
fixture yields paths that the package's loaders consume unchanged.
"""

import os
import shutil

import numpy as np
import pytest

from deqnca.data import write_idx_images, write_idx_labels
from deqnca.train import DATA_DIR_ENV, DEFAULT_FILES, RunConfig, train

FONT_PATHS = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSans-Bold.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf",
    "/usr/share/fonts/truetype/dejavu/DejaVuSerif.ttf",
]


def render_digits(count, seed, side=28):
    """White-on-black digit images, uint8 [count, side, side], plus labels.

    Digits are drawn with a few system fonts at jittered size and position,
    mimicking MNIST's layout closely enough to train and evaluate on.
    """
    from PIL import Image, ImageDraw, ImageFont

    fonts = [p for p in FONT_PATHS if os.path.exists(p)]
    if not fonts:
        pytest.skip("no usable system fonts for synthetic digits")
    rng = np.random.default_rng(seed)
    images = np.zeros((count, side, side), dtype=np.uint8)
    labels = rng.integers(0, 10, size=count).astype(np.uint8)
    for i in range(count):
        digit = str(labels[i])
        font = ImageFont.truetype(fonts[rng.integers(len(fonts))],
                                  int(rng.integers(16, 25)))
        img = Image.new("L", (side, side), 0)
        draw = ImageDraw.Draw(img)
        left, top, right, bottom = draw.textbbox((0, 0), digit, font=font)
        dx = (side - (right - left)) // 2 - left + int(rng.integers(-3, 4))
        dy = (side - (bottom - top)) // 2 - top + int(rng.integers(-3, 4))
        draw.text((dx, dy), digit, fill=255, font=font)
        images[i] = np.asarray(img, dtype=np.uint8)
    return images, labels


def _write_synthetic_dir(path, n_train, n_test, seed=123):
    os.makedirs(path, exist_ok=True)
    train_images, train_labels = render_digits(n_train, seed)
    test_images, test_labels = render_digits(n_test, seed + 1)
    write_idx_images(os.path.join(path, DEFAULT_FILES["train_images"]),
                     train_images)
    write_idx_labels(os.path.join(path, DEFAULT_FILES["train_labels"]),
                     train_labels)
    write_idx_images(os.path.join(path, DEFAULT_FILES["test_images"]),
                     test_images)
    write_idx_labels(os.path.join(path, DEFAULT_FILES["test_labels"]),
                     test_labels)
    return path


def real_mnist_dir():
    """Path to real MNIST if the environment provides it, else None."""
    root = os.environ.get(DATA_DIR_ENV)
    if not root:
        return None
    if all(os.path.exists(os.path.join(root, name))
           for name in DEFAULT_FILES.values()):
        return root
    return None


@pytest.fixture(scope="session")
def synthetic_data_dir(tmp_path_factory):
    """Directory of IDX files with font-rendered digits (always available)."""
    path = tmp_path_factory.mktemp("synthetic-idx")
    return _write_synthetic_dir(str(path), n_train=1536, n_test=512)


@pytest.fixture(scope="session")
def data_dir(synthetic_data_dir):
    """Real MNIST when configured, synthetic digits otherwise."""
    return real_mnist_dir() or synthetic_data_dir


@pytest.fixture(scope="session")
def using_real_mnist():
    return real_mnist_dir() is not None


@pytest.fixture(scope="session")
def trained_run(data_dir, tmp_path_factory):
    """A short full-size training run; returns its RunConfig and TrainResult.

    Uses the bounded-trajectory recipe (fixed-step forward iteration with a
    short adjoint horizon) so the run stays numerically stable inside a test
    session budget; the accuracy-headline test applies its own larger budget.
    """
    out_dir = str(tmp_path_factory.mktemp("trained"))
    cfg = RunConfig(data_dir=data_dir, out_dir=out_dir, epochs=3,
                    train_limit=1024, test_limit=256, seed=0,
                    solver="picard", train_max_iters=40, eval_max_iters=40,
                    damping=1.0, backward_max_iters=5)
    result = train(cfg)
    return cfg, result


@pytest.fixture(scope="session")
def trained_checkpoint(trained_run):
    """Path to the final checkpoint of the session training run."""
    cfg, result = trained_run
    return result.checkpoint_path
