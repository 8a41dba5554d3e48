"""Model construction, forward pass, and checkpoint round-trips."""

import numpy as np
import pytest

from deqnca.model import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    ConvUpdateMap,
    ModelParams,
    PARAM_FIELDS,
    encode,
    forward,
    decode_local,
    init_params,
    load_checkpoint,
    param_count,
    save_checkpoint,
    solve_states,
)
from deqnca.equilibrium import EquilibriumContext
from deqnca.solvers import SolverConfig

TINY = dict(ce=2, cz=3, hm=4)


def tiny_params(seed=0):
    return init_params(seed, **TINY)


class TestInit:
    def test_default_param_count(self):
        assert param_count(init_params(0)) == 14_394

    def test_param_count_formula(self):
        ce, cz, hm = 5, 7, 11
        p = init_params(0, ce=ce, cz=cz, hm=hm)
        expected = (ce * 9 + ce) + (cz * (ce + cz) * 9 + cz) \
            + (hm * cz + hm) + (10 * hm + 10)
        assert param_count(p) == expected

    def test_biases_zero(self):
        p = init_params(3)
        for name in ("k1_bias", "k2_bias", "mlp1_bias", "mlp2_bias"):
            assert np.all(getattr(p, name) == 0.0)

    def test_weight_bounds(self):
        p = init_params(4)
        assert np.max(np.abs(p.k1_weight)) <= 1 / 3  # fan_in 9
        assert np.max(np.abs(p.mlp1_weight)) <= 1 / np.sqrt(32)
        # k2 carries the extra 0.1 factor
        assert np.max(np.abs(p.k2_weight)) <= 0.1 / np.sqrt((8 + 32) * 9)

    def test_deterministic_in_seed(self):
        a, b = init_params(9), init_params(9)
        for name in PARAM_FIELDS:
            assert np.array_equal(getattr(a, name), getattr(b, name))
        c = init_params(10)
        assert not np.array_equal(a.k1_weight, c.k1_weight)

    def test_width_properties(self):
        p = tiny_params()
        assert (p.ce, p.cz, p.hm) == (2, 3, 4)

    def test_dict_roundtrip(self):
        p = tiny_params()
        q = ModelParams.from_dict(p.to_dict())
        for name in PARAM_FIELDS:
            assert np.array_equal(getattr(p, name), getattr(q, name))


class TestUpdateMap:
    def test_fixed_point_means_zero_preactivation(self):
        """z = z + tanh(pre) can only hold where pre == 0."""
        p = tiny_params()
        x = np.random.default_rng(0).uniform(0, 1, (1, 1, 6, 6))
        cfg = SolverConfig(method="anderson", max_iters=500, tol=1e-11,
                          anderson_memory=150)
        z_star, contexts, results, f = solve_states(p, x, cfg, seed=0)
        assert results[0].converged
        fz = f.apply(z_star, contexts[0])
        assert np.max(np.abs(fz - z_star)) < 1e-7

    def test_injected_conv_is_cached(self):
        p = tiny_params()
        x = np.random.default_rng(1).uniform(0, 1, (1, 1, 5, 5))
        f = ConvUpdateMap(p)
        ctx = EquilibriumContext(injected=encode(p, x))
        z = np.zeros((1, 3, 5, 5))
        f.apply(z, ctx)
        assert "injected_conv" in ctx.cache
        cached = ctx.cache["injected_conv"]
        f.apply(z, ctx)
        assert ctx.cache["injected_conv"] is cached


class TestForward:
    def test_logit_shape_any_size(self):
        p = tiny_params()
        rng = np.random.default_rng(2)
        for h, w in ((6, 6), (5, 9), (12, 7)):
            logits, result = forward(p, rng.uniform(0, 1, (2, 1, h, w)),
                                     SolverConfig(max_iters=5, tol=1e-2))
            assert logits.shape == (2, 10)
            assert np.all(np.isfinite(logits))

    def test_batch_independence(self):
        """A batch of two equals the concatenation of two single solves."""
        p = tiny_params()
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, (2, 1, 6, 6))
        z0 = rng.standard_normal((2, 3, 6, 6))
        cfg = SolverConfig(method="broyden", max_iters=30, tol=1e-6)
        both, _ = forward(p, x, cfg, z0=z0)
        one, _ = forward(p, x[:1], cfg, z0=z0[:1])
        two, _ = forward(p, x[1:], cfg, z0=z0[1:])
        assert np.max(np.abs(both - np.concatenate([one, two]))) < 1e-10

    def test_seeded_z0_reproducible(self):
        p = tiny_params()
        x = np.random.default_rng(4).uniform(0, 1, (1, 1, 6, 6))
        cfg = SolverConfig(max_iters=10, tol=1e-4)
        a, _ = forward(p, x, cfg, seed=7)
        b, _ = forward(p, x, cfg, seed=7)
        c, _ = forward(p, x, cfg, seed=8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_decode_local_shape_and_consistency(self):
        """decode_local on a spatially constant state matches the pooled MLP."""
        p = tiny_params()
        z = np.tile(np.array([0.3, -0.2, 0.9])[None, :, None, None], (1, 1, 4, 4))
        local = decode_local(p, z)
        assert local.shape == (1, 10, 4, 4)
        logits_any_pixel = local[0, :, 2, 2]
        assert np.allclose(local[0, :, 0, 0], logits_any_pixel, atol=1e-12)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = tiny_params(5)
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, p, epoch=3, seed=11, accuracy=0.875)
        ckpt = load_checkpoint(path)
        assert ckpt.epoch == 3
        assert ckpt.seed == 11
        assert ckpt.accuracy == pytest.approx(0.875)
        for name in PARAM_FIELDS:
            assert np.array_equal(getattr(ckpt.params, name), getattr(p, name))

    def test_magic_header(self, tmp_path):
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, tiny_params())
        with open(path, "rb") as fh:
            assert fh.read(8) == CHECKPOINT_MAGIC

    def test_rejects_bad_magic(self, tmp_path):
        path = str(tmp_path / "bad.bin")
        with open(path, "wb") as fh:
            fh.write(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_rejects_truncation(self, tmp_path):
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, tiny_params())
        data = open(path, "rb").read()
        trunc = str(tmp_path / "trunc.bin")
        with open(trunc, "wb") as fh:
            fh.write(data[:len(data) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(trunc)

    def test_rejects_trailing_garbage(self, tmp_path):
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, tiny_params())
        with open(path, "ab") as fh:
            fh.write(b"\x00" * 8)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_save_is_deterministic(self, tmp_path):
        p = tiny_params(6)
        a, b = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
        save_checkpoint(a, p, epoch=1, seed=2, accuracy=0.5)
        save_checkpoint(b, p, epoch=1, seed=2, accuracy=0.5)
        assert open(a, "rb").read() == open(b, "rb").read()
