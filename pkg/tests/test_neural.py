"""Encoder forward/backward, finite-difference verification, optimizer, and
checkpoint tests."""

import math

import numpy as np
import pytest

from entlink import gradcheck, neural
from entlink.neural import (
    AdamState,
    CheckpointError,
    FiniteDiffReport,
    ModelConfig,
    NonFiniteError,
    ParamSet,
    checkpoint_load,
    checkpoint_save,
    encode,
    finite_diff_check,
    init_params,
    lr_at,
    optimizer_step,
)


def tiny_params(d=8, vocab=30, max_len=24, seed=0):
    return init_params(ModelConfig(d=d, max_len=max_len, vocab_size=vocab, seed=seed))


class QuadraticLoss:
    """L = sum of squares of all parameters; gradient is exactly 2*theta."""

    def loss(self, params):
        return float(sum(np.sum(a * a) for a in params.arrays.values()))

    def loss_and_grad(self, params):
        return self.loss(params), {k: 2.0 * a for k, a in params.arrays.items()}


class DotLoss:
    """L = u . v where u = w_start and v = w_end; dL/du = v, dL/dv = u."""

    def loss(self, params):
        return float(np.dot(params["w_start"], params["w_end"]))

    def loss_and_grad(self, params):
        grads = params.zero_grads()
        grads["w_start"] = params["w_end"].copy()
        grads["w_end"] = params["w_start"].copy()
        return self.loss(params), grads


class CorruptedLoss(QuadraticLoss):
    def loss_and_grad(self, params):
        value, grads = super().loss_and_grad(params)
        return value, {k: 2.0 * g for k, g in grads.items()}


class TestEncode:
    def test_output_shape(self):
        params = tiny_params()
        for role in ("P", "E", "H"):
            for n in (1, 5, 24):
                enc = encode(params, role, list(range(5, 5 + n)))
                assert enc.matrix.shape == (8, n)

    def test_too_long_rejected(self):
        params = tiny_params(max_len=8)
        with pytest.raises(ValueError, match="maximum"):
            encode(params, "P", list(range(5, 15)))

    def test_zero_params_zero_output(self):
        params = tiny_params()
        for k in params.names():
            params.arrays[k][:] = 0.0
        enc = encode(params, "H", [5, 6, 7])
        assert np.all(enc.matrix == 0.0)

    def test_permutation_equivariance_without_positions(self):
        """With position embeddings zeroed, swapping two tokens swaps their
        output columns."""
        params = tiny_params()
        params.arrays["pos_emb"][:] = 0.0
        a = encode(params, "P", [0, 7, 8, 9]).matrix
        b = encode(params, "P", [0, 8, 7, 9]).matrix
        np.testing.assert_allclose(a[:, 1], b[:, 2], atol=1e-12)
        np.testing.assert_allclose(a[:, 2], b[:, 1], atol=1e-12)
        np.testing.assert_allclose(a[:, 3], b[:, 3], atol=1e-12)

    def test_finite_for_bounded_random_params(self):
        rng = np.random.default_rng(42)
        for trial in range(25):
            params = tiny_params(seed=trial)
            for k in params.names():
                arr = rng.uniform(-1.0, 1.0, size=params[k].shape)
                params.arrays[k][:] = arr
            ids = rng.integers(0, 30, size=int(rng.integers(1, 24)))
            enc = encode(params, "EPH"[trial % 3], ids)
            assert np.all(np.isfinite(enc.matrix))

    def test_deterministic(self):
        a = encode(tiny_params(), "P", [5, 6, 7]).matrix
        b = encode(tiny_params(), "P", [5, 6, 7]).matrix
        assert np.array_equal(a, b)


class TestFiniteDiffCheck:
    def test_quadratic_closed_form(self):
        params = tiny_params()
        report = finite_diff_check(params, QuadraticLoss(), step=1e-4, tolerance=1e-6)
        assert report.passed, report.summary()

    def test_dot_loss(self):
        params = tiny_params()
        report = finite_diff_check(params, DotLoss(), step=1e-4, tolerance=1e-6)
        assert report.passed, report.summary()

    def test_detects_corrupted_gradient(self):
        params = tiny_params()
        report = finite_diff_check(params, CorruptedLoss(), step=1e-4, tolerance=1e-3)
        assert not report.passed

    def test_default_model_single_example(self):
        """Full encoder objective on one synthetic example passes at 1e-3."""
        params, cases = gradcheck.build_cases(d=8, vocab_size=50, seed=0)
        case = next(c for c in cases if c.name == "retriever-nce-multilabel")
        report = finite_diff_check(params, case.objective, step=1e-4, tolerance=1e-3)
        assert report.passed, report.summary()

    def test_every_objective_variant(self):
        """Master numerical test: all retriever and reader objective variants
        pass at tolerance 1e-3 on a d=8, vocab=50 model."""
        for name, report in gradcheck.run_all(d=8, vocab_size=50, seed=0, step=5e-4):
            assert report.passed, f"{name}: {report.summary()}"

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            finite_diff_check(tiny_params(), QuadraticLoss(), step=0.0)


class TestLossAndGrad:
    def test_empty_batch_zero_gradient(self):
        from entlink.retriever import RetrieverNCEObjective

        params = tiny_params()
        value, grads = neural.loss_and_grad(params, RetrieverNCEObjective([]))
        assert value == 0.0
        assert set(grads) == set(params.names())
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_nonfinite_loss_rejected(self):
        class BadLoss:
            def loss(self, params):
                return float("nan")

            def loss_and_grad(self, params):
                return float("nan"), params.zero_grads()

        with pytest.raises(NonFiniteError):
            neural.loss_and_grad(tiny_params(), BadLoss())


class TestOptimizer:
    def test_zero_gradient_leaves_params(self):
        params = tiny_params()
        before = {k: a.copy() for k, a in params.arrays.items()}
        state = AdamState.zeros(params)
        optimizer_step(state, params, params.zero_grads(), lr=0.1)
        for k in params.names():
            assert np.array_equal(params[k], before[k])

    def test_single_step_direction(self):
        """From zero moments, one step moves each coordinate by
        -lr * g / (|g| + eps): approximately -sign(g) * lr."""
        params = tiny_params()
        g = 2.0
        lr = 0.1
        grads = {k: np.full_like(a, g) for k, a in params.arrays.items()}
        before = params["w_start"].copy()
        optimizer_step(AdamState.zeros(params), params, grads, lr=lr)
        expected_delta = -lr * g / (abs(g) + 1e-8)
        np.testing.assert_allclose(params["w_start"] - before, expected_delta, rtol=1e-12)

    def test_nonfinite_grads_rejected(self):
        params = tiny_params()
        grads = params.zero_grads()
        grads["w_end"][0] = float("inf")
        with pytest.raises(NonFiniteError, match="w_end"):
            optimizer_step(AdamState.zeros(params), params, grads, lr=0.1)

    def test_warmup_starts_at_zero(self):
        assert lr_at(0, 100, base_lr=0.5) == 0.0
        assert lr_at(6, 100, base_lr=0.5) == 0.5  # warmup = 6 of 100 steps
        assert lr_at(100, 100, base_lr=0.5) == 0.0
        assert 0.0 < lr_at(50, 100, base_lr=0.5) < 0.5

    def test_determinism_over_100_steps(self):
        """Identical seed and data order give bit-identical loss trajectories."""

        def run():
            params = tiny_params(seed=3)
            state = AdamState.zeros(params)
            spec = QuadraticLoss()
            losses = []
            for step in range(100):
                value, grads = neural.loss_and_grad(params, spec)
                optimizer_step(state, params, grads, lr=lr_at(step, 100, 1e-2))
                losses.append(value)
            return losses, params

        l1, p1 = run()
        l2, p2 = run()
        assert l1 == l2
        for k in p1.names():
            assert np.array_equal(p1[k], p2[k])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        params = tiny_params(seed=11)
        state = AdamState.zeros(params)
        state.step = 7
        checkpoint_save(path, params, state, meta={"note": "x"})
        bundle = checkpoint_load(path)
        assert bundle.params.config == params.config
        for k in params.names():
            assert np.array_equal(bundle.params[k], params[k]), k
        assert bundle.state is not None and bundle.state.step == 7
        assert bundle.meta == {"note": "x"}

    def test_magic_mismatch(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            checkpoint_load(str(path))

    def test_truncated_payload(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        checkpoint_save(path, tiny_params())
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) - 16])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_load(path)

    def test_d_mismatch_rejected(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        checkpoint_save(path, tiny_params(d=8))
        with pytest.raises(CheckpointError, match="d=8"):
            checkpoint_load(path, expected_d=16)

    def test_identical_runs_identical_bytes(self, tmp_path):
        p1, p2 = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        checkpoint_save(p1, tiny_params(seed=5))
        checkpoint_save(p2, tiny_params(seed=5))
        assert open(p1, "rb").read() == open(p2, "rb").read()
