"""Tests for the MLP encoder: forward/backward correctness against
re-evaluation and finite-difference oracles, the optimizer, the momentum
queue, and the training loop."""

import numpy as np
import pytest

from tempcl.data import AugmentationPolicy, synth_mixture
from tempcl.encoder import (
    EncoderParams,
    NegativeSource,
    OptimState,
    backward,
    forward,
    init_encoder,
    init_optim_state,
    load_checkpoint,
    lr_at,
    momentum_update,
    queue_negatives,
    queue_push,
    save_checkpoint,
    sgd_step,
    train_epoch,
)
from tempcl.loss import info_nce, info_nce_grad, similarity_matrix
from tempcl.schedule import CoarseTauConfig, ScheduleConfig


def flat(params: EncoderParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in params.arrays()])


def batch_loss(params, X1, X2, tau) -> float:
    """Mean contrastive loss of two fixed views; the scalar used by the
    finite-difference oracles."""
    U = forward(params, X1).embeddings
    V = forward(params, X2).embeddings
    return info_nce(similarity_matrix(U, V), tau).mean


def batch_grads(params, X1, X2, tau) -> EncoderParams:
    r1 = forward(params, X1)
    r2 = forward(params, X2)
    U, V = r1.embeddings, r2.embeddings
    G = info_nce_grad(similarity_matrix(U, V), tau)
    g1 = backward(params, X1, G @ V, r1)
    g2 = backward(params, X2, G.T @ U, r2)
    for (W, b), (dW, db) in zip(g1.layers(), g2.layers()):
        W += dW
        b += db
    return g1


def smooth_neighbourhood(params, X, kink_margin=1e-3, norm_floor=0.3) -> bool:
    """True when no activation is near a ReLU kink and no projection row is
    near zero norm, so central differences probe a smooth region."""
    res = forward(params, X)
    pres = res.cache["backbone_pre"] + res.cache["proj_pre"][:-1]
    if any(np.abs(z).min() < kink_margin for z in pres):
        return False
    return res.cache["norms"].min() > norm_floor


def fd_grads(params, X1, X2, tau, h=1e-5) -> np.ndarray:
    base = flat(params)
    out = np.zeros_like(base)
    arrays = params.arrays()
    pos = 0
    for a in arrays:
        for i in range(a.size):
            orig = a.flat[i]
            a.flat[i] = orig + h
            up = batch_loss(params, X1, X2, tau)
            a.flat[i] = orig - h
            down = batch_loss(params, X1, X2, tau)
            a.flat[i] = orig
            out[pos + i] = (up - down) / (2 * h)
        pos += a.size
    assert np.array_equal(flat(params), base)
    return out


class TestForward:
    def test_identity_projection_returns_input(self):
        """No hidden layers and an identity projection pass unit rows through."""
        params = EncoderParams(backbone=[], projection=[(np.eye(3), np.zeros(3))])
        X = np.eye(3)
        res = forward(params, X)
        np.testing.assert_allclose(res.embeddings, X, atol=1e-15)
        np.testing.assert_array_equal(res.features, X)

    def test_rows_unit_norm(self):
        rng = np.random.default_rng(0)
        params = init_encoder(6, (16, 8), embed_dim=4, seed=1)
        X = rng.standard_normal((20, 6))
        res = forward(params, X)
        np.testing.assert_allclose(np.linalg.norm(res.embeddings, axis=1), 1.0, atol=1e-9)

    def test_matches_straight_line_recomputation(self):
        """Independent matmul/relu/normalize chain agrees to 1e-12."""
        rng = np.random.default_rng(2)
        params = init_encoder(5, (7, 6), embed_dim=3, seed=3)
        X = rng.standard_normal((5, 5))
        res = forward(params, X)

        a = X
        for W, b in params.backbone:
            a = np.maximum(a @ W + b, 0.0)
        feats = a
        for i, (W, b) in enumerate(params.projection):
            a = a @ W + b
            if i < len(params.projection) - 1:
                a = np.maximum(a, 0.0)
        expect = a / np.linalg.norm(a, axis=1, keepdims=True)
        np.testing.assert_allclose(res.embeddings, expect, atol=1e-12)
        np.testing.assert_allclose(res.features, feats, atol=1e-12)

    def test_two_layer_projection_head(self):
        params = init_encoder(4, (8,), embed_dim=3, projection_layers=2, seed=4)
        assert len(params.projection) == 2
        assert params.projection[0][0].shape == (8, 8)
        res = forward(params, np.random.default_rng(5).standard_normal((6, 4)))
        np.testing.assert_allclose(np.linalg.norm(res.embeddings, axis=1), 1.0, atol=1e-9)

    def test_zero_projection_row_replaced_and_flagged(self):
        params = EncoderParams(backbone=[], projection=[(np.eye(2), np.zeros(2))])
        X = np.array([[0.0, 0.0], [3.0, 4.0]])
        res = forward(params, X)
        np.testing.assert_array_equal(res.zero_rows, [True, False])
        np.testing.assert_array_equal(res.embeddings[0], [1.0, 0.0])

    def test_width_mismatch_diagnostic(self):
        params = init_encoder(4, (8,), embed_dim=3)
        with pytest.raises(ValueError, match="backbone layer 0"):
            forward(params, np.zeros((2, 5)))

    def test_non_finite_input_rejected(self):
        params = init_encoder(2, (4,), embed_dim=2)
        with pytest.raises(ValueError, match="non-finite"):
            forward(params, np.array([[np.nan, 0.0]]))


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        params = init_encoder(5, (6,), embed_dim=4, seed=6)
        X = np.random.default_rng(7).standard_normal((3, 5))
        grads = backward(params, X, np.zeros((3, 4)))
        assert all(np.all(a == 0.0) for a in grads.arrays())

    def test_relu_passthrough_at_positive_preactivation(self):
        """With strictly positive preactivations the ReLU factor is one:
        gradients equal the mask-free linear chain."""
        W1 = np.array([[0.7, 1.1]])
        b1 = np.array([0.5, 0.6])
        W2 = np.array([[1.0, 0.2], [-0.3, 0.9]])
        params = EncoderParams(backbone=[(W1, b1)], projection=[(W2, np.zeros(2))])
        X = np.array([[1.0]])  # preactivations 1.2 and 1.7, both > 0
        res = forward(params, X)
        assert np.all(res.cache["backbone_pre"][0] > 0)
        du = np.array([[0.3, -0.4]])
        grads = backward(params, X, du, res)

        z = res.cache["proj_pre"][0]
        u = res.embeddings
        dz = (du - np.sum(du * u, axis=1, keepdims=True) * u) / np.linalg.norm(z)
        dfeat = dz @ W2.T  # no relu mask: derivative exactly 1
        np.testing.assert_allclose(grads.backbone[0][0], X.T @ dfeat, atol=1e-14)
        np.testing.assert_allclose(grads.backbone[0][1], dfeat.sum(axis=0), atol=1e-14)

    def test_normalization_gradient_orthogonal_to_output(self):
        """Pre-normalization gradient rows are orthogonal to the embedding."""
        rng = np.random.default_rng(8)
        x = rng.standard_normal(4) * 2.0
        params = EncoderParams(backbone=[], projection=[(np.eye(4), np.zeros(4))])
        res = forward(params, x[None, :])
        du = rng.standard_normal((1, 4))
        grads = backward(params, x[None, :], du, res)
        # with identity projection and a single row, dW = x^T dz (rank one)
        i = int(np.argmax(np.abs(x)))
        dz = grads.projection[0][0][i] / x[i]
        assert abs(float(res.embeddings[0] @ dz)) < 1e-9

    def test_finite_difference_random_configs(self):
        """Ten random (params, views, upstream) configs agree with central
        differences to 1e-4 relative.

        Configurations are redrawn when an activation sits on a ReLU kink
        or a projection row is nearly zero-norm: finite differences are not
        a valid oracle across those non-smooth points.
        """
        rng = np.random.default_rng(9)
        checked = 0
        while checked < 10:
            n_hidden = int(rng.integers(0, 3))
            dims = tuple(int(rng.integers(3, 7)) for _ in range(n_hidden))
            d_in = int(rng.integers(3, 6))
            n = int(rng.integers(2, 6))
            params = init_encoder(d_in, dims, embed_dim=int(rng.integers(2, 5)),
                                  projection_layers=int(rng.choice([1, 2])),
                                  seed=int(rng.integers(1000)))
            X1 = rng.standard_normal((n, d_in))
            X2 = rng.standard_normal((n, d_in))
            tau = float(rng.uniform(0.2, 1.0))
            if not (smooth_neighbourhood(params, X1) and smooth_neighbourhood(params, X2)):
                continue
            analytic = flat(batch_grads(params, X1, X2, tau))
            numeric = fd_grads(params, X1, X2, tau)
            err = np.abs(analytic - numeric).max() / np.abs(analytic).max()
            assert err < 1e-4, f"config {checked}: rel err {err:.2e}"
            checked += 1

    def test_upstream_shape_checked(self):
        params = init_encoder(3, (4,), embed_dim=2)
        with pytest.raises(ValueError, match="upstream"):
            backward(params, np.zeros((2, 3)), np.zeros((2, 5)))


class TestLrAt:
    def ref_state(self, base=0.5, warmup=10, total=2000):
        params = init_encoder(2, (2,), embed_dim=2)
        return init_optim_state(params, base_lr=base, warmup_epochs=warmup,
                                total_epochs=total)

    def test_linear_ramp(self):
        assert lr_at(self.ref_state(), 4) == 0.25

    def test_base_lr_at_warmup_end(self):
        assert lr_at(self.ref_state(), 10) == 0.5

    def test_final_epoch_frozen_value(self):
        """Last-epoch LR for the 2000-epoch protocol, from a high-precision
        evaluation of the cosine formula."""
        lr = lr_at(self.ref_state(), 1999)
        np.testing.assert_allclose(lr, 3.1153261127517873e-07, rtol=1e-9)

    def test_epoch_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            lr_at(self.ref_state(total=100), 100)


def scalar_params(value: float) -> EncoderParams:
    return EncoderParams(backbone=[], projection=[(np.array([[value]]), np.zeros(1))])


def scalar_state(params, lr, momentum=0.0, wd=0.0) -> OptimState:
    return OptimState(buffers=params.zeros_like(), base_lr=lr, warmup_epochs=0,
                      total_epochs=1, weight_decay=wd, sgd_momentum=momentum)


class TestSgdStep:
    def test_zero_grad_zero_decay_is_identity(self):
        params = init_encoder(3, (4,), embed_dim=2, seed=10)
        before = flat(params).copy()
        state = init_optim_state(params, base_lr=0.5, warmup_epochs=0,
                                 total_epochs=5, weight_decay=0.0)
        sgd_step(params, params.zeros_like(), state)
        np.testing.assert_array_equal(flat(params), before)

    def test_plain_gradient_descent(self):
        """One step on f(w) = w^2 from w=1 at lr 0.1 lands on 0.8."""
        params = scalar_params(1.0)
        grads = scalar_params(2.0)
        sgd_step(params, grads, scalar_state(params, lr=0.1))
        assert params.projection[0][0][0, 0] == pytest.approx(0.8, abs=1e-15)

    def test_weight_decay_added_to_gradient(self):
        params = scalar_params(2.0)
        sgd_step(params, params.zeros_like(), scalar_state(params, lr=0.1, wd=0.5))
        # g = 0 + 0.5 * 2 = 1; w = 2 - 0.1 * 1
        assert params.projection[0][0][0, 0] == pytest.approx(1.9, abs=1e-15)

    def test_momentum_accumulates(self):
        params = scalar_params(0.0)
        state = scalar_state(params, lr=1.0, momentum=0.5)
        grads = scalar_params(1.0)
        sgd_step(params, grads, state)   # buf = 1, w = -1
        sgd_step(params, grads, state)   # buf = 1.5, w = -2.5
        assert params.projection[0][0][0, 0] == pytest.approx(-2.5, abs=1e-14)


class TestMomentumUpdate:
    def test_m_one_keeps_key(self):
        f, k = scalar_params(2.0), scalar_params(5.0)
        momentum_update(f, k, 1.0)
        assert k.projection[0][0][0, 0] == 5.0

    def test_m_zero_copies(self):
        f, k = scalar_params(2.0), scalar_params(5.0)
        momentum_update(f, k, 1e-300)
        assert k.projection[0][0][0, 0] == pytest.approx(2.0)

    def test_midpoint(self):
        f, k = scalar_params(2.0), scalar_params(0.0)
        momentum_update(f, k, 0.5)
        assert k.projection[0][0][0, 0] == pytest.approx(1.0)


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


class TestQueue:
    def make_source(self, capacity=4, dim=3):
        params = init_encoder(dim, (), embed_dim=dim, seed=11)
        return NegativeSource.momentum_queue(params, capacity=capacity)

    def test_fifo_eviction_one_at_a_time(self):
        src = self.make_source()
        rng = np.random.default_rng(12)
        keys = unit_rows(rng, 6, 3)
        for row in keys:
            queue_push(src, row[None, :])
        np.testing.assert_array_equal(queue_negatives(src), keys[2:])

    def test_empty_queue(self):
        src = self.make_source()
        assert queue_negatives(src).shape == (0, 3)

    def test_oversized_batch_keeps_tail(self):
        src = self.make_source(capacity=4)
        keys = unit_rows(np.random.default_rng(13), 7, 3)
        queue_push(src, keys)
        np.testing.assert_array_equal(queue_negatives(src), keys[-4:])

    def test_non_normalized_rejected(self):
        src = self.make_source()
        with pytest.raises(ValueError, match="unit-norm"):
            queue_push(src, np.array([[1.0, 1.0, 0.0]]))

    def test_invariant_after_random_operations(self):
        src = self.make_source(capacity=5)
        rng = np.random.default_rng(14)
        for _ in range(30):
            queue_push(src, unit_rows(rng, int(rng.integers(1, 8)), 3))
            q = queue_negatives(src)
            assert q.shape[0] <= 5
            np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-9)


def toy_setup(seed=0, n_max=16, batch=8, negatives="in_batch", noise=0.05):
    ds = synth_mixture(4, 6, n_max, 4.0, class_separation=2.0, within_sigma=0.3,
                       seed=seed)
    params = init_encoder(6, (12,), embed_dim=4, seed=seed)
    state = init_optim_state(params, base_lr=0.3, warmup_epochs=0, total_epochs=10,
                             weight_decay=0.0, sgd_momentum=0.0)
    if negatives == "in_batch":
        source = NegativeSource.in_batch()
    else:
        source = NegativeSource.momentum_queue(params, capacity=16)
    policy = AugmentationPolicy(mode="embedding_noise", noise_sigma=noise)
    sched = ScheduleConfig(kind="constant", constant_tau=0.5)
    return ds, params, state, source, policy, sched


class TestTrainEpoch:
    def test_zero_lr_keeps_params_and_reports_initial_loss(self):
        ds, params, state, source, policy, sched = toy_setup(noise=0.0)
        state.base_lr = 0.0
        before = flat(params).copy()
        _, loss = train_epoch(ds, params, state, sched, source, policy,
                              seed=1, epoch=0, batch_size=8)
        np.testing.assert_array_equal(flat(params), before)
        # with identity augmentation the reported loss is the loss of the
        # untouched parameters on the dataset batches
        U = forward(params, ds.features).embeddings
        assert loss > 0.0 and np.isfinite(loss)

    def test_bitwise_deterministic(self):
        runs = []
        for _ in range(2):
            ds, params, state, source, policy, sched = toy_setup(seed=3)
            for epoch in range(3):
                train_epoch(ds, params, state, sched, source, policy,
                            seed=99, epoch=epoch, batch_size=8)
            runs.append(flat(params))
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_first_step_follows_finite_difference_direction(self):
        """The parameter update direction matches the finite-difference
        gradient of the batch loss (cosine >= 0.999)."""
        ds, params, state, source, policy, sched = toy_setup(n_max=4, batch=4,
                                                             noise=0.0)
        # single batch of the whole dataset, identity views
        before = params.copy()
        train_epoch(ds, params, state, sched, source, policy,
                    seed=5, epoch=0, batch_size=ds.n)
        step = flat(before) - flat(params)

        X = ds.features
        numeric = fd_grads(before, X, X, 0.5)
        cos = step @ numeric / (np.linalg.norm(step) * np.linalg.norm(numeric))
        assert cos > 0.999

    def test_momentum_queue_mode_pushes_keys(self):
        ds, params, state, source, policy, sched = toy_setup(negatives="momentum_queue")
        train_epoch(ds, params, state, sched, source, policy,
                    seed=7, epoch=0, batch_size=8)
        q = queue_negatives(source)
        assert q.shape[0] == min(source.capacity, (ds.n // 8) * 8)
        np.testing.assert_allclose(np.linalg.norm(q, axis=1), 1.0, atol=1e-9)

    def test_momentum_queue_deterministic(self):
        losses = []
        for _ in range(2):
            ds, params, state, source, policy, sched = toy_setup(seed=4,
                                                                 negatives="momentum_queue")
            ls = [train_epoch(ds, params, state, sched, source, policy,
                              seed=11, epoch=e, batch_size=8)[1] for e in range(3)]
            losses.append(ls)
        assert losses[0] == losses[1]

    def test_coarse_supervision_accepted(self):
        ds, params, state, source, policy, _ = toy_setup()
        coarse = CoarseTauConfig(head_classes=frozenset({0, 1}), tau_head=1.0,
                                 tau_tail=0.1)
        _, loss = train_epoch(ds, params, state, coarse, source, policy,
                              seed=2, epoch=0, batch_size=8)
        assert np.isfinite(loss)

    def test_batch_size_larger_than_dataset_rejected(self):
        ds, params, state, source, policy, sched = toy_setup()
        with pytest.raises(ValueError, match="batch_size"):
            train_epoch(ds, params, state, sched, source, policy,
                        seed=0, epoch=0, batch_size=10_000)

    def test_loss_decreases_on_separable_mixture(self):
        """Mean epoch loss after 50 epochs is below the first-epoch loss for
        five consecutive seeds at fixed tau = 0.2."""
        for seed in range(5):
            ds = synth_mixture(4, 8, 64, 4.0, class_separation=2.0,
                               within_sigma=0.2, seed=seed)
            params = init_encoder(8, (32, 16), embed_dim=8, seed=seed)
            state = init_optim_state(params, base_lr=0.3, warmup_epochs=5,
                                     total_epochs=50, weight_decay=1e-4,
                                     sgd_momentum=0.9)
            source = NegativeSource.in_batch()
            policy = AugmentationPolicy(mode="embedding_noise", noise_sigma=0.05)
            sched = ScheduleConfig(kind="constant", constant_tau=0.2)
            first = last = None
            for epoch in range(50):
                _, loss = train_epoch(ds, params, state, sched, source, policy,
                                      seed=seed, epoch=epoch, batch_size=32)
                if epoch == 0:
                    first = loss
                last = loss
            assert last < first, f"seed {seed}: {last:.4f} !< {first:.4f}"


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_encoder(7, (9, 5), embed_dim=3, projection_layers=2, seed=20)
        p = tmp_path / "enc.tclp"
        save_checkpoint(params, p)
        back = load_checkpoint(p)
        assert len(back.backbone) == 2 and len(back.projection) == 2
        for (W, b), (W2, b2) in zip(params.layers(), back.layers()):
            np.testing.assert_array_equal(W, W2)
            np.testing.assert_array_equal(b, b2)

    def test_magic_checked(self, tmp_path):
        p = tmp_path / "bad.tclp"
        p.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(ValueError, match="TCLP"):
            load_checkpoint(p)

    def test_trailing_bytes_rejected(self, tmp_path):
        params = init_encoder(3, (), embed_dim=2)
        p = tmp_path / "t.tclp"
        save_checkpoint(params, p)
        p.write_bytes(p.read_bytes() + b"\x00")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(p)
