import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsde.diffcore import ShapeError, linear_forward, make_rng, relu_forward, sigmoid
from gsde.model import (
    CHECKPOINT_MAGIC,
    GrlSchedule,
    ModelDims,
    class_probs,
    domain_logits,
    features,
    grl_backward,
    init_model,
    lam,
    load_checkpoint,
    multilinear,
    multilinear_backward,
    save_checkpoint,
)

DIMS = ModelDims(input_dim=3, hidden=8, bottleneck=4, num_classes=3, disc_hidden=6)


def clone_bottlenecks(m):
    for b in m.bottlenecks[1:]:
        b.weight[...] = m.bottlenecks[0].weight
        b.bias[...] = m.bottlenecks[0].bias
    return m


class TestInit:
    def test_same_seed_identical(self):
        a, b = init_model(DIMS, k=5, seed=3), init_model(DIMS, k=5, seed=3)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and np.array_equal(pa, pb)

    def test_different_seed_differs(self):
        assert not np.array_equal(init_model(DIMS, seed=1).fingerprint(), init_model(DIMS, seed=2).fingerprint())

    def test_five_bottlenecks_independent(self):
        m = init_model(DIMS, k=5, seed=0)
        assert m.k == 5
        assert sum(1 for n, _ in m.named_parameters() if n.startswith("bottleneck")) == 10
        ws = [b.weight for b in m.bottlenecks]
        assert all(w.shape == (DIMS.bottleneck, DIMS.hidden) for w in ws)
        assert all(not np.array_equal(ws[i], ws[j]) for i in range(5) for j in range(i + 1, 5))
        assert m.classifier.in_dim == DIMS.bottleneck
        assert m.discriminator[0].in_dim == DIMS.bottleneck * DIMS.num_classes

    def test_fan_in_bound(self):
        m = init_model(DIMS, seed=0)
        for _, layer in m.named_layers():
            assert np.all(np.abs(layer.weight) <= 1 / math.sqrt(layer.in_dim))

    def test_errors(self):
        with pytest.raises(ValueError):
            init_model(DIMS, k=0)
        with pytest.raises(ValueError):
            init_model(ModelDims(input_dim=0), k=1)


class TestFeatures:
    def test_cloned_bottlenecks_match_single(self):
        x = make_rng(1).normal(size=(6, 3))
        for k in (1, 3, 5, 7):
            m = clone_bottlenecks(init_model(DIMS, k=k, seed=4))
            single = linear_forward(m.bottlenecks[0], m.forward(x).backbone)
            assert np.max(np.abs(features(m, x) - single)) <= 1e-12

    def test_mean_of_bottlenecks(self):
        m = init_model(DIMS, k=4, seed=2)
        x = make_rng(2).normal(size=(5, 3))
        h = x
        for layer in m.extractor:
            h = relu_forward(h @ layer.weight.T + layer.bias)
        outs = [h @ b.weight.T + b.bias for b in m.bottlenecks]
        np.testing.assert_allclose(features(m, x), sum(outs) / 4, atol=1e-13)

    def test_shape_error(self):
        m = init_model(DIMS, seed=0)
        with pytest.raises(ShapeError):
            features(m, np.zeros((2, 4)))
        with pytest.raises(ShapeError):
            domain_logits(m, np.zeros((2, 5)))


class TestClassProbs:
    def test_zero_classifier_uniform(self):
        m = init_model(DIMS, seed=0)
        m.classifier.weight[...] = 0
        m.classifier.bias[...] = 0
        np.testing.assert_allclose(class_probs(m, make_rng(0).normal(size=(4, 4))), 1 / 3)

    def test_rows_and_shift(self):
        m = init_model(DIMS, seed=0)
        f = make_rng(1).normal(size=(10, 4)) * 3
        p = class_probs(m, f)
        assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12
        m.classifier.bias += 7.5
        np.testing.assert_array_equal(np.argmax(class_probs(m, f), axis=1), np.argmax(p, axis=1))


class TestMultilinear:
    def test_one_hot_block(self):
        f = np.array([[1.0, 2.0]])
        out = multilinear(f, np.array([[0.0, 1.0, 0.0]]))
        np.testing.assert_array_equal(out, [[0, 0, 1, 2, 0, 0]])

    @given(st.integers(0, 1000))
    @settings(max_examples=30)
    def test_blockwise_sum_and_norm(self, seed):
        rng = make_rng(seed)
        f = rng.normal(size=(3, 4))
        p = rng.dirichlet(np.ones(3), size=3)
        out = multilinear(f, p)
        np.testing.assert_allclose(out.reshape(3, 3, 4).sum(axis=1), f, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1),
                                   np.linalg.norm(f, axis=1) * np.linalg.norm(p, axis=1), rtol=1e-9)

    def test_backward_fd(self):
        rng = make_rng(5)
        f, p, r = rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), rng.normal(size=(2, 6))
        gf, gp = multilinear_backward(f, p, r)
        h = 1e-6
        for arr, g in ((f, gf), (p, gp)):
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + h
                up = np.sum(multilinear(f, p) * r)
                arr[idx] = old - h
                down = np.sum(multilinear(f, p) * r)
                arr[idx] = old
                assert abs((up - down) / (2 * h) - g[idx]) < 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            multilinear(np.zeros((2, 3)), np.zeros((3, 2)))


class TestGrl:
    def test_zero_lambda(self):
        assert not np.any(grl_backward(np.ones((3, 2)), 0.0))

    def test_sign_flip(self):
        g = make_rng(0).normal(size=(4, 6))
        np.testing.assert_array_equal(grl_backward(g, 1.0), -g)

    @given(st.floats(0, 1), st.integers(0, 100))
    @settings(max_examples=30)
    def test_exact_scaling(self, l_am, seed):
        g = make_rng(seed).normal(size=(3, 3))
        assert np.array_equal(grl_backward(g, l_am), -l_am * g)

    @pytest.mark.parametrize("seed", range(5))
    def test_discriminator_fd(self, seed):
        # the discriminator sees the un-reversed BCE gradient
        m = init_model(DIMS, seed=seed)
        rng = make_rng(seed, 1)
        fused = rng.normal(size=(4, 12))
        d = np.array([1.0, 1.0, 0.0, 0.0])

        def loss():
            s = np.clip(sigmoid(domain_logits(m, fused).ravel()), 1e-12, 1 - 1e-12)
            return float(np.mean(-(d * np.log(s) + (1 - d) * np.log(1 - s))))

        m.zero_grad()
        cache = m.disc_forward(fused)
        s = sigmoid(cache.logits.ravel())
        m.disc_backward(cache, ((s - d) / 4).reshape(-1, 1))
        for layer in m.discriminator:
            for arr, grad in layer.params():
                for idx in np.ndindex(arr.shape):
                    old = arr[idx]
                    arr[idx] = old + 1e-6
                    up = loss()
                    arr[idx] = old - 1e-6
                    down = loss()
                    arr[idx] = old
                    fd = (up - down) / 2e-6
                    assert abs(fd - grad[idx]) <= 1e-5 * max(abs(fd), abs(grad[idx]), 1e-4)


class TestLambda:
    def test_values(self):
        s = GrlSchedule()
        assert lam(s, 0.0) == 0.0
        assert math.isclose(lam(s, 1.0), 2 / (1 + math.exp(-10)) - 1)
        assert round(lam(s, 1.0), 5) == 0.99991

    def test_monotone_bounded(self):
        s = GrlSchedule()
        vals = [lam(s, i / 99) for i in range(100)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))
        assert all(0 <= v < 1 for v in vals)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lam(GrlSchedule(), 1.5)


def test_checkpoint_round_trip(tmp_path):
    m = init_model(DIMS, k=3, seed=9)
    path = tmp_path / "m.gsde"
    save_checkpoint(m, path)
    assert path.read_text().splitlines()[0] == CHECKPOINT_MAGIC
    back = load_checkpoint(path)
    assert back.k == 3 and back.dims == DIMS
    assert back.fingerprint().tobytes() == m.fingerprint().tobytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.gsde"
    path.write_text("NOPE\n")
    with pytest.raises(ValueError):
        load_checkpoint(path)
