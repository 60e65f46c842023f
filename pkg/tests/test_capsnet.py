from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ctcaps import capsnet
from ctcaps.capsnet import CapsuleLayerSpec, ClassWeights
from ctcaps.errors import DimensionError, UsageError
from ctcaps.numerics import Tensor


# --------------------------------------------------------------- numpy oracles
def squash_ref(s):
    sq = (s * s).sum(-1, keepdims=True)
    n = np.sqrt(sq)
    return np.where(n > 0, sq / (1 + sq) * s / np.where(n > 0, n, 1), 0.0)


def routing_ref(u_hat, iterations):
    """Step-by-step routing in float64 on (in, out, dim) predictions."""
    n_in, n_out, _ = u_hat.shape
    b = np.zeros((n_in, n_out))
    history = []
    for it in range(iterations):
        c = np.exp(b - b.max(1, keepdims=True))
        c /= c.sum(1, keepdims=True)
        history.append(c)
        v = squash_ref((c[..., None] * u_hat).sum(0))
        if it < iterations - 1:
            b = b + (u_hat * v[None]).sum(-1)
    return v, history


# ----------------------------------------------------------------------- squash
class TestSquash:
    def test_zero_vector(self):
        v = capsnet.squash(Tensor(np.zeros((1, 8)))).data
        assert np.array_equal(v, np.zeros((1, 8)))

    @pytest.mark.parametrize("norm,expected", [(1.0, 0.5), (3.0, 0.9)])
    def test_norm_examples(self, norm, expected):
        d = np.array([[1.0, -2.0, 2.0]]) / 3.0
        v = capsnet.squash(Tensor(d * norm)).data
        assert np.linalg.norm(v) == pytest.approx(expected, rel=1e-6)
        np.testing.assert_allclose(v / np.linalg.norm(v), d, atol=1e-6)

    def test_zero_has_finite_gradient(self):
        s = Tensor(np.zeros((2, 4)), requires_grad=True)
        capsnet.squash(s).sum().backward()
        assert np.isfinite(s.grad).all()

    @given(arrays(np.float64, (5, 6), elements=st.floats(-50, 50)))
    def test_matches_formula(self, s):
        v = capsnet.squash(Tensor(s)).data
        np.testing.assert_allclose(v, squash_ref(s.astype(np.float32).astype(np.float64)), atol=1e-5)
        assert (np.linalg.norm(v.astype(np.float64), axis=-1) < 1).all()

    def test_huge_input_stays_below_one(self):
        v = capsnet.squash(Tensor([[1e6, 0.0, 0.0]])).data
        assert float(np.linalg.norm(v)) < 1.0


# ---------------------------------------------------------------------- routing
class TestRouting:
    def test_zero_iterations_is_usage_error(self):
        with pytest.raises(UsageError):
            capsnet.dynamic_routing(Tensor(np.ones((2, 2, 3))), 0)

    def test_bad_rank_is_dimension_error(self):
        with pytest.raises(DimensionError):
            capsnet.dynamic_routing(Tensor(np.ones((2, 3))), 1)

    @pytest.mark.parametrize("iterations", [1, 2, 3, 6])
    def test_identical_predictions(self, iterations):
        # uniform couplings 1/out persist, so each output is squash((in/out) u)
        u = np.array([0.3, -0.2, 0.5, 0.1])
        n_in, n_out = 5, 3
        uh = np.broadcast_to(u, (n_in, n_out, 4)).copy()
        v = capsnet.dynamic_routing(Tensor(uh), iterations).data
        expected = squash_ref(np.broadcast_to(u * n_in / n_out, (n_out, 4)))
        np.testing.assert_allclose(v, expected, atol=1e-6)

    def test_opposed_vs_aligned_scripted(self):
        # out-cap 0 gets opposite predictions, out-cap 1 aligned ones
        a = np.array([1.0, 0.5, -0.5])
        uh = np.stack([np.stack([a, a]), np.stack([-a, a])])
        v, couplings = capsnet.dynamic_routing(Tensor(uh), 3, return_couplings=True)
        v_ref, c_ref = routing_ref(uh, 3)
        np.testing.assert_allclose(v.data, v_ref, atol=1e-6)
        for c, r in zip(couplings, c_ref):
            np.testing.assert_allclose(c, r, atol=1e-6)
        norms = np.linalg.norm(v.data, axis=-1)
        assert norms[1] > norms[0]
        assert (couplings[-1][:, 1] > 0.5).all()

    def test_monotone_agreement(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            n_in, dim = int(rng.integers(2, 6)), int(rng.integers(2, 6))
            base = rng.standard_normal(dim)
            aligned = base + 0.1 * rng.standard_normal((n_in, dim))
            scattered = rng.standard_normal((n_in, dim)) * np.linalg.norm(base)
            uh = np.stack([scattered, aligned], axis=1)
            _, couplings = capsnet.dynamic_routing(Tensor(uh), 5, return_couplings=True)
            _, ref = routing_ref(uh, 5)
            mass = [c[:, 1].sum() for c in couplings]
            ref_mass = [c[:, 1].sum() for c in ref]
            np.testing.assert_allclose(mass, ref_mass, atol=1e-5)
            # the aligned capsule only gains mass when it also out-agrees
            if all(b >= a - 1e-9 for a, b in zip(ref_mass, ref_mass[1:])):
                assert all(b >= a - 1e-5 for a, b in zip(mass, mass[1:]))

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(12)
        uh = rng.standard_normal((3, 4, 2, 5))
        batched = capsnet.dynamic_routing(Tensor(uh), 3).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], capsnet.dynamic_routing(Tensor(uh[i]), 3).data, atol=1e-6)

    @given(st.integers(1, 8), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**16))
    def test_matches_oracle(self, n_in, n_out, iterations, seed):
        uh = np.random.default_rng(seed).standard_normal((n_in, n_out, 3)).astype(np.float32)
        v = capsnet.dynamic_routing(Tensor(uh), iterations).data
        np.testing.assert_allclose(v, routing_ref(uh.astype(np.float64), iterations)[0], atol=1e-5)


# ---------------------------------------------------------------- capsule layer
class TestCapsuleLayer:
    def test_spec_validation(self):
        with pytest.raises(UsageError):
            CapsuleLayerSpec(4, 8, 2, 16, routing_iterations=0)
        with pytest.raises(UsageError):
            CapsuleLayerSpec(0, 8, 2, 16)
        with pytest.raises(UsageError):
            CapsuleLayerSpec(6, 8, 2, 16, share_transform_spatially=True, capsule_types=4)

    def test_weight_shapes(self):
        assert CapsuleLayerSpec(512, 8, 32, 16, share_transform_spatially=True, capsule_types=8).weight_shape == (8, 32, 8, 16)
        assert CapsuleLayerSpec(32, 16, 2, 16).weight_shape == (32, 2, 16, 16)

    def test_identity_single_capsule(self):
        spec = CapsuleLayerSpec(1, 3, 1, 3)
        x = np.array([[0.6, 0.8, 0.0]])
        out = capsnet.capsule_layer(Tensor(x), spec, Tensor(np.eye(3)[None, None])).data
        np.testing.assert_allclose(out, squash_ref(x), atol=1e-7)

    def test_zero_weights(self):
        spec = CapsuleLayerSpec(4, 3, 2, 5)
        x = np.random.default_rng(0).standard_normal((4, 3))
        out = capsnet.capsule_layer(Tensor(x), spec, Tensor(np.zeros(spec.weight_shape))).data
        assert np.array_equal(out, np.zeros((2, 5)))

    def test_composition_oracle(self):
        rng = np.random.default_rng(13)
        spec = CapsuleLayerSpec(4, 3, 2, 5)
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal(spec.weight_shape)
        # straight-line: u_hat[i, j] = x[i] @ W[i, j], then three routing steps
        u_hat = np.empty((4, 2, 5))
        for i in range(4):
            for j in range(2):
                u_hat[i, j] = x[i] @ w[i, j]
        out = capsnet.capsule_layer(Tensor(x), spec, Tensor(w)).data
        np.testing.assert_allclose(out, routing_ref(u_hat, 3)[0], atol=1e-5)

    def test_shared_transforms_cycle_by_type(self):
        rng = np.random.default_rng(14)
        spec = CapsuleLayerSpec(6, 2, 2, 3, share_transform_spatially=True, capsule_types=2)
        x, w = rng.standard_normal((6, 2)), rng.standard_normal(spec.weight_shape)
        u_hat = np.stack([[x[i] @ w[i % 2, j] for j in range(2)] for i in range(6)])
        out = capsnet.capsule_layer(Tensor(x), spec, Tensor(w)).data
        np.testing.assert_allclose(out, routing_ref(u_hat, 3)[0], atol=1e-5)

    def test_shape_mismatch(self):
        spec = CapsuleLayerSpec(4, 3, 2, 5)
        with pytest.raises(DimensionError):
            capsnet.capsule_layer(Tensor(np.ones((4, 2))), spec, Tensor(np.ones(spec.weight_shape)))
        with pytest.raises(DimensionError):
            capsnet.capsule_layer(Tensor(np.ones((4, 3))), spec, Tensor(np.ones((4, 2, 3, 4))))


# ------------------------------------------------------------------ margin loss
def _caps(correct, wrong):
    return Tensor([[0.0, correct], [wrong, 0.0]])


class TestMarginLoss:
    @pytest.mark.parametrize(
        "correct,wrong,expected", [(0.9, 0.1, 0.0), (0.0, 0.0, 0.81), (0.9, 0.6, 0.125)]
    )
    def test_examples(self, correct, wrong, expected):
        # class 0 is the target; capsule 0 has the "correct" length
        caps = Tensor([[correct, 0.0], [0.0, wrong]])
        loss = capsnet.margin_loss(caps, [1.0, 0.0]).data
        # zero-length capsules read as sqrt(1e-12) = 1e-6, worth ~2e-6 of loss
        assert float(loss) == pytest.approx(expected, abs=5e-6)

    @pytest.mark.parametrize("target", [[1.0, 1.0], [0.0, 0.0], [0.5, 0.5]])
    def test_non_one_hot(self, target):
        with pytest.raises(UsageError):
            capsnet.margin_loss(_caps(0.5, 0.5), target)

    def test_batched(self):
        caps = Tensor(np.stack([[[0.9, 0], [0, 0.1]], [[0, 0], [0, 0]]]))
        loss = capsnet.margin_loss(caps, [[1, 0], [0, 1]]).data
        np.testing.assert_allclose(loss, [0.0, 0.81], atol=5e-6)

    @given(st.floats(0, 0.99), st.floats(0, 0.99))
    def test_non_negative_and_zero_rule(self, a, b):
        loss = float(capsnet.margin_loss(Tensor([[a, 0.0], [b, 0.0]]), [1.0, 0.0]).data)
        assert loss >= 0
        la, lb = np.float32(a), np.float32(b)
        if la >= 0.9 + 1e-6 and lb <= 0.1 - 1e-6:
            assert loss == 0
        if la < 0.9 - 1e-3 or lb > 0.1 + 1e-3:
            assert loss > 0


# ---------------------------------------------------------------- class weights
class TestWeightedLoss:
    def test_weights_example(self):
        assert ClassWeights(4993, 18416).positive_weight == pytest.approx(0.7867, abs=5e-5)

    def test_counts_must_be_positive(self):
        with pytest.raises(UsageError):
            ClassWeights(0, 3)

    def test_from_labels(self):
        assert ClassWeights.from_labels([1, 0, 0, 1, 0]) == ClassWeights(2, 3)

    def test_plug_in_example(self):
        loss = capsnet.weighted_loss(Tensor([1.0, 0.0, 0.0]), [1, 0, 0], ClassWeights(1, 3))
        assert float(loss.data) == pytest.approx(0.75)

    def test_balanced_is_symmetric_mean(self):
        losses = np.array([0.2, 0.4, 1.0, 3.0])
        labels = [1, 1, 0, 0]
        loss = float(capsnet.weighted_loss(Tensor(losses), labels, ClassWeights(50, 50)).data)
        assert loss == pytest.approx(0.5 * 0.3 + 0.5 * 2.0)

    def test_single_class_batch(self):
        loss = capsnet.weighted_loss(Tensor([2.0, 4.0]), [0, 0], ClassWeights(1, 3))
        assert float(loss.data) == pytest.approx(0.25 * 3.0)

    def test_empty_batch(self):
        with pytest.raises(UsageError):
            capsnet.weighted_loss([], [], ClassWeights(1, 1))

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            capsnet.weighted_loss(Tensor([1.0, 2.0]), [1], ClassWeights(1, 1))
