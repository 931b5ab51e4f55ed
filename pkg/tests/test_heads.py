import numpy as np
import pytest
from helpers import (
    LOSS_KINDS,
    analytic_param_grads,
    finite_diff_param_grads,
    make_head64,
    make_loss_case,
    max_rel_error,
)

from panolabel import MlpHead, ValidationError, adam_step, head_forward, init_head
from panolabel.grids import resample_array
from panolabel.heads import AdamState, HeadGrads, sgd_step


def mlp_oracle(head, feats):
    """Upsample-features-first reference: per-pixel 4-layer MLP on the blown-up grid."""
    f = head.upsample_factor
    hp, wp, _ = feats.shape
    up = resample_array(feats, hp * f, wp * f)
    out = np.zeros((hp * f, wp * f, head.out_classes))
    for r in range(hp * f):
        for c in range(wp * f):
            a = up[r, c]
            for i in range(4):
                a = a @ head.weights[i] + head.biases[i]
                if i < 3:
                    a = np.maximum(a, 0.0)
            out[r, c] = a
    return out


class TestForward:
    def test_zero_layers_give_zero_logits(self, rng):
        head = init_head(4, (3, 3, 3), 2, 2, rng)
        for i in range(4):
            head.weights[i][:] = 0.0
            head.biases[i][:] = 0.0
        head.weights[0][:] = np.eye(4, 3, dtype=np.float32)
        logits = head_forward(head, rng.standard_normal((2, 2, 4)).astype(np.float32))
        assert logits.shape == (4, 4, 2)
        assert np.all(logits == 0.0)

    def test_single_patch_constant_output(self, rng):
        head = make_head64(0, upsample=3)
        feats = np.random.default_rng(5).standard_normal((1, 1, 8))
        logits = head_forward(head, feats)
        assert logits.shape == (3, 3, 3)
        assert np.allclose(logits, logits[0, 0], atol=1e-12)

    def test_matches_per_pixel_oracle(self):
        # [DERIVED] dense-math oracle: upsample first, then the plain MLP.
        head = make_head64(3, upsample=2)
        feats = np.random.default_rng(10).standard_normal((2, 2, 8))
        logits = head_forward(head, feats)
        assert np.allclose(logits, mlp_oracle(head, feats), atol=1e-5)

    def test_channel_mismatch_rejected(self, rng):
        head = init_head(4, (3, 3, 3), 2, 1, rng)
        with pytest.raises(ValidationError):
            head_forward(head, rng.standard_normal((2, 2, 5)).astype(np.float32))

    def test_head_requires_four_layers(self, rng):
        with pytest.raises(ValidationError):
            MlpHead((4, 3, 2), [np.zeros((4, 3))], [np.zeros(3)], 1)


class TestGradients:
    @pytest.mark.parametrize("kind", LOSS_KINDS)
    def test_against_finite_differences(self, kind):
        for seed in (0, 1):
            head = make_head64(seed)
            feats, pack = make_loss_case(seed, kind, head)
            analytic = analytic_param_grads(head, feats, kind, pack)
            fd = finite_diff_param_grads(head, feats, kind, pack)
            assert max_rel_error(analytic, fd) < 1e-3

    def test_upsample_adjoint_against_finite_differences(self):
        # Exercises the gradient path through the bilinear upsampling.
        for seed in (0, 1, 2):
            head = make_head64(seed, upsample=2)
            feats, pack = make_loss_case(seed, "mse", head, grid=(2, 2))
            analytic = analytic_param_grads(head, feats, "mse", pack)
            fd = finite_diff_param_grads(head, feats, "mse", pack)
            assert max_rel_error(analytic, fd) < 1e-3


class TestOptimizers:
    def test_zero_learning_rate_keeps_parameters(self, rng):
        head = init_head(4, (3, 3, 3), 2, 1, rng)
        grads = HeadGrads(
            [np.ones_like(w) for w in head.weights], [np.ones_like(b) for b in head.biases]
        )
        new_head, _ = adam_step(head, grads, AdamState.for_head(head), learning_rate=0.0)
        for a, b in zip(new_head.weights + new_head.biases, head.weights + head.biases):
            assert np.array_equal(a, b)
        sgd_head = sgd_step(head, grads, 0.0)
        assert np.array_equal(sgd_head.weights[0], head.weights[0])

    def test_adam_moves_against_gradient(self, rng):
        head = init_head(4, (3, 3, 3), 2, 1, rng)
        grads = HeadGrads(
            [np.ones_like(w) for w in head.weights], [np.ones_like(b) for b in head.biases]
        )
        new_head, state = adam_step(head, grads, AdamState.for_head(head), learning_rate=0.01)
        assert state.step_count == 1
        # With the first-step bias correction, Adam's step is lr * g / (|g| + eps).
        assert np.allclose(new_head.weights[0], head.weights[0] - 0.01, atol=1e-6)

    def test_adam_is_deterministic(self, rng):
        head = init_head(4, (3, 3, 3), 2, 1, rng)
        grads = HeadGrads([0.1 * w for w in head.weights], [0.1 * b for b in head.biases])
        a1, _ = adam_step(head, grads, AdamState.for_head(head), 0.005)
        a2, _ = adam_step(head, grads, AdamState.for_head(head), 0.005)
        for x, y in zip(a1.weights + a1.biases, a2.weights + a2.biases):
            assert np.array_equal(x, y)
