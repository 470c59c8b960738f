import numpy as np
import pytest

from flic.anchors import AnchorSet
from flic.gaussian import Gaussian, empirical_gaussian, w2_sq_gaussians
from flic.nets import (
    AdamState,
    Layer,
    Mlp,
    adam_step,
    alignment_loss_grad,
    backward,
    cross_entropy,
    forward,
    init_mlp,
)

from helpers import fd_grad, pack, rel_err, unpack


def random_net(rng, dims, activations):
    net = init_mlp(dims, activations, rng)
    # nudge parameters away from activation kinks so finite differences
    # stay valid for relu-family layers
    for layer in net.layers:
        layer.b = layer.b + 0.1 * rng.standard_normal(layer.b.shape)
    return net


def net_loss(net, X, direction):
    out, _ = forward(net, X)
    return float(np.sum(out * direction))


class TestForward:
    def test_identity_layer_passthrough(self):
        net = Mlp([Layer(np.eye(3), np.zeros(3), "identity")])
        X = np.random.default_rng(0).standard_normal((4, 3))
        out, _ = forward(net, X)
        np.testing.assert_array_equal(out, X)

    def test_relu_on_negative_input(self):
        net = Mlp([Layer(np.eye(2), np.zeros(2), "relu")])
        out, _ = forward(net, -np.ones((3, 2)))
        np.testing.assert_array_equal(out, np.zeros((3, 2)))

    def test_against_straight_line_evaluation(self):
        rng = np.random.default_rng(1)
        net = random_net(rng, [4, 5, 2], ["sigmoid", "identity"])
        X = rng.standard_normal((6, 4))
        out, _ = forward(net, X)
        # independent re-implementation
        W1, b1 = net.layers[0].W, net.layers[0].b
        W2, b2 = net.layers[1].W, net.layers[1].b
        hidden = 1.0 / (1.0 + np.exp(-(X @ W1 + b1)))
        expected = hidden @ W2 + b2
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        net = random_net(rng, [3, 4, 2], ["relu", "identity"])
        X = rng.standard_normal((5, 3))
        a, _ = forward(net, X)
        b, _ = forward(net, X)
        np.testing.assert_array_equal(a, b)

    def test_dimension_mismatch(self):
        net = Mlp([Layer(np.eye(3), np.zeros(3), "identity")])
        with pytest.raises(ValueError):
            forward(net, np.zeros((2, 4)))


class TestBackward:
    def test_zero_output_grad(self):
        rng = np.random.default_rng(3)
        net = random_net(rng, [3, 4, 2], ["relu", "identity"])
        X = rng.standard_normal((5, 3))
        _, cache = forward(net, X)
        grads, g_in = backward(net, cache, np.zeros((5, 2)))
        assert all(np.all(g == 0) for g in grads)
        np.testing.assert_array_equal(g_in, np.zeros_like(X))

    def test_scalar_sigmoid_hand_derivative(self):
        w, b, x = 0.7, -0.2, 1.3
        net = Mlp([Layer(np.array([[w]]), np.array([b]), "sigmoid")])
        out, cache = forward(net, np.array([[x]]))
        grads, g_in = backward(net, cache, np.ones((1, 1)))
        s = 1.0 / (1.0 + np.exp(-(w * x + b)))
        assert grads[0][0, 0] == pytest.approx(s * (1 - s) * x, abs=1e-10)
        assert grads[1][0] == pytest.approx(s * (1 - s), abs=1e-10)
        assert g_in[0, 0] == pytest.approx(s * (1 - s) * w, abs=1e-10)

    @pytest.mark.parametrize(
        "dims,acts",
        [
            ([3, 5, 2], ["relu", "identity"]),
            ([2, 4, 4, 3], ["leaky_relu", "sigmoid", "identity"]),
            ([4, 3], ["sigmoid"]),
        ],
    )
    def test_param_gradients_match_fd(self, dims, acts):
        rng = np.random.default_rng(hash((tuple(dims), tuple(acts))) % 2**32)
        net = random_net(rng, dims, acts)
        X = rng.standard_normal((7, dims[0]))
        direction = rng.standard_normal((7, dims[-1]))
        _, cache = forward(net, X)
        grads, _ = backward(net, cache, direction)
        shapes = [p.shape for p in net.params()]

        def f(vec):
            trial = net.copy()
            trial.set_params(unpack(vec, shapes))
            return net_loss(trial, X, direction)

        fd = fd_grad(f, pack(net.params()))
        assert rel_err(pack(grads), fd) < 1e-4

    def test_input_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        net = random_net(rng, [3, 6, 2], ["leaky_relu", "identity"])
        X = rng.standard_normal((4, 3))
        direction = rng.standard_normal((4, 2))
        _, cache = forward(net, X)
        _, g_in = backward(net, cache, direction)
        fd = fd_grad(lambda v: net_loss(net, v.reshape(X.shape), direction), X.ravel())
        assert rel_err(g_in.ravel(), fd) < 1e-4


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = cross_entropy(np.zeros((5, 7)), np.arange(5) % 7)
        assert loss == pytest.approx(np.log(7), abs=1e-12)

    def test_large_margin_correct_class(self):
        logits = np.full((3, 4), -50.0)
        labels = np.array([1, 2, 0])
        logits[np.arange(3), labels] = 50.0
        loss, _ = cross_entropy(logits, labels)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(6)
        logits = rng.standard_normal((6, 4))
        labels = rng.integers(0, 4, size=6)
        _, grad = cross_entropy(logits, labels)
        fd = fd_grad(
            lambda v: cross_entropy(v.reshape(6, 4), labels)[0], logits.ravel()
        )
        assert rel_err(grad.ravel(), fd) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="range"):
            cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def identity_anchors(n_classes, k, means=None):
    means = np.zeros((n_classes, k)) if means is None else means
    return AnchorSet(means, np.tile(np.eye(k), (n_classes, 1, 1)), cov_learnable=False)


class TestAlignmentLoss:
    def test_batch_matching_anchor_is_near_stationary(self):
        # batch with exact zero mean and identity covariance
        k = 3
        X = np.concatenate([np.eye(k), -np.eye(k)]) * np.sqrt(3.0)
        anchors = identity_anchors(1, k)
        loss, grads = alignment_loss_grad({0: X}, anchors, eps=1e-6)
        assert loss < k * 1e-6
        assert np.linalg.norm(grads[0]) < 1e-6

    def test_anchors_equal_to_batch_gaussian(self):
        rng = np.random.default_rng(7)
        X = rng.standard_normal((12, 4))
        g = empirical_gaussian(X, eps=1e-6)
        anchors = AnchorSet(
            g.mean[None, :], g.cov_factor[None, :, :], cov_learnable=True
        )
        loss, grads = alignment_loss_grad({0: X}, anchors, eps=1e-6)
        assert loss <= 4 * 1e-6
        assert np.linalg.norm(grads[0]) <= 1e-6

    def test_single_class_gradient_matches_fd(self):
        rng = np.random.default_rng(8)
        k, n = 3, 9
        X = rng.standard_normal((n, k))
        anchors = identity_anchors(1, k, means=rng.standard_normal((1, k)))
        _, grads = alignment_loss_grad({0: X}, anchors, eps=1e-4)
        fd = fd_grad(
            lambda v: alignment_loss_grad({0: v.reshape(n, k)}, anchors, 1e-4)[0],
            X.ravel(),
        )
        assert rel_err(grads[0].ravel(), fd) < 1e-4

    def test_mean_term_dominates_when_covariances_match(self):
        # anchor covariance I, batch built with covariance exactly I:
        # gradient reduces to the mean-term formula 2(m_hat - v)/n
        k = 2
        base = np.concatenate([np.eye(k), -np.eye(k)]) * np.sqrt(2.0)
        shift = np.array([0.5, -1.0])
        X = base + shift
        anchors = identity_anchors(1, k, means=np.array([[2.0, 1.0]]))
        _, grads = alignment_loss_grad({0: X}, anchors, eps=1e-9)
        expected = 2 * (shift - anchors.means[0]) / X.shape[0]
        np.testing.assert_allclose(grads[0], np.tile(expected, (X.shape[0], 1)), atol=1e-6)

    def test_two_classes_total_is_sum_of_w2(self):
        rng = np.random.default_rng(9)
        k = 3
        batches = {0: rng.standard_normal((8, k)), 3: rng.standard_normal((5, k)) + 1.0}
        means = rng.standard_normal((4, k))
        anchors = identity_anchors(4, k, means=means)
        loss, _ = alignment_loss_grad(batches, anchors, eps=1e-6)
        expected = sum(
            w2_sq_gaussians(
                Gaussian(means[c], np.eye(k)), empirical_gaussian(batches[c], 1e-6)
            )
            for c in batches
        )
        assert loss == pytest.approx(expected, rel=1e-12)

    def test_empty_class_slice_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            alignment_loss_grad({0: np.zeros((0, 2))}, identity_anchors(1, 2), 1e-6)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        rng = np.random.default_rng(10)
        params = [rng.standard_normal((3, 2)), rng.standard_normal(2)]
        state = AdamState.for_params(params, lr=0.05)
        new = adam_step(state, params, [np.zeros((3, 2)), np.zeros(2)])
        for p, q in zip(params, new):
            np.testing.assert_array_equal(p, q)
        assert state.t == 1

    def test_first_step_magnitude_is_learning_rate(self):
        params = [np.zeros(4)]
        g = np.array([0.3, -2.0, 5.0, -0.01])
        state = AdamState.for_params(params, lr=0.01)
        new = adam_step(state, params, [g])
        np.testing.assert_allclose(new[0], -0.01 * np.sign(g), rtol=1e-6)

    def test_quadratic_convergence(self):
        target = np.array([1.5, -0.5, 2.0])
        scales = np.array([1.0, 4.0, 0.5])
        x = [np.zeros(3)]
        state = AdamState.for_params(x, lr=0.01)
        for _ in range(5000):
            g = scales * (x[0] - target)
            x = adam_step(state, x, [g])
        assert np.max(np.abs(x[0] - target)) < 1e-4

    def test_shape_mismatch(self):
        params = [np.zeros(3)]
        state = AdamState.for_params(params, lr=0.1)
        with pytest.raises(ValueError):
            adam_step(state, params, [np.zeros(4)])
