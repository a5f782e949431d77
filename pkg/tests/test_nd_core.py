"""
tests/test_nd_core.py – Dense linear algebra, MLPs, input jets and optimisers.

All tests run on CPU in float64 and take well under a second each.  They
verify that:
  1. cholesky_psd reconstructs SPD matrices, escalates jitter on singular
     ones and gives up with NotPSD on indefinite ones.
  2. sqrtm_psd squares back and rejects asymmetric or indefinite input.
  3. Mlp initialisation is Glorot-uniform with zero biases and seedable,
     and L-LAAF slopes start at 1/n.
  4. Parameter gradients and input jets match closed forms.
  5. Adam and L-BFGS converge on problems with known minimisers.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from opex.errors import (
    DimensionMismatch,
    NonFiniteGradient,
    NotPSD,
    NotSymmetric,
    UnsupportedActivationOrder,
)
from opex.nd_core import (
    DTYPE,
    Mlp,
    activation_eval,
    adam_step,
    cholesky_psd,
    input_jets,
    lbfgs_minimize,
    lbfgs_parameters,
    make_adam,
    mlp_eval,
    mlp_input_jet,
    mlp_param_grad,
    param_grad,
    sqrtm_psd,
)
from opex.types import ActivationKind

# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _spd(n: int, seed: int = 0) -> np.ndarray:
    a = np.random.default_rng(seed).standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


def _mlp(sizes: list[int], activation: ActivationKind = ActivationKind.TANH, **kwargs) -> Mlp:
    return Mlp(sizes, activation, generator=torch.Generator().manual_seed(0), **kwargs)


# ---------------------------------------------------------------------------
# Dense linear algebra
# ---------------------------------------------------------------------------

class TestCholesky:
    def test_spd_reconstructs(self) -> None:
        a = _spd(6)
        chol, jitter = cholesky_psd(a)
        assert jitter == 0.0
        assert np.allclose(np.tril(chol), chol)
        assert np.linalg.norm(chol @ chol.T - a) <= 1e-10 * np.linalg.norm(a)

    def test_singular_needs_jitter(self) -> None:
        a = np.ones((3, 3))
        chol, jitter = cholesky_psd(a)
        assert 0.0 < jitter <= 1e-4
        assert np.linalg.norm(chol @ chol.T - (a + jitter * np.eye(3))) <= 1e-8 * 3

    def test_indefinite_raises(self) -> None:
        with pytest.raises(NotPSD) as info:
            cholesky_psd(-np.eye(3))
        assert info.value.jitter == pytest.approx(1e-4)

    def test_negative_jitter(self) -> None:
        with pytest.raises(ValueError, match="jitter"):
            cholesky_psd(np.eye(2), jitter=-1.0)

    def test_non_square(self) -> None:
        with pytest.raises(DimensionMismatch):
            cholesky_psd(np.ones((2, 3)))


class TestSqrtm:
    def test_squares_back(self) -> None:
        a = _spd(5, seed=3)
        root = sqrtm_psd(a)
        assert np.allclose(root, root.T)
        assert np.allclose(root @ root, a, atol=1e-10 * np.abs(a).max())

    def test_zero_matrix(self) -> None:
        assert np.array_equal(sqrtm_psd(np.zeros((3, 3))), np.zeros((3, 3)))

    def test_rank_deficient_clamped(self) -> None:
        v = np.array([[1.0], [2.0], [2.0]])
        root = sqrtm_psd(v @ v.T)
        assert np.allclose(root @ root, v @ v.T, atol=1e-10)

    def test_asymmetric(self) -> None:
        with pytest.raises(NotSymmetric):
            sqrtm_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_indefinite(self) -> None:
        with pytest.raises(NotPSD):
            sqrtm_psd(np.diag([1.0, -1.0]))


# ---------------------------------------------------------------------------
# Activations and MLPs
# ---------------------------------------------------------------------------

class TestActivations:
    @pytest.mark.parametrize("x,expected", [(-1.0, 0.0), (0.5, 0.5), (1.5, 0.5), (2.5, 0.0)])
    def test_hat(self, x: float, expected: float) -> None:
        assert activation_eval(ActivationKind.HAT, x) == pytest.approx(expected)

    def test_laaf_initial_slope_is_plain(self) -> None:
        plain = activation_eval(ActivationKind.TANH, 0.7)
        assert activation_eval(ActivationKind.TANH, 0.7, laaf_scale=10.0) == pytest.approx(plain)

    def test_laaf_slope_scales_input(self) -> None:
        value = activation_eval(ActivationKind.TANH, 0.7, laaf_scale=2.0, slope=1.0)
        assert value == pytest.approx(math.tanh(1.4))


class TestMlp:
    def test_glorot_bounds_and_zero_bias(self) -> None:
        mlp = _mlp([3, 50, 2])
        for linear in mlp.linears:
            bound = math.sqrt(6.0 / (linear.in_features + linear.out_features))
            assert float(linear.weight.abs().max()) <= bound
            assert float(linear.bias.abs().max()) == 0.0

    def test_seeded_init_is_reproducible(self) -> None:
        a, b = _mlp([2, 10, 1]), _mlp([2, 10, 1])
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_laaf_slopes(self) -> None:
        mlp = _mlp([1, 8, 8, 1], laaf_scale=5.0)
        assert mlp.slopes is not None
        assert mlp.slopes.shape == (2,)
        assert torch.allclose(mlp.slopes, torch.full((2,), 0.2, dtype=DTYPE))

    def test_final_activation_bounds_output(self) -> None:
        mlp = _mlp([1, 4, 3], final_activation=True)
        out = mlp_eval(mlp, np.linspace(-5, 5, 11)[:, None])
        assert out.shape == (11, 3)
        assert np.all(np.abs(out) < 1.0)

    def test_too_few_sizes(self) -> None:
        with pytest.raises(ValueError, match="at least input and output"):
            Mlp([3], ActivationKind.TANH)

    def test_eval_wrong_width(self) -> None:
        with pytest.raises(DimensionMismatch):
            mlp_eval(_mlp([2, 4, 1]), np.zeros((5, 3)))


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

class TestParamGrad:
    def test_linear_closed_form(self) -> None:
        mlp = _mlp([2, 1], ActivationKind.IDENTITY)
        x = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
        grad_w, grad_b = mlp_param_grad(mlp, x, lambda y: y.sum())
        assert torch.allclose(grad_w, torch.tensor([[4.5, 1.5]], dtype=DTYPE))
        assert torch.allclose(grad_b, torch.tensor([3.0], dtype=DTYPE))

    def test_unreached_parameter_gets_zero(self) -> None:
        p = torch.ones(2, dtype=DTYPE, requires_grad=True)
        q = torch.ones(3, dtype=DTYPE, requires_grad=True)
        gp, gq = param_grad((2.0 * p).sum(), [p, q])
        assert torch.equal(gp, torch.full((2,), 2.0, dtype=DTYPE))
        assert torch.equal(gq, torch.zeros(3, dtype=DTYPE))

    def test_constant_loss(self) -> None:
        p = torch.ones(2, dtype=DTYPE, requires_grad=True)
        (g,) = param_grad(torch.tensor(1.0, dtype=DTYPE), [p])
        assert torch.equal(g, torch.zeros(2, dtype=DTYPE))

    def test_non_finite(self) -> None:
        p = torch.tensor([-1.0], dtype=DTYPE, requires_grad=True)
        with pytest.raises(NonFiniteGradient):
            param_grad(torch.sqrt(p).sum(), [p])


class TestInputJets:
    def test_closed_form(self) -> None:
        x = torch.tensor([[0.3, 2.0], [1.1, -0.5]], dtype=DTYPE)
        jets = input_jets(lambda z: torch.sin(z[..., 0]) * z[..., 1] ** 2, x, {0: 2, 1: 2})
        s, c, y = torch.sin(x[:, 0]), torch.cos(x[:, 0]), x[:, 1]
        assert torch.allclose(jets[0].d1, c * y ** 2)
        assert torch.allclose(jets[0].d2, -s * y ** 2)
        assert torch.allclose(jets[1].d1, 2 * s * y)
        assert torch.allclose(jets[1].d2, 2 * s)

    def test_first_order_leaves_d2_zero(self) -> None:
        x = torch.linspace(0, 1, 5, dtype=DTYPE)[:, None]
        jet = input_jets(lambda z: z[..., 0] ** 3, x, {0: 1})[0]
        assert torch.allclose(jet.d1, 3 * x[:, 0] ** 2)
        assert torch.equal(jet.d2, torch.zeros(5, dtype=DTYPE))

    def test_mlp_jet_matches_finite_difference(self) -> None:
        mlp = _mlp([1, 16, 16, 1])
        x = torch.linspace(0.1, 0.9, 7, dtype=DTYPE)[:, None]
        jet = mlp_input_jet(mlp, x, 0)
        h = 1e-4
        f = lambda z: mlp_eval(mlp, z.numpy())[:, 0]  # noqa: E731
        fd1 = (f(x + h) - f(x - h)) / (2 * h)
        fd2 = (f(x + h) - 2 * f(x) + f(x - h)) / h ** 2
        assert np.allclose(jet.d1.detach().numpy(), fd1, atol=1e-6)
        assert np.allclose(jet.d2.detach().numpy(), fd2, atol=1e-4)

    def test_jets_stay_on_graph(self) -> None:
        mlp = _mlp([1, 8, 1])
        x = torch.linspace(0, 1, 4, dtype=DTYPE)[:, None]
        jet = mlp_input_jet(mlp, x, 0)
        grads = param_grad((jet.d2 ** 2).sum(), list(mlp.parameters()))
        assert any(float(g.abs().sum()) > 0 for g in grads)

    def test_relu_second_order_rejected(self) -> None:
        mlp = _mlp([1, 4, 1], ActivationKind.RELU)
        with pytest.raises(UnsupportedActivationOrder, match="relu"):
            mlp_input_jet(mlp, torch.zeros(3, 1, dtype=DTYPE), 0, order=2)
        assert mlp_input_jet(mlp, torch.zeros(3, 1, dtype=DTYPE), 0, order=1).d1.shape == (3,)

    def test_bad_order(self) -> None:
        with pytest.raises(ValueError, match="order"):
            input_jets(lambda z: z[..., 0], torch.zeros(2, 1, dtype=DTYPE), {0: 3})

    def test_bad_coordinate(self) -> None:
        with pytest.raises(DimensionMismatch):
            input_jets(lambda z: z[..., 0], torch.zeros(2, 1, dtype=DTYPE), {1: 1})


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------

class TestAdam:
    def test_non_positive_lr(self) -> None:
        with pytest.raises(ValueError, match="lr"):
            make_adam([torch.zeros(1, requires_grad=True)], 0.0)

    def test_first_step_moves_by_lr(self) -> None:
        p = torch.nn.Parameter(torch.zeros(3, dtype=DTYPE))
        opt = make_adam([p], 0.01)
        adam_step(opt, [p], [torch.tensor([2.0, -0.5, 10.0], dtype=DTYPE)])
        assert torch.allclose(p.detach(), torch.tensor([-0.01, 0.01, -0.01], dtype=DTYPE),
                              atol=1e-8)


class TestLbfgs:
    def test_quadratic(self) -> None:
        a = torch.as_tensor(_spd(4, seed=1), dtype=DTYPE)
        b = torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=DTYPE)

        def fun(x: torch.Tensor) -> tuple[float, torch.Tensor]:
            return float(0.5 * x @ a @ x - b @ x), a @ x - b

        result = lbfgs_minimize(fun, torch.zeros(4, dtype=DTYPE), max_iter=200, gtol=1e-7)
        assert result.converged
        assert torch.allclose(result.x, torch.linalg.solve(a, b), atol=1e-7)
        assert result.fallbacks == []

    def test_fits_parameters_in_place(self) -> None:
        mlp = _mlp([1, 1], ActivationKind.IDENTITY)
        x = torch.linspace(-1, 1, 20, dtype=DTYPE)[:, None]
        y = 2.0 * x + 1.0
        result = lbfgs_parameters(list(mlp.parameters()),
                                  lambda: ((mlp(x) - y) ** 2).mean(), max_iter=100)
        assert result.loss < 1e-14
        assert float(mlp.linears[0].weight) == pytest.approx(2.0, abs=1e-6)
        assert float(mlp.linears[0].bias) == pytest.approx(1.0, abs=1e-6)


# ---------------------------------------------------------------------------
# Reference values
# ---------------------------------------------------------------------------

class TestReferenceValues:
    def test_diagonal_cholesky(self) -> None:
        chol, _ = cholesky_psd(np.diag([4.0, 9.0]))
        assert np.allclose(chol, np.diag([2.0, 3.0]))

    def test_diagonal_sqrtm(self) -> None:
        assert np.allclose(sqrtm_psd(np.diag([4.0, 16.0, 25.0])), np.diag([2.0, 4.0, 5.0]))

    def test_affine_layer(self) -> None:
        mlp = _mlp([1, 1], ActivationKind.IDENTITY)
        with torch.no_grad():
            mlp.linears[0].weight.fill_(2.0)
            mlp.linears[0].bias.fill_(1.0)
        assert mlp_eval(mlp, [3.0]).tolist() == [7.0]

    def test_scalar_chain_rule(self) -> None:
        mlp = _mlp([1, 1], ActivationKind.IDENTITY)
        with torch.no_grad():
            mlp.linears[0].weight.fill_(3.0)
        grad_w, _ = mlp_param_grad(mlp, [1.0], lambda y: (y ** 2).sum())
        assert float(grad_w) == pytest.approx(18.0)

    def test_gelu_gradient_matches_finite_difference(self) -> None:
        mlp = _mlp([1, 10, 10, 1], ActivationKind.GELU)
        x = np.linspace(0, 1, 10)[:, None]
        y = np.sin(3 * x)
        loss = lambda out: ((out - torch.as_tensor(y)) ** 2).mean()  # noqa: E731
        grads = mlp_param_grad(mlp, x, loss)
        weight = mlp.linears[1].weight
        h = 1e-5
        for i, j in [(0, 0), (3, 7), (9, 2)]:
            with torch.no_grad():
                weight[i, j] += h
                up = float(loss(mlp(torch.as_tensor(x))))
                weight[i, j] -= 2 * h
                down = float(loss(mlp(torch.as_tensor(x))))
                weight[i, j] += h
            fd = (up - down) / (2 * h)
            g = float(grads[2][i, j])
            assert abs(fd - g) <= 1e-6 * max(abs(g), 1e-3)

    def test_tanh_jet_at_zero(self) -> None:
        jet = input_jets(lambda z: torch.tanh(z[..., 0]), torch.zeros(1, 1, dtype=DTYPE), {0: 2})[0]
        assert float(jet.d1) == pytest.approx(1.0)
        assert float(jet.d2) == pytest.approx(0.0)

    def test_adam_known_minimiser(self) -> None:
        w = torch.nn.Parameter(torch.zeros(1, dtype=DTYPE))
        opt = make_adam([w], 0.1)
        for _ in range(2000):
            (g,) = param_grad(((w - 5.0) ** 2).sum(), [w])
            adam_step(opt, [w], [g])
        assert abs(float(w) - 5.0) < 1e-3

    def test_adam_zero_gradient_keeps_parameters(self) -> None:
        w = torch.nn.Parameter(torch.tensor([1.5, -2.0], dtype=DTYPE))
        opt = make_adam([w], 0.1)
        adam_step(opt, [w], [torch.zeros(2, dtype=DTYPE)])
        assert torch.equal(w.detach(), torch.tensor([1.5, -2.0], dtype=DTYPE))

    def test_lbfgs_ten_dim_quadratic(self) -> None:
        a = torch.as_tensor(_spd(10, seed=7), dtype=DTYPE)

        def fun(x: torch.Tensor) -> tuple[float, torch.Tensor]:
            return float(0.5 * x @ a @ x), a @ x

        result = lbfgs_minimize(fun, torch.ones(10, dtype=DTYPE))
        assert result.converged
        assert result.grad_norm < 1e-9
        assert result.iterations < 50
