import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from efm.dataset import SourceRegressor
from efm.errors import IntegrationError, InvalidInputError
from efm.inference import (
    SpaceTimePath,
    generate,
    induced_velocity,
    ode_solve,
    path_generation,
    path_transfer,
    transfer,
)
from efm.model import init_model


def constant_field(A):
    """Matrix field equal to ``A`` (d, 1+k) everywhere."""
    A = np.asarray(A, dtype=float)

    def u(t, c, x):
        return np.broadcast_to(A, (len(x), *A.shape)).copy()

    return u


def zero_condition_columns(model):
    def u(t, c, x):
        out = model(t, c, x).copy()
        out[:, :, 1:] = 0.0
        return out

    return u


class TestPaths:
    @pytest.mark.parametrize("path", [path_generation([0.2, 0.7]), path_transfer([0.0, 1.0], [0.5, 0.25])])
    def test_velocity_matches_fd(self, path):
        h = 1e-6
        for s in (0.1, 0.5, 0.9):
            fd = (path.point(s + h) - path.point(s - h)) / (2 * h)
            np.testing.assert_allclose(path.velocity(s), fd, atol=1e-8)

    def test_endpoints(self):
        g = path_generation([0.2, 0.7])
        np.testing.assert_array_equal(g.point(0.0), [0.0, 0.2, 0.7])
        np.testing.assert_array_equal(g.point(1.0), [1.0, 0.2, 0.7])
        tr = path_transfer([0.0, 1.0], [0.5, 0.25])
        np.testing.assert_array_equal(tr.point(0.0), [1.0, 0.0, 1.0])
        np.testing.assert_array_equal(tr.point(1.0), [1.0, 0.5, 0.25])

    def test_transfer_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            path_transfer([0.0], [0.0, 1.0])


class TestInducedVelocity:
    def test_zero_path_velocity(self, small_model, rng):
        path = SpaceTimePath(point=lambda s: np.array([0.5, 0.1, 0.2]), velocity=lambda s: np.zeros(3))
        np.testing.assert_array_equal(induced_velocity(small_model, path, 0.3, rng.standard_normal((4, 2))), 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0, 1), st.integers(0, 2**31 - 1))
    def test_contractions(self, s, seed):
        rng = np.random.default_rng(seed)
        model = init_model(2, 2, (8,), seed=seed % 100)
        x = rng.standard_normal((5, 2))
        c_star, c1, c2 = rng.uniform(size=(3, 2))
        u = model(s, c_star[None], x)
        assert np.array_equal(induced_velocity(model, path_generation(c_star), s, x), u[:, :, 0])
        cs = (1 - s) * c1 + s * c2
        u = model(1.0, cs[None], x)
        np.testing.assert_allclose(
            induced_velocity(model, path_transfer(c1, c2), s, x), u[:, :, 1:] @ (c2 - c1), rtol=1e-14, atol=1e-15
        )

    def test_single_point(self, small_model, rng):
        x = rng.standard_normal(2)
        path = path_generation([0.1, 0.1])
        np.testing.assert_array_equal(induced_velocity(small_model, path, 0.2, x), induced_velocity(small_model, path, 0.2, x[None])[0])


class TestODESolve:
    @pytest.mark.parametrize("method", ["euler", "rk4"])
    def test_zero_model(self, method, rng):
        x0 = rng.standard_normal((4, 2))
        traj = ode_solve(x0, path_generation([0.0, 0.0]), constant_field(np.zeros((2, 3))), steps=7, method=method)
        assert traj.states.shape == (8, 4, 2)
        assert np.all(traj.states == x0)

    @pytest.mark.parametrize("method", ["euler", "rk4"])
    def test_constant_velocity(self, method, rng):
        a = np.array([0.5, -2.0])
        A = np.zeros((2, 3))
        A[:, 0] = a
        x0 = rng.standard_normal((4, 2))
        traj = ode_solve(x0, path_generation([0.3, 0.3]), constant_field(A), steps=16, method=method)
        np.testing.assert_allclose(traj.terminal, x0 + a, rtol=0, atol=1e-14)

    def test_exponential_rk4(self):
        def field(t, c, x):
            return x[:, :, None]

        x0 = np.array([[0.7]])
        path = path_generation(np.zeros(0))
        errs = []
        for steps in (25, 50, 100):
            errs.append(abs(ode_solve(x0, path, field, steps=steps).terminal[0, 0] - np.e * 0.7))
        assert errs[-1] <= np.e * 0.7 * 1e-6
        for a, b in zip(errs, errs[1:]):
            assert 8.0 <= a / b <= 32.0

    def test_blowup_reports_step(self):
        def field(t, c, x):
            with np.errstate(over="ignore", invalid="ignore"):
                return (x**3)[:, :, None]

        with pytest.raises(IntegrationError) as err:
            ode_solve(np.array([[50.0]]), path_generation(np.zeros(0)), field, steps=20, method="euler")
        assert err.value.step is not None and 1 <= err.value.step <= 20

    def test_bad_arguments(self, small_model):
        path = path_generation([0.0, 0.0])
        with pytest.raises(InvalidInputError):
            ode_solve(np.zeros((2, 2)), path, small_model, steps=0)
        with pytest.raises(InvalidInputError):
            ode_solve(np.zeros((2, 2)), path, small_model, method="midpoint")

    def test_trajectory_csv(self, small_model, tmp_path, rng):
        traj = ode_solve(rng.standard_normal((3, 2)), path_generation([0.0, 0.0]), small_model, steps=4)
        traj.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "s,particle,x1,x2"
        assert len(lines) == 1 + 5 * 3

    def test_gaussian_family_pushforward(self):
        # p_{t,c} = N(m0 + A (t, c), sigma^2 I) solves the generalized
        # continuity equation with the constant field u = A, for any path.
        rng = np.random.default_rng(8)
        A = rng.standard_normal((2, 3))
        m0, sigma, n = np.array([0.5, -1.0]), 0.3, 10_000
        c0, c1 = np.array([0.1, 0.9]), np.array([0.8, 0.2])
        curved = SpaceTimePath(
            point=lambda s: np.concatenate([[s**2], c0 + (c1 - c0) * np.sin(np.pi * s / 2)]),
            velocity=lambda s: np.concatenate([[2 * s], (c1 - c0) * np.pi / 2 * np.cos(np.pi * s / 2)]),
        )
        for path in (curved, path_generation(c0), path_transfer(c0, c1)):
            xi0, xi1 = path.point(0.0), path.point(1.0)
            x0 = m0 + A @ xi0 + sigma * rng.standard_normal((n, 2))
            out = ode_solve(x0, path, constant_field(A), steps=200).terminal
            se = out.std(axis=0, ddof=1) / np.sqrt(n)
            assert np.all(np.abs(out.mean(axis=0) - (m0 + A @ xi1)) <= 3 * se)


class TestGenerateTransfer:
    def source(self):
        return SourceRegressor(weight=np.eye(2), bias=[1.0, -1.0], noise_sigma=0.5)

    def test_empty(self, small_model):
        out = generate(small_model, self.source(), [0.5, 0.5], 0, steps=3, rng=np.random.default_rng(0))
        assert out.shape == (0, 2)

    def test_zero_model_returns_source(self):
        R = self.source()
        zero = constant_field(np.zeros((2, 3)))
        out = generate(zero, R, [0.2, 0.4], 50, steps=5, rng=np.random.default_rng(1))
        z = 0.5 * np.random.default_rng(1).standard_normal((50, 2))
        np.testing.assert_array_equal(out, R(np.array([0.2, 0.4])) + z)

    def test_seeded(self, small_model):
        a = generate(small_model, self.source(), [0.2, 0.4], 20, steps=5, rng=np.random.default_rng(3))
        b = generate(small_model, self.source(), [0.2, 0.4], 20, steps=5, rng=np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_same_condition_transfer_is_identity(self, small_model, rng):
        x = rng.standard_normal((6, 2))
        assert np.array_equal(transfer(small_model, x, [0.3, 0.3], [0.3, 0.3], steps=5), x)

    def test_zero_condition_columns_is_identity(self, small_model, rng):
        x = rng.standard_normal((6, 2))
        assert np.array_equal(transfer(zero_condition_columns(small_model), x, [0, 0], [1, 1], steps=5), x)

    def test_round_trip_error_shrinks(self, rng):
        model = init_model(2, 2, (16, 16), seed=4)
        model = model.with_params([3 * p for p in model.params])
        x = rng.standard_normal((10, 2))
        errs = []
        for steps in (4, 8, 16, 32):
            y = transfer(model, x, [0, 0], [1, 1], steps=steps)
            back = transfer(model, y, [1, 1], [0, 0], steps=steps)
            errs.append(np.max(np.abs(back - x)))
        assert all(a > b for a, b in zip(errs, errs[1:]))
        assert errs[-1] < 1e-2 * errs[0]
