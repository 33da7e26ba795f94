"""Paths in time x condition space, induced velocities, and fixed-step ODE solves.

A matrix field ``u`` and a path ``gamma(s) = (t(s), c(s))`` induce the
ordinary velocity field ``v(s, x) = u(gamma(s), x) @ gamma'(s)``.
Generation follows ``(s, c*)``; style transfer follows ``(1, (1-s) c1 + s c2)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import IntegrationError, InvalidInputError

METHODS = ("euler", "rk4")


@dataclass(frozen=True)
class SpaceTimePath:
    """``point(s)`` returns ``(1 + k,)`` = ``(t, c)``; ``velocity(s)`` its derivative."""

    point: Callable[[float], np.ndarray]
    velocity: Callable[[float], np.ndarray]
    name: str = "path"


def path_generation(c_star):
    c_star = np.asarray(c_star, dtype=float).reshape(-1)
    direction = np.concatenate([[1.0], np.zeros_like(c_star)])
    return SpaceTimePath(
        point=lambda s: np.concatenate([[s], c_star]),
        velocity=lambda s: direction,
        name="generation",
    )


def path_transfer(c1, c2):
    c1 = np.asarray(c1, dtype=float).reshape(-1)
    c2 = np.asarray(c2, dtype=float).reshape(-1)
    if c1.shape != c2.shape:
        raise InvalidInputError("c1 and c2 must have the same length")
    direction = np.concatenate([[0.0], c2 - c1])
    return SpaceTimePath(
        point=lambda s: np.concatenate([[1.0], (1.0 - s) * c1 + s * c2]),
        velocity=lambda s: direction,
        name="transfer",
    )


def induced_velocity(model, path, s, x):
    """``u(gamma(s), x) @ gamma'(s)``; ``x`` is ``(d,)`` or ``(B, d)``.

    ``model`` is any callable ``(t, c, x) -> (B, d, 1 + k)``, which includes
    :class:`~efm.model.MatrixFieldModel`.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    p = path.point(s)
    u = model(p[0], p[1:][None, :], xb)
    v = u @ path.velocity(s)
    return v[0] if single else v


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (steps + 1, n, d)
    path: SpaceTimePath

    @property
    def terminal(self):
        return self.states[-1]

    def to_csv(self, path):
        n, d = self.states.shape[1:]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["s", "particle"] + [f"x{i + 1}" for i in range(d)])
            for s, state in zip(self.times, self.states):
                for j, row in enumerate(state):
                    writer.writerow([repr(float(s)), j] + [repr(float(v)) for v in row])


def ode_solve(x0_batch, path, model, steps=100, method="rk4", s_end=1.0):
    """Integrate ``x' = induced_velocity`` over ``s in [0, s_end]`` with fixed steps.

    Raises
    ------
    IntegrationError
        If a state becomes non-finite; ``err.step`` is the failing step index.
    """
    if steps < 1:
        raise InvalidInputError("steps must be at least 1")
    if method not in METHODS:
        raise InvalidInputError(f"unknown integrator {method!r}")
    x = np.array(x0_batch, dtype=float)
    if x.ndim != 2:
        raise InvalidInputError("x0_batch must be (n, d)")
    h = s_end / steps
    times = np.linspace(0.0, s_end, steps + 1)
    states = np.empty((steps + 1, *x.shape))
    states[0] = x

    def f(s, y):
        return induced_velocity(model, path, s, y) if len(y) else y

    for i in range(steps):
        s = times[i]
        if method == "euler":
            x = x + h * f(s, x)
        else:
            k1 = f(s, x)
            k2 = f(s + 0.5 * h, x + 0.5 * h * k1)
            k3 = f(s + 0.5 * h, x + 0.5 * h * k2)
            k4 = f(s + h, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at step {i + 1}", step=i + 1)
        states[i + 1] = x
    return Trajectory(times=times, states=states, path=path)


def generate(model, R, c_star, n, steps=100, method="rk4", rng=None, return_trajectory=False):
    """Sample at condition ``c_star``: push ``R(c_star) + z`` along ``(s, c_star)``."""
    rng = np.random.default_rng() if rng is None else rng
    c_star = np.asarray(c_star, dtype=float).reshape(-1)
    d = R.bias.shape[0]
    z = R.noise_sigma * rng.standard_normal((n, d))
    x0 = R(c_star) + z
    traj = ode_solve(x0, path_generation(c_star), model, steps, method)
    return (traj.terminal, traj) if return_trajectory else traj.terminal


def transfer(model, x_batch, c1, c2, steps=100, method="rk4", return_trajectory=False):
    """Move samples observed at ``c1`` to ``c2`` along ``(1, (1-s) c1 + s c2)``."""
    traj = ode_solve(np.atleast_2d(np.asarray(x_batch, dtype=float)), path_transfer(c1, c2), model, steps, method)
    return (traj.terminal, traj) if return_trajectory else traj.terminal
