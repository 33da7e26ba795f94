"""Evaluation: empirical Wasserstein distances, Dirichlet energy, cluster preservation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial import Delaunay, QhullError
from scipy.spatial.distance import cdist

from .errors import InvalidInputError
from .hull import hull_weights

DEFAULT_EVAL_SIZE = 500

REPORT_SCHEMA = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "required": ["condition", "W1", "n", "seed"],
        "properties": {
            "condition": {"type": "array", "items": {"type": "number"}},
            "W1": {"type": "number", "minimum": 0},
            "n": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer"},
            "group": {"enum": ["corner", "interpolation", "extrapolation"]},
        },
    },
}


def wasserstein(A, B, p=1):
    """Exact ``W_p`` between uniform empirical measures on the rows of ``A`` and ``B``.

    Equal sizes use an assignment solver; unequal sizes solve the transport LP.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if len(A) < 1 or len(B) < 1:
        raise InvalidInputError("both point sets must be non-empty")
    if A.shape[1] != B.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    cost = cdist(A, B) ** p
    n, m = cost.shape
    if n == m:
        r, c = linear_sum_assignment(cost)
        total = cost[r, c].mean()
    else:
        eq = np.zeros((n + m, n * m))
        for i in range(n):
            eq[i, i * m : (i + 1) * m] = 1.0
        for j in range(m):
            eq[n + j, j::m] = 1.0
        rhs = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
        res = linprog(cost.reshape(-1), A_eq=eq, b_eq=rhs, bounds=(0, None), method="highs")
        if not res.success:
            raise RuntimeError(f"transport LP failed: {res.message}")
        total = res.fun
    return float(max(total, 0.0) ** (1.0 / p))


def wasserstein1(A, B):
    return wasserstein(A, B, p=1)


def subsample(x, n, rng):
    if len(x) <= n:
        return x
    return x[rng.choice(len(x), size=n, replace=False)]


@dataclass
class DirichletEstimate:
    value: float
    stderr: float
    n: int


def dirichlet_estimate(model, sampler, n_mc, rng):
    """Half the Monte Carlo mean of ``|u(t, c, x)|_F^2`` over ``sampler`` draws.

    ``sampler(n, rng)`` returns ``(t, c, x)`` arrays of shapes ``(n,)``,
    ``(n, k)``, ``(n, d)``.
    """
    t, c, x = sampler(n_mc, rng)
    u = model(t, c, x)
    vals = 0.5 * np.sum(u.reshape(len(u), -1) ** 2, axis=1)
    se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return DirichletEstimate(float(vals.mean()), se, len(vals))


def pushforward_sampler(model, source, conditions, steps=50):
    """Sampler for ``(t, c) ~ U(I x hull(conditions))``, ``x ~ mu_{t,c}``.

    ``x`` is obtained by flowing ``R(c) + z`` along the generation path up to
    time ``t`` with RK4.
    """
    conditions = np.asarray(conditions, dtype=float)

    def sample(n, rng):
        t = rng.uniform(size=n)
        c = hull_weights(conditions, n, rng) @ conditions
        x = source(c) + source.noise_sigma * rng.standard_normal((n, source.bias.shape[0]))
        h = 1.0 / steps

        def f(s, y):
            return t[:, None] * model(t * s, c, y)[:, :, 0]

        for i in range(steps):
            s = i * h
            k1 = f(s, x)
            k2 = f(s + 0.5 * h, x + 0.5 * h * k1)
            k3 = f(s + 0.5 * h, x + 0.5 * h * k2)
            k4 = f(s + h, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        return t, c, x

    return sample


def cluster_preservation(labels, after, centers):
    """Fraction of points whose nearest target center carries their source label.

    ``centers`` maps each label to one center ``(d,)`` or several ``(L, d)``.
    """
    labels = np.asarray(labels, dtype=int)
    after = np.atleast_2d(np.asarray(after, dtype=float))
    if len(labels) != len(after):
        raise InvalidInputError("labels must cover every row")
    missing = sorted(set(labels.tolist()) - set(centers))
    if missing:
        raise InvalidInputError(f"no target center for label(s) {missing}")
    pts, owner = [], []
    for lab, cen in centers.items():
        cen = np.atleast_2d(np.asarray(cen, dtype=float))
        pts.append(cen)
        owner.extend([lab] * len(cen))
    nearest = np.argmin(cdist(after, np.concatenate(pts)), axis=1)
    return float(np.mean(np.asarray(owner)[nearest] == labels))


def condition_group(c, train_conditions, atol=1e-9):
    c = np.asarray(c, dtype=float)
    train = np.asarray(train_conditions, dtype=float)
    if np.any(np.all(np.abs(train - c) <= atol, axis=1)):
        return "corner"
    if train.shape[1] == 1:
        inside = train.min() - atol <= c[0] <= train.max() + atol
        return "interpolation" if inside else "extrapolation"
    try:
        inside = Delaunay(train).find_simplex(c[None, :], tol=atol)[0] >= 0
    except (QhullError, ValueError):
        inside = False
    return "interpolation" if inside else "extrapolation"


def evaluate_conditions(sample_fn, gt, train_conditions, n=DEFAULT_EVAL_SIZE, seed=0):
    """Per-condition W1 between ``sample_fn(c, n, rng)`` and held-out ground truth.

    ``gt`` is a :class:`~efm.dataset.ConditionedDataset`; each of its
    conditions is evaluated against up to ``n`` of its rows.
    """
    if gt.num_conditions == 0:
        raise InvalidInputError("no conditions to evaluate")
    report = []
    for i, c in enumerate(gt.conditions):
        rng = np.random.default_rng([seed, i])
        ref = subsample(gt.samples[i], n, rng)
        pred = np.asarray(sample_fn(c, len(ref), rng), dtype=float)
        if pred.ndim != 2 or pred.shape[1] != gt.dim_data:
            raise InvalidInputError(f"sampler returned shape {pred.shape}, expected (n, {gt.dim_data})")
        report.append(
            {
                "condition": [float(v) for v in c],
                "W1": wasserstein1(pred, ref),
                "n": int(len(ref)),
                "seed": int(seed),
                "group": condition_group(c, train_conditions),
            }
        )
    return report


def summarize_report(report):
    out = {}
    for entry in report:
        out.setdefault(entry["group"], []).append(entry["W1"])
    return {g: {"mean_W1": float(np.mean(v)), "count": len(v)} for g, v in sorted(out.items())}
