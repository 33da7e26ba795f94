"""Discrete couplings between per-condition batches.

Pairwise exact OT (assignment), k-means, entropic multi-marginal Sinkhorn
over a cost tensor, argmax extraction of a deterministic coupling,
generalized-geodesic coupling through a common base sample, and the
cluster-factorized multi-marginal sampler that combines them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .errors import InvalidInputError
from .hull import uniform_hull_points
from .interpolant import KernelRegression, KernelSpec

logger = logging.getLogger(__name__)

DEFAULT_EPSILON_SCALE = 0.05
DEFAULT_MAX_SIDE = 12


@dataclass
class CouplingPlan:
    """Discrete joint distribution over index tuples into ``arity`` batches.

    ``support`` is ``(T, arity)`` integer; ``weights`` is ``(T,)`` and sums
    to one.  ``sizes`` records the batch sizes (uniform marginals
    ``1 / sizes[j]``).
    """

    arity: int
    support: np.ndarray
    weights: np.ndarray
    sizes: tuple
    deterministic: bool = False
    converged: bool = True
    residual: float = 0.0
    residual_history: list = field(default_factory=list)

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=int).reshape(-1, self.arity)
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.weights) != len(self.support):
            raise InvalidInputError("support and weights must have equal length")
        if np.any(self.weights < 0):
            raise InvalidInputError("plan weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise InvalidInputError(f"plan weights sum to {self.weights.sum()!r}, not 1")
        if self.deterministic:
            first = self.support[:, 0]
            if len(first) != self.sizes[0] or len(np.unique(first)) != len(first):
                raise InvalidInputError("deterministic plan must use each first-marginal index once")

    def marginal(self, j):
        return np.bincount(self.support[:, j], weights=self.weights, minlength=self.sizes[j])

    def marginal_residual(self):
        """Max-norm distance of each projection from its uniform marginal."""
        return max(np.max(np.abs(self.marginal(j) - 1.0 / self.sizes[j])) for j in range(self.arity))

    def cost(self, cost_tensor):
        return float(np.sum(self.weights * np.asarray(cost_tensor)[tuple(self.support.T)]))

    def to_json(self):
        return json.dumps(
            {
                "arity": self.arity,
                "sizes": list(self.sizes),
                "deterministic": self.deterministic,
                "support": self.support.tolist(),
                "weights": self.weights.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(
            arity=data["arity"],
            support=np.array(data["support"], dtype=int),
            weights=np.array(data["weights"], dtype=float),
            sizes=tuple(data["sizes"]),
            deterministic=data["deterministic"],
        )


def squared_distances(A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    sq = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T
    return np.maximum(sq, 0.0)


def exact_ot_plan(A, B):
    """Optimal permutation coupling of two equal-size batches under squared distance."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or B.ndim != 2 or A.shape != B.shape or len(A) < 1:
        raise InvalidInputError(f"exact_ot_plan needs equal non-empty batches, got {A.shape} and {B.shape}")
    rows, cols = linear_sum_assignment(squared_distances(A, B))
    n = len(A)
    return CouplingPlan(
        arity=2,
        support=np.stack([rows, cols], axis=1),
        weights=np.full(n, 1.0 / n),
        sizes=(n, n),
        deterministic=True,
    )


def plan_permutation(plan):
    """For a deterministic two-marginal plan, ``perm[i]`` is the partner of ``i``."""
    perm = np.empty(plan.sizes[0], dtype=int)
    perm[plan.support[:, 0]] = plan.support[:, 1]
    return perm


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass
class ClusterSet:
    assignments: np.ndarray
    centers: np.ndarray
    objective_history: list = field(default_factory=list)

    @property
    def K(self):
        return len(self.centers)

    def members(self, k):
        return np.flatnonzero(self.assignments == k)


def _objective(points, centers, assign):
    return float(np.sum((points - centers[assign]) ** 2))


def _fill_empty(points, centers, assign, K):
    """Give each empty cluster the worst-fit point of a multi-member cluster."""
    assign = assign.copy()
    counts = np.bincount(assign, minlength=K)
    for k in np.flatnonzero(counts == 0):
        resid = np.sum((points - centers[assign]) ** 2, axis=1)
        resid[counts[assign] <= 1] = -1.0
        far = int(np.argmax(resid))
        counts[assign[far]] -= 1
        assign[far] = k
        counts[k] = 1
    return assign


def kmeans(points, K, iters=50, seed=0):
    """Lloyd's algorithm from k-means++ seeding.

    Empty clusters are repaired by moving in the point farthest from its
    current center (taken from a cluster with more than one member).
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if not 1 <= K <= n:
        raise InvalidInputError(f"kmeans needs 1 <= K <= n, got K={K}, n={n}")
    rng = np.random.default_rng(seed)

    chosen = [int(rng.integers(n))]
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    centers = points[chosen].copy()

    assign = np.argmin(squared_distances(points, centers), axis=1)
    history = []
    for _ in range(max(iters, 1)):
        assign = _fill_empty(points, centers, assign, K)
        for k in range(K):
            centers[k] = points[assign == k].mean(axis=0)
        history.append(_objective(points, centers, assign))
        new_assign = np.argmin(squared_distances(points, centers), axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    # Duplicate points can leave the last reassignment with an empty cluster.
    assign = _fill_empty(points, centers, assign, K)
    for k in range(K):
        centers[k] = points[assign == k].mean(axis=0)
    return ClusterSet(assignments=assign, centers=centers, objective_history=history)


# ---------------------------------------------------------------------------
# Multi-marginal Sinkhorn
# ---------------------------------------------------------------------------


def default_epsilon(cost, scale=DEFAULT_EPSILON_SCALE):
    med = float(np.median(cost))
    if med <= 0:
        med = float(np.mean(np.abs(cost)))
    return scale * med if med > 0 else scale


def _log_marginals(logp):
    m = logp.ndim
    return [logsumexp(logp, tuple(a for a in range(m) if a != i)) for i in range(m)]


def mmot_sinkhorn(cost, epsilon=None, max_iters=2000, tol=1e-6, max_side=DEFAULT_MAX_SIDE):
    """Entropic multi-marginal OT with uniform marginals, in the log domain.

    Potentials ``f_i`` are updated cyclically so that the plan
    ``exp((sum_i f_i - C) / eps)`` matches each uniform marginal.  The
    marginal residual (max over marginals of the max-norm error) is recorded
    after every sweep; iteration stops once it is at most ``tol``.  A plan
    that fails to reach ``tol`` is returned with ``converged=False``.
    """
    cost = np.asarray(cost, dtype=float)
    if not np.all(np.isfinite(cost)):
        raise InvalidInputError("cost tensor must be finite")
    if max(cost.shape) > max_side:
        raise InvalidInputError(f"cost tensor side {max(cost.shape)} exceeds cap {max_side}")
    eps = default_epsilon(cost) if epsilon is None else float(epsilon)
    if not eps > 0:
        raise InvalidInputError("epsilon must be positive")
    m = cost.ndim
    shape = cost.shape
    log_a = [np.full(s, -np.log(s)) for s in shape]
    pots = [np.zeros(s) for s in shape]

    def log_plan():
        total = -cost / eps
        for i, f in enumerate(pots):
            total = total + (f / eps).reshape([-1 if a == i else 1 for a in range(m)])
        return total

    history = []
    residual = np.inf
    for _ in range(max_iters):
        for i in range(m):
            logp = log_plan()
            lm = logsumexp(logp, tuple(a for a in range(m) if a != i))
            pots[i] = pots[i] + eps * (log_a[i] - lm)
        logp = log_plan()
        residual = max(np.max(np.abs(np.exp(lm) - np.exp(la))) for lm, la in zip(_log_marginals(logp), log_a))
        history.append(float(residual))
        if residual <= tol:
            break
    plan = np.exp(log_plan())
    plan /= plan.sum()
    support = np.stack(np.unravel_index(np.arange(plan.size), shape), axis=1)
    converged = residual <= tol
    if not converged:
        logger.debug("mmot_sinkhorn stopped at residual %.3g after %d sweeps", residual, max_iters)
    return CouplingPlan(
        arity=m,
        support=support,
        weights=plan.reshape(-1),
        sizes=shape,
        deterministic=False,
        converged=bool(converged),
        residual=float(residual),
        residual_history=history,
    )


def extract_deterministic(plan):
    """Keep, for each first-marginal index, its highest-weight tuple.

    Ties go to the lexicographically smallest tuple.  Only the first
    marginal is guaranteed uniform afterwards.
    """
    if plan.deterministic:
        return plan
    order = np.lexsort(plan.support.T[::-1])
    support = plan.support[order]
    weights = plan.weights[order]
    chosen = []
    for i in range(plan.sizes[0]):
        rows = np.flatnonzero(support[:, 0] == i)
        if len(rows) == 0:
            raise InvalidInputError(f"first-marginal index {i} has no support")
        # np.argmax returns the first maximum, i.e. the lexicographically smallest tuple.
        chosen.append(rows[np.argmax(weights[rows])])
    n = plan.sizes[0]
    return CouplingPlan(
        arity=plan.arity,
        support=support[chosen],
        weights=np.full(n, 1.0 / n),
        sizes=plan.sizes,
        deterministic=True,
        converged=plan.converged,
        residual=plan.residual,
    )


# ---------------------------------------------------------------------------
# Generalized-geodesic coupling
# ---------------------------------------------------------------------------


def ggc_couple(batches, base=None, sigma=1.0, rng=None):
    """Couple ``m`` equal-size batches through optimal maps from a common base.

    Tuple ``j`` is ``(T_1(z_j), ..., T_m(z_j))`` where ``T_i`` is the exact OT
    permutation from ``base`` to batch ``i``.  Without ``base``, one is drawn
    from ``N(mean of all batches, sigma^2 I)``.
    """
    batches = [np.asarray(b, dtype=float) for b in batches]
    n = len(batches[0])
    if any(b.shape != batches[0].shape for b in batches):
        raise InvalidInputError("ggc_couple needs equal-size batches")
    if base is None:
        rng = np.random.default_rng() if rng is None else rng
        mean = np.concatenate(batches).mean(axis=0)
        base = mean + sigma * rng.standard_normal(batches[0].shape)
    base = np.asarray(base, dtype=float)
    if base.shape != batches[0].shape:
        raise InvalidInputError("base must match batch shape")
    support = np.stack([plan_permutation(exact_ot_plan(base, b)) for b in batches], axis=1)
    return CouplingPlan(
        arity=len(batches),
        support=support,
        weights=np.full(n, 1.0 / n),
        sizes=tuple(len(b) for b in batches),
        deterministic=True,
    )


# ---------------------------------------------------------------------------
# Tuple costs
# ---------------------------------------------------------------------------


def variance_tuple_cost(points):
    """Sum of squared distances to the tuple mean; ``points`` is ``(..., m, d)``.

    For ``m = 2`` this is half the squared distance between the two points.
    """
    points = np.asarray(points, dtype=float)
    centered = points - points.mean(axis=-2, keepdims=True)
    return np.sum(centered**2, axis=(-2, -1))


def dirichlet_cost_matrix(conditions, kernel, quad_nodes=256, seed=0):
    """Quadratic form ``M`` with ``mean_c |grad psi_hat(c | X)|_F^2 = tr(X^T M X)``.

    The mean runs over ``quad_nodes`` uniform draws from the hull of
    ``conditions``.
    """
    reg = KernelRegression(np.asarray(conditions, dtype=float), kernel)
    nodes = uniform_hull_points(reg.anchors, quad_nodes, np.random.default_rng(seed))
    dw = reg.weight_jacobian(nodes)  # (Q, m, k)
    return np.einsum("qil,qjl->ij", dw, dw) / len(nodes)


def mmot_dirichlet_cost(points, conditions, kernel=None, quad_nodes=256, seed=0):
    """Monte Carlo hull-average of ``|grad_c psi_hat(c | points)|_F^2``."""
    M = dirichlet_cost_matrix(conditions, kernel or KernelSpec(), quad_nodes, seed)
    X = np.asarray(points, dtype=float)
    return float(np.einsum("id,ij,jd->", X, M, X))


class DirichletTupleCost:
    """Vectorized Dirichlet tuple cost for a fixed condition set."""

    def __init__(self, conditions, kernel=None, quad_nodes=256, seed=0):
        self.matrix = dirichlet_cost_matrix(conditions, kernel or KernelSpec(), quad_nodes, seed)

    def __call__(self, points):
        X = np.asarray(points, dtype=float)
        return np.einsum("...id,ij,...jd->...", X, self.matrix, X)


# ---------------------------------------------------------------------------
# Cluster-factorized MMOT sampling
# ---------------------------------------------------------------------------


class ClusterMMOTSampler:
    """Draws index tuples from the cluster-level MMOT coupling.

    Each draw picks a first-batch cluster uniformly, follows the
    deterministic center coupling to one cluster per batch, and takes a
    tuple from a generalized-geodesic coupling of those sub-batches
    (truncated at random to their common minimum size).
    """

    def __init__(self, batches, clusterings, center_plan, sigma=1.0):
        self.batches = batches
        self.clusterings = clusterings
        self.center_plan = center_plan
        self.sigma = sigma
        order = np.argsort(center_plan.support[:, 0])
        self.center_tuples = center_plan.support[order]

    @property
    def K(self):
        return len(self.center_tuples)

    def group_coupling(self, k, rng):
        """Global index tuples ``(n_min, m)`` for first-batch cluster ``k``."""
        members = [cl.members(ci) for cl, ci in zip(self.clusterings, self.center_tuples[k])]
        size = min(len(mem) for mem in members)
        members = [mem if len(mem) == size else rng.choice(mem, size=size, replace=False) for mem in members]
        subs = [b[mem] for b, mem in zip(self.batches, members)]
        plan = ggc_couple(subs, sigma=self.sigma, rng=rng)
        return np.stack([mem[plan.support[:, i]] for i, mem in enumerate(members)], axis=1)

    def sample(self, n, rng):
        groups = rng.integers(self.K, size=n)
        out = np.empty((n, len(self.batches)), dtype=int)
        for k in np.unique(groups):
            where = np.flatnonzero(groups == k)
            tuples = self.group_coupling(k, rng)
            pick = rng.choice(len(tuples), size=len(where), replace=len(where) > len(tuples))
            out[where] = tuples[pick]
        return out


def cluster_mmot_plan(
    batches,
    K,
    tuple_cost=variance_tuple_cost,
    epsilon=None,
    seed=0,
    sigma=1.0,
    epsilon_scale=DEFAULT_EPSILON_SCALE,
    kmeans_iters=50,
    max_iters=2000,
    tol=1e-6,
    max_side=DEFAULT_MAX_SIDE,
):
    """Cluster each batch, solve MMOT between cluster centers, return a sampler.

    ``tuple_cost`` maps an ``(..., m, d)`` array of point tuples to costs.
    The returned sampler's ``center_plan`` carries the Sinkhorn convergence
    flag and residual.
    """
    batches = [np.asarray(b, dtype=float) for b in batches]
    n = len(batches[0])
    if any(len(b) != n for b in batches):
        raise InvalidInputError("cluster_mmot_plan needs equal-size batches")
    if not 1 <= K <= n:
        raise InvalidInputError(f"K must lie in [1, {n}]")
    clusterings = [kmeans(b, K, iters=kmeans_iters, seed=seed) for b in batches]
    m = len(batches)
    grids = np.meshgrid(*[np.arange(K)] * m, indexing="ij")
    idx = np.stack([g.reshape(-1) for g in grids], axis=1)
    centers = np.stack([clusterings[i].centers[idx[:, i]] for i in range(m)], axis=1)
    cost = np.asarray(tuple_cost(centers), dtype=float).reshape((K,) * m)
    if epsilon is None:
        epsilon = default_epsilon(cost, epsilon_scale)
    plan = mmot_sinkhorn(cost, epsilon=epsilon, max_iters=max_iters, tol=tol, max_side=max_side)
    det = extract_deterministic(plan)
    return ClusterMMOTSampler(batches, clusterings, det, sigma=sigma)
