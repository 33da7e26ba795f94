"""Training loops: extended flow matching and the per-condition OT-CFM baseline.

One EFM iteration picks a cluster of nearby conditions, draws a target batch
per condition and a shared-noise source batch, couples the target batches
into tuples, couples the first condition's sources to the tuples by exact
OT, fits the condition interpolant per tuple, probes ``(t, c)`` and regresses
the network onto the Jacobian of the spacetime path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dataset import SourceRegressor, fit_source_regressor
from .errors import IllPosedError, InvalidConfigError, InvalidInputError, TrainingAborted
from .hull import hull_weights
from .interpolant import KernelRegression, KernelSpec, spacetime_psi_batch
from .model import OptimizerState, init_model, load_checkpoint, loss_and_grads, optimizer_step, save_checkpoint
from .transport import (
    DEFAULT_EPSILON_SCALE,
    DirichletTupleCost,
    cluster_mmot_plan,
    exact_ot_plan,
    ggc_couple,
    plan_permutation,
)

logger = logging.getLogger(__name__)

COUPLINGS = ("mmot-cluster", "ggc", "independent")


class CouplingFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 64
    conditions_per_step: int = 4
    time_samples: int = 1
    condition_probes: int = 1
    coupling: str = "mmot-cluster"
    K: int = 4
    epsilon: float | None = None
    epsilon_scale: float = DEFAULT_EPSILON_SCALE
    kernel: KernelSpec = field(default_factory=KernelSpec)
    lr: float = 1e-3
    ema_decay: float = 0.0
    seed: int = 0
    source_sigma: float = 1.0
    hidden: tuple = (128, 128)
    activation: str = "tanh"
    quad_nodes: int = 256
    source_drift: bool = False
    checkpoint_every: int = 0

    def problems(self):
        """Return a list of ``"field: message"`` strings; empty when valid."""
        out = []
        for name in ("batch_size", "conditions_per_step", "time_samples", "condition_probes", "K", "quad_nodes"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                out.append(f"{name}: must be a positive integer, got {v!r}")
        for name in ("iterations", "checkpoint_every"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                out.append(f"{name}: must be a nonnegative integer, got {v!r}")
        if self.coupling not in COUPLINGS:
            out.append(f"coupling: must be one of {COUPLINGS}, got {self.coupling!r}")
        if self.epsilon is not None and not self.epsilon > 0:
            out.append(f"epsilon: must be positive or null, got {self.epsilon!r}")
        if not self.epsilon_scale > 0:
            out.append(f"epsilon_scale: must be positive, got {self.epsilon_scale!r}")
        if not self.lr > 0:
            out.append(f"lr: must be positive, got {self.lr!r}")
        if not 0 <= self.ema_decay < 1:
            out.append(f"ema_decay: must lie in [0, 1), got {self.ema_decay!r}")
        if not self.source_sigma >= 0:
            out.append(f"source_sigma: must be nonnegative, got {self.source_sigma!r}")
        if any(int(h) < 1 for h in self.hidden):
            out.append(f"hidden: widths must be positive, got {list(self.hidden)!r}")
        if self.activation not in ("tanh", "softplus"):
            out.append(f"activation: must be tanh or softplus, got {self.activation!r}")
        return out

    def validate(self, dataset=None):
        probs = self.problems()
        if dataset is not None and self.conditions_per_step > dataset.num_conditions:
            probs.append(
                f"conditions_per_step: {self.conditions_per_step} exceeds the "
                f"{dataset.num_conditions} dataset conditions"
            )
        if probs:
            raise InvalidConfigError("invalid training config:\n  " + "\n  ".join(probs))
        return self

    def to_dict(self):
        out = asdict(self)
        out["kernel"] = self.kernel.to_dict()
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise InvalidConfigError("invalid training config:\n  " + "\n  ".join(f"{u}: unknown field" for u in unknown))
        data = dict(data)
        if "kernel" in data and isinstance(data["kernel"], dict):
            try:
                data["kernel"] = KernelSpec.from_dict(data["kernel"])
            except (InvalidConfigError, TypeError) as exc:
                raise InvalidConfigError(f"invalid training config:\n  kernel: {exc}") from None
        if "hidden" in data:
            data["hidden"] = tuple(data["hidden"])
        cfg = cls(**data)
        return cfg.validate()


# ---------------------------------------------------------------------------
# Sampling helpers
# ---------------------------------------------------------------------------


def select_condition_subset(conditions, N_c, rng):
    """Indices of a uniformly drawn anchor and its ``N_c - 1`` nearest neighbours.

    Ties in distance are broken by index; the anchor is always first.
    """
    conditions = np.asarray(conditions, dtype=float)
    N = len(conditions)
    if not 1 <= N_c <= N:
        raise InvalidInputError(f"N_c must lie in [1, {N}], got {N_c}")
    anchor = int(rng.integers(N))
    dist = np.linalg.norm(conditions - conditions[anchor], axis=1)
    dist[anchor] = -1.0
    order = np.argsort(dist, kind="stable")
    return order[:N_c]


def sample_convhull(C0, rng, n=None):
    """Uniform draw(s) from the convex hull of the rows of ``C0``."""
    C0 = np.asarray(C0, dtype=float)
    w = hull_weights(C0, 1 if n is None else n, rng)
    pts = w @ C0
    return pts[0] if n is None else pts


def _draw_rows(x, n, rng):
    return rng.choice(len(x), size=n, replace=n > len(x))


@dataclass
class SupervisionBatch:
    """One iteration's regression targets plus the data needed to re-derive them."""

    t: np.ndarray  # (B,)
    c: np.ndarray  # (B, k)
    psi: np.ndarray  # (B, d)
    jac: np.ndarray  # (B, d, 1 + k)
    x0: np.ndarray  # (B, d) source point at the probed condition
    targets: np.ndarray  # (B, m, d) target tuple per item
    target_rows: np.ndarray  # (B, m) row indices into dataset.samples[cond_idx[i]]
    cond_idx: np.ndarray  # (m,) dataset condition indices, anchor first


class _Caches:
    def __init__(self):
        self.regressions = {}
        self.costs = {}

    def regression(self, key, anchors, kernel):
        if key not in self.regressions:
            self.regressions[key] = KernelRegression(anchors, kernel)
        return self.regressions[key]

    def cost(self, key, anchors, config):
        if key not in self.costs:
            self.costs[key] = DirichletTupleCost(anchors, config.kernel, config.quad_nodes, seed=config.seed)
        return self.costs[key]


def couple_targets(batches, config, rng, tuple_cost=None):
    """Index tuples ``(n, m)`` into the target batches under ``config.coupling``."""
    m = len(batches)
    n = len(batches[0])
    if m == 1:
        return np.arange(n)[:, None]
    if config.coupling == "independent":
        return np.stack([rng.permutation(n) for _ in range(m)], axis=1)
    if config.coupling == "ggc":
        return ggc_couple(batches, sigma=config.source_sigma, rng=rng).support
    sampler = cluster_mmot_plan(
        batches,
        min(config.K, n),
        tuple_cost=tuple_cost,
        epsilon=config.epsilon,
        epsilon_scale=config.epsilon_scale,
        seed=int(rng.integers(2**31)),
        sigma=config.source_sigma,
    )
    if not sampler.center_plan.converged:
        raise CouplingFailure(f"multi-marginal Sinkhorn did not converge (residual {sampler.center_plan.residual:.3g})")
    return sampler.sample(n, rng)


def efm_supervision(dataset, source, config, rng, caches=None):
    """Build one EFM training batch (see module docstring for the steps)."""
    caches = caches or _Caches()
    cond_idx = select_condition_subset(dataset.conditions, config.conditions_per_step, rng)
    anchors = dataset.conditions[cond_idx]
    key = tuple(int(i) for i in cond_idx)
    n = config.batch_size
    d = dataset.dim_data

    rows = [_draw_rows(dataset.samples[i], n, rng) for i in cond_idx]
    batches = [dataset.samples[i][r] for i, r in zip(cond_idx, rows)]
    z = source.noise_sigma * rng.standard_normal((n, d))

    tuple_cost = caches.cost(key, anchors, config) if config.coupling == "mmot-cluster" and len(cond_idx) > 1 else None
    tuples = couple_targets(batches, config, rng, tuple_cost)
    target_rows = np.stack([rows[i][tuples[:, i]] for i in range(len(cond_idx))], axis=1)
    targets = np.stack([batches[i][tuples[:, i]] for i in range(len(cond_idx))], axis=1)

    # Couple first-condition sources to the tuples' first members; the shared
    # noise carries the coupling to every other condition.
    perm = plan_permutation(exact_ot_plan(targets[:, 0], source(anchors[0]) + z))
    z = z[perm]

    reps = config.time_samples * config.condition_probes
    targets = np.repeat(targets, reps, axis=0)
    target_rows = np.repeat(target_rows, reps, axis=0)
    z = np.repeat(z, reps, axis=0)
    B = len(z)
    t = rng.uniform(size=B)
    c = hull_weights(anchors, B, rng) @ anchors

    reg = caches.regression(key, anchors, config.kernel)
    w = reg.weights(c)
    dw = reg.weight_jacobian(c)
    x0 = source(c) + z
    psi, jac = spacetime_psi_batch(x0, targets, w, dw, t, source.weight if config.source_drift else None)
    return SupervisionBatch(t, c, psi, jac, x0, targets, target_rows, cond_idx)


def otcfm_supervision(dataset, source, config, rng):
    """Per-condition OT-CFM batch: straight lines, zero condition columns."""
    cond_idx = select_condition_subset(dataset.conditions, config.conditions_per_step, rng)
    n = config.batch_size
    d, k = dataset.dim_data, dataset.dim_cond
    ts, cs, psis, jacs = [], [], [], []
    for i in cond_idx:
        x1 = dataset.samples[i][_draw_rows(dataset.samples[i], n, rng)]
        x0 = source(dataset.conditions[i]) + source.noise_sigma * rng.standard_normal((n, d))
        # Same orientation as efm_supervision: sources follow the target order.
        x0 = x0[plan_permutation(exact_ot_plan(x1, x0))]
        t = rng.uniform(size=n)
        psi = (1.0 - t)[:, None] * x0 + t[:, None] * x1
        jac = np.zeros((n, d, 1 + k))
        jac[:, :, 0] = x1 - x0
        ts.append(t)
        cs.append(np.broadcast_to(dataset.conditions[i], (n, k)))
        psis.append(psi)
        jacs.append(jac)
    return np.concatenate(ts), np.concatenate(cs), np.concatenate(psis), np.concatenate(jacs)


# ---------------------------------------------------------------------------
# Loops
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    """Everything a run produces; pass it back as ``resume=`` to continue.

    ``ema`` holds the exponential moving average of the parameters when
    ``config.ema_decay > 0``; :attr:`inference_model` prefers it.
    """

    model: object
    opt_state: OptimizerState
    source: object
    rng: np.random.Generator
    loss_trace: list = field(default_factory=list)
    skipped: int = 0
    iteration: int = 0
    method: str = "efm"
    ema: list | None = None

    @property
    def inference_model(self):
        return self.model if self.ema is None else self.model.with_params(self.ema)


def _run(dataset, config, source, resume, step_fn, on_checkpoint, method):
    config.validate(dataset)
    if resume is not None:
        if resume.method != method:
            raise InvalidConfigError(f"cannot resume a {resume.method!r} run with {method!r}")
        model, opt_state, rng = resume.model, resume.opt_state, resume.rng
        trace, start, skipped_before = list(resume.loss_trace), resume.iteration, resume.skipped
        ema = None if resume.ema is None else [p.copy() for p in resume.ema]
    else:
        model = init_model(dataset.dim_data, dataset.dim_cond, config.hidden, config.activation, seed=config.seed)
        opt_state = OptimizerState.for_model(model, lr=config.lr)
        rng = np.random.default_rng(config.seed)
        trace, start, skipped_before, ema = [], 0, 0, None
    if config.ema_decay and ema is None:
        ema = [p.copy() for p in model.params]
    budget = max(1, math.floor(0.01 * config.iterations))
    skipped = 0

    def snapshot(iteration):
        return TrainResult(
            model, opt_state, source, rng, trace, skipped_before + skipped, iteration, method,
            None if ema is None else [p.copy() for p in ema],
        )

    for it in range(start, start + config.iterations):
        try:
            t, c, psi, jac = step_fn(rng)
        except (CouplingFailure, IllPosedError, InvalidInputError, np.linalg.LinAlgError) as exc:
            skipped += 1
            logger.warning("iteration %d skipped: %s", it, exc)
            if skipped > budget:
                raise TrainingAborted(f"{skipped} skipped iterations exceed the budget of {budget}") from exc
            continue
        loss, grads = loss_and_grads(model, t, c, psi, jac)
        model, opt_state = optimizer_step(model, opt_state, grads)
        if ema is not None:
            a = config.ema_decay
            ema = [a * e + (1.0 - a) * p for e, p in zip(ema, model.params)]
        trace.append((it, loss))
        if on_checkpoint is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            on_checkpoint(snapshot(it + 1))
    return snapshot(start + config.iterations)


def train_efm(dataset, config, source=None, resume=None, on_checkpoint=None):
    """Train a matrix field with extended flow matching.

    ``resume`` is a :class:`TrainResult` (e.g. from
    :func:`load_training_checkpoint`); the run then continues its model,
    optimizer, EMA, RNG stream and loss trace for ``config.iterations`` more
    steps, which reproduces one uninterrupted run exactly.  ``source``
    defaults to the resumed run's source or to the affine regression of
    condition means with ``config.source_sigma``.
    """
    src = _source(dataset, config, source, resume)
    caches = _Caches()

    def step(gen):
        b = efm_supervision(dataset, src, config, gen, caches)
        return b.t, b.c, b.psi, b.jac

    return _run(dataset, config, src, resume, step, on_checkpoint, "efm")


def train_otcfm_baseline(dataset, config, source=None, resume=None, on_checkpoint=None):
    """Per-condition OT-CFM with the condition fed to the network as input.

    The time column learns ``x1 - x0``; condition columns are supervised to
    zero so that the same inference code applies.
    """
    src = _source(dataset, config, source, resume)

    def step(gen):
        return otcfm_supervision(dataset, src, config, gen)

    return _run(dataset, config, src, resume, step, on_checkpoint, "otcfm")


def _source(dataset, config, source, resume):
    if source is not None:
        return source
    if resume is not None:
        return resume.source
    return fit_source_regressor(dataset, config.source_sigma)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def rng_from_state(state):
    gen = np.random.Generator(getattr(np.random, state["bit_generator"])())
    gen.bit_generator.state = state
    return gen


def save_training_checkpoint(path, result, config, dataset):
    """Model plus everything needed to resume: optimizer, RNG state, trace."""
    save_checkpoint(
        path,
        result.model,
        method=result.method,
        config=config.to_dict(),
        source=result.source.to_dict(),
        optimizer=result.opt_state.to_dict(),
        rng=result.rng.bit_generator.state,
        iteration=result.iteration,
        skipped=result.skipped,
        loss_trace=[[int(i), float(v)] for i, v in result.loss_trace],
        ema=None if result.ema is None else [p.tolist() for p in result.ema],
        train_conditions=dataset.conditions.tolist(),
        omega_min=dataset.omega_min.tolist(),
        omega_max=dataset.omega_max.tolist(),
    )


def load_training_checkpoint(path):
    """Return ``(TrainResult, payload)`` from :func:`save_training_checkpoint` output."""
    model, payload = load_checkpoint(path)
    result = TrainResult(
        model=model,
        opt_state=OptimizerState.from_dict(payload["optimizer"]),
        source=SourceRegressor.from_dict(payload["source"]),
        rng=rng_from_state(payload["rng"]),
        loss_trace=[(int(i), float(v)) for i, v in payload["loss_trace"]],
        skipped=int(payload.get("skipped", 0)),
        iteration=int(payload["iteration"]),
        method=payload.get("method", "efm"),
        ema=None if payload.get("ema") is None else [np.array(p, dtype=float) for p in payload["ema"]],
    )
    return result, payload
