"""Conditioned datasets, the synthetic four-corner benchmark, and source noise.

A conditioned dataset holds one sample matrix per observed condition
``c`` in a box ``Omega``.  The source distribution at condition ``c`` is
``R(c) + z`` where ``R`` is an affine regression of the per-condition means
and ``z`` is a Gaussian draw shared across conditions.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidConfigError, InvalidInputError, ParseError

# Synthetic benchmark geometry: condition c in [0,1]^2 is mapped to the
# anchor ANCHOR_OFFSET + ANCHOR_SCALE * c; the inner and outer clusters sit
# at inner_radius / outer_radius from the anchor along a unit axis at angle
# BASE_ANGLE + rotation * (c_1 - c_2) degrees.
ANCHOR_SCALE = 4.0
ANCHOR_OFFSET = np.array([0.0, 0.0])
BASE_ANGLE = 45.0
DEFAULT_ROTATION = 25.0
CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])

INNER, OUTER = 0, 1


@dataclass
class ConditionedDataset:
    """Per-condition sample sets over a bounded condition box.

    ``conditions`` is ``(N, k)``; ``samples[i]`` is the ``(n_i, d)`` matrix
    observed at ``conditions[i]``; ``labels[i]`` (optional) holds integer
    cluster labels for those rows.
    """

    dim_data: int
    dim_cond: int
    conditions: np.ndarray
    samples: list
    omega_min: np.ndarray
    omega_max: np.ndarray
    labels: list | None = None
    synthetic: dict | None = None

    def __post_init__(self):
        # k = 0 (unconditional) needs the row count from the sample list.
        rows = -1 if self.dim_cond else len(self.samples)
        self.conditions = np.asarray(self.conditions, dtype=float).reshape(rows, self.dim_cond)
        self.samples = [np.asarray(s, dtype=float) for s in self.samples]
        self.omega_min = np.asarray(self.omega_min, dtype=float).reshape(self.dim_cond)
        self.omega_max = np.asarray(self.omega_max, dtype=float).reshape(self.dim_cond)
        if self.labels is not None:
            self.labels = [np.asarray(lab, dtype=int) for lab in self.labels]
        self.validate()

    def validate(self):
        if self.dim_data < 1 or self.dim_cond < 0:
            raise InvalidInputError(f"bad dimensions d={self.dim_data}, k={self.dim_cond}")
        if len(self.samples) != len(self.conditions):
            raise InvalidInputError("one sample matrix is required per condition")
        if not np.all(np.isfinite(self.conditions)):
            raise InvalidInputError("conditions must be finite")
        if np.any(self.omega_min > self.omega_max):
            raise InvalidInputError("omega_min must not exceed omega_max")
        for i, (c, x) in enumerate(zip(self.conditions, self.samples)):
            if x.ndim != 2 or x.shape[1] != self.dim_data:
                raise InvalidInputError(f"condition {i}: samples must have shape (n, {self.dim_data})")
            if x.shape[0] < 1:
                raise InvalidInputError(f"condition {i}: no samples")
            if not np.all(np.isfinite(x)):
                raise InvalidInputError(f"condition {i}: non-finite samples")
            if not self.in_omega(c):
                raise InvalidInputError(f"condition {i} = {c.tolist()} lies outside Omega")
        if self.labels is not None:
            if len(self.labels) != len(self.samples):
                raise InvalidInputError("one label vector is required per condition")
            for i, (lab, x) in enumerate(zip(self.labels, self.samples)):
                if lab.shape != (x.shape[0],):
                    raise InvalidInputError(f"condition {i}: label count does not match samples")

    @property
    def num_conditions(self):
        return len(self.conditions)

    def in_omega(self, c, atol=1e-12):
        c = np.asarray(c, dtype=float)
        return bool(np.all(c >= self.omega_min - atol) and np.all(c <= self.omega_max + atol))

    def means(self):
        return np.stack([x.mean(axis=0) for x in self.samples])

    def equals(self, other):
        if (self.dim_data, self.dim_cond, self.num_conditions) != (
            other.dim_data,
            other.dim_cond,
            other.num_conditions,
        ):
            return False
        same = (
            np.array_equal(self.conditions, other.conditions)
            and np.array_equal(self.omega_min, other.omega_min)
            and np.array_equal(self.omega_max, other.omega_max)
            and all(np.array_equal(a, b) for a, b in zip(self.samples, other.samples))
        )
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is not None:
            same = same and all(np.array_equal(a, b) for a, b in zip(self.labels, other.labels))
        return bool(same)


@dataclass
class SourceRegressor:
    """Affine map ``R(c) = weight @ c + bias`` plus the source noise scale."""

    weight: np.ndarray
    bias: np.ndarray
    noise_sigma: float
    degenerate: bool = False

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        self.weight = np.asarray(self.weight, dtype=float).reshape(self.bias.shape[0], -1)
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise InvalidInputError("source regressor has non-finite entries")
        if not self.noise_sigma >= 0:
            raise InvalidInputError("noise_sigma must be nonnegative")

    def __call__(self, c):
        c = np.asarray(c, dtype=float)
        return c @ self.weight.T + self.bias

    def to_dict(self):
        return {
            "weight": self.weight.tolist(),
            "bias": self.bias.tolist(),
            "noise_sigma": self.noise_sigma,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            weight=np.array(data["weight"], dtype=float).reshape(len(data["bias"]), -1),
            bias=np.array(data["bias"], dtype=float),
            noise_sigma=float(data["noise_sigma"]),
            degenerate=bool(data.get("degenerate", False)),
        )


# ---------------------------------------------------------------------------
# Synthetic four-corner benchmark
# ---------------------------------------------------------------------------


def cluster_axis(c, rotation=DEFAULT_ROTATION):
    c = np.asarray(c, dtype=float)
    theta = math.radians(BASE_ANGLE + rotation * (c[0] - c[1]))
    return np.array([math.cos(theta), math.sin(theta)])


def synthetic_cluster_centers(c, inner_radius, outer_radius, rotation=DEFAULT_ROTATION):
    """Return the ``(2, 2)`` inner/outer cluster centers at condition ``c``."""
    anchor = ANCHOR_OFFSET + ANCHOR_SCALE * np.asarray(c, dtype=float)
    axis = cluster_axis(c, rotation)
    return np.stack([anchor + inner_radius * axis, anchor + outer_radius * axis])


def sample_synthetic_2d(c, n_per_cluster, inner_radius, outer_radius, spread, rng, rotation=DEFAULT_ROTATION):
    """Draw ``2 * n_per_cluster`` labelled points from the benchmark law at ``c``.

    The law is defined for every ``c`` (not only the corners), which gives
    ground truth for interpolation and extrapolation conditions.
    """
    centers = synthetic_cluster_centers(c, inner_radius, outer_radius, rotation)
    labels = np.repeat([INNER, OUTER], n_per_cluster)
    points = centers[labels] + spread * rng.standard_normal((labels.size, 2))
    return points, labels


def _check_synthetic_args(n_per_cluster, inner_radius, outer_radius, spread, rotation):
    if int(n_per_cluster) != n_per_cluster or n_per_cluster < 1:
        raise InvalidConfigError("n_per_cluster must be a positive integer")
    if not (inner_radius > 0 and outer_radius > 0 and spread > 0):
        raise InvalidConfigError("radii and spread must be positive")
    if not inner_radius < outer_radius:
        raise InvalidConfigError("inner_radius must be smaller than outer_radius")
    if not math.isfinite(rotation):
        raise InvalidConfigError("rotation must be finite")


def make_synthetic_2d(
    n_per_cluster=50,
    inner_radius=0.5,
    outer_radius=1.5,
    spread=0.15,
    seed=0,
    conditions=None,
    rotation=DEFAULT_ROTATION,
):
    """Build the four-corner benchmark on ``Omega = [0, 1]^2``.

    Each condition carries an inner and an outer Gaussian cluster of
    ``n_per_cluster`` points; cluster labels are ``INNER`` / ``OUTER``.
    ``conditions`` overrides the default corner set (used for held-out
    interpolation ground truth).  ``rotation`` (degrees per unit of
    ``c_1 - c_2``) turns the cluster axis between conditions.
    """
    _check_synthetic_args(n_per_cluster, inner_radius, outer_radius, spread, rotation)
    rng = np.random.default_rng(seed)
    conds = CORNERS if conditions is None else np.asarray(conditions, dtype=float).reshape(-1, 2)
    samples, labels = [], []
    for c in conds:
        x, lab = sample_synthetic_2d(c, n_per_cluster, inner_radius, outer_radius, spread, rng, rotation)
        samples.append(x)
        labels.append(lab)
    params = {
        "n_per_cluster": int(n_per_cluster),
        "inner_radius": float(inner_radius),
        "outer_radius": float(outer_radius),
        "spread": float(spread),
        "rotation": float(rotation),
        "seed": int(seed),
    }
    return ConditionedDataset(
        dim_data=2,
        dim_cond=2,
        conditions=conds,
        samples=samples,
        omega_min=np.zeros(2),
        omega_max=np.ones(2),
        labels=labels,
        synthetic=params,
    )


# ---------------------------------------------------------------------------
# File I/O: CSV rows plus a JSON sidecar
# ---------------------------------------------------------------------------


def sidecar_path(path):
    return Path(path).with_suffix(".json")


def save_dataset(ds, path):
    """Write ``ds`` as CSV (one row per sample) plus its JSON sidecar."""
    path = Path(path)
    header = [f"c{i + 1}" for i in range(ds.dim_cond)] + [f"x{i + 1}" for i in range(ds.dim_data)]
    if ds.labels is not None:
        header.append("cluster")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, (c, x) in enumerate(zip(ds.conditions, ds.samples)):
            for j, row in enumerate(x):
                out = [repr(float(v)) for v in c] + [repr(float(v)) for v in row]
                if ds.labels is not None:
                    out.append(str(int(ds.labels[i][j])))
                writer.writerow(out)
    meta = {
        "k": ds.dim_cond,
        "d": ds.dim_data,
        "omega_min": ds.omega_min.tolist(),
        "omega_max": ds.omega_max.tolist(),
    }
    if ds.synthetic is not None:
        meta["synthetic"] = ds.synthetic
    sidecar_path(path).write_text(json.dumps(meta, indent=2))


def _parse_float(text, lineno, name):
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"line {lineno}: field {name!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"line {lineno}: field {name!r} is not finite")
    return value


def load_dataset(path):
    """Parse a dataset CSV and its sidecar; rows sharing a condition are grouped.

    Raises
    ------
    ParseError
        On an empty file, a malformed header or row, a width mismatch, or a
        condition outside the declared bounds.  Messages cite the line.
    """
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise ParseError(f"{side}: sidecar file missing")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{side}: invalid JSON ({exc})") from None
    for key in ("k", "d", "omega_min", "omega_max"):
        if key not in meta:
            raise ParseError(f"{side}: missing field {key!r}")
    k, d = int(meta["k"]), int(meta["d"])
    omega_min = np.array(meta["omega_min"], dtype=float)
    omega_max = np.array(meta["omega_max"], dtype=float)
    if omega_min.shape != (k,) or omega_max.shape != (k,):
        raise ParseError(f"{side}: omega bounds must have length k={k}")

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    expected = [f"c{i + 1}" for i in range(k)] + [f"x{i + 1}" for i in range(d)]
    has_cluster = len(header) == len(expected) + 1 and header[-1] == "cluster"
    if header[: len(expected)] != expected or len(header) not in (len(expected), len(expected) + 1) or (
        len(header) == len(expected) + 1 and not has_cluster
    ):
        raise ParseError(f"line 1: header {header} does not match k={k}, d={d}")
    if len(rows) < 2:
        raise ParseError(f"{path}: no sample rows")

    groups = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        vals = [_parse_float(f, lineno, name) for f, name in zip(row[: len(expected)], expected)]
        c, x = tuple(vals[:k]), vals[k:]
        if np.any(np.array(c) < omega_min) or np.any(np.array(c) > omega_max):
            raise ParseError(f"line {lineno}: condition {list(c)} outside declared bounds")
        label = None
        if has_cluster:
            try:
                label = int(row[-1])
            except ValueError:
                raise ParseError(f"line {lineno}: field 'cluster' is not an integer: {row[-1]!r}") from None
        xs, labs = groups.setdefault(c, ([], []))
        xs.append(x)
        labs.append(label)

    conditions = np.array(list(groups.keys()), dtype=float).reshape(-1, k)
    samples = [np.array(v[0], dtype=float) for v in groups.values()]
    labels = [np.array(v[1], dtype=int) for v in groups.values()] if has_cluster else None
    return ConditionedDataset(
        dim_data=d,
        dim_cond=k,
        conditions=conditions,
        samples=samples,
        omega_min=omega_min,
        omega_max=omega_max,
        labels=labels,
        synthetic=meta.get("synthetic"),
    )


# ---------------------------------------------------------------------------
# Source distribution
# ---------------------------------------------------------------------------


def fit_source_regressor(ds, sigma=1.0):
    """Least-squares affine fit of per-condition sample means onto conditions.

    Falls back to a mean-only regressor (zero weight, ``degenerate=True``)
    when the design ``[C, 1]`` is rank deficient, e.g. a single condition.
    """
    if not sigma >= 0:
        raise InvalidConfigError("sigma must be nonnegative")
    conds = ds.conditions
    means = ds.means()
    design = np.hstack([conds, np.ones((len(conds), 1))])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        warnings.warn("degenerate condition design; using mean-only source regressor", stacklevel=2)
        return SourceRegressor(
            weight=np.zeros((ds.dim_data, ds.dim_cond)),
            bias=means.mean(axis=0),
            noise_sigma=float(sigma),
            degenerate=True,
        )
    coef, *_ = np.linalg.lstsq(design, means, rcond=None)
    return SourceRegressor(weight=coef[:-1].T, bias=coef[-1], noise_sigma=float(sigma))


def sample_source_shared(R, conditions, n, rng):
    """Source batches ``R(c_i) + z_j`` with the same ``z_j`` for every condition.

    Returns a list with one ``(n, d)`` matrix per condition.
    """
    if n < 1:
        raise InvalidInputError("n must be at least 1")
    z = R.noise_sigma * rng.standard_normal((n, R.bias.shape[0]))
    return [R(c) + z for c in np.asarray(conditions, dtype=float).reshape(len(conditions), -1)]
