"""The matrix field network ``u(t, c, x) -> R^{d x (1+k)}`` and its optimizer.

A plain fully connected network in double precision with hand-written
reverse-mode gradients.  Inputs are the raw concatenation ``[t, c, x]``; the
output vector of length ``d * (1 + k)`` is reshaped row-major so that row
``i`` is data dimension ``i`` and column 0 is the time direction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError

ACTIVATIONS = ("tanh", "softplus")
CHECKPOINT_FORMAT = "efm-checkpoint"
CHECKPOINT_VERSION = 1


def _act(name, z):
    if name == "tanh":
        a = np.tanh(z)
        return a, 1.0 - a * a
    # softplus: smooth relu
    a = np.logaddexp(0.0, z)
    return a, 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MatrixFieldModel:
    dim_data: int
    dim_cond: int
    hidden: tuple
    activation: str
    weights: list
    biases: list

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.activation not in ACTIVATIONS:
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        widths = self.widths
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise InvalidInputError("layer count does not match widths")
        for W, b, a, o in zip(self.weights, self.biases, widths[:-1], widths[1:]):
            if W.shape != (a, o) or b.shape != (o,):
                raise InvalidInputError(f"layer shape mismatch: {W.shape}, {b.shape} vs ({a}, {o})")

    @property
    def widths(self):
        d, k = self.dim_data, self.dim_cond
        return (1 + k + d, *self.hidden, d * (1 + k))

    @property
    def param_count(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    @property
    def params(self):
        return self.weights + self.biases

    def with_params(self, params):
        n = len(self.weights)
        return MatrixFieldModel(
            self.dim_data, self.dim_cond, self.hidden, self.activation, list(params[:n]), list(params[n:])
        )

    def all_finite(self):
        return all(np.all(np.isfinite(p)) for p in self.params)

    def __call__(self, t, c, x):
        return forward_batch(self, t, c, x)


def init_model(d, k, hidden=(128, 128), activation="tanh", seed=0):
    """Glorot-normal weights, zero biases; deterministic in ``seed``."""
    if d < 1 or k < 0 or any(h < 1 for h in hidden):
        raise InvalidInputError("widths must be positive")
    rng = np.random.default_rng(seed)
    widths = (1 + k + d, *hidden, d * (1 + k))
    weights, biases = [], []
    for a, o in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / (a + o)), size=(a, o)))
        biases.append(np.zeros(o))
    return MatrixFieldModel(d, k, tuple(hidden), activation, weights, biases)


def _inputs(model, t, c, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.dim_data:
        raise InvalidInputError(f"x must have shape (B, {model.dim_data}), got {x.shape}")
    B = len(x)
    t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1, 1), (B, 1))
    c = np.asarray(c, dtype=float).reshape(-1, model.dim_cond) if model.dim_cond else np.zeros((1, 0))
    if c.shape[1] != model.dim_cond:
        raise InvalidInputError(f"c must have {model.dim_cond} columns")
    c = np.broadcast_to(c, (B, model.dim_cond))
    return np.concatenate([t, c, x], axis=1)


def _forward(model, h):
    cache = [h]
    derivs = []
    n = len(model.weights)
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        if i < n - 1:
            h, dh = _act(model.activation, z)
            derivs.append(dh)
        else:
            h = z
        cache.append(h)
    return h, cache, derivs


def forward_batch(model, t, c, x):
    """Evaluate on a batch: ``t`` (B,) or scalar, ``c`` (B, k) or (k,), ``x`` (B, d).

    Returns ``(B, d, 1 + k)``.
    """
    out, _, _ = _forward(model, _inputs(model, t, c, x))
    return out.reshape(len(out), model.dim_data, 1 + model.dim_cond)


def forward(model, t, c, x):
    """Single-point evaluation returning the ``(d, 1 + k)`` matrix."""
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim_data,):
        raise InvalidInputError(f"x must have shape ({model.dim_data},), got {x.shape}")
    c = np.asarray(c, dtype=float)
    if c.shape != (model.dim_cond,):
        raise InvalidInputError(f"c must have shape ({model.dim_cond},), got {c.shape}")
    return forward_batch(model, float(t), c[None, :], x[None, :])[0]


def loss_and_grads(model, t, c, psi, jac):
    """Mean squared Frobenius error between ``u(t, c, psi)`` and ``jac``.

    Returns ``(loss, grads)`` where ``grads`` is ordered like
    ``model.params`` (weights then biases).
    """
    psi = np.asarray(psi, dtype=float)
    jac = np.asarray(jac, dtype=float)
    if len(psi) == 0:
        raise InvalidInputError("empty training batch")
    for name, arr in (("t", t), ("c", c), ("psi", psi), ("jac", jac)):
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError(f"non-finite values in {name}")
    h = _inputs(model, t, c, psi)
    out, cache, derivs = _forward(model, h)
    B = len(out)
    resid = out - jac.reshape(B, -1)
    loss = float(np.sum(resid * resid) / B)

    n = len(model.weights)
    gW, gb = [None] * n, [None] * n
    delta = 2.0 * resid / B
    for i in range(n - 1, -1, -1):
        gW[i] = cache[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * derivs[i - 1]
    return loss, gW + gb


@dataclass
class OptimizerState:
    """Adam moments; ``first``/``second`` are shaped like the model params."""

    first: list
    second: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            first=[np.zeros_like(p) for p in model.params],
            second=[np.zeros_like(p) for p in model.params],
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )

    def to_dict(self):
        return {
            "first": [p.tolist() for p in self.first],
            "second": [p.tolist() for p in self.second],
            "step": self.step,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            first=[np.array(p, dtype=float) for p in data["first"]],
            second=[np.array(p, dtype=float) for p in data["second"]],
            step=int(data["step"]),
            lr=float(data["lr"]),
            beta1=float(data["beta1"]),
            beta2=float(data["beta2"]),
            eps=float(data["eps"]),
        )


def adam_update(params, state, grads):
    """Pure Adam step on a list of arrays; returns ``(new_params, new_state)``."""
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise InvalidInputError("gradient shapes do not match parameters")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    first = [b1 * m + (1.0 - b1) * g for m, g in zip(state.first, grads)]
    second = [b2 * v + (1.0 - b2) * g * g for v, g in zip(state.second, grads)]
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new = [p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps) for p, m, v in zip(params, first, second)]
    return new, OptimizerState(first, second, step, state.lr, b1, b2, state.eps)


def optimizer_step(model, state, grads):
    params, state = adam_update(model.params, state, grads)
    new = model.with_params(params)
    if not new.all_finite():
        raise InvalidInputError("non-finite parameters after update")
    return new, state


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def model_to_dict(model):
    return {
        "d": model.dim_data,
        "k": model.dim_cond,
        "hidden": list(model.hidden),
        "activation": model.activation,
        "weights": [W.tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def model_from_dict(data):
    try:
        return MatrixFieldModel(
            dim_data=int(data["d"]),
            dim_cond=int(data["k"]),
            hidden=tuple(data["hidden"]),
            activation=data["activation"],
            weights=[np.array(W, dtype=float).reshape(len(W), -1) for W in data["weights"]],
            biases=[np.array(b, dtype=float) for b in data["biases"]],
        )
    except KeyError as exc:
        raise ParseError(f"checkpoint: missing field {exc.args[0]!r}") from None
    except InvalidInputError as exc:
        raise ParseError(f"checkpoint: {exc}") from None


def save_checkpoint(path, model, **extra):
    """Write a versioned JSON checkpoint; ``extra`` entries must be JSON-ready."""
    payload = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "model": model_to_dict(model)}
    payload.update(extra)
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path):
    """Return ``(model, payload)`` where ``payload`` is the full decoded JSON."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"{path}: not an EFM checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {payload.get('version')!r}")
    return model_from_dict(payload["model"]), payload
