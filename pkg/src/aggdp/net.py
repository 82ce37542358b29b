"""Small dense network for fitting policy costs.

``J~(i, v, r) = sum_l F_l(i, v) r_l`` where ``F(i, v)`` is the output of the
last nonlinear layer applied to the encoded state ``y(i)``. Each hidden layer
computes ``sigma(A x + b)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConvergenceError, ValidationError

DIVERGENCE_LIMIT = 1e12


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softplus(z):
    return np.logaddexp(0.0, z)


SIGMAS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "logistic": (_logistic, lambda z, a: a * (1.0 - a)),
    "softplus": (_softplus, lambda z, a: _logistic(z)),
}


def one_hot(n: int) -> Callable:
    eye = np.eye(n)

    def encode(i):
        return eye[i]

    return encode


@dataclass(frozen=True)
class NetworkSpec:
    """``widths`` lists the hidden layer sizes; the last one is the feature count ``s``."""

    n_states: int
    widths: tuple
    sigma: tuple | str = "tanh"
    encoder: Callable | None = field(default=None, compare=False)
    input_dim: int | None = None

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if not widths or any(w < 1 for w in widths):
            raise ValidationError("layer widths must be positive and there must be at least one layer")
        sig = (self.sigma,) * len(widths) if isinstance(self.sigma, str) else tuple(self.sigma)
        if len(sig) != len(widths):
            raise ValidationError("need one nonlinearity per layer")
        for s in sig:
            if s not in SIGMAS:
                raise ValidationError(f"unknown nonlinearity {s!r}; choose from {sorted(SIGMAS)}")
        if self.n_states < 1:
            raise ValidationError("need at least one state")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "sigma", sig)
        if self.encoder is None:
            object.__setattr__(self, "encoder", one_hot(self.n_states))
            object.__setattr__(self, "input_dim", self.n_states)
        elif self.input_dim is None:
            object.__setattr__(self, "input_dim", len(np.atleast_1d(self.encoder(0))))

    @property
    def s(self) -> int:
        return self.widths[-1]

    def encode(self, states) -> np.ndarray:
        return np.array([self.encoder(int(i)) for i in np.atleast_1d(states)], dtype=float)


@dataclass(frozen=True)
class NetworkParams:
    A: tuple
    b: tuple
    r: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([x.ravel() for pair in zip(self.A, self.b) for x in pair] + [self.r.ravel()])

    def unflat(self, theta) -> NetworkParams:
        theta = np.asarray(theta, dtype=float)
        A, b, k = [], [], 0
        for a0, b0 in zip(self.A, self.b):
            A.append(theta[k : k + a0.size].reshape(a0.shape))
            k += a0.size
            b.append(theta[k : k + b0.size].copy())
            k += b0.size
        return NetworkParams(tuple(A), tuple(b), theta[k : k + self.r.size].copy())

    def to_json_dict(self) -> dict:
        return {
            "layers": [{"A": a.tolist(), "b": v.tolist()} for a, v in zip(self.A, self.b)],
            "r": self.r.tolist(),
        }


def params_from_json_dict(d: dict) -> NetworkParams:
    try:
        A = tuple(np.array(layer["A"], dtype=float) for layer in d["layers"])
        b = tuple(np.array(layer["b"], dtype=float) for layer in d["layers"])
        return NetworkParams(A, b, np.array(d["r"], dtype=float))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed network parameters: {exc}") from None


def check_params(spec: NetworkSpec, params: NetworkParams):
    fan_in = spec.input_dim
    if len(params.A) != len(spec.widths) or len(params.b) != len(spec.widths):
        raise ValidationError("parameter layer count does not match the network layout")
    for k, (w, A, b) in enumerate(zip(spec.widths, params.A, params.b)):
        if A.shape != (w, fan_in) or b.shape != (w,):
            raise ValidationError(f"layer {k + 1} has A {A.shape}, b {b.shape}; expected ({w}, {fan_in}), ({w},)")
        fan_in = w
    if params.r.shape != (spec.s,):
        raise ValidationError(f"final weights have shape {params.r.shape}, expected ({spec.s},)")


def init_params(spec: NetworkSpec, seed: int = 0) -> NetworkParams:
    """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    from .sim import make_rng

    rng = make_rng(seed)
    A, b = [], []
    fan_in = spec.input_dim
    for w in spec.widths:
        lim = 1.0 / np.sqrt(fan_in)
        A.append(rng.uniform(-lim, lim, (w, fan_in)))
        b.append(rng.uniform(-lim, lim, w))
        fan_in = w
    lim = 1.0 / np.sqrt(fan_in)
    return NetworkParams(tuple(A), tuple(b), rng.uniform(-lim, lim, fan_in))


def _forward_x(spec: NetworkSpec, params: NetworkParams, X: np.ndarray):
    zs, acts = [], [X]
    for name, A, b in zip(spec.sigma, params.A, params.b):
        z = acts[-1] @ A.T + b
        zs.append(z)
        acts.append(SIGMAS[name][0](z))
    return zs, acts


def forward(spec: NetworkSpec, params: NetworkParams, i) -> tuple[np.ndarray, float]:
    """Features ``F(i, v)`` and output ``F(i, v) . r`` for a single state."""
    check_params(spec, params)
    _, acts = _forward_x(spec, params, spec.encode([i]))
    F = acts[-1][0]
    return F, float(F @ params.r)


def predict(spec: NetworkSpec, params: NetworkParams, states=None) -> np.ndarray:
    states = np.arange(spec.n_states) if states is None else np.asarray(states)
    _, acts = _forward_x(spec, params, spec.encode(states))
    return acts[-1] @ params.r


def gradient(spec: NetworkSpec, params: NetworkParams, i, beta: float) -> NetworkParams:
    """Gradient of ``(J~(i, v, r) - beta)^2`` with respect to every parameter."""
    zs, acts = _forward_x(spec, params, spec.encode([i]))
    F = acts[-1][0]
    e = float(F @ params.r) - beta
    gr = 2.0 * e * F
    delta = 2.0 * e * params.r
    gA, gb = [None] * len(zs), [None] * len(zs)
    for k in range(len(zs) - 1, -1, -1):
        name = spec.sigma[k]
        delta = delta * SIGMAS[name][1](zs[k][0], acts[k + 1][0])
        gA[k] = np.outer(delta, acts[k][0])
        gb[k] = delta
        delta = params.A[k].T @ delta
    return NetworkParams(tuple(gA), tuple(gb), gr)


def numeric_gradient(spec: NetworkSpec, params: NetworkParams, i, beta: float, h: float = 1e-6) -> np.ndarray:
    """Central differences on the flattened parameter vector."""
    theta = params.flat()
    out = np.empty_like(theta)
    def loss(t):
        _, y = forward(spec, params.unflat(t), i)
        return (y - beta) ** 2

    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        out[k] = (loss(theta + e) - loss(theta - e)) / (2 * h)
    return out


def mean_loss(spec: NetworkSpec, params: NetworkParams, states, betas) -> float:
    return float(np.mean((predict(spec, params, states) - np.asarray(betas, dtype=float)) ** 2))


@dataclass(frozen=True)
class TrainResult:
    params: NetworkParams
    losses: list


def train_incremental(
    spec: NetworkSpec,
    params0: NetworkParams,
    states,
    betas,
    epochs: int,
    step=1e-2,
    seed: int = 0,
    ridge: float = 0.0,
) -> TrainResult:
    """Incremental gradient on ``sum_m (J~(i_m) - beta_m)^2 + ridge ||params||^2``.

    Each epoch visits every pair once in a seeded random order and takes one
    step per pair. ``step`` is a constant or a callable of the epoch index.
    ``losses[e]`` is the full-set mean squared residual after epoch ``e``.
    """
    from .sim import make_rng

    check_params(spec, params0)
    states = np.asarray(states, dtype=int)
    betas = np.asarray(betas, dtype=float)
    if states.ndim != 1 or states.shape != betas.shape or len(states) == 0:
        raise ValidationError("training set needs matching, nonempty state and target arrays")
    if np.any(states < 0) or np.any(states >= spec.n_states):
        raise ValidationError("training states out of range")
    if ridge < 0:
        raise ValidationError("ridge must be nonnegative")
    rng = make_rng(seed)
    theta = params0.flat()
    params = params0
    losses = []
    for e in range(epochs):
        gamma = step(e) if callable(step) else step
        if gamma <= 0:
            raise ValidationError("stepsizes must be positive")
        for m in rng.permutation(len(states)):
            g = gradient(spec, params, states[m], betas[m]).flat() + 2.0 * ridge * theta
            theta = theta - gamma * g
            params = params0.unflat(theta)
        loss = mean_loss(spec, params, states, betas)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise ConvergenceError(
                f"training diverged at epoch {e + 1} (loss {loss:.3g}); use a smaller stepsize", residual=loss, iterations=e + 1
            )
        losses.append(loss)
    return TrainResult(params, losses)


@dataclass(frozen=True)
class FeatureMapping:
    """``F[i]`` is the feature vector of state ``i``."""

    F: np.ndarray

    def __call__(self, i) -> np.ndarray:
        return self.F[i]

    @property
    def s(self) -> int:
        return self.F.shape[1]


def extract_feature_mapping(spec: NetworkSpec, params: NetworkParams) -> FeatureMapping:
    check_params(spec, params)
    _, acts = _forward_x(spec, params, spec.encode(np.arange(spec.n_states)))
    F = acts[-1].copy()
    F.setflags(write=False)
    return FeatureMapping(F)


def spec_to_json_dict(spec: NetworkSpec) -> dict:
    return {"n_states": spec.n_states, "widths": list(spec.widths), "sigma": list(spec.sigma)}


def save_network(spec: NetworkSpec, params: NetworkParams) -> str:
    return json.dumps({"spec": spec_to_json_dict(spec), **params.to_json_dict()}, indent=2, sort_keys=True)


def load_network(text: str) -> tuple[NetworkSpec, NetworkParams]:
    try:
        d = json.loads(text)
        spec = NetworkSpec(int(d["spec"]["n_states"]), tuple(d["spec"]["widths"]), tuple(d["spec"]["sigma"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed network JSON: {exc}") from None
    params = params_from_json_dict(d)
    check_params(spec, params)
    return spec, params
