"""Simulation-based solvers for the aggregate problem.

Randomness comes from numpy's counter-based Philox generator. Independent
streams are split off a :class:`numpy.random.SeedSequence`, so a given
``(seed, streams)`` pair always reproduces the same samples regardless of how
the work is scheduled.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .aggregation import AggregationScheme, _check_pair, aggregate_operator_H, lift_costs
from .errors import SingularSystemError, ValidationError
from .mdp import PROB_TOL, Mdp, argmin_lowest, check_policy

PIVOT_TOL = 1e-10
RIDGE = 1e-8
_CHUNK = 1 << 15


def make_rng(seed: int, stream: int | None = None) -> np.random.Generator:
    """Philox generator; ``stream`` selects a child of ``SeedSequence(seed)``."""
    if stream is None:
        return np.random.Generator(np.random.Philox(seed))
    child = np.random.SeedSequence(seed).spawn(stream + 1)[stream]
    return np.random.Generator(np.random.Philox(child))


def spawn_rngs(seed: int, k: int) -> list:
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(k)]


def parse_stepsize(spec) -> float | None:
    """``'harmonic'`` (None) or a constant given as a float or ``'const:<g>'``."""
    if spec is None or spec == "harmonic":
        return None
    if isinstance(spec, str):
        if not spec.startswith("const:"):
            raise ValidationError(f"unknown stepsize {spec!r}; use 'harmonic' or 'const:<g>'")
        spec = spec.split(":", 1)[1]
    g = float(spec)
    if not 0.0 < g <= 1.0:
        raise ValidationError("constant stepsize must lie in (0, 1]")
    return g


def _distribution(p, size: int, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape != (size,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValidationError(f"{name} must be a probability vector of length {size}")
    return p


def _sample_rows(rng: np.random.Generator, cdf: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw from ``cdf[rows[m]]`` for each ``m``."""
    u = rng.random(len(rows))
    out = np.empty(len(rows), dtype=int)
    for s in range(0, len(rows), _CHUNK):
        c = cdf[rows[s : s + _CHUNK]]
        out[s : s + _CHUNK] = (c <= u[s : s + _CHUNK, None]).sum(axis=1)
    return np.minimum(out, cdf.shape[1] - 1)


def _policy_chain(mdp: Mdp, mu) -> tuple[np.ndarray, np.ndarray]:
    """Row-stochastic ``(n, n+1)`` transition matrix (termination last) and its costs."""
    idx = np.arange(mdp.n)
    P = np.concatenate([mdp.P[idx, mu], mdp.p_term[idx, mu][:, None]], axis=1)
    G = np.concatenate([mdp.cost[idx, mu], mdp.cost_term[idx, mu][:, None]], axis=1)
    return P, G


@dataclass(frozen=True)
class LstdResult:
    r: np.ndarray
    C: np.ndarray
    b: np.ndarray
    M: int


def lstd_system(mdp: Mdp, scheme: AggregationScheme, mu) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``C = I - alpha D P_mu Phi`` and ``b = D g_mu`` that the estimator targets."""
    P_mu, g_mu = mdp.policy_matrices(mu)
    return np.eye(scheme.q) - mdp.alpha * scheme.D @ P_mu @ scheme.Phi, scheme.D @ g_mu


def lstd0_evaluate(
    mdp: Mdp,
    scheme: AggregationScheme,
    mu,
    M: int,
    sampling: str = "state",
    xi=None,
    zeta=None,
    seed: int = 0,
    streams: int = 1,
) -> LstdResult:
    """Sampled ``C_M r = b_M`` for policy ``mu``.

    ``sampling='state'`` draws ``i ~ xi`` and weights ``d(i)`` by ``1/xi_i``;
    ``sampling='aggregate'`` draws ``l ~ zeta`` then ``i ~ d_l`` and weights by
    ``1/(zeta_l d_li)``. In both cases ``j ~ p_ij(mu(i))``. The sample count is
    split across ``streams`` independent generators and reduced in stream order.
    """
    _check_pair(mdp, scheme)
    mu = check_policy(mdp, mu)
    if int(M) != M or M < 1:
        raise ValidationError("sample count M must be a positive integer")
    if streams < 1 or streams > M:
        raise ValidationError("need 1 <= streams <= M")
    n, q = mdp.n, scheme.q
    P, G = _policy_chain(mdp, mu)
    cdf = np.cumsum(P, axis=1)
    Phi_ext = np.vstack([scheme.Phi, np.zeros((1, q))])
    D = scheme.D
    if sampling == "state":
        xi = np.full(n, 1.0 / n) if xi is None else _distribution(xi, n, "xi")
        uncovered = np.nonzero((D.sum(axis=0) > 0) & (xi <= 0))[0]
        if len(uncovered):
            raise ValidationError(
                f"state {uncovered[0] + 1} carries disaggregation weight but has xi = 0, so it is never sampled"
            )
        state_cdf = np.cumsum(xi)[None, :]
    elif sampling == "aggregate":
        zeta = np.full(q, 1.0 / q) if zeta is None else _distribution(zeta, q, "zeta")
        if np.any(zeta <= 0):
            raise ValidationError("zeta must be positive on every aggregate state")
        agg_cdf = np.cumsum(zeta)[None, :]
        d_cdf = np.cumsum(D, axis=1)
    else:
        raise ValidationError(f"unknown sampling {sampling!r}; use 'state' or 'aggregate'")

    sizes = [M // streams + (1 if s < M % streams else 0) for s in range(streams)]
    C_acc = np.zeros((q, q))
    b_acc = np.zeros(q)
    for rng, m in zip(spawn_rngs(seed, streams) if streams > 1 else [make_rng(seed)], sizes):
        if sampling == "state":
            i = _sample_rows(rng, state_cdf, np.zeros(m, dtype=int))
            w = 1.0 / xi[i]
            left = D[:, i] * w
        else:
            l = _sample_rows(rng, agg_cdf, np.zeros(m, dtype=int))
            i = _sample_rows(rng, d_cdf, l)
            w = 1.0 / (zeta[l] * D[l, i])
            left = D[:, i] * w
        j = _sample_rows(rng, cdf, i)
        C_acc += left @ Phi_ext[j]
        b_acc += left @ G[i, j]
    C = np.eye(q) - mdp.alpha * C_acc / M
    b = b_acc / M
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(C, check_finite=True)
    if np.min(np.abs(np.diag(lu))) < PIVOT_TOL:
        raise SingularSystemError(f"sampled matrix C_M is singular with M = {M}; try a larger sample count")
    return LstdResult(scipy.linalg.lu_solve((lu, piv), b), C, b, int(M))


def _jittered_cycle(rng: np.random.Generator, items: int, steps: int):
    """Visit every item once per sweep in a fresh random order."""
    done = 0
    while done < steps:
        for x in rng.permutation(items)[: steps - done]:
            yield int(x)
        done = min(steps, done + items)


@dataclass(frozen=True)
class AsyncResult:
    r: np.ndarray
    visits: np.ndarray
    residual_initial: float
    residual_final: float


def async_stochastic_vi(
    mdp: Mdp, scheme: AggregationScheme, steps: int, stepsize="harmonic", seed: int = 0, r0=None
) -> AsyncResult:
    """Asynchronous stochastic iteration on the aggregate Bellman equation.

    At step ``k`` an aggregate state ``l`` is chosen (cyclic with jitter), a
    state ``i ~ d_l`` is drawn, and
    ``r_l <- (1-g) r_l + g min_u sum_j p_ij(u) (g(i,u,j) + alpha phi_j' r)``.
    The harmonic stepsize is ``1 / (1 + prior visits of l)``.
    """
    _check_pair(mdp, scheme)
    const = parse_stepsize(stepsize)
    rng = make_rng(seed)
    q = scheme.q
    r = np.zeros(q) if r0 is None else np.array(r0, dtype=float)
    res0 = float(np.max(np.abs(aggregate_operator_H(mdp, scheme, r) - r)))
    d_cdf = np.cumsum(scheme.D, axis=1)
    visits = np.zeros(q, dtype=int)
    order = list(_jittered_cycle(rng, q, steps))
    draws = _sample_rows(rng, d_cdf, np.asarray(order, dtype=int))
    for l, i in zip(order, draws):
        J1 = scheme.Phi @ r
        Qi = mdp.expected_cost[i, : mdp.n_controls[i]] + mdp.alpha * (mdp.P[i, : mdp.n_controls[i]] @ J1)
        g = const if const is not None else 1.0 / (1.0 + visits[l])
        r[l] = (1.0 - g) * r[l] + g * Qi.min()
        visits[l] += 1
    res1 = float(np.max(np.abs(aggregate_operator_H(mdp, scheme, r) - r)))
    return AsyncResult(r, visits, res0, res1)


@dataclass(frozen=True)
class QLearningResult:
    Q: np.ndarray
    cell_policy: np.ndarray
    policy: np.ndarray
    visits: np.ndarray
    order: list


def cell_controls(mdp: Mdp, scheme: AggregationScheme) -> np.ndarray:
    """Control count shared by every state of each cell."""
    if not scheme.is_hard():
        raise ValidationError("Q-learning on cells needs a hard aggregation scheme")
    out = np.zeros(scheme.q, dtype=int)
    for l, s in enumerate(scheme.disagg_sets):
        counts = {int(mdp.n_controls[i]) for i in s}
        if len(counts) != 1:
            raise ValidationError(f"states in cell {l + 1} have different control sets {sorted(counts)}")
        out[l] = counts.pop()
    return out


def hard_agg_qlearning(
    mdp: Mdp, scheme: AggregationScheme, steps: int, stepsize="harmonic", seed: int = 0, warn: bool = True
) -> QLearningResult:
    """Tabular Q-learning over ``(cell, control)`` pairs.

    Each step picks a pair (cyclic with jitter), draws ``i ~ d_l`` and
    ``j ~ p_ij(u)``, and moves ``Q(l,u)`` toward
    ``g(i,u,j) + alpha min_v Q(cell(j), v)`` (0 after termination).
    The learned policy applies one control per cell, a coarser class than the
    original problem allows.
    """
    _check_pair(mdp, scheme)
    nc = cell_controls(mdp, scheme)
    if warn:
        warnings.warn("hard-aggregation Q-learning applies the same control to every state of a cell", stacklevel=2)
    const = parse_stepsize(stepsize)
    rng = make_rng(seed)
    q, U = scheme.q, mdp.max_controls
    pairs = [(l, u) for l in range(q) for u in range(nc[l])]
    Q = np.where(np.arange(U)[None, :] < nc[:, None], 0.0, np.inf)
    visits = np.zeros((q, U), dtype=int)
    cell = np.append(scheme.cell_of(), -1)
    d_cdf = np.cumsum(scheme.D, axis=1)
    order = []
    for k in _jittered_cycle(rng, len(pairs), steps):
        l, u = pairs[k]
        i = int(_sample_rows(rng, d_cdf, np.array([l]))[0])
        dist = mdp.successor_distribution(i, u)
        j = int(_sample_rows(rng, np.cumsum(dist)[None, :], np.array([0]))[0])
        g = mdp.successor_cost(i, u)[j]
        nxt = 0.0 if j == mdp.n else Q[cell[j]].min()
        step = const if const is not None else 1.0 / (1.0 + visits[l, u])
        Q[l, u] = (1.0 - step) * Q[l, u] + step * (g + mdp.alpha * nxt)
        visits[l, u] += 1
        order.append((l, u, i, j))
    cell_policy = argmin_lowest(Q)
    return QLearningResult(Q, cell_policy, cell_policy[cell[:-1]], visits, order)


@dataclass(frozen=True)
class QFactorModel:
    """Linear architecture ``Q~(i, u, theta) = features[(i, u)] . theta``."""

    features: np.ndarray

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def values(self, theta) -> np.ndarray:
        return self.features @ np.asarray(theta, dtype=float)


def tabular_model(mdp: Mdp) -> QFactorModel:
    """One indicator column per valid ``(i, u)`` pair."""
    valid = np.argwhere(mdp.mask)
    F = np.zeros((mdp.n, mdp.max_controls, len(valid)))
    F[valid[:, 0], valid[:, 1], np.arange(len(valid))] = 1.0
    return QFactorModel(F)


@dataclass(frozen=True)
class QFitResult:
    policy: np.ndarray
    theta: np.ndarray
    Q: np.ndarray
    regularized: bool


def qfactor_fit_and_extract(
    mdp: Mdp,
    base_values,
    model: QFactorModel | None = None,
    M: int | None = None,
    seed: int = 0,
    noise: float = 0.0,
) -> QFitResult:
    """Fit ``Q~`` to sampled targets ``beta = g(i,u,j) + alpha J~(j)`` and act greedily.

    ``base_values`` is the lifted ``J~`` (for example ``Phi r*``). With ``M=None``
    every valid pair contributes one sample whose target is its exact expected
    value; otherwise ``M`` pairs are drawn uniformly and ``j ~ p_ij(u)``.
    Optional Gaussian ``noise`` is added to each target. A rank-deficient
    design falls back to ridge ``1e-8`` and sets ``regularized``.
    """
    J = np.asarray(base_values, dtype=float)
    if J.shape != (mdp.n,):
        raise ValidationError(f"base values have shape {J.shape}, expected ({mdp.n},)")
    model = tabular_model(mdp) if model is None else model
    if model.features.shape[:2] != (mdp.n, mdp.max_controls):
        raise ValidationError("model features do not match the MDP's (state, control) grid")
    rng = make_rng(seed)
    valid = np.argwhere(mdp.mask)
    J_ext = np.append(J, 0.0)
    if M is None:
        iu = valid
        beta = mdp.expected_cost[iu[:, 0], iu[:, 1]] + mdp.alpha * (mdp.P[iu[:, 0], iu[:, 1]] @ J)
    else:
        if M < 1:
            raise ValidationError("M must be positive")
        iu = valid[rng.integers(0, len(valid), size=M)]
        P = np.concatenate([mdp.P, mdp.p_term[:, :, None]], axis=2)[iu[:, 0], iu[:, 1]]
        Gc = np.concatenate([mdp.cost, mdp.cost_term[:, :, None]], axis=2)[iu[:, 0], iu[:, 1]]
        j = _sample_rows(rng, np.cumsum(P, axis=1), np.arange(len(iu)))
        beta = Gc[np.arange(len(iu)), j] + mdp.alpha * J_ext[j]
    if noise > 0:
        beta = beta + noise * rng.standard_normal(len(beta))
    X = model.features[iu[:, 0], iu[:, 1]]
    regularized = np.linalg.matrix_rank(X) < model.dim
    if regularized:
        theta = np.linalg.solve(X.T @ X + RIDGE * np.eye(model.dim), X.T @ beta)
    else:
        theta, *_ = np.linalg.lstsq(X, beta, rcond=None)
    Q = np.where(mdp.mask, model.values(theta), np.inf)
    return QFitResult(argmin_lowest(Q), theta, Q, bool(regularized))
