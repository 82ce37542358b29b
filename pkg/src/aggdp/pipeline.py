"""Approximate policy iteration with network-derived features.

Each cycle fits a network to the current policy's costs, buckets states by
the network's features, solves the resulting aggregate problem, and takes the
one-step lookahead policy against the lifted aggregate costs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregation import (
    AggregationScheme,
    build_hard_aggregation,
    extract_policy,
    identity_scheme,
    lift_costs,
    solve_aggregate_vi,
)
from .errors import AggDPError, ValidationError
from .mdp import Mdp, check_policy, evaluate_policy
from .net import NetworkSpec, extract_feature_mapping, init_params, train_incremental
from .scoring import partition_by_score_vector
from .sim import make_rng

MAX_CELLS = 10_000


@dataclass(frozen=True)
class NetConfig:
    widths: tuple = (4,)
    sigma: str = "tanh"
    epochs: int = 300
    step: float = 0.1
    ridge: float = 0.0


def sample_states(mdp: Mdp, mu, count: int, rng: np.random.Generator) -> np.ndarray:
    """Half uniform draws, half states visited by simulating ``mu`` from uniform starts."""
    uniform = rng.integers(0, mdp.n, size=count - count // 2)
    onpol = []
    i = int(rng.integers(mdp.n))
    idx = np.arange(mdp.n)
    P = mdp.P[idx, mu]
    while len(onpol) < count // 2:
        row = P[i]
        stay = row.sum()
        if stay <= 0 or rng.random() >= stay:
            i = int(rng.integers(mdp.n))
            continue
        i = int(rng.choice(mdp.n, p=row / stay))
        onpol.append(i)
    return np.concatenate([uniform, np.asarray(onpol, dtype=int)])


def feature_scheme(F: np.ndarray, sampled: np.ndarray, q) -> AggregationScheme:
    """Cells over the sampled states' features; every state is then mapped to
    the cell containing its feature vector, or the nearest centroid."""
    n = F.shape[0]
    members = np.unique(sampled)
    part = partition_by_score_vector(F[members], q=q, method="quantile")
    sets = [[int(members[k]) for k in c] for c in part.cells]
    centroids = np.array([F[s].mean(axis=0) for s in sets])
    D = np.zeros((len(sets), n))
    Phi = np.zeros((n, len(sets)))
    for l, s in enumerate(sets):
        D[l, s] = 1.0 / len(s)
    for j in range(n):
        l = part.locate(F[j])
        if l is None:
            l = int(np.argmin(np.linalg.norm(centroids - F[j][None, :], axis=1)))
        Phi[j, l] = 1.0
    return AggregationScheme(D, Phi, sets)


@dataclass(frozen=True)
class CycleReport:
    cycle: int
    policy: np.ndarray
    J_mu: np.ndarray
    r_star: np.ndarray
    next_policy: np.ndarray
    J_next: np.ndarray
    sup_diff: float
    q: int

    def to_json_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "policy": [int(u) + 1 for u in self.policy],
            "J_mu": self.J_mu.tolist(),
            "r_star": self.r_star.tolist(),
            "next_policy": [int(u) + 1 for u in self.next_policy],
            "J_next": self.J_next.tolist(),
            "sup_diff": self.sup_diff,
            "aggregate_states": self.q,
        }


@dataclass(frozen=True)
class PipelineResult:
    policy: np.ndarray
    reports: list = field(default_factory=list)


def run_pi_with_nn_features(
    mdp: Mdp,
    cycles: int = 1,
    net: NetConfig = NetConfig(),
    q="singleton",
    seed: int = 0,
    mu0=None,
    n_samples: int | None = None,
    noise: float = 0.0,
    freeze_features: bool = False,
    tol: float = 1e-12,
) -> PipelineResult:
    """Run ``cycles`` rounds of train, featurize, aggregate, improve.

    ``q='singleton'`` aggregates every state on its own, so the aggregate
    problem is the original one; an integer gives ``q`` quantile intervals per
    feature. Training targets are the exact policy costs, plus seeded Gaussian
    ``noise`` if requested. With ``freeze_features`` the network is trained in
    the first cycle only.
    """
    if cycles < 1:
        raise ValidationError("cycles must be at least 1")
    mu = np.zeros(mdp.n, dtype=int) if mu0 is None else check_policy(mdp, mu0).copy()
    rng = make_rng(seed)
    count = 2 * mdp.n if n_samples is None else n_samples
    spec = NetworkSpec(mdp.n, tuple(net.widths), net.sigma)
    params = init_params(spec, seed)
    reports = []
    states = np.arange(mdp.n)
    for c in range(1, cycles + 1):
        try:
            J = evaluate_policy(mdp, mu)
            if c == 1 or not freeze_features:
                beta = J + noise * rng.standard_normal(mdp.n) if noise > 0 else J
                params = train_incremental(spec, params, states, beta, net.epochs, net.step, seed + c, net.ridge).params
            if q == "singleton":
                scheme = identity_scheme(mdp.n)
            else:
                F = extract_feature_mapping(spec, params).F
                scheme = feature_scheme(F, sample_states(mdp, mu, count, rng), q)
            r = solve_aggregate_vi(mdp, scheme, tol).r
            new = extract_policy(mdp, scheme, r)
            J_new = evaluate_policy(mdp, new)
        except AggDPError as exc:
            exc.args = (f"cycle {c}: {exc}",) + exc.args[1:]
            raise
        reports.append(
            CycleReport(c, mu, J, r, new, J_new, float(np.max(np.abs(lift_costs(scheme, r) - J_new))), scheme.q)
        )
        mu = new
    return PipelineResult(mu, reports)


@dataclass(frozen=True)
class FeatureIterationResult:
    schemes: list
    r_trace: list
    J_tilde: list


def run_feature_iteration(mdp: Mdp, V, rounds: int, q: int, method: str = "quantile") -> FeatureIterationResult:
    """Round ``t`` partitions on the current score set, solves, and appends
    the lifted ``J~_1`` as one more score for round ``t+1``."""
    from .ssp import ssp_aggregate_solve

    if rounds < 1:
        raise ValidationError("rounds must be at least 1")
    scores = np.asarray(V, dtype=float).reshape(mdp.n, -1)
    schemes, r_trace, lifts = [], [], []
    for t in range(rounds):
        if q ** scores.shape[1] > MAX_CELLS:
            raise ValidationError(
                f"round {t + 1} would allow {q ** scores.shape[1]} cells (cap {MAX_CELLS}); use a smaller q"
            )
        part = partition_by_score_vector(scores, q=q, method=method)
        scheme = part.scheme
        r = ssp_aggregate_solve(mdp, scheme) if mdp.ssp else solve_aggregate_vi(mdp, scheme, 1e-12).r
        J1 = lift_costs(scheme, r)
        schemes.append(scheme)
        r_trace.append(r)
        lifts.append(J1)
        scores = np.column_stack([scores, J1])
    return FeatureIterationResult(schemes, r_trace, lifts)


def hard_scheme_from_features(F: np.ndarray, q) -> AggregationScheme:
    """All states sampled: plain product-grid cells over ``F``."""
    part = partition_by_score_vector(F, q=q, method="quantile")
    return build_hard_aggregation(part.cells, F.shape[0])
