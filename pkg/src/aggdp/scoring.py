"""Hard aggregation built from scoring functions.

States with roughly equal scores share an aggregate state: the range of the
score ``V`` is cut into half-open intervals ``[a, b)`` (the last one closed)
and ``I_l`` collects the states whose score lands in interval ``l``. Empty
intervals are dropped and the surviving cells renumbered in interval order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregationScheme, build_hard_aggregation, max_variation, solve_aggregate_vi
from .errors import ValidationError
from .mdp import Mdp, bellman_optimal, evaluate_policy, solve_exact_vi


@dataclass(frozen=True)
class IntervalPartition:
    """Interior breakpoints ``b_1 < ... < b_{q-1}`` over ``[lo, hi]``."""

    breakpoints: np.ndarray
    lo: float
    hi: float

    @property
    def q(self) -> int:
        return len(self.breakpoints) + 1

    def index(self, v) -> np.ndarray:
        return np.searchsorted(self.breakpoints, np.asarray(v, dtype=float), side="right")


def quantile_breakpoints(values, q: int) -> np.ndarray:
    """Equal-frequency breakpoints placed on observed values.

    Each breakpoint is a distinct observed value, so equal values never
    straddle a boundary. With ``q`` at least the number of distinct values
    every distinct value gets its own interval.
    """
    v = np.sort(np.asarray(values, dtype=float))
    distinct, counts = np.unique(v, return_counts=True)
    d = len(distinct)
    if q >= d:
        return distinct[1:]
    cum = np.cumsum(counts)
    N = cum[-1]
    starts = []
    for k in range(1, q):
        s = int(np.searchsorted(cum, k * N / q, side="left")) + 1
        if 1 <= s < d:
            starts.append(s)
    return distinct[sorted(set(starts))]


def equal_width_breakpoints(values, q: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.array([])
    return lo + (hi - lo) * np.arange(1, q) / q


def make_intervals(values, q: int | None = None, breakpoints=None, method: str = "quantile") -> IntervalPartition:
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValidationError("scores must be finite")
    if breakpoints is not None:
        b = np.asarray(sorted(float(x) for x in breakpoints))
        if np.any(np.diff(b) <= 0):
            raise ValidationError("breakpoints must be strictly increasing")
    else:
        if q is None or q < 1:
            raise ValidationError("need q >= 1 or explicit breakpoints")
        if method == "quantile":
            b = quantile_breakpoints(v, q)
        elif method == "equal_width":
            b = equal_width_breakpoints(v, q)
        else:
            raise ValidationError(f"unknown partition method {method!r}")
    return IntervalPartition(np.asarray(b, dtype=float), float(v.min()), float(v.max()))


@dataclass(frozen=True)
class ScorePartition:
    """Result of bucketing states by score.

    ``feature[i]`` is the (0-based) aggregate state of ``i``; ``keys`` holds the
    raw grid index (a tuple, one entry per score dimension) of each surviving
    cell, so unseen score vectors can be located later.
    """

    feature: np.ndarray
    cells: list
    scheme: AggregationScheme
    intervals: list
    keys: list
    collapsed: bool = False
    dropped: int = 0
    _lookup: dict = field(default_factory=dict, repr=False)

    @property
    def q(self) -> int:
        return len(self.cells)

    def locate(self, v) -> int | None:
        """Cell of an arbitrary score vector, or None if its grid cell is empty."""
        v = np.atleast_1d(np.asarray(v, dtype=float))
        key = tuple(int(iv.index(x)) for iv, x in zip(self.intervals, v))
        return self._lookup.get(key)


def _cells_from_keys(keys: list) -> tuple[list, list, np.ndarray]:
    uniq = sorted(set(keys))
    pos = {k: l for l, k in enumerate(uniq)}
    feature = np.array([pos[k] for k in keys], dtype=int)
    cells = [list(np.nonzero(feature == l)[0]) for l in range(len(uniq))]
    return uniq, cells, feature


def partition_by_score_vector(
    V, q=None, breakpoints=None, method: str = "quantile", n: int | None = None
) -> ScorePartition:
    """Product-grid cells over an ``(n, s)`` array of scores.

    ``q`` is the number of intervals per dimension (int or per-dimension list);
    ``breakpoints`` is a per-dimension list of explicit breakpoints.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    n_states, s = V.shape
    if n_states == 0:
        raise ValidationError("no states to partition")
    if breakpoints is not None:
        if len(breakpoints) != s:
            raise ValidationError("need one breakpoint list per score dimension")
        intervals = [make_intervals(V[:, d], breakpoints=breakpoints[d]) for d in range(s)]
    else:
        qs = [q] * s if np.isscalar(q) or q is None else list(q)
        if len(qs) != s:
            raise ValidationError("need one q per score dimension")
        intervals = [make_intervals(V[:, d], q=qs[d], method=method) for d in range(s)]
    raw = np.stack([iv.index(V[:, d]) for d, iv in enumerate(intervals)], axis=1)
    keys = [tuple(int(x) for x in row) for row in raw]
    uniq, cells, feature = _cells_from_keys(keys)
    grid_cells = int(np.prod([iv.q for iv in intervals]))
    want = q if breakpoints is None else None
    collapsed = len(uniq) == 1 and want is not None and (np.any(np.asarray(want) > 1))
    if collapsed:
        warnings.warn("scores are constant; collapsing to a single aggregate state", stacklevel=2)
    scheme = build_hard_aggregation(cells, n_states if n is None else n)
    return ScorePartition(
        feature,
        cells,
        scheme,
        intervals,
        uniq,
        collapsed=bool(collapsed),
        dropped=grid_cells - len(uniq),
        _lookup={k: l for l, k in enumerate(uniq)},
    )


def partition_by_scores(V, q: int | None = None, breakpoints=None, method: str = "quantile") -> ScorePartition:
    """Scalar scoring function: ``F(i) = l`` iff ``V(i)`` lies in interval ``l``."""
    V = np.asarray(V, dtype=float)
    if V.ndim != 1:
        raise ValidationError("partition_by_scores takes a scalar score per state")
    bps = None if breakpoints is None else [breakpoints]
    return partition_by_score_vector(V[:, None], q=q, breakpoints=bps, method=method)


def partition_by_scores_within_sets(V, coarse_sets, q: int, method: str = "quantile") -> AggregationScheme:
    """Score intervals computed separately inside each coarse set ``C_theta``."""
    V = np.asarray(V, dtype=float)
    n = len(V)
    members = sorted(i for c in coarse_sets for i in c)
    if members != list(range(n)):
        raise ValidationError("coarse sets must partition the states")
    cells = []
    for c in coarse_sets:
        c = list(c)
        part = partition_by_scores(V[c], q=q, method=method)
        cells.extend([[c[k] for k in cell] for cell in part.cells])
    return build_hard_aggregation(cells, n)


def quantization_error(V, cells) -> float:
    """Largest within-cell score spread; sup-norm spread for vector scores."""
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        return max_variation(V, cells)
    return max((float(np.max(np.ptp(V[list(c)], axis=0))) for c in cells if len(c)), default=0.0)


def certify_beta(J, V, cells) -> float:
    """Smallest beta with ``|J(i)-J(j)| <= beta |V(i)-V(j)|`` inside every cell.

    Returns ``inf`` when two states share a score but not a cost.
    """
    J = np.asarray(J, dtype=float)
    V = np.asarray(V, dtype=float)
    beta = 0.0
    for c in cells:
        c = list(c)
        dJ = np.abs(J[c][:, None] - J[c][None, :])
        dV = np.abs(V[c][:, None] - V[c][None, :])
        zero = dV == 0
        if np.any(dJ[zero] > 1e-12):
            return np.inf
        if np.any(~zero):
            beta = max(beta, float(np.max(dJ[~zero] / dV[~zero])))
    return beta


@dataclass(frozen=True)
class ScoreBoundReport:
    beta: float
    hypothesis_ok: bool
    delta: float
    bound: float
    max_gap: float
    violations: list

    @property
    def ok(self) -> bool:
        return self.hypothesis_ok and not self.violations


def check_score_bound(mdp: Mdp, V, cells, beta: float | None = None, tol: float = 1e-9) -> ScoreBoundReport:
    """Check ``|J*(i) - r*_l| <= beta * delta / (1 - alpha)`` on a score partition.

    ``beta`` is certified by exhaustive pairwise scan unless given, in which case
    the hypothesis is verified instead. A failed hypothesis is reported and the
    bound is not asserted. With zero quantization error exactness is checked
    at 1e-9.
    """
    if mdp.ssp:
        raise ValidationError("the bound applies to discounted problems")
    V = np.asarray(V, dtype=float)
    J_star = solve_exact_vi(mdp, 1e-12).J
    scheme = build_hard_aggregation(cells, mdp.n)
    r_star = solve_aggregate_vi(mdp, scheme, 1e-12).r
    delta = quantization_error(V, cells)
    certified = certify_beta(J_star, V, cells)
    if beta is None:
        beta = certified
    hypothesis_ok = bool(np.isfinite(certified) and certified <= beta + 1e-12)
    bound = beta * delta / (1.0 - mdp.alpha) if np.isfinite(beta) else np.inf
    violations = []
    max_gap = 0.0
    limit = 1e-9 if delta == 0 else bound + tol
    for l, c in enumerate(scheme.disagg_sets):
        for i in c:
            gap = abs(J_star[i] - r_star[l])
            max_gap = max(max_gap, gap)
            if hypothesis_ok and gap > limit:
                violations.append((int(i), l, float(gap - limit)))
    return ScoreBoundReport(float(beta), hypothesis_ok, delta, bound, max_gap, violations)


def builtin_score(mdp: Mdp, name: str, policy=None, J=None) -> np.ndarray:
    """Built-in scoring functions: ``j_mu``, ``j_star``, ``bellman_residual``."""
    if name == "j_mu":
        if policy is None:
            raise ValidationError("j_mu scoring needs a policy")
        return evaluate_policy(mdp, policy)
    if name == "j_star":
        return solve_exact_vi(mdp, 1e-12).J
    if name == "bellman_residual":
        J = np.zeros(mdp.n) if J is None else np.asarray(J, dtype=float)
        return bellman_optimal(mdp, J) - J
    raise ValidationError(f"unknown scoring function {name!r}")
