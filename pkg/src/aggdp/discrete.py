"""Discrete optimization through stage-wise feature-based aggregation.

A problem ``min G(u)`` over tuples ``u = (u_1..u_N)`` is viewed as an
``N``-stage DP whose stage-``m`` states are the feasible ``m``-solutions.
Heuristic completions score partial solutions; states with similar score
vectors share an aggregate state, and the aggregate DP is solved backward
with exact expectations over uniform disaggregation distributions.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ValidationError
from .scoring import ScorePartition, partition_by_score_vector

EXHAUSTIVE_LIMIT = 100_000


class EnumerationLimitError(ValidationError):
    """A stage has more partial solutions than the enumeration cap."""


@dataclass(frozen=True)
class DiscreteOptProblem:
    """``feasible(prefix)`` must be True exactly for prefixes that extend to a
    feasible full solution; ``G`` is evaluated on full tuples only."""

    domains: tuple
    G: Callable
    feasible: Callable | None = None
    name: str = "problem"

    def __post_init__(self):
        doms = tuple(tuple(sorted(d)) for d in self.domains)
        if not doms or any(len(d) == 0 for d in doms):
            raise ValidationError("need N >= 1 components with nonempty finite domains")
        object.__setattr__(self, "domains", doms)

    @property
    def N(self) -> int:
        return len(self.domains)

    def is_feasible(self, prefix) -> bool:
        return True if self.feasible is None else bool(self.feasible(tuple(prefix)))

    def successors(self, prefix) -> list:
        """Feasible one-component extensions in domain order."""
        prefix = tuple(prefix)
        m = len(prefix)
        if m >= self.N:
            return []
        return [prefix + (v,) for v in self.domains[m] if self.is_feasible(prefix + (v,))]

    def cost(self, u) -> float:
        u = tuple(u)
        if len(u) != self.N or not self.is_feasible(u):
            raise ValidationError(f"{u} is not a feasible full solution")
        return float(self.G(u))


@dataclass(frozen=True)
class StageGraph:
    levels: list

    def sizes(self) -> list:
        return [len(level) for level in self.levels]


def dp_reformulate(problem: DiscreteOptProblem, limit: int = EXHAUSTIVE_LIMIT) -> StageGraph:
    """Enumerate the feasible ``m``-solutions for ``m = 0..N``."""
    levels = [[()]]
    for m in range(problem.N):
        nxt = [c for p in levels[-1] for c in problem.successors(p)]
        if not nxt:
            if m == 0:
                raise ValidationError("the problem has no feasible solutions")
            raise ValidationError(f"feasibility oracle is inconsistent: no feasible {m + 1}-solutions")
        if len(nxt) > limit:
            raise EnumerationLimitError(f"stage {m + 1} has more than {limit} partial solutions")
        levels.append(nxt)
    return StageGraph(levels)


def brute_force(problem: DiscreteOptProblem) -> tuple[tuple, float]:
    """Lexicographically smallest optimal solution by full enumeration."""
    full = dp_reformulate(problem).levels[-1]
    costs = [problem.cost(u) for u in full]
    k = int(np.argmin(costs))
    return full[k], costs[k]


def exact_cost_to_go(problem: DiscreteOptProblem) -> dict:
    """Optimal completion cost of every feasible partial solution."""
    graph = dp_reformulate(problem)
    J = {u: problem.cost(u) for u in graph.levels[-1]}
    for level in reversed(graph.levels[:-1]):
        for p in level:
            J[p] = min(J[c] for c in problem.successors(p))
    return J


# ---------------------------------------------------------------- heuristics


@dataclass(frozen=True)
class Heuristic:
    """Completion procedure ``prefix -> full feasible tuple``."""

    name: str
    complete: Callable

    def __call__(self, problem: DiscreteOptProblem, prefix) -> tuple:
        return tuple(self.complete(problem, tuple(prefix)))


def fill_heuristic(prefer: str = "low", name: str | None = None) -> Heuristic:
    """Complete by taking the first feasible value in ascending (``low``) or
    descending (``high``) domain order at each remaining component."""
    if prefer not in ("low", "high"):
        raise ValidationError("prefer must be 'low' or 'high'")

    def complete(problem, prefix):
        u = prefix
        while len(u) < problem.N:
            succ = problem.successors(u)
            u = succ[0] if prefer == "low" else succ[-1]
        return u

    return Heuristic(name or f"fill-{prefer}", complete)


def greedy_heuristic(name: str = "greedy") -> Heuristic:
    """Pick each next component by the cost of its low-fill completion.

    Every choice depends only on the current prefix, so the completion from
    any prefix along the generated path reproduces the same path
    (sequential consistency).
    """
    fill = fill_heuristic("low")

    def complete(problem, prefix):
        u = prefix
        while len(u) < problem.N:
            succ = problem.successors(u)
            scores = [problem.cost(fill(problem, c)) for c in succ]
            u = succ[int(np.argmin(scores))]
        return u

    return Heuristic(name, complete)


class Scorer:
    """Runs every heuristic on a prefix, caching scores and recording each
    full solution it sees in a candidate pool."""

    def __init__(self, problem: DiscreteOptProblem, heuristics):
        heuristics = list(heuristics)
        if not heuristics:
            raise ValidationError("need at least one heuristic")
        self.problem = problem
        self.heuristics = heuristics
        self.pool: dict = {}
        self._cache: dict = {}

    @property
    def s(self) -> int:
        return len(self.heuristics)

    def score(self, prefix) -> np.ndarray:
        prefix = tuple(prefix)
        hit = self._cache.get(prefix)
        if hit is not None:
            return hit
        p = self.problem
        if len(prefix) == p.N:
            V = np.full(self.s, p.cost(prefix))
            self.pool[prefix] = V[0]
        else:
            V = np.empty(self.s)
            for k, h in enumerate(self.heuristics):
                u = h(p, prefix)
                if len(u) != p.N or u[: len(prefix)] != prefix or not p.is_feasible(u):
                    raise ValidationError(f"heuristic {h.name!r} returned an infeasible completion {u} of {prefix}")
                V[k] = p.cost(u)
                self.pool[u] = V[k]
        V.setflags(write=False)
        self._cache[prefix] = V
        return V

    def best(self, prefix) -> float:
        return float(np.min(self.score(prefix)))


def score_partial(problem: DiscreteOptProblem, heuristics, prefix) -> np.ndarray:
    return np.array(Scorer(problem, heuristics).score(prefix))


# ---------------------------------------------------------------- aggregation


def exhaustive_sampler(problem: DiscreteOptProblem, limit: int = EXHAUSTIVE_LIMIT) -> list:
    return dp_reformulate(problem, limit).levels


def random_sampler(problem: DiscreteOptProblem, paths: int, seed: int = 0) -> list:
    """Prefixes of ``paths`` uniformly random feasible completions of the root."""
    from .sim import make_rng

    rng = make_rng(seed)
    levels = [dict() for _ in range(problem.N + 1)]
    levels[0][()] = None
    for _ in range(paths):
        u = ()
        while len(u) < problem.N:
            succ = problem.successors(u)
            if not succ:
                raise ValidationError(f"feasibility oracle is inconsistent at {u}")
            u = succ[int(rng.integers(len(succ)))]
            levels[len(u)][u] = None
    return [list(level) for level in levels]


def default_sampler(
    problem: DiscreteOptProblem, seed: int = 0, paths: int = 2000, limit: int = EXHAUSTIVE_LIMIT
) -> list:
    """Exhaustive enumeration up to ``limit`` per stage, else ``paths`` seeded random completions."""
    try:
        return exhaustive_sampler(problem, limit)
    except EnumerationLimitError:
        return random_sampler(problem, paths, seed)


@dataclass
class StageCells:
    partition: ScorePartition
    members: list
    scores: np.ndarray
    centroids: np.ndarray


@dataclass
class StageAggregation:
    """Cells for stages ``1..N-1``; ``stages[m]`` is None for ``m = 0`` and ``m = N``."""

    stages: list
    fallbacks: int = 0
    r: list = field(default_factory=list)

    def cell(self, m: int, V) -> int:
        st = self.stages[m]
        l = st.partition.locate(V)
        if l is None:
            self.fallbacks += 1
            l = int(np.argmin(np.linalg.norm(st.centroids - np.asarray(V)[None, :], axis=1)))
        return l

    def cell_sizes(self) -> list:
        return [None if st is None else [len(c) for c in st.partition.cells] for st in self.stages]


def _stage_q(q, m: int, scores: np.ndarray):
    if q == "singleton":
        return [len(np.unique(scores[:, d])) for d in range(scores.shape[1])]
    if isinstance(q, (list, tuple)):
        return q[m - 1]
    return q


def build_stage_aggregation(
    problem: DiscreteOptProblem, scorer: Scorer, samples=None, q="singleton", seed: int = 0
) -> StageAggregation:
    """Per-stage product quantile cells over the sampled score vectors.

    ``q`` is cells per score dimension: an int, a per-stage list for stages
    ``1..N-1``, or ``'singleton'`` for one interval per distinct value.
    Without ``samples`` the default sampler is used (exhaustive when small,
    seeded random completions otherwise).
    """
    levels = default_sampler(problem, seed) if samples is None else samples
    if len(levels) != problem.N + 1:
        raise ValidationError("sampler must return one list of prefixes per stage 0..N")
    stages = [None] * (problem.N + 1)
    for m in range(1, problem.N):
        members = list(levels[m])
        if not members:
            raise ValidationError(f"stage {m} has no sampled partial solutions")
        scores = np.array([scorer.score(x) for x in members])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            part = partition_by_score_vector(scores, q=_stage_q(q, m, scores), method="quantile")
        centroids = np.array([scores[c].mean(axis=0) for c in part.cells])
        stages[m] = StageCells(part, members, scores, centroids)
    return StageAggregation(stages)


def _next_value(problem: DiscreteOptProblem, scorer: Scorer, agg: StageAggregation, r: list, u) -> float:
    if len(u) == problem.N:
        return scorer.score(u)[0]
    m = len(u)
    return r[m][agg.cell(m, scorer.score(u))]


def solve_stage_aggregate(problem: DiscreteOptProblem, scorer: Scorer, agg: StageAggregation) -> list:
    """Backward DP: ``r[m][l]`` is the uniform average over cell members of the
    best successor value (``G`` at the last stage). ``r[0]`` is the root value."""
    N = problem.N
    r = [None] * (N + 1)
    for m in range(N - 1, 0, -1):
        st = agg.stages[m]
        vals = np.zeros(st.partition.q)
        for l, cell in enumerate(st.partition.cells):
            total = 0.0
            for k in cell:
                total += min(_next_value(problem, scorer, agg, r, c) for c in problem.successors(st.members[k]))
            vals[l] = total / len(cell)
        r[m] = vals
    r[0] = np.array([min(_next_value(problem, scorer, agg, r, c) for c in problem.successors(()))])
    agg.r = r
    return r


@dataclass(frozen=True)
class Solution:
    u: tuple
    G: float


def construct_solution(problem: DiscreteOptProblem, scorer: Scorer, agg: StageAggregation, r: list) -> Solution:
    """One-step lookahead on ``J~``; the first minimizer in domain order wins ties."""
    u = ()
    while len(u) < problem.N:
        succ = problem.successors(u)
        vals = [_next_value(problem, scorer, agg, r, c) for c in succ]
        u = succ[int(np.argmin(vals))]
    return Solution(u, problem.cost(u))


def construct_solution_twostep(problem: DiscreteOptProblem, scorer: Scorer, agg: StageAggregation, r: list) -> Solution:
    """Minimize ``J~`` over pairs of next components and keep the first; the
    last component is chosen by one-step lookahead."""
    if problem.N < 2:
        raise ValidationError("two-step lookahead needs N >= 2")
    u = ()
    while len(u) < problem.N - 1:
        best, arg = np.inf, None
        for c in problem.successors(u):
            for cc in problem.successors(c):
                v = _next_value(problem, scorer, agg, r, cc)
                if v < best:
                    best, arg = v, c
        u = arg
    succ = problem.successors(u)
    u = succ[int(np.argmin([_next_value(problem, scorer, agg, r, c) for c in succ]))]
    return Solution(u, problem.cost(u))


def rollout_solve(problem: DiscreteOptProblem, scorer: Scorer) -> Solution:
    """Choose each component by the best heuristic completion cost of the candidate."""
    u = ()
    while len(u) < problem.N:
        succ = problem.successors(u)
        u = succ[int(np.argmin([scorer.best(c) for c in succ]))]
    return Solution(u, problem.cost(u))


def fortify(pool: dict, constructed: Solution) -> Solution:
    """Best of the constructed solution and every pooled full solution."""
    best = constructed
    for u in sorted(pool):
        if pool[u] < best.G:
            best = Solution(u, float(pool[u]))
    return best


@dataclass(frozen=True)
class AggregationRun:
    solution: Solution
    fortified: Solution
    r: list
    cells: list
    fallbacks: int


def solve_by_aggregation(
    problem: DiscreteOptProblem, heuristics, q="singleton", lookahead: int = 1, samples=None, seed: int = 0
) -> AggregationRun:
    """Build, solve, and construct in one call."""
    if lookahead not in (1, 2):
        raise ValidationError("lookahead must be 1 or 2")
    scorer = Scorer(problem, heuristics)
    agg = build_stage_aggregation(problem, scorer, samples, q, seed)
    r = solve_stage_aggregate(problem, scorer, agg)
    if lookahead == 2 and problem.N >= 2:
        sol = construct_solution_twostep(problem, scorer, agg, r)
    else:
        sol = construct_solution(problem, scorer, agg, r)
    return AggregationRun(sol, fortify(scorer.pool, sol), r, agg.cell_sizes(), agg.fallbacks)


# ---------------------------------------------------------------- instances

_TINYG = {(0, 0): 0.0, (0, 1): 1.0, (1, 0): 3.0, (1, 1): 2.0}


def tiny_g() -> DiscreteOptProblem:
    return DiscreteOptProblem(((0, 1), (0, 1)), lambda u: _TINYG[u], name="tinyg")


def table_problem(table: np.ndarray, feasible=None, name: str = "table") -> DiscreteOptProblem:
    """``G(u) = table[u]`` over the full index grid of ``table``."""
    table = np.asarray(table, dtype=float)
    return DiscreteOptProblem(tuple(range(k) for k in table.shape), lambda u: float(table[u]), feasible, name)


def random_table_problem(N: int, arity: int, rng: np.random.Generator) -> DiscreteOptProblem:
    return table_problem(rng.standard_normal((arity,) * N), name=f"random-{N}x{arity}")


def knapsack(values, weights, capacity: float) -> DiscreteOptProblem:
    """0/1 knapsack as minimization of ``-sum v_i u_i``."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if v.shape != w.shape or np.any(w < 0):
        raise ValidationError("values and nonnegative weights must have equal length")

    def feasible(u):
        return float(np.dot(w[: len(u)], u)) <= capacity

    return DiscreteOptProblem(tuple((0, 1) for _ in v), lambda u: -float(np.dot(v, u)), feasible, "knapsack")


def random_knapsack(N: int, rng: np.random.Generator) -> DiscreteOptProblem:
    w = rng.uniform(1.0, 10.0, N)
    return knapsack(rng.uniform(1.0, 10.0, N), w, 0.4 * w.sum())


def tsp(dist) -> DiscreteOptProblem:
    """Symmetric TSP from city 0; the components are the remaining visit order."""
    d = np.asarray(dist, dtype=float)
    n = d.shape[0]
    if d.shape != (n, n) or not np.allclose(d, d.T) or n < 2:
        raise ValidationError("distance matrix must be square, symmetric, and at least 2x2")

    def feasible(u):
        return len(set(u)) == len(u)

    def G(u):
        tour = (0,) + tuple(u) + (0,)
        return float(sum(d[a, b] for a, b in itertools.pairwise(tour)))

    return DiscreteOptProblem(tuple(tuple(range(1, n)) for _ in range(n - 1)), G, feasible, "tsp")


def random_tsp(n: int, rng: np.random.Generator) -> DiscreteOptProblem:
    pts = rng.random((n, 2))
    return tsp(np.linalg.norm(pts[:, None] - pts[None, :], axis=2))


def from_json_dict(d: dict) -> DiscreteOptProblem:
    """``{"kind": "knapsack" | "tsp" | "table" | "tinyg", ...}``."""
    kind = d.get("kind")
    try:
        if kind == "knapsack":
            return knapsack(d["values"], d["weights"], float(d["capacity"]))
        if kind == "tsp":
            return tsp(d["dist"])
        if kind == "table":
            return table_problem(np.array(d["table"], dtype=float))
        if kind == "tinyg":
            return tiny_g()
    except KeyError as exc:
        raise ValidationError(f"discrete problem JSON is missing {exc}") from None
    raise ValidationError(f"unknown discrete problem kind {kind!r}")
