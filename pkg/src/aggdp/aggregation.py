"""Aggregation schemes and the aggregate DP problem.

A scheme is the pair of matrices ``D`` (q x n, disaggregation) and ``Phi``
(n x q, aggregation) together with the disaggregation sets ``I_1..I_q``.
The aggregate Bellman operator is

    (H r)(l) = sum_i d_li min_u sum_j p_ij(u) (g(i,u,j) + alpha sum_m phi_jm r_m)

and its fixed point ``r*`` gives the aggregate-state costs. For an SSP the
termination state acts as an extra aggregate state with cost 0, which the
substochastic ``P`` of :class:`~aggdp.mdp.Mdp` already encodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, ImproperPolicyError, ValidationError
from .mdp import (
    PROB_TOL,
    TIE_TOL,
    VI_MAX_ITER,
    Mdp,
    argmin_lowest,
    check_policy,
    count_policies,
    format_policy,
    q_factors,
    vi_threshold,
)


@dataclass(frozen=True, eq=False)
class AggregationScheme:
    D: np.ndarray
    Phi: np.ndarray
    disagg_sets: tuple

    def __post_init__(self):
        D = np.array(self.D, dtype=float)
        Phi = np.array(self.Phi, dtype=float)
        if D.ndim != 2 or Phi.ndim != 2 or D.shape != Phi.shape[::-1]:
            raise ValidationError(f"D {D.shape} and Phi {Phi.shape} have inconsistent shapes")
        q, n = D.shape
        sets = tuple(tuple(int(i) for i in s) for s in self.disagg_sets)
        if len(sets) != q:
            raise ValidationError(f"{len(sets)} disaggregation sets for q = {q}")
        seen = set()
        for l, s in enumerate(sets):
            if not s:
                raise ValidationError(f"disaggregation set {l + 1} is empty")
            for i in s:
                if not 0 <= i < n:
                    raise ValidationError(f"state {i + 1} in set {l + 1} is out of range")
                if i in seen:
                    raise ValidationError(f"state {i + 1} belongs to more than one disaggregation set")
                seen.add(i)
        for name, M in (("D", D), ("Phi", Phi)):
            if np.any(M < 0):
                raise ValidationError(f"{name} has negative entries")
            sums = M.sum(axis=1)
            bad = np.nonzero(np.abs(sums - 1.0) > PROB_TOL)[0]
            if bad.size:
                raise ValidationError(f"row {bad[0] + 1} of {name} sums to {sums[bad[0]]!r}, not 1")
        for l, s in enumerate(sets):
            outside = np.ones(n, dtype=bool)
            outside[list(s)] = False
            if np.any(D[l, outside] != 0):
                raise ValidationError(f"row {l + 1} of D puts mass outside its disaggregation set")
            for j in s:
                if Phi[j, l] != 1.0:
                    raise ValidationError(f"Phi[{j + 1}, {l + 1}] must be 1 for a member of I_{l + 1}")
        if not np.allclose(D @ Phi, np.eye(q), rtol=0, atol=PROB_TOL):
            raise ValidationError("D Phi is not the identity")
        D.setflags(write=False)
        Phi.setflags(write=False)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "disagg_sets", sets)

    @property
    def q(self) -> int:
        return self.D.shape[0]

    @property
    def n(self) -> int:
        return self.D.shape[1]

    def is_hard(self) -> bool:
        """True when the disaggregation sets partition the states (Phi is 0/1)."""
        return sum(len(s) for s in self.disagg_sets) == self.n

    def is_zero_one(self) -> bool:
        return bool(np.all((self.Phi == 0) | (self.Phi == 1)))

    def cell_of(self) -> np.ndarray:
        """For 0/1 schemes, the aggregate state each original state maps to."""
        if not self.is_zero_one():
            raise ValidationError("cell_of requires 0/1 aggregation probabilities")
        return np.argmax(self.Phi, axis=1)


def _uniform(n_items: int) -> np.ndarray:
    return np.full(n_items, 1.0 / n_items)


def build_hard_aggregation(partition, n: int | None = None, weights=None) -> AggregationScheme:
    """Hard aggregation over a partition of ``0..n-1``.

    ``weights`` optionally gives one distribution per cell (aligned with the
    cell's listed states); the default is uniform.
    """
    cells = [list(s) for s in partition]
    members = [i for s in cells for i in s]
    if n is None:
        n = max(members) + 1 if members else 0
    if sorted(members) != list(range(n)):
        raise ValidationError("cells must partition the states exactly once each, with no empty cells")
    if any(not s for s in cells):
        raise ValidationError("empty cell in partition")
    q = len(cells)
    D = np.zeros((q, n))
    Phi = np.zeros((n, q))
    for l, s in enumerate(cells):
        w = _uniform(len(s)) if weights is None or weights[l] is None else np.asarray(weights[l], dtype=float)
        if w.shape != (len(s),) or np.any(w < 0) or abs(w.sum() - 1.0) > PROB_TOL:
            raise ValidationError(f"disaggregation weights for cell {l + 1} are not a distribution over its states")
        D[l, s] = w
        Phi[s, l] = 1.0
    return AggregationScheme(D, Phi, cells)


def identity_scheme(n: int) -> AggregationScheme:
    return build_hard_aggregation([[i] for i in range(n)], n)


def interpolation_rows(reps, n: int) -> np.ndarray:
    """Default aggregation rows: linear interpolation between the two nearest
    representatives on the ordered state line, nearest representative beyond
    the ends."""
    reps = list(reps)
    order = np.argsort(reps)
    sorted_reps = np.asarray(reps)[order]
    Phi = np.zeros((n, len(reps)))
    for j in range(n):
        k = np.searchsorted(sorted_reps, j)
        if k < len(sorted_reps) and sorted_reps[k] == j:
            Phi[j, order[k]] = 1.0
        elif k == 0:
            Phi[j, order[0]] = 1.0
        elif k == len(sorted_reps):
            Phi[j, order[-1]] = 1.0
        else:
            lo, hi = sorted_reps[k - 1], sorted_reps[k]
            w = (j - lo) / (hi - lo)
            Phi[j, order[k - 1]] = 1.0 - w
            Phi[j, order[k]] = w
    return Phi


def build_representative_states(reps, n: int, interp=None) -> AggregationScheme:
    """Representative-state scheme: ``I_l = {i_l}`` and ``d_{l, i_l} = 1``."""
    reps = [int(i) for i in reps]
    if len(set(reps)) != len(reps):
        raise ValidationError("representative states must be distinct")
    q = len(reps)
    Phi = interpolation_rows(reps, n) if interp is None else np.array(interp, dtype=float)
    if Phi.shape != (n, q):
        raise ValidationError(f"interpolation matrix must have shape ({n}, {q})")
    D = np.zeros((q, n))
    D[np.arange(q), reps] = 1.0
    return AggregationScheme(D, Phi, [[i] for i in reps])


def scheme_from_json_dict(d: dict, n: int) -> AggregationScheme:
    """Scheme JSON uses 1-based states; D and Phi default to uniform hard aggregation."""
    try:
        sets = [[int(i) - 1 for i in s] for s in d["disagg_sets"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed scheme JSON: {exc}") from None
    if "q" in d and int(d["q"]) != len(sets):
        raise ValidationError(f"'q' = {d['q']} but {len(sets)} disaggregation sets listed")
    if "D" not in d and "Phi" not in d:
        return build_hard_aggregation(sets, n)
    q = len(sets)
    if "D" in d:
        D = np.array(d["D"], dtype=float)
    else:
        D = np.zeros((q, n))
        for l, s in enumerate(sets):
            D[l, s] = 1.0 / len(s)
    if "Phi" in d:
        Phi = np.array(d["Phi"], dtype=float)
    else:
        Phi = np.zeros((n, q))
        for l, s in enumerate(sets):
            Phi[s, l] = 1.0
        uncovered = Phi.sum(axis=1) == 0
        if np.any(uncovered):
            raise ValidationError("Phi must be given when the sets do not cover every state")
    return AggregationScheme(D, Phi, sets)


def scheme_to_json_dict(scheme: AggregationScheme) -> dict:
    return {
        "q": scheme.q,
        "disagg_sets": [[i + 1 for i in s] for s in scheme.disagg_sets],
        "D": scheme.D.tolist(),
        "Phi": scheme.Phi.tolist(),
    }


def _check_r(scheme: AggregationScheme, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.shape != (scheme.q,):
        raise ValidationError(f"aggregate cost vector has shape {r.shape}, expected ({scheme.q},)")
    return r


def _check_pair(mdp: Mdp, scheme: AggregationScheme):
    if scheme.n != mdp.n:
        raise ValidationError(f"scheme covers {scheme.n} states but the MDP has {mdp.n}")


def lift_costs(scheme: AggregationScheme, r) -> np.ndarray:
    """``J~_1 = Phi r``."""
    return scheme.Phi @ _check_r(scheme, r)


def aggregate_operator_H(mdp: Mdp, scheme: AggregationScheme, r, mu=None) -> np.ndarray:
    """``H r = D T (Phi r)``, or ``D T_mu (Phi r)`` when a policy is given."""
    _check_pair(mdp, scheme)
    J1 = lift_costs(scheme, r)
    Q = q_factors(mdp, J1)
    if mu is None:
        J0 = Q.min(axis=1)
    else:
        mu = check_policy(mdp, mu)
        J0 = Q[np.arange(mdp.n), mu]
    return scheme.D @ J0


@dataclass(frozen=True)
class AggregateSolution:
    r: np.ndarray
    iterations: int
    residual: float


def solve_aggregate_vi(
    mdp: Mdp, scheme: AggregationScheme, tol: float = 1e-10, r0=None, max_iter: int = VI_MAX_ITER
) -> AggregateSolution:
    """Fixed-point iteration ``r <- H r`` with the discount-aware residual test."""
    _check_pair(mdp, scheme)
    if tol <= 0:
        raise ValidationError("tol must be positive")
    r = np.zeros(scheme.q) if r0 is None else _check_r(scheme, r0).copy()
    threshold = vi_threshold(tol, mdp.alpha)
    residual = np.inf
    for k in range(max_iter + 1):
        Hr = aggregate_operator_H(mdp, scheme, r)
        residual = float(np.max(np.abs(Hr - r)))
        if not np.isfinite(residual):
            break
        if residual <= threshold:
            return AggregateSolution(Hr, k, residual)
        r = Hr
    raise ConvergenceError(
        f"aggregate value iteration did not converge within {max_iter} iterations "
        f"(last residual {residual:.3g})",
        residual=residual,
        iterations=max_iter,
    )


def aggregate_policy_matrices(mdp: Mdp, scheme: AggregationScheme, mu) -> tuple[np.ndarray, np.ndarray]:
    """``(D P_mu Phi, D g_mu)``: the aggregate chain of a fixed policy."""
    P_mu, g_mu = mdp.policy_matrices(mu)
    return scheme.D @ P_mu @ scheme.Phi, scheme.D @ g_mu


def evaluate_aggregate_policy(mdp: Mdp, scheme: AggregationScheme, mu) -> np.ndarray:
    """Solve ``r = D g_mu + alpha D P_mu Phi r`` exactly."""
    _check_pair(mdp, scheme)
    mu = check_policy(mdp, mu)
    P_hat, g_hat = aggregate_policy_matrices(mdp, scheme, mu)
    A = mdp.alpha * P_hat
    if mdp.ssp:
        rho = max(abs(np.linalg.eigvals(A)))
        if rho >= 1.0 - 1e-12:
            raise ImproperPolicyError(
                f"aggregate chain of policy {format_policy(mu)} never terminates", policy=mu
            )
    return np.linalg.solve(np.eye(scheme.q) - A, g_hat)


def extract_policy(mdp: Mdp, scheme: AggregationScheme, r) -> np.ndarray:
    """One-step lookahead against ``Phi r``; lowest control index wins ties."""
    _check_pair(mdp, scheme)
    return argmin_lowest(q_factors(mdp, lift_costs(scheme, r)))


@dataclass(frozen=True)
class AggregatePIResult:
    policy: np.ndarray
    r: np.ndarray
    trace: list
    policies: list

    @property
    def iterations(self) -> int:
        return len(self.trace)


def aggregation_policy_iteration(
    mdp: Mdp, scheme: AggregationScheme, mu0=None, tol: float = 1e-12, max_iter: int | None = None
) -> AggregatePIResult:
    """Exact-evaluation PI on the aggregate problem.

    Evaluation solves ``r = D T_mu Phi r``; improvement is the one-step lookahead
    against ``Phi r``. Stops when the policy repeats or consecutive ``r`` agree
    within ``tol``.
    """
    _check_pair(mdp, scheme)
    mu = np.zeros(mdp.n, dtype=int) if mu0 is None else check_policy(mdp, mu0).copy()
    if max_iter is None:
        max_iter = min(count_policies(mdp), 10**6) + 1
    trace, policies = [], []
    idx = np.arange(mdp.n)
    for _ in range(max_iter):
        r = evaluate_aggregate_policy(mdp, scheme, mu)
        trace.append(r)
        policies.append(mu)
        if len(trace) > 1 and np.max(np.abs(trace[-2] - r)) <= tol * max(1.0, np.max(np.abs(r))):
            return AggregatePIResult(mu, r, trace, policies)
        Q = q_factors(mdp, lift_costs(scheme, r))
        new = argmin_lowest(Q)
        keep = Q[idx, mu] <= Q[idx, new] + TIE_TOL * np.maximum(1.0, np.abs(Q[idx, new]))
        new = np.where(keep, mu, new)
        if np.array_equal(new, mu):
            return AggregatePIResult(mu, r, trace, policies)
        mu = new
    raise ConvergenceError("aggregation policy iteration exceeded its iteration cap", iterations=max_iter)


@dataclass(frozen=True)
class BoundReport:
    epsilon: float
    bound: float
    max_gap: float
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def max_variation(values, cells) -> float:
    """``max_l max_{i,j in cell_l} |v(i) - v(j)|``."""
    values = np.asarray(values, dtype=float)
    return max((float(np.ptp(values[list(c)])) for c in cells if len(c)), default=0.0)


def zero_one_cells(scheme: AggregationScheme) -> list:
    """Sets ``{j : phi_jl = 1}``; these partition the states for 0/1 schemes."""
    if not scheme.is_zero_one():
        raise ValidationError("error bound needs 0/1 aggregation probabilities")
    cell = scheme.cell_of()
    return [list(np.nonzero(cell == l)[0]) for l in range(scheme.q)]


def check_error_bound(
    mdp: Mdp, scheme: AggregationScheme, r_star, J_star, tol: float = 1e-9, k: int = 1
) -> BoundReport:
    """Check ``|J*(i) - r*_l| <= eps / (1 - alpha^k) + tol`` on every 0/1 cell.

    With a hard scheme the cells are the disaggregation sets; for general 0/1
    aggregation probabilities they are the sets ``{j : phi_jl = 1}``.
    """
    if mdp.alpha >= 1.0:
        raise ValidationError("the error bound applies to discounted problems")
    r_star = _check_r(scheme, r_star)
    J_star = np.asarray(J_star, dtype=float)
    cells = zero_one_cells(scheme)
    eps = max_variation(J_star, cells)
    bound = eps / (1.0 - mdp.alpha**k)
    violations = []
    max_gap = 0.0
    for l, c in enumerate(cells):
        for i in c:
            gap = abs(J_star[i] - r_star[l])
            max_gap = max(max_gap, gap)
            if gap > bound + tol:
                violations.append((int(i), l, float(gap - bound)))
    return BoundReport(eps, bound, max_gap, violations)


def random_partition(n: int, q: int, rng: np.random.Generator) -> list:
    """Random partition of ``0..n-1`` into ``q`` nonempty cells."""
    if not 1 <= q <= n:
        raise ValidationError("need 1 <= q <= n")
    perm = rng.permutation(n)
    labels = np.concatenate([np.arange(q), rng.integers(0, q, size=n - q)])
    cells = [sorted(int(i) for i in perm[labels == l]) for l in range(q)]
    return cells
